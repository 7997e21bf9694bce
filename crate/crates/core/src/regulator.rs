//! Layer three: the regulator-hosted block. It sees only firm aggregates and
//! the public tape, correlates firms for split-role manipulation, tracks
//! market quality, publishes compulsory policy, and keeps the audit-flag
//! queue for human investigators.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::book::{FirmId, Qty, TapeRecord};
use crate::firm::{cancel_bursts, exec_bursts, lagged_cooccurrence, FirmAggregate, StepTotals};
use crate::policy::PolicyDoc;
use crate::selfreg::DecisionSource;
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub window_start: u64,
    pub window_end: u64,
    /// Population std of per-step log mid returns.
    pub volatility: f64,
    /// Mean |mid - fundamental| in ticks over steps with a mid.
    pub efficiency_dev: f64,
    /// Mean steps for the mid/fundamental gap to halve after a shock.
    pub discovery_halflife: Option<f64>,
    /// Mean signed distance of trade price from the pre-trade mid.
    pub effective_spread: f64,
    pub steps_with_mid: u64,
    /// Trades with a pre-trade mid, i.e. the effective-spread sample.
    pub trades: u64,
}

#[derive(Debug, Clone)]
struct OpenShock {
    step: u64,
    half_gap: f64,
}

/// Streaming market-quality metrics.
#[derive(Debug, Clone)]
pub struct QualityAccumulator {
    window_start: u64,
    window_end: u64,
    last_mid: Option<f64>,
    ret_n: u64,
    ret_mean: f64,
    ret_m2: f64,
    dev_sum: f64,
    dev_n: u64,
    open_shock: Option<OpenShock>,
    halflives: Vec<f64>,
    spread_sum: f64,
    trades: u64,
}

impl QualityAccumulator {
    pub fn new(window_start: u64) -> Self {
        Self {
            window_start,
            window_end: window_start,
            last_mid: None,
            ret_n: 0,
            ret_mean: 0.0,
            ret_m2: 0.0,
            dev_sum: 0.0,
            dev_n: 0,
            open_shock: None,
            halflives: Vec::new(),
            spread_sum: 0.0,
            trades: 0,
        }
    }

    /// Record the end-of-step state. `shock` marks a scheduled fundamental
    /// shock applied at the start of this step.
    pub fn push_step(&mut self, step: u64, mid: Option<f64>, fundamental: f64, shock: bool) {
        self.window_end = step;
        if shock {
            // a new shock supersedes an unresolved one
            self.open_shock = self.last_mid.and_then(|m| {
                let gap = (m - fundamental).abs();
                (gap > 0.0).then_some(OpenShock { step, half_gap: gap / 2.0 })
            });
        }
        let Some(mid) = mid else { return };
        if let Some(prev) = self.last_mid {
            let r = (mid / prev).ln();
            self.ret_n += 1;
            let d = r - self.ret_mean;
            self.ret_mean += d / self.ret_n as f64;
            self.ret_m2 += d * (r - self.ret_mean);
        }
        self.last_mid = Some(mid);
        let dev = (mid - fundamental).abs();
        self.dev_sum += dev;
        self.dev_n += 1;
        if let Some(open) = &self.open_shock {
            if dev <= open.half_gap {
                self.halflives.push((step - open.step + 1) as f64);
                self.open_shock = None;
            }
        }
    }

    pub fn push_trade(&mut self, t: &TapeRecord) {
        if let Some(m2) = t.mid_before_x2 {
            let mid = m2 as f64 / 2.0;
            self.spread_sum += (t.price as f64 - mid) * t.aggressor_side.sign() as f64;
            self.trades += 1;
        }
    }

    pub fn report(&self) -> MetricsReport {
        let volatility = if self.ret_n == 0 { 0.0 } else { (self.ret_m2 / self.ret_n as f64).max(0.0).sqrt() };
        MetricsReport {
            window_start: self.window_start,
            window_end: self.window_end,
            volatility,
            efficiency_dev: if self.dev_n == 0 { 0.0 } else { self.dev_sum / self.dev_n as f64 },
            discovery_halflife: if self.halflives.is_empty() {
                None
            } else {
                Some(self.halflives.iter().sum::<f64>() / self.halflives.len() as f64)
            },
            effective_spread: if self.trades == 0 { 0.0 } else { (self.spread_sum / self.trades as f64).max(0.0) },
            steps_with_mid: self.dev_n,
            trades: self.trades,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegulatorError {
    #[error("series lengths differ: {mids} mids vs {fundamentals} fundamentals")]
    LengthMismatch { mids: usize, fundamentals: usize },
    #[error("aggregate for firm {firm} window {window} already ingested")]
    DuplicateWindow { firm: FirmId, window: u64 },
    #[error("unknown flag {0}")]
    UnknownFlag(u64),
    #[error("flag {id}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition { id: u64, from: FlagStatus, to: FlagStatus },
    #[error("policy version {offered} is not newer than {current}")]
    StaleVersion { offered: u64, current: u64 },
}

/// Batch metrics over aligned series. `mids[i]` and `fundamentals[i]` are
/// the end-of-step values for step `first_step + i`.
pub fn market_quality(
    first_step: u64,
    mids: &[Option<f64>],
    fundamentals: &[f64],
    trades: &[TapeRecord],
    shock_steps: &[u64],
) -> Result<MetricsReport, RegulatorError> {
    if mids.len() != fundamentals.len() {
        return Err(RegulatorError::LengthMismatch { mids: mids.len(), fundamentals: fundamentals.len() });
    }
    let shocks: BTreeSet<u64> = shock_steps.iter().copied().collect();
    let mut acc = QualityAccumulator::new(first_step);
    for (i, (m, f)) in mids.iter().zip(fundamentals).enumerate() {
        let step = first_step + i as u64;
        acc.push_step(step, *m, *f, shocks.contains(&step));
    }
    for t in trades {
        acc.push_trade(t);
    }
    Ok(acc.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlagKind {
    CrossFirmCollusion,
    MarketQualityDrift,
    LedgerIntegrity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlagStatus {
    Open,
    UnderReview,
    Resolved,
    Dismissed,
}

impl FlagStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, FlagStatus::Resolved | FlagStatus::Dismissed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReviewVerdict {
    StartReview,
    Resolve,
    Dismiss,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlagEvidence {
    pub reason: String,
    pub signal: Option<f64>,
    pub firms: Vec<FirmId>,
    pub pseudonyms: Vec<String>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFlag {
    pub id: u64,
    pub raised_at: SimTime,
    pub kind: FlagKind,
    pub evidence: FlagEvidence,
    pub status: FlagStatus,
    pub resolution_note: Option<String>,
    pub reviewed_by: Option<DecisionSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorConfig {
    /// Max lag between a cancel burst and an execution burst.
    pub tau: u64,
    pub collusion_threshold: f64,
    /// Trailing steps examined by cross-firm detection.
    pub horizon_steps: u64,
    /// Consecutive missing windows tolerated before a flag.
    pub missing_grace: u32,
    pub volatility_bound: Option<f64>,
    pub efficiency_bound: Option<f64>,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            tau: 2,
            collusion_threshold: 0.5,
            horizon_steps: 100,
            missing_grace: 2,
            volatility_bound: None,
            efficiency_bound: None,
        }
    }
}

/// Directed cross-firm score for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub leader: FirmId,
    pub follower: FirmId,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Regulator {
    pub config: RegulatorConfig,
    expected_firms: BTreeSet<FirmId>,
    store: BTreeMap<(FirmId, u64), FirmAggregate>,
    series: BTreeMap<FirmId, BTreeMap<u64, StepTotals>>,
    burst_threshold: Qty,
    missing_streak: BTreeMap<FirmId, u32>,
    flags: Vec<AuditFlag>,
    published: BTreeMap<Option<FirmId>, u64>,
}

impl Regulator {
    pub fn new(config: RegulatorConfig, firms: impl IntoIterator<Item = FirmId>) -> Self {
        Self {
            config,
            expected_firms: firms.into_iter().collect(),
            store: BTreeMap::new(),
            series: BTreeMap::new(),
            burst_threshold: 1,
            missing_streak: BTreeMap::new(),
            flags: Vec::new(),
            published: BTreeMap::new(),
        }
    }

    fn raise(&mut self, at: SimTime, kind: FlagKind, evidence: FlagEvidence) -> AuditFlag {
        let flag = AuditFlag {
            id: self.flags.len() as u64 + 1,
            raised_at: at,
            kind,
            evidence,
            status: FlagStatus::Open,
            resolution_note: None,
            reviewed_by: None,
        };
        self.flags.push(flag.clone());
        flag
    }

    /// Store one window's aggregates. Returns flags raised for firms whose
    /// telemetry has been missing longer than the grace period.
    pub fn ingest(&mut self, aggregates: Vec<FirmAggregate>, window_end: SimTime) -> Result<Vec<AuditFlag>, RegulatorError> {
        let mut batch = BTreeSet::new();
        for a in &aggregates {
            let key = (a.firm_id, a.window_end.step);
            if self.store.contains_key(&key) || !batch.insert(key) {
                return Err(RegulatorError::DuplicateWindow { firm: a.firm_id, window: a.window_end.step });
            }
        }
        let present: BTreeSet<FirmId> = aggregates.iter().map(|a| a.firm_id).collect();
        for a in aggregates {
            self.burst_threshold = a.large_qty_threshold.max(1);
            let s = self.series.entry(a.firm_id).or_default();
            for t in &a.steps {
                // overlapping windows repeat steps; the later copy is identical
                s.insert(t.step, *t);
            }
            self.store.insert((a.firm_id, a.window_end.step), a);
        }
        let mut raised = Vec::new();
        let expected: Vec<FirmId> = self.expected_firms.iter().copied().collect();
        for firm in expected {
            if present.contains(&firm) {
                self.missing_streak.insert(firm, 0);
                continue;
            }
            let streak = self.missing_streak.entry(firm).or_insert(0);
            *streak += 1;
            if *streak == self.config.missing_grace + 1 {
                let evidence = FlagEvidence {
                    reason: format!("missing telemetry from firm {firm} for {} windows", *streak),
                    firms: vec![firm],
                    ..Default::default()
                };
                raised.push(self.raise(window_end, FlagKind::MarketQualityDrift, evidence));
            }
        }
        Ok(raised)
    }

    /// Directed firm-pair scores over the trailing horizon ending at `now`.
    pub fn pair_scores(&self, now: u64) -> Vec<PairScore> {
        let from = now.saturating_sub(self.config.horizon_steps);
        let window = |firm: &FirmId| -> Vec<StepTotals> {
            self.series.get(firm).map(|s| s.range(from + 1..=now).map(|(_, t)| *t).collect()).unwrap_or_default()
        };
        let firms: Vec<FirmId> = self.series.keys().copied().collect();
        let mut out = Vec::new();
        for &a in &firms {
            let a_cancel = cancel_bursts(&window(&a), self.burst_threshold);
            for &b in &firms {
                if a == b {
                    continue;
                }
                let b_exec = exec_bursts(&window(&b), self.burst_threshold);
                out.push(PairScore { leader: a, follower: b, score: lagged_cooccurrence(&a_cancel, &b_exec, self.config.tau) });
            }
        }
        out
    }

    /// Raise CrossFirmCollusion flags for pairs at or above the threshold.
    /// A pair with a flag still open or under review is not flagged again.
    pub fn detect_cross_firm(&mut self, now: SimTime) -> Vec<AuditFlag> {
        if self.series.len() < 2 {
            return Vec::new();
        }
        let mut raised = Vec::new();
        for ps in self.pair_scores(now.step) {
            if ps.score < self.config.collusion_threshold {
                continue;
            }
            let firms = vec![ps.leader, ps.follower];
            let active = self.flags.iter().any(|f| {
                f.kind == FlagKind::CrossFirmCollusion && !f.status.is_terminal() && f.evidence.firms == firms
            });
            if active {
                continue;
            }
            let pseudonyms = self.implicated_pseudonyms(ps.leader, ps.follower, now.step);
            let evidence = FlagEvidence {
                reason: format!(
                    "large cancels at firm {} co-occur with executions at firm {} (lag <= {})",
                    ps.leader, ps.follower, self.config.tau
                ),
                signal: Some(ps.score),
                firms,
                pseudonyms,
                metrics: None,
            };
            raised.push(self.raise(now, FlagKind::CrossFirmCollusion, evidence));
        }
        raised
    }

    fn implicated_pseudonyms(&self, leader: FirmId, follower: FirmId, now: u64) -> Vec<String> {
        let latest = |firm: FirmId| self.store.range((firm, 0)..=(firm, now)).next_back().map(|(_, a)| a);
        let mut out = Vec::new();
        if let Some(a) = latest(leader) {
            out.extend(a.clusters.iter().filter(|c| c.large_cancelled_qty > 0).map(|c| c.pseudonym.clone()));
        }
        if let Some(b) = latest(follower) {
            if let Some(top) = b.clusters.iter().max_by_key(|c| (c.executed_qty, std::cmp::Reverse(c.pseudonym.clone()))) {
                out.push(top.pseudonym.clone());
            }
        }
        out
    }

    /// Raise a drift flag when a window's metrics exceed configured bounds.
    pub fn check_quality(&mut self, now: SimTime, report: &MetricsReport) -> Option<AuditFlag> {
        let vol = self.config.volatility_bound.filter(|b| report.volatility > *b);
        let eff = self.config.efficiency_bound.filter(|b| report.efficiency_dev > *b);
        if vol.is_none() && eff.is_none() {
            return None;
        }
        let active = self
            .flags
            .iter()
            .any(|f| f.kind == FlagKind::MarketQualityDrift && f.evidence.metrics.is_some() && !f.status.is_terminal());
        if active {
            return None;
        }
        let evidence = FlagEvidence {
            reason: "market quality outside configured bounds".into(),
            metrics: Some(report.clone()),
            ..Default::default()
        };
        Some(self.raise(now, FlagKind::MarketQualityDrift, evidence))
    }

    pub fn raise_integrity_flag(&mut self, now: SimTime, reason: String) -> AuditFlag {
        self.raise(now, FlagKind::LedgerIntegrity, FlagEvidence { reason, ..Default::default() })
    }

    /// Check a compulsory policy before delivery; records the published version.
    pub fn publish_policy(&mut self, doc: &PolicyDoc) -> Result<u64, RegulatorError> {
        let current = self.published.get(&doc.firm_id).copied().unwrap_or(0);
        let global = self.published.get(&None).copied().unwrap_or(0);
        let floor = current.max(if doc.firm_id.is_some() { global } else { 0 });
        if doc.version <= floor {
            return Err(RegulatorError::StaleVersion { offered: doc.version, current: floor });
        }
        self.published.insert(doc.firm_id, doc.version);
        Ok(doc.version)
    }

    pub fn review_flag(
        &mut self,
        flag_id: u64,
        verdict: ReviewVerdict,
        note: &str,
        source: DecisionSource,
    ) -> Result<AuditFlag, RegulatorError> {
        let flag = self.flags.iter_mut().find(|f| f.id == flag_id).ok_or(RegulatorError::UnknownFlag(flag_id))?;
        let to = match verdict {
            ReviewVerdict::StartReview => FlagStatus::UnderReview,
            ReviewVerdict::Resolve => FlagStatus::Resolved,
            ReviewVerdict::Dismiss => FlagStatus::Dismissed,
        };
        let legal = matches!(
            (flag.status, to),
            (FlagStatus::Open, FlagStatus::UnderReview)
                | (FlagStatus::UnderReview, FlagStatus::Resolved | FlagStatus::Dismissed)
        );
        if !legal {
            return Err(RegulatorError::IllegalTransition { id: flag_id, from: flag.status, to });
        }
        flag.status = to;
        flag.reviewed_by = Some(source);
        if !note.is_empty() {
            flag.resolution_note = Some(note.to_string());
        }
        Ok(flag.clone())
    }

    pub fn flags(&self) -> &[AuditFlag] {
        &self.flags
    }

    pub fn stored_aggregates(&self) -> impl Iterator<Item = &FirmAggregate> {
        self.store.values()
    }
}
