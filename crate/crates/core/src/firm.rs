//! Layer two: firm-level governance. Aggregates the firm's telemetry behind
//! pseudonyms, enforces the policy in force (circuit breakers, throttles),
//! hot-swaps policy versions at step boundaries, and correlates agents inside
//! the firm to catch split-role spoofing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::book::{AgentId, FirmId, OrderKind, Qty};
use crate::policy::{BreakerMetric, PolicyAutonomy, PolicyDoc, PolicyError};
use crate::selfreg::{ActionKind, ControlAction, ControlDecision, DecisionSource, Disposition, Outcome, TelemetryRecord};
use crate::sim::SimTime;

/// Per-step totals for one entity (an agent or a whole firm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepTotals {
    pub step: u64,
    pub placed_qty: Qty,
    pub cancelled_qty: Qty,
    pub executed_qty: Qty,
    pub large_cancelled_qty: Qty,
    pub orders: u32,
}

impl StepTotals {
    fn add(&mut self, other: &StepTotals) {
        self.placed_qty += other.placed_qty;
        self.cancelled_qty += other.cancelled_qty;
        self.executed_qty += other.executed_qty;
        self.large_cancelled_qty += other.large_cancelled_qty;
        self.orders += other.orders;
    }

    fn is_empty(&self) -> bool {
        self.placed_qty == 0 && self.cancelled_qty == 0 && self.executed_qty == 0 && self.orders == 0
    }
}

/// Fold one telemetry record into per-step totals.
pub fn step_contribution(r: &TelemetryRecord, large_qty: Qty) -> StepTotals {
    let mut t = StepTotals { step: r.at.step, ..Default::default() };
    if r.action == ActionKind::Submit {
        t.orders = 1;
    }
    if r.outcome != Outcome::Accepted {
        return t;
    }
    match r.action {
        ActionKind::Submit => {
            if r.order_kind == Some(OrderKind::Limit) {
                t.placed_qty = r.qty;
            }
            t.executed_qty = r.traded_qty;
        }
        ActionKind::Cancel => {
            t.cancelled_qty = r.cancelled_qty;
            if r.qty >= large_qty {
                t.large_cancelled_qty = r.cancelled_qty;
            }
        }
        ActionKind::Fill => t.executed_qty = r.traded_qty,
        ActionKind::ForcedCancel => {}
    }
    t
}

/// Sparse per-step series (steps without activity omitted), ascending.
pub fn step_series<'a>(records: impl IntoIterator<Item = &'a TelemetryRecord>, large_qty: Qty) -> Vec<StepTotals> {
    let mut by_step: BTreeMap<u64, StepTotals> = BTreeMap::new();
    for r in records {
        let c = step_contribution(r, large_qty);
        by_step.entry(c.step).or_insert(StepTotals { step: c.step, ..Default::default() }).add(&c);
    }
    by_step.into_values().filter(|t| !t.is_empty()).collect()
}

/// Stable per-run pseudonym; raw agent ids never leave the firm.
pub fn pseudonym(run_seed: u64, firm_id: FirmId, agent_id: AgentId) -> String {
    let mut h = Sha256::new();
    h.update(b"govsim/pseudonym/v1\0");
    h.update(run_seed.to_le_bytes());
    h.update(firm_id.to_le_bytes());
    h.update(agent_id.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCluster {
    pub pseudonym: String,
    pub placed_qty: Qty,
    pub cancelled_qty: Qty,
    pub executed_qty: Qty,
    pub large_cancelled_qty: Qty,
    pub max_orders_per_step: u32,
    pub score: f64,
    pub flagged: bool,
    /// Mark-to-market wealth change over the window, in ticks.
    pub pnl: f64,
}

/// What crosses the firm -> regulator boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmAggregate {
    pub firm_id: FirmId,
    pub window_start: u64,
    pub window_end: SimTime,
    pub placed_qty: Qty,
    pub cancelled_qty: Qty,
    pub executed_qty: Qty,
    pub large_cancelled_qty: Qty,
    pub max_agent_score: f64,
    pub flagged_agents: u32,
    pub large_qty_threshold: Qty,
    pub steps: Vec<StepTotals>,
    pub clusters: Vec<AgentCluster>,
    pub policy_version: u64,
}

/// Per-agent inputs the firm already holds besides raw telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentWindowInfo {
    pub score: f64,
    pub flagged: bool,
    pub pnl: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FirmError {
    #[error("record for firm {found} in aggregate of firm {expected}")]
    MixedFirms { expected: FirmId, found: FirmId },
}

#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    firm_id: FirmId,
    records: &[TelemetryRecord],
    window_start: u64,
    window_end: SimTime,
    info: &BTreeMap<AgentId, AgentWindowInfo>,
    large_qty: Qty,
    run_seed: u64,
    policy_version: u64,
) -> Result<FirmAggregate, FirmError> {
    if let Some(r) = records.iter().find(|r| r.firm_id != firm_id) {
        return Err(FirmError::MixedFirms { expected: firm_id, found: r.firm_id });
    }
    let mut per_agent: BTreeMap<AgentId, Vec<&TelemetryRecord>> = BTreeMap::new();
    for &agent in info.keys() {
        per_agent.entry(agent).or_default();
    }
    for r in records {
        per_agent.entry(r.agent_id).or_default().push(r);
    }
    let mut clusters = Vec::new();
    for (agent, recs) in &per_agent {
        let series = step_series(recs.iter().copied(), large_qty);
        let mut tot = StepTotals::default();
        let mut max_orders = 0;
        for s in &series {
            tot.add(s);
            max_orders = max_orders.max(s.orders);
        }
        let i = info.get(agent).copied().unwrap_or_default();
        clusters.push(AgentCluster {
            pseudonym: pseudonym(run_seed, firm_id, *agent),
            placed_qty: tot.placed_qty,
            cancelled_qty: tot.cancelled_qty,
            executed_qty: tot.executed_qty,
            large_cancelled_qty: tot.large_cancelled_qty,
            max_orders_per_step: max_orders,
            score: i.score,
            flagged: i.flagged,
            pnl: i.pnl,
        });
    }
    clusters.sort_by(|a, b| a.pseudonym.cmp(&b.pseudonym));
    let steps = step_series(records, large_qty);
    let sum = |f: fn(&AgentCluster) -> Qty| clusters.iter().map(f).sum::<Qty>();
    Ok(FirmAggregate {
        firm_id,
        window_start,
        window_end,
        placed_qty: sum(|c| c.placed_qty),
        cancelled_qty: sum(|c| c.cancelled_qty),
        executed_qty: sum(|c| c.executed_qty),
        large_cancelled_qty: sum(|c| c.large_cancelled_qty),
        max_agent_score: clusters.iter().map(|c| c.score).fold(0.0, f64::max),
        flagged_agents: clusters.iter().filter(|c| c.flagged).count() as u32,
        large_qty_threshold: large_qty,
        steps,
        clusters,
        policy_version,
    })
}

/// Enforcement state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentStatus {
    pub quarantined: bool,
    pub throttle: Option<u32>,
    /// Source of the last applied decision; lower-ranked sources cannot undo it.
    pub held_by: Option<DecisionSource>,
}

/// Decisions awaiting human approval, in arrival order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PendingQueue {
    items: Vec<ControlDecision>,
}

impl PendingQueue {
    pub fn push(&mut self, d: ControlDecision) {
        self.items.push(d);
    }

    pub fn contains(&self, subject: AgentId, action: ControlAction) -> bool {
        self.items.iter().any(|d| d.subject == subject && d.action == action)
    }

    pub fn take(&mut self, id: u64) -> Option<ControlDecision> {
        let pos = self.items.iter().position(|d| d.id == id)?;
        Some(self.items.remove(pos))
    }

    pub fn items(&self) -> &[ControlDecision] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Control requested by a policy check, before ids and dispositions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAction {
    pub subject: AgentId,
    pub action: ControlAction,
    pub rate: Option<u32>,
    pub reason: String,
}

/// Check the aggregate against the policy's breaker and rate limits.
///
/// `resolve` maps pseudonyms back to agent ids (only the firm can).
/// Agents already in the requested state, or with the same request pending,
/// are skipped.
pub fn evaluate_policy(
    policy: &PolicyDoc,
    agg: &FirmAggregate,
    resolve: &BTreeMap<String, AgentId>,
    status: &BTreeMap<AgentId, AgentStatus>,
    pending: &PendingQueue,
) -> Vec<PolicyAction> {
    let mut out: Vec<PolicyAction> = Vec::new();
    let mut push = |subject: AgentId, action: ControlAction, rate: Option<u32>, reason: String| {
        let st = status.get(&subject).copied().unwrap_or_default();
        let redundant = match action {
            ControlAction::Quarantine => st.quarantined,
            ControlAction::Throttle => st.quarantined || (st.throttle.is_some() && st.throttle <= rate),
            _ => false,
        };
        if redundant || pending.contains(subject, action) || out.iter().any(|a| a.subject == subject && a.action == action) {
            return;
        }
        out.push(PolicyAction { subject, action, rate, reason });
    };

    if let Some(cb) = &policy.circuit_breaker {
        match cb.metric {
            BreakerMetric::AggSpoofScore if agg.max_agent_score >= cb.bound => {
                for c in agg.clusters.iter().filter(|c| c.score >= cb.bound) {
                    if let Some(&id) = resolve.get(&c.pseudonym) {
                        let reason = format!("aggregate spoof score {:.4} >= breaker bound {}", c.score, cb.bound);
                        push(id, ControlAction::Quarantine, None, reason);
                    }
                }
            }
            BreakerMetric::FirmLossLimit => {
                let firm_pnl: f64 = agg.clusters.iter().map(|c| c.pnl).sum();
                if firm_pnl <= -cb.bound {
                    for c in agg.clusters.iter().filter(|c| c.pnl < 0.0) {
                        if let Some(&id) = resolve.get(&c.pseudonym) {
                            let reason = format!("firm window loss {firm_pnl:.2} breaches limit {}", cb.bound);
                            push(id, ControlAction::Quarantine, None, reason);
                        }
                    }
                }
            }
            BreakerMetric::OrderRate => {
                let peak = agg.steps.iter().map(|s| s.orders).max().unwrap_or(0);
                if peak as f64 > cb.bound {
                    let top = agg.clusters.iter().map(|c| c.max_orders_per_step).max().unwrap_or(0);
                    for c in agg.clusters.iter().filter(|c| c.max_orders_per_step == top && top > 0) {
                        if let Some(&id) = resolve.get(&c.pseudonym) {
                            let reason = format!("firm order rate {peak}/step breaches bound {}", cb.bound);
                            push(id, ControlAction::Throttle, Some(policy.throttle_rate), reason);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    if let Some(max_rate) = policy.max_agent_order_rate {
        for c in agg.clusters.iter().filter(|c| c.max_orders_per_step > max_rate) {
            if let Some(&id) = resolve.get(&c.pseudonym) {
                let reason = format!("order rate {}/step exceeds limit {max_rate}", c.max_orders_per_step);
                push(id, ControlAction::Throttle, Some(max_rate), reason);
            }
        }
    }
    out
}

/// Turn a policy action into a decision, pending or applied per autonomy.
pub fn decide(
    id: u64,
    at: SimTime,
    source: DecisionSource,
    action: PolicyAction,
    policy: &PolicyDoc,
) -> ControlDecision {
    let disposition = match policy.autonomy {
        PolicyAutonomy::RuleBased => Disposition::Applied,
        PolicyAutonomy::HumanInLoop => Disposition::PendingApproval,
    };
    ControlDecision {
        id,
        at,
        source,
        subject: action.subject,
        action: action.action,
        reason: action.reason,
        policy_version: policy.version,
        disposition,
        rate: action.rate,
        resolves: None,
    }
}

/// The firm's policy slot: one document in force, at most one staged for
/// the next step boundary.
#[derive(Debug, Clone)]
pub struct PolicySlot {
    in_force: PolicyDoc,
    staged: Option<PolicyDoc>,
}

impl PolicySlot {
    pub fn new(initial: PolicyDoc) -> Self {
        Self { in_force: initial, staged: None }
    }

    pub fn in_force(&self) -> &PolicyDoc {
        &self.in_force
    }

    pub fn staged(&self) -> Option<&PolicyDoc> {
        self.staged.as_ref()
    }

    fn latest_version(&self) -> u64 {
        self.staged.as_ref().map_or(self.in_force.version, |s| s.version)
    }

    /// Stage `new` for the next boundary.
    pub fn update_policy(&mut self, new: PolicyDoc) -> Result<u64, PolicyError> {
        self.check(&new)?;
        let v = new.version;
        self.staged = Some(new);
        Ok(v)
    }

    pub fn check(&self, new: &PolicyDoc) -> Result<(), PolicyError> {
        new.validate()?;
        let current = self.latest_version();
        if new.version <= current {
            return Err(PolicyError::StaleVersion { offered: new.version, current });
        }
        Ok(())
    }

    /// Step boundary: promote the staged document. Returns it when swapped.
    pub fn on_boundary(&mut self) -> Option<&PolicyDoc> {
        let next = self.staged.take()?;
        self.in_force = next;
        Some(&self.in_force)
    }
}

/// Lagged co-occurrence of cancel bursts (leader) and execution bursts
/// (follower): matched pairs / max(burst counts). Each follower burst is
/// matched at most once; `|lag| <= tau`.
pub fn lagged_cooccurrence(cancel_bursts: &[u64], exec_bursts: &[u64], tau: u64) -> f64 {
    let denom = cancel_bursts.len().max(exec_bursts.len());
    if denom == 0 {
        return 0.0;
    }
    let mut used = vec![false; exec_bursts.len()];
    let mut matched = 0usize;
    for &c in cancel_bursts {
        let hit = exec_bursts
            .iter()
            .enumerate()
            .filter(|(i, &e)| !used[*i] && e.abs_diff(c) <= tau)
            .min_by_key(|(_, &e)| (e.abs_diff(c), e))
            .map(|(i, _)| i);
        if let Some(i) = hit {
            used[i] = true;
            matched += 1;
        }
    }
    matched as f64 / denom as f64
}

pub fn cancel_bursts(series: &[StepTotals], threshold: Qty) -> Vec<u64> {
    series.iter().filter(|s| s.large_cancelled_qty >= threshold && s.large_cancelled_qty > 0).map(|s| s.step).collect()
}

pub fn exec_bursts(series: &[StepTotals], threshold: Qty) -> Vec<u64> {
    series.iter().filter(|s| s.executed_qty >= threshold && s.executed_qty > 0).map(|s| s.step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollusionSignal<K> {
    pub score: f64,
    /// (cancel-burst leader, execution-burst follower)
    pub implicated: (K, K),
}

/// Strongest directed signal over all ordered pairs of distinct entities.
pub fn correlate_agents<K: Clone + Ord>(
    series: &BTreeMap<K, Vec<StepTotals>>,
    tau: u64,
    burst_threshold: Qty,
) -> Option<CollusionSignal<K>> {
    if series.len() < 2 {
        return None;
    }
    let bursts: Vec<(&K, Vec<u64>, Vec<u64>)> = series
        .iter()
        .map(|(k, s)| (k, cancel_bursts(s, burst_threshold), exec_bursts(s, burst_threshold)))
        .collect();
    let mut best: Option<CollusionSignal<K>> = None;
    for (a, a_cancel, _) in &bursts {
        for (b, _, b_exec) in &bursts {
            if a == b {
                continue;
            }
            let score = lagged_cooccurrence(a_cancel, b_exec, tau);
            if best.as_ref().is_none_or(|x| score > x.score) {
                best = Some(CollusionSignal { score, implicated: ((*a).clone(), (*b).clone()) });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::Side;

    fn submit(agent: AgentId, firm: FirmId, step: u64, qty: Qty) -> TelemetryRecord {
        TelemetryRecord {
            at: SimTime::new(step, 0),
            agent_id: agent,
            firm_id: firm,
            action: ActionKind::Submit,
            outcome: Outcome::Accepted,
            order_id: Some(step * 100 + agent as u64),
            side: Some(Side::Buy),
            price: Some(100),
            order_kind: Some(OrderKind::Limit),
            qty,
            cancelled_qty: 0,
            placed_step: Some(step),
            trades: 0,
            traded_qty: 0,
            score: 0.0,
            tag: None,
        }
    }

    #[test]
    fn empty_aggregate_is_zero() {
        let a = aggregate(1, &[], 0, SimTime::new(50, 0), &BTreeMap::new(), 15, 42, 1).unwrap();
        assert_eq!((a.placed_qty, a.cancelled_qty, a.executed_qty, a.large_cancelled_qty), (0, 0, 0, 0));
        assert!(a.steps.is_empty());
    }

    #[test]
    fn totals_sum_members() {
        let recs = vec![submit(1, 1, 3, 10), submit(2, 1, 4, 15)];
        let a = aggregate(1, &recs, 0, SimTime::new(50, 0), &BTreeMap::new(), 100, 42, 1).unwrap();
        assert_eq!(a.placed_qty, 25);
        assert_eq!(a.clusters.len(), 2);
    }

    #[test]
    fn mixed_firms_rejected() {
        let recs = vec![submit(1, 1, 3, 10), submit(2, 2, 4, 15)];
        let err = aggregate(1, &recs, 0, SimTime::new(50, 0), &BTreeMap::new(), 100, 42, 1).unwrap_err();
        assert_eq!(err, FirmError::MixedFirms { expected: 1, found: 2 });
    }

    #[test]
    fn pseudonyms_depend_on_seed() {
        assert_eq!(pseudonym(42, 1, 7), pseudonym(42, 1, 7));
        assert_ne!(pseudonym(42, 1, 7), pseudonym(43, 1, 7));
        assert_ne!(pseudonym(42, 1, 7), pseudonym(42, 1, 8));
    }

    fn agg_with(score: f64, orders: u32) -> (FirmAggregate, BTreeMap<String, AgentId>) {
        let p = pseudonym(42, 1, 7);
        let agg = FirmAggregate {
            firm_id: 1,
            window_start: 0,
            window_end: SimTime::new(50, 0),
            placed_qty: 0,
            cancelled_qty: 0,
            executed_qty: 0,
            large_cancelled_qty: 0,
            max_agent_score: score,
            flagged_agents: 0,
            large_qty_threshold: 15,
            steps: vec![StepTotals { step: 10, orders, ..Default::default() }],
            clusters: vec![AgentCluster {
                pseudonym: p.clone(),
                placed_qty: 0,
                cancelled_qty: 0,
                executed_qty: 0,
                large_cancelled_qty: 0,
                max_orders_per_step: orders,
                score,
                flagged: false,
                pnl: 0.0,
            }],
            policy_version: 1,
        };
        (agg, [(p, 7)].into_iter().collect())
    }

    #[test]
    fn breaker_below_bound_is_silent() {
        let mut policy = PolicyDoc::new(1, 0.5, 0.8);
        policy.circuit_breaker = Some(crate::policy::CircuitBreaker { metric: BreakerMetric::AggSpoofScore, bound: 0.7 });
        let (agg, resolve) = agg_with(0.3, 1);
        assert!(evaluate_policy(&policy, &agg, &resolve, &BTreeMap::new(), &PendingQueue::default()).is_empty());
    }

    #[test]
    fn order_rate_breach_throttles() {
        let mut policy = PolicyDoc::new(1, 0.5, 0.8);
        policy.max_agent_order_rate = Some(10);
        let (agg, resolve) = agg_with(0.0, 12);
        let acts = evaluate_policy(&policy, &agg, &resolve, &BTreeMap::new(), &PendingQueue::default());
        assert_eq!(acts.len(), 1);
        assert_eq!((acts[0].subject, acts[0].action, acts[0].rate), (7, ControlAction::Throttle, Some(10)));
        let d = decide(1, SimTime::new(50, 0), DecisionSource::FirmGov, acts[0].clone(), &policy);
        assert_eq!(d.disposition, Disposition::Applied);
    }

    #[test]
    fn human_in_loop_breach_is_pending() {
        let mut policy = PolicyDoc::new(1, 0.5, 0.8);
        policy.autonomy = PolicyAutonomy::HumanInLoop;
        policy.circuit_breaker = Some(crate::policy::CircuitBreaker { metric: BreakerMetric::AggSpoofScore, bound: 0.7 });
        let (agg, resolve) = agg_with(0.9, 1);
        let acts = evaluate_policy(&policy, &agg, &resolve, &BTreeMap::new(), &PendingQueue::default());
        let d = decide(1, SimTime::new(50, 0), DecisionSource::FirmGov, acts[0].clone(), &policy);
        assert_eq!(d.action, ControlAction::Quarantine);
        assert_eq!(d.disposition, Disposition::PendingApproval);
        let mut q = PendingQueue::default();
        q.push(d);
        assert!(evaluate_policy(&policy, &agg, &resolve, &BTreeMap::new(), &q).is_empty());
    }

    #[test]
    fn policy_versions_swap_at_boundary() {
        let mut slot = PolicySlot::new(PolicyDoc::new(3, 0.5, 0.8));
        assert_eq!(slot.update_policy(PolicyDoc::new(4, 0.4, 0.8)).unwrap(), 4);
        // still v3 until the boundary
        assert_eq!(slot.in_force().version, 3);
        assert!(matches!(slot.update_policy(PolicyDoc::new(3, 0.5, 0.8)), Err(PolicyError::StaleVersion { .. })));
        assert_eq!(slot.on_boundary().unwrap().version, 4);
        assert_eq!(slot.in_force().version, 4);
        assert!(slot.on_boundary().is_none());
        assert!(matches!(slot.update_policy(PolicyDoc::new(4, 0.5, 0.8)), Err(PolicyError::StaleVersion { .. })));
    }

    #[test]
    fn cooccurrence_examples() {
        assert_eq!(lagged_cooccurrence(&[], &[], 2), 0.0);
        assert_eq!(lagged_cooccurrence(&[10, 30, 50, 70], &[11, 31, 51, 71], 2), 1.0);
        assert_eq!(lagged_cooccurrence(&[10, 30], &[11, 31, 51, 71], 2), 0.5);
        assert_eq!(lagged_cooccurrence(&[10], &[20], 2), 0.0);
    }

    #[test]
    fn correlate_finds_leader_follower() {
        let burst = |step, cancel, exec| StepTotals {
            step,
            large_cancelled_qty: cancel,
            executed_qty: exec,
            ..Default::default()
        };
        let mut series = BTreeMap::new();
        series.insert("a", (0..4).map(|i| burst(10 + 20 * i, 150, 0)).collect::<Vec<_>>());
        series.insert("b", (0..4).map(|i| burst(11 + 20 * i, 0, 20)).collect::<Vec<_>>());
        let sig = correlate_agents(&series, 2, 15).unwrap();
        assert_eq!(sig.score, 1.0);
        assert_eq!(sig.implicated, ("a", "b"));
        let mut one = BTreeMap::new();
        one.insert("a", vec![burst(1, 150, 0)]);
        assert!(correlate_agents(&one, 2, 15).is_none());
    }
}
