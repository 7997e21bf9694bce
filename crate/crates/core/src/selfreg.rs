//! Layer one: embedded per-agent monitors. Each block scores a sliding window
//! of its agent's actions for the spoofing signature, filters proposed orders
//! in the same step, and turns flagged windows into control proposals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agents::{IntentTag, OrderIntent};
use crate::book::{AgentId, FirmId, OrderId, OrderKind, Price, Qty, Side};
use crate::policy::{FilterMode, FlagResponse, PolicyAutonomy, PolicyDoc};
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Submit,
    Cancel,
    /// Passive execution of a resting order. Not an agent action.
    Fill,
    /// Cancel forced by governance (quarantine). Not an agent action.
    ForcedCancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Accepted,
    Blocked,
    /// Rejected by the venue (unknown order on cancel, invalid order).
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub at: SimTime,
    pub agent_id: AgentId,
    pub firm_id: FirmId,
    pub action: ActionKind,
    pub outcome: Outcome,
    pub order_id: Option<OrderId>,
    pub side: Option<Side>,
    pub price: Option<Price>,
    pub order_kind: Option<OrderKind>,
    /// Original order quantity.
    pub qty: Qty,
    pub cancelled_qty: Qty,
    /// Step the order was placed; set on cancels and fills.
    pub placed_step: Option<u64>,
    pub trades: u32,
    pub traded_qty: Qty,
    pub score: f64,
    pub tag: Option<IntentTag>,
}

impl TelemetryRecord {
    pub fn is_agent_action(&self) -> bool {
        matches!(self.action, ActionKind::Submit | ActionKind::Cancel)
    }

    /// Hypothetical accepted submission used for counterfactual scoring.
    pub fn proposed(at: SimTime, agent_id: AgentId, firm_id: FirmId, intent: &OrderIntent) -> Option<Self> {
        match intent {
            OrderIntent::Place { side, price, qty, kind, tag } => Some(Self {
                at,
                agent_id,
                firm_id,
                action: ActionKind::Submit,
                outcome: Outcome::Accepted,
                order_id: None,
                side: Some(*side),
                price: *price,
                order_kind: Some(*kind),
                qty: *qty,
                cancelled_qty: 0,
                placed_step: Some(at.step),
                trades: 0,
                traded_qty: 0,
                score: 0.0,
                tag: Some(*tag),
            }),
            OrderIntent::Cancel { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Orders at or above this size count as large.
    pub large_qty: Qty,
    /// A large order cancelled within this many steps counts as short-lived.
    pub short_lifetime_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpoofFeatures {
    pub cancel_ratio: f64,
    pub large_order_share: f64,
    pub opposite_exec: f64,
    pub short_lifetime: f64,
}

impl SpoofFeatures {
    pub fn from_array(f: [f64; 4]) -> Self {
        Self { cancel_ratio: f[0], large_order_share: f[1], opposite_exec: f[2], short_lifetime: f[3] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cancel_ratio, self.large_order_share, self.opposite_exec, self.short_lifetime]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelfRegError {
    #[error("window mixes agents {0} and {1}")]
    MixedAgents(AgentId, AgentId),
    #[error("invalid detector weights: {0}")]
    InvalidWeights(String),
}

fn ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        0.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

/// Spoofing features over one agent's window. Only accepted agent actions
/// and passive fills contribute; blocked proposals never reached the market.
pub fn extract_features(window: &[TelemetryRecord], params: &FeatureParams) -> Result<SpoofFeatures, SelfRegError> {
    if let Some(first) = window.first() {
        if let Some(other) = window.iter().find(|r| r.agent_id != first.agent_id) {
            return Err(SelfRegError::MixedAgents(first.agent_id, other.agent_id));
        }
    }
    let accepted = || window.iter().filter(|r| r.outcome == Outcome::Accepted);
    let is_large = |r: &TelemetryRecord| r.qty >= params.large_qty;

    let mut placed = 0u64;
    let mut large_placed = 0u64;
    let mut large_ids: BTreeSet<OrderId> = BTreeSet::new();
    let mut large_unlinked = 0u64;
    let mut large_sides: BTreeSet<Side> = BTreeSet::new();
    let mut cancelled = 0u64;
    let mut cancel_steps: BTreeMap<OrderId, u64> = BTreeMap::new();
    let mut exec_by_side: BTreeMap<Side, u64> = BTreeMap::new();

    for r in accepted() {
        match r.action {
            ActionKind::Submit => {
                if r.traded_qty > 0 {
                    if let Some(side) = r.side {
                        *exec_by_side.entry(side).or_default() += r.traded_qty;
                    }
                }
                if r.order_kind == Some(OrderKind::Limit) {
                    placed += r.qty;
                    if is_large(r) {
                        large_placed += r.qty;
                        if let Some(side) = r.side {
                            large_sides.insert(side);
                        }
                        match r.order_id {
                            Some(id) => {
                                large_ids.insert(id);
                            }
                            None => large_unlinked += 1,
                        }
                    }
                }
            }
            ActionKind::Cancel => {
                cancelled += r.cancelled_qty;
                if is_large(r) {
                    if let Some(side) = r.side {
                        large_sides.insert(side);
                    }
                }
                if let (Some(id), Some(placed_step)) = (r.order_id, r.placed_step) {
                    cancel_steps.insert(id, r.at.step.saturating_sub(placed_step));
                }
            }
            ActionKind::Fill => {
                if let Some(side) = r.side {
                    *exec_by_side.entry(side).or_default() += r.traded_qty;
                }
            }
            ActionKind::ForcedCancel => {}
        }
    }

    let executed: u64 = exec_by_side.values().sum();
    let opposite: u64 = exec_by_side
        .iter()
        .filter(|(side, _)| large_sides.contains(&side.opposite()))
        .map(|(_, q)| *q)
        .sum();
    let large_count = large_ids.len() as u64 + large_unlinked;
    let short = large_ids
        .iter()
        .filter(|id| cancel_steps.get(id).is_some_and(|&life| life <= params.short_lifetime_steps))
        .count() as u64;

    Ok(SpoofFeatures {
        cancel_ratio: ratio(cancelled as f64, placed as f64),
        large_order_share: ratio(large_placed as f64, placed as f64),
        opposite_exec: ratio(opposite as f64, executed as f64),
        short_lifetime: ratio(short as f64, large_count as f64),
    })
}

/// Non-negative weights summing to one, in feature order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub cancel_ratio: f64,
    pub large_order_share: f64,
    pub opposite_exec: f64,
    pub short_lifetime: f64,
}

impl Weights {
    pub fn new(w: [f64; 4]) -> Result<Self, SelfRegError> {
        let weights =
            Self { cancel_ratio: w[0], large_order_share: w[1], opposite_exec: w[2], short_lifetime: w[3] };
        weights.validate()?;
        Ok(weights)
    }

    pub fn uniform() -> Self {
        Self { cancel_ratio: 0.25, large_order_share: 0.25, opposite_exec: 0.25, short_lifetime: 0.25 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cancel_ratio, self.large_order_share, self.opposite_exec, self.short_lifetime]
    }

    pub fn validate(&self) -> Result<(), SelfRegError> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(SelfRegError::InvalidWeights(format!("{w:?} has a negative or non-finite entry")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SelfRegError::InvalidWeights(format!("{w:?} sums to {sum}")));
        }
        Ok(())
    }
}

/// Convex combination of the features.
pub fn spoof_score(features: &SpoofFeatures, weights: &Weights) -> Result<f64, SelfRegError> {
    weights.validate()?;
    let s: f64 = features.as_array().iter().zip(weights.as_array()).map(|(f, w)| f * w).sum();
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecisionSource {
    SelfReg,
    FirmGov,
    ExternalReg,
    Human,
}

impl DecisionSource {
    /// Higher ranks override lower ones.
    pub fn rank(self) -> u8 {
        match self {
            DecisionSource::SelfReg => 0,
            DecisionSource::FirmGov | DecisionSource::ExternalReg => 1,
            DecisionSource::Human => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlAction {
    Allow,
    Modify,
    Block,
    Quarantine,
    Unquarantine,
    Throttle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disposition {
    Applied,
    PendingApproval,
    /// Not applied because a higher-ranked source holds the subject.
    Overridden,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub id: u64,
    pub at: SimTime,
    pub source: DecisionSource,
    pub subject: AgentId,
    pub action: ControlAction,
    pub reason: String,
    pub policy_version: u64,
    pub disposition: Disposition,
    /// Orders per step for Throttle.
    pub rate: Option<u32>,
    /// Pending decision this one resolves, if any.
    pub resolves: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub action: ControlAction,
    pub penalty: f64,
    pub counterfactual_score: f64,
    pub reason: String,
}

/// Same-step screen of one proposed intent. Cancels always pass.
#[allow(clippy::too_many_arguments)]
pub fn filter_action(
    proposed: &OrderIntent,
    window: &[TelemetryRecord],
    at: SimTime,
    agent: (AgentId, FirmId),
    policy: &PolicyDoc,
    mode: FilterMode,
    quarantined: bool,
    detector: &DetectorParams,
) -> Result<FilterOutcome, SelfRegError> {
    let allow = |score: f64, penalty: f64| FilterOutcome {
        action: ControlAction::Allow,
        penalty,
        counterfactual_score: score,
        reason: String::new(),
    };
    let Some(hypothetical) = TelemetryRecord::proposed(at, agent.0, agent.1, proposed) else {
        return Ok(allow(0.0, 0.0));
    };
    if quarantined {
        return Ok(FilterOutcome {
            action: ControlAction::Block,
            penalty: 0.0,
            counterfactual_score: 0.0,
            reason: "agent quarantined".into(),
        });
    }
    if mode == FilterMode::Off {
        return Ok(allow(0.0, 0.0));
    }
    let mut with_proposal: Vec<TelemetryRecord> = window.to_vec();
    with_proposal.push(hypothetical);
    let score = spoof_score(&extract_features(&with_proposal, &detector.features)?, &detector.weights)?;
    Ok(match mode {
        FilterMode::Off => unreachable!(),
        FilterMode::Rerank => {
            allow(score, policy.penalty_beta * (score - policy.flag_threshold).max(0.0))
        }
        FilterMode::Block if score >= policy.block_threshold => FilterOutcome {
            action: ControlAction::Block,
            penalty: 0.0,
            counterfactual_score: score,
            reason: format!("counterfactual score {score:.4} >= block threshold {}", policy.block_threshold),
        },
        FilterMode::Block => allow(score, 0.0),
    })
}

/// Detector configuration shared by all self-regulation blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub weights: Weights,
    pub features: FeatureParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub agent_id: AgentId,
    pub window_end: SimTime,
    pub score: f64,
    pub features: SpoofFeatures,
    pub flagged: bool,
    pub threshold: f64,
    pub policy_version: u64,
}

/// Control the policy asks for after a flagged verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposedControl {
    pub action: ControlAction,
    pub rate: Option<u32>,
    pub needs_approval: bool,
    pub reason: String,
}

pub fn evaluate_window(
    agent_id: AgentId,
    window: &[TelemetryRecord],
    window_end: SimTime,
    policy: &PolicyDoc,
    detector: &DetectorParams,
) -> Result<(DetectionVerdict, Option<ProposedControl>), SelfRegError> {
    let features = extract_features(window, &detector.features)?;
    let score = spoof_score(&features, &detector.weights)?;
    let flagged = score >= policy.flag_threshold;
    let verdict = DetectionVerdict {
        agent_id,
        window_end,
        score,
        features,
        flagged,
        threshold: policy.flag_threshold,
        policy_version: policy.version,
    };
    let proposal = if flagged {
        let reason = format!("window score {score:.4} >= flag threshold {}", policy.flag_threshold);
        let needs_approval = policy.autonomy == PolicyAutonomy::HumanInLoop;
        match policy.flag_response {
            FlagResponse::Quarantine => {
                Some(ProposedControl { action: ControlAction::Quarantine, rate: None, needs_approval, reason })
            }
            FlagResponse::Throttle => Some(ProposedControl {
                action: ControlAction::Throttle,
                rate: Some(policy.throttle_rate),
                needs_approval,
                reason,
            }),
            FlagResponse::Record => None,
        }
    } else {
        None
    };
    Ok((verdict, proposal))
}
