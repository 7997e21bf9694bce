use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{round_tick, IntentTag, OrderIntent};
use crate::book::{BookSnapshot, OrderId, Price, Qty, Side};

pub const ACTION_COUNT: usize = 8;
/// 5 inventory buckets x 5 imbalance buckets x 3 spread buckets.
pub const STATE_COUNT: usize = 75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QLearnerParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Steps over which epsilon decays linearly from start to end.
    pub epsilon_decay_steps: u64,
    pub qty: Qty,
    pub large_qty: Qty,
    pub deep_offset: Price,
    /// Inventory units per bucket.
    pub inventory_unit: i64,
    pub order_lifetime: u64,
    /// Resting orders beyond this count turn placement actions into holds.
    pub max_resting: usize,
}

impl QLearnerParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err("q_learner.alpha must lie in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err("q_learner.gamma must lie in [0, 1)".into());
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(format!("q_learner.{name} must lie in [0, 1]"));
            }
        }
        if self.qty == 0 || self.large_qty == 0 || self.inventory_unit <= 0 || self.order_lifetime == 0 {
            return Err("q_learner sizes, inventory_unit and order_lifetime must be positive".into());
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LearnerAction {
    PlaceBidAtBest,
    PlaceAskAtBest,
    PlaceLargeDeepBid,
    PlaceLargeDeepAsk,
    MarketBuy,
    MarketSell,
    CancelAll,
    Hold,
}

impl LearnerAction {
    pub const ALL: [LearnerAction; ACTION_COUNT] = [
        LearnerAction::PlaceBidAtBest,
        LearnerAction::PlaceAskAtBest,
        LearnerAction::PlaceLargeDeepBid,
        LearnerAction::PlaceLargeDeepAsk,
        LearnerAction::MarketBuy,
        LearnerAction::MarketSell,
        LearnerAction::CancelAll,
        LearnerAction::Hold,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).expect("listed")
    }
}

/// Discretized observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LearnerState {
    /// -2..=2
    pub inventory: i8,
    /// -2..=2
    pub imbalance: i8,
    /// 0..=2
    pub spread: u8,
}

impl LearnerState {
    pub fn observe(inventory: i64, snapshot: &BookSnapshot, params: &QLearnerParams) -> Self {
        let inv = (inventory as f64 / params.inventory_unit as f64).round().clamp(-2.0, 2.0) as i8;
        let imb = snapshot.imbalance();
        let imbalance = match imb {
            x if x < -0.6 => -2,
            x if x < -0.2 => -1,
            x if x <= 0.2 => 0,
            x if x <= 0.6 => 1,
            _ => 2,
        };
        let spread = match snapshot.spread() {
            Some(s) if s <= 1 => 0,
            Some(s) if s <= 3 => 1,
            _ => 2,
        };
        Self { inventory: inv, imbalance, spread }
    }

    pub fn index(self) -> usize {
        let inv = (self.inventory + 2) as usize;
        let imb = (self.imbalance + 2) as usize;
        (inv * 5 + imb) * 3 + self.spread as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    values: Vec<f64>,
}

impl Default for QTable {
    fn default() -> Self {
        Self { values: vec![0.0; STATE_COUNT * ACTION_COUNT] }
    }
}

impl QTable {
    pub fn get(&self, s: LearnerState, a: LearnerAction) -> f64 {
        self.values[s.index() * ACTION_COUNT + a.index()]
    }

    pub fn set(&mut self, s: LearnerState, a: LearnerAction, v: f64) {
        self.values[s.index() * ACTION_COUNT + a.index()] = v;
    }

    pub fn max_value(&self, s: LearnerState) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; ties go to the lowest action index.
    pub fn argmax(&self, s: LearnerState) -> LearnerAction {
        let row = self.row(s);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        LearnerAction::ALL[best]
    }

    fn row(&self, s: LearnerState) -> &[f64] {
        let start = s.index() * ACTION_COUNT;
        &self.values[start..start + ACTION_COUNT]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Epsilon-greedy selection. Always consumes two draws.
pub fn ql_act<R: Rng + ?Sized>(q: &QTable, state: LearnerState, epsilon: f64, rng: &mut R) -> LearnerAction {
    let explore = rng.random::<f64>() < epsilon;
    let random = rng.random_range(0..ACTION_COUNT);
    if explore {
        LearnerAction::ALL[random]
    } else {
        q.argmax(state)
    }
}

/// `Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`
pub fn ql_update(
    q: &mut QTable,
    s: LearnerState,
    a: LearnerAction,
    reward: f64,
    next: LearnerState,
    alpha: f64,
    gamma: f64,
) {
    let old = q.get(s, a);
    let target = reward + gamma * q.max_value(next);
    q.set(s, a, old + alpha * (target - old));
}

/// Translate an action into order intents against the current book.
pub fn learner_intents(
    action: LearnerAction,
    snapshot: &BookSnapshot,
    fundamental: f64,
    params: &QLearnerParams,
    own_resting: &[OrderId],
) -> Vec<OrderIntent> {
    let bid_ref = snapshot.best_bid.unwrap_or_else(|| round_tick(fundamental) - 1).max(1);
    let ask_ref = snapshot.best_ask.unwrap_or_else(|| round_tick(fundamental) + 1).max(1);
    let full = own_resting.len() >= params.max_resting;
    let tag = IntentTag::Learner;
    match action {
        LearnerAction::PlaceBidAtBest if !full => vec![OrderIntent::limit(Side::Buy, bid_ref, params.qty, tag)],
        LearnerAction::PlaceAskAtBest if !full => vec![OrderIntent::limit(Side::Sell, ask_ref, params.qty, tag)],
        LearnerAction::PlaceLargeDeepBid if !full => {
            let p = (bid_ref - params.deep_offset).max(1);
            vec![OrderIntent::limit(Side::Buy, p, params.large_qty, tag)]
        }
        LearnerAction::PlaceLargeDeepAsk if !full => {
            vec![OrderIntent::limit(Side::Sell, ask_ref + params.deep_offset, params.large_qty, tag)]
        }
        LearnerAction::MarketBuy => vec![OrderIntent::market(Side::Buy, params.qty, tag)],
        LearnerAction::MarketSell => vec![OrderIntent::market(Side::Sell, params.qty, tag)],
        LearnerAction::CancelAll => own_resting.iter().map(|&order_id| OrderIntent::Cancel { order_id }).collect(),
        _ => Vec::new(),
    }
}
