use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{round_tick, IntentTag, OrderIntent};
use crate::book::{BookSnapshot, Qty, Side};

/// Zero-intelligence background trader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZiParams {
    /// Poisson arrival rate per step.
    pub rate: f64,
    /// Std of the private valuation noise, in ticks.
    pub noise_std: f64,
    pub max_qty: Qty,
    /// Steps an unfilled order rests before the agent cancels it.
    pub order_lifetime: u64,
    /// Valuation shift in ticks per unit of visible depth imbalance.
    #[serde(default)]
    pub imbalance_weight: f64,
}

impl ZiParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err("zi.rate must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err("zi.noise_std must be non-negative".into());
        }
        if self.max_qty == 0 {
            return Err("zi.max_qty must be at least 1".into());
        }
        if self.order_lifetime == 0 {
            return Err("zi.order_lifetime must be at least 1".into());
        }
        if !self.imbalance_weight.is_finite() {
            return Err("zi.imbalance_weight must be finite".into());
        }
        Ok(())
    }

    /// Per-step wake probability of the discretized Poisson process.
    pub fn wake_probability(&self) -> f64 {
        1.0 - (-self.rate).exp()
    }
}

/// Draw noise and size, then decide. Draw count does not depend on the book,
/// so paired runs keep identical streams.
pub fn zi_act<R: Rng + ?Sized>(
    params: &ZiParams,
    snapshot: &BookSnapshot,
    fundamental: f64,
    rng: &mut R,
) -> Vec<OrderIntent> {
    let noise = if params.noise_std > 0.0 {
        Normal::new(0.0, params.noise_std).expect("validated std").sample(rng)
    } else {
        0.0
    };
    let qty = rng.random_range(1..=params.max_qty);
    zi_decide(params, snapshot, fundamental, noise, qty).into_iter().collect()
}

/// Valuation = fundamental + noise + imbalance tilt, rounded to a tick. Buy
/// above the mid (or the fundamental on a one-sided book), sell below,
/// abstain on a tie. A one-sided book has no meaningful imbalance, so the
/// tilt only applies when both sides are quoted.
pub fn zi_decide(
    params: &ZiParams,
    snapshot: &BookSnapshot,
    fundamental: f64,
    noise: f64,
    qty: Qty,
) -> Option<OrderIntent> {
    let tilt = if snapshot.mid_x2.is_some() { params.imbalance_weight * snapshot.imbalance() } else { 0.0 };
    let valuation = round_tick(fundamental + noise + tilt).max(1);
    let valuation_x2 = 2 * valuation;
    let reference_x2 = snapshot.mid_x2.unwrap_or_else(|| round_tick(2.0 * fundamental));
    let side = match valuation_x2.cmp(&reference_x2) {
        std::cmp::Ordering::Greater => Side::Buy,
        std::cmp::Ordering::Less => Side::Sell,
        std::cmp::Ordering::Equal => return None,
    };
    Some(OrderIntent::limit(side, valuation, qty, IntentTag::Background))
}
