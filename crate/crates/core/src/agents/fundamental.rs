use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shock {
    pub step: u64,
    /// Permanent jump applied to both the value and its reversion mean.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalParams {
    pub initial: f64,
    pub mean: f64,
    pub reversion_rate: f64,
    pub shock_std: f64,
    #[serde(default)]
    pub shocks: Vec<Shock>,
}

impl FundamentalParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.reversion_rate > 0.0 && self.reversion_rate <= 1.0) {
            return Err("fundamental.reversion_rate must lie in (0, 1]".into());
        }
        if !(self.shock_std >= 0.0 && self.shock_std.is_finite()) {
            return Err("fundamental.shock_std must be a non-negative number".into());
        }
        if !(self.initial >= 1.0 && self.mean >= 1.0) {
            return Err("fundamental.initial and fundamental.mean must be at least one tick".into());
        }
        Ok(())
    }
}

/// Mean-reverting latent value: `v <- v + k (mean - v) + e`, `e ~ N(0, s^2)`.
#[derive(Debug, Clone)]
pub struct FundamentalProcess {
    pub value: f64,
    pub mean: f64,
    pub reversion_rate: f64,
    pub shock_std: f64,
}

impl FundamentalProcess {
    pub fn new(p: &FundamentalParams) -> Self {
        Self { value: p.initial, mean: p.mean, reversion_rate: p.reversion_rate, shock_std: p.shock_std }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let eps = if self.shock_std > 0.0 {
            Normal::new(0.0, self.shock_std).expect("validated std").sample(rng)
        } else {
            0.0
        };
        self.value += self.reversion_rate * (self.mean - self.value) + eps;
        self.value = self.value.max(1.0);
        self.value
    }

    pub fn shock(&mut self, delta: f64) {
        self.value = (self.value + delta).max(1.0);
        self.mean = (self.mean + delta).max(1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::RngStream;

    #[test]
    fn noiseless_process_reverts_geometrically() {
        let mut f = FundamentalProcess { value: 110.0, mean: 100.0, reversion_rate: 0.5, shock_std: 0.0 };
        let mut rng = RngStream::new(1, "fundamental");
        assert_eq!(f.step(&mut rng), 105.0);
        assert_eq!(f.step(&mut rng), 102.5);
    }

    #[test]
    fn value_is_clamped_to_one_tick() {
        let mut f = FundamentalProcess { value: 1.5, mean: 1.0, reversion_rate: 1.0, shock_std: 0.0 };
        f.shock(-10.0);
        assert_eq!(f.value, 1.0);
    }

    #[test]
    fn shock_moves_the_mean() {
        let mut f = FundamentalProcess { value: 100.0, mean: 100.0, reversion_rate: 0.1, shock_std: 0.0 };
        f.shock(20.0);
        let mut rng = RngStream::new(1, "fundamental");
        assert_eq!(f.step(&mut rng), 120.0);
    }
}
