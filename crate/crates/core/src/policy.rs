//! Versioned, machine-checkable policy documents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::AgentKindTag;
use crate::book::FirmId;
use crate::canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FilterMode {
    #[default]
    Off,
    Rerank,
    Block,
}

/// Whether automated governance decisions apply immediately or wait for a human.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PolicyAutonomy {
    #[default]
    RuleBased,
    HumanInLoop,
}

/// What a flagged self-regulation verdict turns into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlagResponse {
    #[default]
    Quarantine,
    Throttle,
    /// Verdict is logged, nothing is enforced.
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakerMetric {
    AggSpoofScore,
    FirmLossLimit,
    OrderRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitBreaker {
    pub metric: BreakerMetric,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDoc {
    pub version: u64,
    /// `None` targets every firm.
    #[serde(default)]
    pub firm_id: Option<FirmId>,
    pub flag_threshold: f64,
    pub block_threshold: f64,
    #[serde(default)]
    pub filter_modes: BTreeMap<AgentKindTag, FilterMode>,
    #[serde(default)]
    pub autonomy: PolicyAutonomy,
    #[serde(default)]
    pub flag_response: FlagResponse,
    /// Orders per step granted by a Throttle decision.
    #[serde(default = "default_throttle_rate")]
    pub throttle_rate: u32,
    #[serde(default)]
    pub max_agent_order_rate: Option<u32>,
    #[serde(default)]
    pub circuit_breaker: Option<CircuitBreaker>,
    /// Reward-shaping penalty per unit of counterfactual score above the flag threshold.
    #[serde(default)]
    pub penalty_beta: f64,
    #[serde(default)]
    pub issuer: String,
}

fn default_throttle_rate() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy version {offered} is not newer than version {current} in force")]
    StaleVersion { offered: u64, current: u64 },
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl PolicyDoc {
    pub fn new(version: u64, flag_threshold: f64, block_threshold: f64) -> Self {
        Self {
            version,
            firm_id: None,
            flag_threshold,
            block_threshold,
            filter_modes: BTreeMap::new(),
            autonomy: PolicyAutonomy::RuleBased,
            flag_response: FlagResponse::Quarantine,
            throttle_rate: default_throttle_rate(),
            max_agent_order_rate: None,
            circuit_breaker: None,
            penalty_beta: 0.0,
            issuer: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.flag_threshold) || !unit(self.block_threshold) {
            return Err(PolicyError::Invalid("thresholds must lie in [0, 1]".into()));
        }
        if self.flag_threshold > self.block_threshold {
            return Err(PolicyError::Invalid("flag_threshold must not exceed block_threshold".into()));
        }
        if !(self.penalty_beta >= 0.0 && self.penalty_beta.is_finite()) {
            return Err(PolicyError::Invalid("penalty_beta must be non-negative".into()));
        }
        if let Some(cb) = &self.circuit_breaker {
            if !cb.bound.is_finite() {
                return Err(PolicyError::Invalid("circuit_breaker.bound must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn filter_mode(&self, kind: AgentKindTag) -> FilterMode {
        self.filter_modes.get(&kind).copied().unwrap_or_default()
    }

    /// SHA-256 over the canonical encoding.
    pub fn content_hash(&self) -> String {
        canonical::hash_hex(self).expect("policy serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_order_is_enforced() {
        assert!(PolicyDoc::new(1, 0.5, 0.8).validate().is_ok());
        assert!(PolicyDoc::new(1, 0.9, 0.8).validate().is_err());
        assert!(PolicyDoc::new(1, -0.1, 0.8).validate().is_err());
    }

    #[test]
    fn canonical_form_has_sorted_keys_and_roundtrips() {
        let mut p = PolicyDoc::new(3, 0.5, 0.8);
        p.filter_modes.insert(AgentKindTag::ScriptedSpoofer, FilterMode::Block);
        let s = canonical::to_string(&p).unwrap();
        assert!(s.starts_with(r#"{"autonomy":"RuleBased","block_threshold":0.8"#), "{s}");
        let back: PolicyDoc = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.content_hash(), p.content_hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<PolicyDoc>(r#"{"version":1,"flag_threshold":0.5,"block_threshold":0.6,"bogus":1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
