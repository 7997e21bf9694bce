//! Scenario files: strict canonical JSON describing one run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, AgentKindTag, AgentSpec, FundamentalParams};
use crate::book::FirmId;
use crate::calibrate::Calibration;
use crate::policy::{CircuitBreaker, FilterMode, FlagResponse, PolicyAutonomy, PolicyDoc};
use crate::regulator::{RegulatorConfig, ReviewVerdict};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        let message = e.to_string();
        // serde_json appends " at line L column C"; keep the bare message
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        ScenarioError::Parse { line: e.line(), column: e.column(), message }
    }
}

/// A threshold given literally or taken from the detector calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSpec {
    Fixed(f64),
    Named(NamedThreshold),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedThreshold {
    /// The calibrated flag threshold.
    Calibrated,
    /// Score of a lone large resting order: blocks decoys before any land.
    Strict,
}

impl ThresholdSpec {
    pub fn resolve(self, cal: &Calibration) -> f64 {
        match self {
            ThresholdSpec::Fixed(x) => x,
            ThresholdSpec::Named(NamedThreshold::Calibrated) => cal.flag_threshold,
            ThresholdSpec::Named(NamedThreshold::Strict) => cal.strict_threshold(),
        }
    }
}

fn calibrated() -> ThresholdSpec {
    ThresholdSpec::Named(NamedThreshold::Calibrated)
}

/// A [`PolicyDoc`] whose thresholds may refer to the calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTemplate {
    pub version: u64,
    #[serde(default)]
    pub firm_id: Option<FirmId>,
    #[serde(default = "calibrated")]
    pub flag_threshold: ThresholdSpec,
    #[serde(default = "calibrated")]
    pub block_threshold: ThresholdSpec,
    #[serde(default)]
    pub filter_modes: BTreeMap<AgentKindTag, FilterMode>,
    #[serde(default)]
    pub autonomy: PolicyAutonomy,
    #[serde(default)]
    pub flag_response: FlagResponse,
    #[serde(default = "one")]
    pub throttle_rate: u32,
    #[serde(default)]
    pub max_agent_order_rate: Option<u32>,
    #[serde(default)]
    pub circuit_breaker: Option<CircuitBreaker>,
    #[serde(default)]
    pub penalty_beta: f64,
    #[serde(default)]
    pub issuer: String,
}

fn one() -> u32 {
    1
}

impl PolicyTemplate {
    pub fn resolve(&self, cal: &Calibration) -> PolicyDoc {
        PolicyDoc {
            version: self.version,
            firm_id: self.firm_id,
            flag_threshold: self.flag_threshold.resolve(cal),
            block_threshold: self.block_threshold.resolve(cal),
            filter_modes: self.filter_modes.clone(),
            autonomy: self.autonomy,
            flag_response: self.flag_response,
            throttle_rate: self.throttle_rate,
            max_agent_order_rate: self.max_agent_order_rate,
            circuit_breaker: self.circuit_breaker.clone(),
            penalty_beta: self.penalty_beta,
            issuer: self.issuer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirmConfig {
    pub firm_id: FirmId,
    pub agents: Vec<AgentConfig>,
}

/// Regulator-issued policy scheduled for a given step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Publication {
    pub step: u64,
    pub policy: PolicyTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Governance {
    pub self_reg: bool,
    pub firm: bool,
    pub regulator: bool,
}

impl Default for Governance {
    fn default() -> Self {
        Self { self_reg: true, firm: true, regulator: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Steps of history in a detection window.
    pub window: u64,
    /// Steps between window evaluations.
    pub eval_every: u64,
    pub book_depth: usize,
    pub short_lifetime_steps: u64,
    /// Large order = qty >= this multiple of the trailing median placed qty.
    pub large_multiple: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: 50, eval_every: 25, book_depth: 5, short_lifetime_steps: 10, large_multiple: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegulatorSettings {
    #[serde(default = "default_tau")]
    pub tau: u64,
    /// Defaults to the calibrated null-distribution threshold.
    #[serde(default)]
    pub collusion_threshold: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon_steps: u64,
    #[serde(default = "default_grace")]
    pub missing_grace: u32,
    #[serde(default)]
    pub volatility_bound: Option<f64>,
    #[serde(default)]
    pub efficiency_bound: Option<f64>,
}

fn default_tau() -> u64 {
    2
}
fn default_horizon() -> u64 {
    100
}
fn default_grace() -> u32 {
    2
}

impl Default for RegulatorSettings {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            collusion_threshold: None,
            horizon_steps: default_horizon(),
            missing_grace: default_grace(),
            volatility_bound: None,
            efficiency_bound: None,
        }
    }
}

impl RegulatorSettings {
    pub fn resolve(&self, cal: &Calibration) -> RegulatorConfig {
        RegulatorConfig {
            tau: self.tau,
            collusion_threshold: self.collusion_threshold.unwrap_or(cal.collusion_threshold),
            horizon_steps: self.horizon_steps,
            missing_grace: self.missing_grace,
            volatility_bound: self.volatility_bound,
            efficiency_bound: self.efficiency_bound,
        }
    }
}

/// Stand-in for the human approver in headless runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum Approver {
    /// Pending items wait for an explicit command.
    #[default]
    Manual,
    ApproveAll,
    RejectAll,
    /// Approve once an item has waited `k` steps.
    ApproveAfter { k: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub master_seed: u64,
    pub steps: u64,
    pub fundamental: FundamentalParams,
    pub firms: Vec<FirmConfig>,
    pub policies: Vec<PolicyTemplate>,
    #[serde(default)]
    pub publications: Vec<Publication>,
    #[serde(default)]
    pub governance: Governance,
    #[serde(default)]
    pub windows: WindowConfig,
    #[serde(default)]
    pub regulator: RegulatorSettings,
    #[serde(default)]
    pub approver: Approver,
    /// Scripted reviewer applied to open audit flags at each window close.
    #[serde(default)]
    pub flag_reviewer: Option<ReviewVerdict>,
    #[serde(default = "default_auditor_key")]
    pub auditor_key: String,
}

fn default_auditor_key() -> String {
    "desk-auditor".into()
}

const BUILTINS: &[(&str, &str)] = &[
    ("baseline", include_str!("../scenarios/baseline.json")),
    ("spoofer_on", include_str!("../scenarios/spoofer_on.json")),
    ("spoofer_selfreg_block", include_str!("../scenarios/spoofer_selfreg_block.json")),
    ("spoofer_rerank_qlearner", include_str!("../scenarios/spoofer_rerank_qlearner.json")),
    ("colluders_two_firms", include_str!("../scenarios/colluders_two_firms.json")),
    ("human_in_loop_demo", include_str!("../scenarios/human_in_loop_demo.json")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

pub fn builtin(name: &str) -> Option<Scenario> {
    let (_, text) = BUILTINS.iter().find(|(n, _)| *n == name)?;
    Some(parse_scenario(text).expect("built-in scenarios are valid"))
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let s: Scenario = serde_json::from_str(text)?;
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

/// A file path if it exists, else a built-in name.
pub fn resolve_scenario(arg: &str) -> Result<Scenario, ScenarioError> {
    let p = Path::new(arg);
    if p.exists() {
        return load_scenario(p);
    }
    builtin(arg).ok_or_else(|| {
        let names: Vec<&str> = builtin_names().collect();
        ScenarioError::Validation(format!("no scenario file or built-in named {arg:?} (built-ins: {})", names.join(", ")))
    })
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |m: String| Err(ScenarioError::Validation(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.firms.is_empty() {
            return fail("at least one firm is required".into());
        }
        self.fundamental.validate().map_err(ScenarioError::Validation)?;
        let mut firm_ids = BTreeSet::new();
        let mut agent_firm: BTreeMap<u32, FirmId> = BTreeMap::new();
        for f in &self.firms {
            if !firm_ids.insert(f.firm_id) {
                return fail(format!("firm {} is listed twice", f.firm_id));
            }
            for a in &f.agents {
                if let Some(prev) = agent_firm.insert(a.agent_id, f.firm_id) {
                    return fail(format!(
                        "agent {} is listed in firm {prev} and firm {}; every agent belongs to exactly one firm",
                        a.agent_id, f.firm_id
                    ));
                }
                a.kind.validate().map_err(|m| ScenarioError::Validation(format!("agent {}: {m}", a.agent_id)))?;
            }
        }
        if agent_firm.is_empty() {
            return fail("at least one agent is required".into());
        }
        let w = &self.windows;
        if w.eval_every == 0 || w.window < w.eval_every {
            return fail("windows: need eval_every >= 1 and window >= eval_every".into());
        }
        if w.book_depth == 0 || w.large_multiple.is_nan() || w.large_multiple <= 0.0 {
            return fail("windows: book_depth and large_multiple must be positive".into());
        }
        let g = &self.governance;
        if g.firm && !g.self_reg {
            return fail("governance: the firm layer needs self-regulation telemetry".into());
        }
        if g.regulator && !g.firm {
            return fail("governance: the regulator needs firm aggregates".into());
        }
        let mut scopes = BTreeSet::new();
        for p in &self.policies {
            if !scopes.insert(p.firm_id) {
                return fail(format!("more than one initial policy for scope {:?}", p.firm_id));
            }
            if let Some(f) = p.firm_id {
                if !firm_ids.contains(&f) {
                    return fail(format!("policy targets unknown firm {f}"));
                }
            }
        }
        if !scopes.contains(&None) {
            for f in &firm_ids {
                if !scopes.contains(&Some(*f)) {
                    return fail(format!("firm {f} has no initial policy and there is no global policy"));
                }
            }
        }
        for p in &self.publications {
            if p.step == 0 || p.step > self.steps {
                return fail(format!("publication at step {} is outside the run", p.step));
            }
            if let Some(f) = p.policy.firm_id {
                if !firm_ids.contains(&f) {
                    return fail(format!("publication targets unknown firm {f}"));
                }
            }
        }
        Ok(())
    }

    pub fn agent_specs(&self) -> Vec<AgentSpec> {
        let mut v: Vec<AgentSpec> = self
            .firms
            .iter()
            .flat_map(|f| f.agents.iter().map(|a| AgentSpec { agent_id: a.agent_id, firm_id: f.firm_id, kind: a.kind.clone() }))
            .collect();
        v.sort_by_key(|a| a.agent_id);
        v
    }

    pub fn hash(&self) -> String {
        crate::canonical::hash_hex(self).expect("scenario serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "tiny",
        "master_seed": 1,
        "steps": 10,
        "fundamental": {"initial": 100.0, "mean": 100.0, "reversion_rate": 0.05, "shock_std": 0.5},
        "firms": [{"firm_id": 1, "agents": [
            {"agent_id": 1, "kind": {"type": "zi", "rate": 0.5, "noise_std": 2.0, "max_qty": 5, "order_lifetime": 10}},
            {"agent_id": 2, "kind": {"type": "zi", "rate": 0.5, "noise_std": 2.0, "max_qty": 5, "order_lifetime": 10}}
        ]}],
        "policies": [{"version": 1}]
    }"#;

    #[test]
    fn minimal_file_loads() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.agent_specs().len(), 2);
        assert_eq!(s.governance, Governance::default());
    }

    #[test]
    fn agent_in_two_firms_rejected() {
        let text = MINIMAL.replace(
            r#"]}],
        "policies""#,
            r#"]}, {"firm_id": 2, "agents": [
            {"agent_id": 2, "kind": {"type": "zi", "rate": 0.5, "noise_std": 2.0, "max_qty": 5, "order_lifetime": 10}}]}],
        "policies""#,
        );
        match parse_scenario(&text) {
            Err(ScenarioError::Validation(m)) => assert!(m.contains("exactly one firm"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_names_the_key() {
        let text = MINIMAL.replace(r#""steps": 10,"#, r#""steps": 10, "spoof_powr": 3,"#);
        match parse_scenario(&text) {
            Err(ScenarioError::Parse { message, line, .. }) => {
                assert!(message.contains("spoof_powr"), "{message}");
                assert_eq!(line, 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lattice_enforced() {
        let text = MINIMAL.replace(
            r#""policies""#,
            r#""governance": {"self_reg": false, "firm": true, "regulator": false}, "policies""#,
        );
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Validation(_))));
    }

    #[test]
    fn builtins_parse() {
        for name in builtin_names() {
            let s = builtin(name).unwrap();
            assert_eq!(s.name, name);
        }
    }

    #[test]
    fn thresholds_resolve() {
        let cal = Calibration::default();
        let t: PolicyTemplate = serde_json::from_str(r#"{"version": 2, "flag_threshold": 0.4, "block_threshold": "strict"}"#).unwrap();
        let doc = t.resolve(&cal);
        assert_eq!(doc.flag_threshold, 0.4);
        assert_eq!(doc.block_threshold, cal.strict_threshold());
    }
}
