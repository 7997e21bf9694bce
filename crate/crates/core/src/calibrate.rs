//! Detector calibration: labelled runs, a weight/threshold grid search and the
//! collusion null distribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::agents::{AgentKind, AgentKindTag};
use crate::book::{AgentId, FirmId};
use crate::canonical;
use crate::engine::{run_scenario, EngineError, RunOptions};
use crate::policy::{FilterMode, FlagResponse};
use crate::regulator::Regulator;
use crate::scenario::{builtin, Scenario};
use crate::selfreg::{spoof_score, SpoofFeatures, Weights};

const DEFAULT_FILE: &str = include_str!("../calibration/default.cal");

/// Grid resolution, in hundredths.
const WEIGHT_STEP: u32 = 5;
const THRESHOLD_STEP: u32 = 1;
const COLLUSION_FLOOR: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("calibration file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("labelled set needs at least one positive and one negative scenario ({0})")]
    Precondition(String),
    #[error("no grid point reaches FPR <= {target}; best found: recall {best_recall:.3} at FPR {best_fpr:.3}")]
    InfeasibleTarget { target: f64, best_recall: f64, best_fpr: f64, best: Box<Calibration> },
    #[error(transparent)]
    Run(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub set: String,
    pub weights: Weights,
    pub flag_threshold: f64,
    pub collusion_threshold: f64,
    pub fpr_target: f64,
    pub recall: f64,
    pub fpr: f64,
    pub positives: u64,
    pub negatives: u64,
    pub seeds: Vec<u64>,
    pub null_seeds: Vec<u64>,
    /// Scenario name to content hash.
    pub scenarios: BTreeMap<String, String>,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration::parse(DEFAULT_FILE).expect("shipped calibration parses")
    }
}

impl Calibration {
    /// Score of a lone large resting order and nothing else.
    pub fn strict_threshold(&self) -> f64 {
        self.weights.large_order_share
    }

    pub fn content_hash(&self) -> String {
        canonical::hash_hex(&self.to_text()).expect("string serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# detector calibration, derived by `govsim calibrate`\n");
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "set={}", self.set);
        let _ = writeln!(s, "weight.cancel_ratio={}", self.weights.cancel_ratio);
        let _ = writeln!(s, "weight.large_order_share={}", self.weights.large_order_share);
        let _ = writeln!(s, "weight.opposite_exec={}", self.weights.opposite_exec);
        let _ = writeln!(s, "weight.short_lifetime={}", self.weights.short_lifetime);
        let _ = writeln!(s, "flag_threshold={}", self.flag_threshold);
        let _ = writeln!(s, "collusion_threshold={}", self.collusion_threshold);
        let _ = writeln!(s, "fpr_target={}", self.fpr_target);
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "fpr={}", self.fpr);
        let _ = writeln!(s, "positives={}", self.positives);
        let _ = writeln!(s, "negatives={}", self.negatives);
        let _ = writeln!(s, "seeds={}", join(&self.seeds));
        let _ = writeln!(s, "null_seeds={}", join(&self.null_seeds));
        for (name, hash) in &self.scenarios {
            let _ = writeln!(s, "scenario.{name}={hash}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CalibrationError> {
        let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        let mut scenarios = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CalibrationError::Parse { line: i + 1, message: "expected key=value".into() });
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(name) = k.strip_prefix("scenario.") {
                scenarios.insert(name.to_string(), v.to_string());
            } else if kv.insert(k, (i + 1, v)).is_some() {
                return Err(CalibrationError::Parse { line: i + 1, message: format!("duplicate key {k}") });
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or(CalibrationError::Parse { line: 0, message: format!("missing {k}") });
        let num = |k: &str| -> Result<f64, CalibrationError> {
            let (line, v) = get(k)?;
            v.parse::<f64>().map_err(|e| CalibrationError::Parse { line, message: format!("{k}: {e}") })
        };
        let int = |k: &str| -> Result<u64, CalibrationError> {
            let (line, v) = get(k)?;
            v.parse::<u64>().map_err(|e| CalibrationError::Parse { line, message: format!("{k}: {e}") })
        };
        let list = |k: &str| -> Result<Vec<u64>, CalibrationError> {
            let (line, v) = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.trim().parse::<u64>().map_err(|e| CalibrationError::Parse { line, message: format!("{k}: {e}") }))
                .collect()
        };
        let weights = Weights::new([
            num("weight.cancel_ratio")?,
            num("weight.large_order_share")?,
            num("weight.opposite_exec")?,
            num("weight.short_lifetime")?,
        ])
        .map_err(|e| CalibrationError::Parse { line: kv["weight.cancel_ratio"].0, message: e.to_string() })?;
        let known = [
            "set",
            "weight.cancel_ratio",
            "weight.large_order_share",
            "weight.opposite_exec",
            "weight.short_lifetime",
            "flag_threshold",
            "collusion_threshold",
            "fpr_target",
            "recall",
            "fpr",
            "positives",
            "negatives",
            "seeds",
            "null_seeds",
        ];
        if let Some((k, (line, _))) = kv.iter().find(|(k, _)| !known.contains(k)) {
            return Err(CalibrationError::Parse { line: *line, message: format!("unknown key {k}") });
        }
        Ok(Self {
            set: get("set")?.1.to_string(),
            weights,
            flag_threshold: num("flag_threshold")?,
            collusion_threshold: num("collusion_threshold")?,
            fpr_target: num("fpr_target")?,
            recall: num("recall")?,
            fpr: num("fpr")?,
            positives: int("positives")?,
            negatives: int("negatives")?,
            seeds: list("seeds")?,
            null_seeds: list("null_seeds")?,
            scenarios,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Scenarios to label, seeds to run them under, and the null-distribution runs.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub name: String,
    pub labelled: Vec<Scenario>,
    pub seeds: Vec<u64>,
    /// Multi-firm scenario without collusion.
    pub null_scenario: Option<Scenario>,
    pub null_seeds: Vec<u64>,
    pub fpr_target: f64,
}

impl CalibrationSet {
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self {
                name: "default".into(),
                labelled: vec![builtin("spoofer_on")?, builtin("baseline")?],
                seeds: (1001..=1010).collect(),
                null_scenario: builtin("baseline"),
                null_seeds: (2001..=2020).collect(),
                fpr_target: 0.05,
            }),
            _ => None,
        }
    }
}

/// Labelled feature vectors of agent windows.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub positive: Vec<SpoofFeatures>,
    pub negative: Vec<SpoofFeatures>,
}

fn is_positive_kind(kind: &AgentKind) -> bool {
    matches!(kind, AgentKind::ScriptedSpoofer(_))
}

fn is_honest(tag: AgentKindTag) -> bool {
    matches!(tag, AgentKindTag::Zi | AgentKindTag::MarketMaker)
}

/// Same market, nothing enforced: every policy only records.
pub fn observation_only(mut scenario: Scenario) -> Scenario {
    for p in scenario.policies.iter_mut().chain(scenario.publications.iter_mut().map(|p| &mut p.policy)) {
        p.flag_response = FlagResponse::Record;
        p.circuit_breaker = None;
        p.max_agent_order_rate = None;
        for mode in p.filter_modes.values_mut() {
            *mode = FilterMode::Off;
        }
    }
    scenario.governance.self_reg = true;
    scenario
}

/// Run one labelled scenario and collect window features.
///
/// A scripted spoofer's window is positive once it spans a whole window of
/// activity; honest agents' windows are negative; anything else is unlabelled.
pub fn collect_samples(scenario: &Scenario, seed: u64, samples: &mut Samples) -> Result<(), EngineError> {
    let run = observation_only(scenario.clone());
    let window = run.windows.window;
    let specs: BTreeMap<AgentId, _> = run.agent_specs().into_iter().map(|s| (s.agent_id, s)).collect();
    let out = run_scenario(run, RunOptions { seed: Some(seed), ..Default::default() })?;
    for v in &out.verdicts {
        let spec = &specs[&v.agent_id];
        if let AgentKind::ScriptedSpoofer(p) = &spec.kind {
            if v.window_end.step >= p.start_step + window {
                samples.positive.push(v.features);
            }
        } else if is_honest(spec.kind.tag()) {
            samples.negative.push(v.features);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub weights: Weights,
    pub threshold: f64,
    pub recall: f64,
    pub fpr: f64,
    pub margin: f64,
}

fn rate(scores: &[f64], thr: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| **s >= thr).count() as f64 / scores.len() as f64
}

/// Exhaustive search over the weight simplex and threshold grid.
///
/// Maximizes recall subject to `fpr <= target`, then lower FPR, then margin.
/// Each weight is at least one grid step, so a lone large order always scores
/// above zero.
/// Grid points where a window with no executions could reach the threshold
/// (cancel + large + short weights >= threshold) are excluded.
/// Returns `Err(best)` with the lowest-FPR point when the target is unreachable.
pub fn grid_search(samples: &Samples, target: f64) -> Result<GridPoint, Option<GridPoint>> {
    let units = 100 / WEIGHT_STEP;
    let mut best: Option<GridPoint> = None;
    let mut fallback: Option<GridPoint> = None;
    // every feature keeps at least one grid step of weight
    for a in 1..=units {
        for b in 1..=units - a {
            for c in 1..=units - a - b {
                let d = units - a - b - c;
                if d == 0 {
                    continue;
                }
                let w = [a, b, c, d].map(|u| (u * WEIGHT_STEP) as f64 / 100.0);
                let Ok(weights) = Weights::new(w) else { continue };
                let score = |f: &SpoofFeatures| spoof_score(f, &weights).expect("grid weights are valid");
                let mut pos: Vec<f64> = samples.positive.iter().map(score).collect();
                let mut neg: Vec<f64> = samples.negative.iter().map(score).collect();
                pos.sort_by(f64::total_cmp);
                neg.sort_by(f64::total_cmp);
                let no_exec = w[0] + w[1] + w[3];
                let mut t = THRESHOLD_STEP;
                while t <= 100 {
                    let thr = t as f64 / 100.0;
                    t += THRESHOLD_STEP;
                    if no_exec >= thr {
                        continue;
                    }
                    let recall = rate(&pos, thr);
                    let fpr = rate(&neg, thr);
                    let neg_q = neg.last().copied().unwrap_or(0.0);
                    let pos_med = pos.get(pos.len() / 2).copied().unwrap_or(1.0);
                    let margin = (pos_med - thr).min(thr - neg_q);
                    let p = GridPoint { weights, threshold: thr, recall, fpr, margin };
                    if fpr <= target {
                        if best.is_none_or(|b| better(&p, &b)) {
                            best = Some(p);
                        }
                    } else if fallback.is_none_or(|b| p.fpr < b.fpr || (p.fpr == b.fpr && p.recall > b.recall)) {
                        fallback = Some(p);
                    }
                }
            }
        }
    }
    best.ok_or(fallback)
}

fn better(p: &GridPoint, q: &GridPoint) -> bool {
    if p.recall != q.recall {
        return p.recall > q.recall;
    }
    if p.fpr != q.fpr {
        return p.fpr < q.fpr;
    }
    p.margin > q.margin
}

/// Cross-firm pair scores of a collusion-free run, sampled at every window.
pub fn null_pair_scores(scenario: &Scenario, seed: u64, collusion_threshold: f64) -> Result<Vec<f64>, EngineError> {
    let mut s = observation_only(scenario.clone());
    s.governance.firm = true;
    s.governance.regulator = false;
    let firms: Vec<FirmId> = s.firms.iter().map(|f| f.firm_id).collect();
    let mut config = s.regulator.resolve(&Calibration::default());
    config.collusion_threshold = collusion_threshold;
    let out = run_scenario(s, RunOptions { seed: Some(seed), ..Default::default() })?;
    let mut reg = Regulator::new(config, firms);
    let mut by_window: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for a in out.aggregates {
        by_window.entry(a.window_end.step).or_default().push(a);
    }
    let mut scores = Vec::new();
    for (step, aggs) in by_window {
        let at = aggs[0].window_end;
        reg.ingest(aggs, at).expect("one aggregate per firm per window");
        scores.extend(reg.pair_scores(step).into_iter().map(|p| p.score));
    }
    Ok(scores)
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn calibrate(set: &CalibrationSet) -> Result<Calibration, CalibrationError> {
    let positive = set.labelled.iter().filter(|s| s.agent_specs().iter().any(|a| is_positive_kind(&a.kind))).count();
    let negative = set.labelled.len() - positive;
    if positive == 0 || negative == 0 {
        return Err(CalibrationError::Precondition(format!("{positive} positive, {negative} negative")));
    }
    let mut samples = Samples::default();
    for s in &set.labelled {
        for &seed in &set.seeds {
            collect_samples(s, seed, &mut samples)?;
        }
    }
    let mut null = Vec::new();
    if let Some(s) = &set.null_scenario {
        for &seed in &set.null_seeds {
            null.extend(null_pair_scores(s, seed, 1.0)?);
        }
    }
    let collusion_threshold = percentile(&null, 0.99).max(COLLUSION_FLOOR);
    let scenarios = set.labelled.iter().chain(set.null_scenario.as_ref()).map(|s| (s.name.clone(), s.hash())).collect();
    let build = |p: &GridPoint| Calibration {
        set: set.name.clone(),
        weights: p.weights,
        flag_threshold: p.threshold,
        collusion_threshold,
        fpr_target: set.fpr_target,
        recall: p.recall,
        fpr: p.fpr,
        positives: samples.positive.len() as u64,
        negatives: samples.negative.len() as u64,
        seeds: set.seeds.clone(),
        null_seeds: if set.null_scenario.is_some() { set.null_seeds.clone() } else { Vec::new() },
        scenarios,
    };
    match grid_search(&samples, set.fpr_target) {
        Ok(p) => Ok(build(&p)),
        Err(fallback) => {
            let best = fallback.expect("grid is non-empty");
            Err(CalibrationError::InfeasibleTarget {
                target: set.fpr_target,
                best_recall: best.recall,
                best_fpr: best.fpr,
                best: Box::new(build(&best)),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_round_trips() {
        let c = Calibration::default();
        assert_eq!(Calibration::parse(&c.to_text()).unwrap(), c);
        assert!(c.flag_threshold > 0.0 && c.flag_threshold <= 1.0);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = Calibration::default().to_text() + "wieght.x=1\n";
        assert!(matches!(Calibration::parse(&text), Err(CalibrationError::Parse { .. })));
    }

    #[test]
    fn positive_only_set_is_rejected() {
        let mut set = CalibrationSet::builtin("default").unwrap();
        set.labelled.retain(|s| s.name == "spoofer_on");
        assert!(matches!(calibrate(&set), Err(CalibrationError::Precondition(_))));
    }

    #[test]
    fn grid_separates_toy_samples() {
        let f = |a, b, c, d| SpoofFeatures::from_array([a, b, c, d]);
        let samples = Samples {
            positive: vec![f(0.9, 0.8, 1.0, 0.9); 10],
            negative: (0..20).map(|i| f(0.5 + i as f64 / 100.0, 0.0, 0.3, 0.1)).collect(),
        };
        let p = grid_search(&samples, 0.05).unwrap();
        assert_eq!(p.recall, 1.0);
        assert_eq!(p.fpr, 0.0);
        let w = p.weights;
        assert!(w.cancel_ratio + w.large_order_share + w.short_lifetime < p.threshold);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
        assert_eq!(percentile(&[], 0.99), 0.0);
    }
}
