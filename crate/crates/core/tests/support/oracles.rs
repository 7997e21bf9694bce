//! Telemetry-replay checks shared by the integration and acceptance suites.

use std::collections::{BTreeMap, BTreeSet};

use govsim_core::selfreg::{ActionKind, Outcome};
use govsim_core::{canonical, ControlAction, Disposition, RunOutput, SimTime, TelemetryRecord};

/// Live resting quantity per order, replayed from one agent's records.
#[derive(Default)]
pub struct Resting(BTreeMap<u64, u64>);

impl Resting {
    pub fn apply(&mut self, r: &TelemetryRecord) {
        let Some(id) = r.order_id else { return };
        match (r.action, r.outcome) {
            (ActionKind::Submit, Outcome::Accepted) => {
                let left = r.qty - r.traded_qty;
                if r.price.is_some() && left > 0 {
                    self.0.insert(id, left);
                }
            }
            (ActionKind::Fill, _) => {
                if let Some(q) = self.0.get_mut(&id) {
                    *q -= r.traded_qty.min(*q);
                    if *q == 0 {
                        self.0.remove(&id);
                    }
                }
            }
            (ActionKind::Cancel, Outcome::Accepted) | (ActionKind::ForcedCancel, _) => {
                self.0.remove(&id);
            }
            _ => {}
        }
    }

    pub fn ids(&self) -> Vec<u64> {
        self.0.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Quarantine periods found in a run: (subject, applied at, released at).
pub fn quarantine_periods(out: &RunOutput) -> Vec<(u64, SimTime, Option<SimTime>)> {
    let mut periods = Vec::new();
    for d in &out.decisions {
        if d.disposition != Disposition::Applied || d.action != ControlAction::Quarantine {
            continue;
        }
        let release = out
            .decisions
            .iter()
            .filter(|u| {
                u.subject == d.subject
                    && u.at > d.at
                    && u.disposition == Disposition::Applied
                    && u.action == ControlAction::Unquarantine
            })
            .map(|u| u.at)
            .min();
        periods.push((d.subject as u64, d.at, release));
    }
    periods
}

/// Every quarantine in the run: no accepted order from the subject after
/// the decision, and nothing of its left resting by the end of the next step.
/// Returns the number of periods checked.
pub fn check_containment(out: &RunOutput) -> Result<usize, String> {
    let periods = quarantine_periods(out);
    for &(subject, at, release) in &periods {
        let mine: Vec<&TelemetryRecord> = out.telemetry.iter().filter(|r| r.agent_id as u64 == subject).collect();
        let active = |t: SimTime| t > at && release.is_none_or(|r| t < r);
        if let Some(r) = mine.iter().find(|r| r.action == ActionKind::Submit && r.outcome == Outcome::Accepted && active(r.at)) {
            return Err(format!("agent {subject} quarantined at {at:?} had an order accepted at {:?}", r.at));
        }
        let deadline = SimTime::new(at.step + 1, u64::MAX);
        if release.is_some_and(|r| r <= deadline) {
            continue;
        }
        let mut resting = Resting::default();
        for r in mine.iter().filter(|r| r.at <= deadline) {
            resting.apply(r);
        }
        if !resting.is_empty() {
            return Err(format!("agent {subject} quarantined at {at:?} still rests {:?}", resting.ids()));
        }
    }
    Ok(periods.len())
}

/// Decisions, verdicts and raised flags each appear in the ledger, in order,
/// with the same canonical payload (flags as raised).
pub fn check_ledger_completeness(out: &RunOutput) -> Result<(), String> {
    let entries = out.ledger.entries();
    let of = |pred: &dyn Fn(&str) -> bool| entries.iter().filter(|e| pred(&e.kind)).collect::<Vec<_>>();

    let decisions = of(&|k| k.ends_with(".decision"));
    if decisions.len() != out.decisions.len() {
        return Err(format!("{} decisions, {} decision entries", out.decisions.len(), decisions.len()));
    }
    for (d, e) in out.decisions.iter().zip(&decisions) {
        if e.payload != canonical::to_vec(d).unwrap() || e.at != d.at {
            return Err(format!("decision {} differs from its ledger entry", d.id));
        }
    }
    let verdicts = of(&|k| k == "selfreg.verdict");
    if verdicts.len() != out.verdicts.len() {
        return Err(format!("{} verdicts, {} verdict entries", out.verdicts.len(), verdicts.len()));
    }
    for (v, e) in out.verdicts.iter().zip(&verdicts) {
        if e.payload != canonical::to_vec(v).unwrap() {
            return Err(format!("verdict of agent {} at {:?} differs", v.agent_id, v.window_end));
        }
    }
    let raised = of(&|k| k == "regulator.flag");
    let ids: BTreeSet<u64> = raised.iter().map(|e| e.payload_json().unwrap()["id"].as_u64().unwrap()).collect();
    let want: BTreeSet<u64> = out.flags.iter().map(|f| f.id).collect();
    if ids != want || raised.len() != out.flags.len() {
        return Err(format!("flags {want:?} vs ledger {ids:?}"));
    }
    Ok(())
}
