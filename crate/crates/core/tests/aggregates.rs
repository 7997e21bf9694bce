use std::collections::BTreeMap;

use govsim_core::firm::FirmAggregate;
use govsim_core::scenario::builtin;
use govsim_core::selfreg::{ActionKind, Outcome};
use govsim_core::{run_scenario, OrderKind, RunOptions, RunOutput, TelemetryRecord};

#[derive(Debug, Default, PartialEq)]
struct Totals {
    placed: u64,
    cancelled: u64,
    executed: u64,
    large_cancelled: u64,
}

/// Recount a firm window straight from the telemetry tape.
fn recount(out: &RunOutput, agg: &FirmAggregate) -> Totals {
    let in_window = |r: &&TelemetryRecord| {
        r.firm_id == agg.firm_id && r.at.step > agg.window_start && r.at < agg.window_end && r.outcome == Outcome::Accepted
    };
    let mut t = Totals::default();
    for r in out.telemetry.iter().filter(in_window) {
        match r.action {
            ActionKind::Submit => {
                if r.order_kind == Some(OrderKind::Limit) {
                    t.placed += r.qty;
                }
                t.executed += r.traded_qty;
            }
            ActionKind::Fill => t.executed += r.traded_qty,
            ActionKind::Cancel => {
                t.cancelled += r.cancelled_qty;
                if r.qty >= agg.large_qty_threshold {
                    t.large_cancelled += r.cancelled_qty;
                }
            }
            ActionKind::ForcedCancel => {}
        }
    }
    t
}

fn check(name: &str, seed: u64) {
    let out = run_scenario(builtin(name).unwrap(), RunOptions { seed: Some(seed), ..Default::default() }).unwrap();
    assert!(!out.aggregates.is_empty());
    for agg in &out.aggregates {
        let want = recount(&out, agg);
        let got = Totals {
            placed: agg.placed_qty,
            cancelled: agg.cancelled_qty,
            executed: agg.executed_qty,
            large_cancelled: agg.large_cancelled_qty,
        };
        assert_eq!(got, want, "{name} firm {} window ending {}", agg.firm_id, agg.window_end.step);
        // per-step series and clusters partition the same totals
        let steps: u64 = agg.steps.iter().map(|s| s.placed_qty).sum();
        let clusters: u64 = agg.clusters.iter().map(|c| c.placed_qty).sum();
        assert_eq!((steps, clusters), (want.placed, want.placed));
        let exec_steps: u64 = agg.steps.iter().map(|s| s.executed_qty).sum();
        assert_eq!(exec_steps, want.executed);
    }
}

#[test]
fn aggregates_match_telemetry_recount() {
    check("baseline", 4);
    check("colluders_two_firms", 2);
    check("spoofer_on", 7);
}

#[test]
fn aggregates_carry_no_raw_agent_ids() {
    let out = run_scenario(builtin("colluders_two_firms").unwrap(), RunOptions { seed: Some(1), ..Default::default() }).unwrap();
    let agg = &out.aggregates[0];
    let json = serde_json::to_value(agg).unwrap();
    for c in json["clusters"].as_array().unwrap() {
        let keys: Vec<&str> = c.as_object().unwrap().keys().map(String::as_str).collect();
        assert!(!keys.iter().any(|k| k.contains("agent")), "{keys:?}");
        assert_eq!(c["pseudonym"].as_str().unwrap().len(), 16);
    }
}

#[test]
fn every_firm_reports_every_window() {
    let out = run_scenario(builtin("colluders_two_firms").unwrap(), RunOptions { seed: Some(5), ..Default::default() }).unwrap();
    let mut by_firm: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for a in &out.aggregates {
        by_firm.entry(a.firm_id as u64).or_default().push(a.window_end.step);
    }
    let firms = out.report.firm_windows.len();
    assert_eq!(by_firm.len(), firms);
    let expected: Vec<u64> = out.report.firm_windows.values().next().unwrap().clone();
    for (firm, ends) in &by_firm {
        assert_eq!(ends, &expected, "firm {firm}");
    }
}
