use proptest::prelude::*;

use govsim_core::regulator::market_quality;
use govsim_core::scenario::builtin;
use govsim_core::{run_scenario, RunOptions, Side, SimTime, TapeRecord};

const TOL: f64 = 1e-9;

struct Oracle {
    volatility: f64,
    efficiency_dev: f64,
    effective_spread: f64,
    halflife: Option<f64>,
}

/// Straight from the definitions, two-pass where it matters.
fn oracle(first_step: u64, mids: &[Option<f64>], funds: &[f64], tape: &[TapeRecord], shocks: &[u64]) -> Oracle {
    let present: Vec<f64> = mids.iter().flatten().copied().collect();
    let returns: Vec<f64> = present.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let volatility = if returns.is_empty() {
        0.0
    } else {
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / returns.len() as f64).sqrt()
    };
    let devs: Vec<f64> = mids.iter().zip(funds).filter_map(|(m, f)| m.map(|m| (m - f).abs())).collect();
    let efficiency_dev = if devs.is_empty() { 0.0 } else { devs.iter().sum::<f64>() / devs.len() as f64 };
    let signed: Vec<f64> = tape
        .iter()
        .filter_map(|t| t.mid_before_x2.map(|m2| (t.price as f64 - m2 as f64 / 2.0) * t.aggressor_side.sign() as f64))
        .collect();
    let effective_spread = if signed.is_empty() { 0.0 } else { signed.iter().sum::<f64>() / signed.len() as f64 };

    let mut halves = Vec::new();
    for (n, &k) in shocks.iter().enumerate() {
        let ki = (k - first_step) as usize;
        // last mid strictly before the shock step
        let Some(prev) = mids[..ki].iter().rev().flatten().next() else { continue };
        let gap = (prev - funds[ki]).abs();
        if gap == 0.0 {
            continue;
        }
        let end = shocks.get(n + 1).map_or(mids.len(), |&next| (next - first_step) as usize);
        if let Some(t) = (ki..end).find(|&i| mids[i].is_some_and(|m| (m - funds[i]).abs() <= gap / 2.0)) {
            halves.push((t - ki + 1) as f64);
        }
    }
    let halflife = (!halves.is_empty()).then(|| halves.iter().sum::<f64>() / halves.len() as f64);
    Oracle { volatility, efficiency_dev, effective_spread, halflife }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

#[test]
fn run_metrics_match_oracle() {
    for (name, seed) in [("baseline", 5), ("spoofer_on", 3), ("human_in_loop_demo", 1)] {
        let out = run_scenario(builtin(name).unwrap(), RunOptions { seed: Some(seed), ..Default::default() }).unwrap();
        let s = &out.series;
        let o = oracle(1, &s.mids, &s.fundamentals, &out.tape, &s.shock_steps);
        let m = &out.report.metrics;
        assert!(close(m.volatility, o.volatility), "{name}: vol {} vs {}", m.volatility, o.volatility);
        assert!(close(m.efficiency_dev, o.efficiency_dev), "{name}: eff {} vs {}", m.efficiency_dev, o.efficiency_dev);
        assert!(o.effective_spread > 0.0);
        assert!(close(m.effective_spread, o.effective_spread), "{name}: spread {} vs {}", m.effective_spread, o.effective_spread);
        match (m.discovery_halflife, o.halflife) {
            (Some(a), Some(b)) => assert!(close(a, b), "{name}: halflife {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "{name}: halflife"),
        }
        assert_eq!(m.trades, out.tape.iter().filter(|t| t.mid_before_x2.is_some()).count() as u64);
    }
}

#[test]
fn window_metrics_partition_the_run() {
    let out = run_scenario(builtin("spoofer_on").unwrap(), RunOptions { seed: Some(2), ..Default::default() }).unwrap();
    let s = &out.series;
    let mut start = 1;
    for w in &out.report.windows {
        let m = &w.metrics;
        assert_eq!((m.window_start, m.window_end), (start, w.window_end));
        let lo = (start - 1) as usize;
        let hi = w.window_end as usize;
        let tape: Vec<TapeRecord> =
            out.tape.iter().filter(|t| (start..=w.window_end).contains(&t.at.step)).cloned().collect();
        // returns are taken within the window only
        let o = oracle(start, &s.mids[lo..hi], &s.fundamentals[lo..hi], &tape, &[]);
        assert!(close(m.volatility, o.volatility));
        assert!(close(m.efficiency_dev, o.efficiency_dev));
        assert!(close(m.effective_spread, o.effective_spread.max(0.0)));
        start = w.window_end + 1;
    }
    assert_eq!(start, out.report.steps + 1);
}

fn tape_at(step: u64, price: i64, side: Side, mid_x2: Option<i64>) -> TapeRecord {
    TapeRecord {
        at: SimTime::new(step, 0),
        price,
        qty: 1,
        aggressor_side: side,
        buy_agent_id: 1,
        sell_agent_id: 2,
        mid_before_x2: mid_x2,
    }
}

fn series() -> impl Strategy<Value = (Vec<Option<f64>>, Vec<f64>, Vec<u64>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            proptest::collection::vec(proptest::option::weighted(0.85, 900.0f64..1100.0), n),
            proptest::collection::vec(900.0f64..1100.0, n),
            proptest::collection::btree_set(2u64..=n as u64, 0..4),
        )
            .prop_map(|(m, f, s)| (m, f, s.into_iter().collect()))
    })
}

proptest! {
    #[test]
    fn batch_metrics_match_oracle((mids, funds, shocks) in series(), trades in proptest::collection::vec((1u64..=50, 990i64..1010, any::<bool>(), 1980i64..2020), 0..60)) {
        let tape: Vec<TapeRecord> = trades
            .iter()
            .map(|&(st, p, buy, m)| tape_at(st, p, if buy { Side::Buy } else { Side::Sell }, Some(m)))
            .collect();
        let m = market_quality(1, &mids, &funds, &tape, &shocks).unwrap();
        let o = oracle(1, &mids, &funds, &tape, &shocks);
        prop_assert!(close(m.volatility, o.volatility));
        prop_assert!(close(m.efficiency_dev, o.efficiency_dev));
        prop_assert!(close(m.effective_spread, o.effective_spread.max(0.0)));
        match (m.discovery_halflife, o.halflife) {
            (Some(a), Some(b)) => prop_assert!(close(a, b)),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(market_quality(1, &[Some(1.0)], &[], &[], &[]).is_err());
}
