//! Run directories: what a headless run writes and how it is read back.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::canonical;
use crate::engine::{RunOutput, RunReport};

pub const REPORT_FILE: &str = "report.json";
pub const LEDGER_FILE: &str = "ledger.bin";
pub const ATTESTATION_FILE: &str = "attestation.json";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ReportError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = canonical::to_vec(item).map_err(|source| ReportError::Json { path: path.display().to_string(), source })?;
        w.write_all(&line).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let v = serde_json::to_value(value).map_err(|source| ReportError::Json { path: path.display().to_string(), source })?;
    let mut bytes = serde_json::to_vec_pretty(&v).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

/// Write every run artifact under `dir`, creating it if needed.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(REPORT_FILE), &out.report)?;
    write_jsonl(&dir.join("telemetry.jsonl"), &out.telemetry)?;
    write_jsonl(&dir.join("tape.jsonl"), &out.tape)?;
    write_jsonl(&dir.join("verdicts.jsonl"), &out.verdicts)?;
    write_jsonl(&dir.join("decisions.jsonl"), &out.decisions)?;
    write_jsonl(&dir.join("flags.jsonl"), &out.flags)?;
    let ledger = dir.join(LEDGER_FILE);
    // a file-backed ledger is already on disk
    if out.ledger.path().is_none_or(|p| p != ledger) {
        fs::write(&ledger, out.ledger.to_bytes()).map_err(io_err(&ledger))?;
    }
    if let Some(att) = &out.attestation {
        write_json(&dir.join(ATTESTATION_FILE), att)?;
    }
    if !out.trace.is_empty() {
        let path = dir.join("trace.log");
        fs::write(&path, out.trace.join("\n") + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<RunReport, ReportError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json { path: path.display().to_string(), source })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

/// Human-readable summary of a report.
pub fn summarize(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario      {} (seed {}, {} steps)", r.scenario, r.seed, r.steps);
    let _ = writeln!(s, "scenario hash {}", r.scenario_hash);
    let _ = writeln!(s, "calibration   {}", r.calibration_hash);
    let _ = writeln!(s, "trades        {} ({} qty)", r.trades, r.traded_qty);
    let m = &r.metrics;
    let _ = writeln!(
        s,
        "volatility {:.6}  efficiency_dev {:.6}  effective_spread {:.6}  discovery_halflife {}",
        m.volatility,
        m.efficiency_dev,
        m.effective_spread,
        opt(m.discovery_halflife)
    );
    let _ = writeln!(s, "windows       {}", r.windows.len());
    let _ = writeln!(s, "verdicts      {} ({} flagged)", r.counts.verdicts, r.counts.flagged_verdicts);
    let _ = writeln!(s, "blocked       {}", r.counts.blocked_orders);
    for (k, n) in &r.counts.decisions {
        let _ = writeln!(s, "decision      {k}: {n}");
    }
    for (k, n) in &r.counts.flags {
        let _ = writeln!(s, "flag          {k}: {n}");
    }
    let _ = writeln!(s, "pending       {}", r.counts.pending_open);
    let _ = writeln!(s, "ledger        {} entries, head {}", r.ledger_entries, r.ledger_head);
    let _ = writeln!(s, "{:>6} {:>5} {:<19} {:>12} {:>6} {:>9} {:>9}", "agent", "firm", "kind", "wealth", "inv", "max_score", "flagged");
    for a in &r.agents {
        let kind = serde_json::to_value(a.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{:>6} {:>5} {:<19} {:>12.1} {:>6} {:>9.3} {:>9}{}",
            a.agent_id,
            a.firm_id,
            kind,
            a.wealth,
            a.inventory,
            a.max_score,
            a.flagged_windows,
            if a.quarantined { "  quarantined" } else { "" }
        );
    }
    s
}
