use std::path::Path;
use std::process::{Command, Output};

use govsim_cli::cli::CliError;
use govsim_core::calibrate::{Calibration, CalibrationError};

fn govsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_govsim")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn run_writes_artifacts_that_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = govsim(&["run", "baseline", "--seed", "11", "--out", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["report.json", "telemetry.jsonl", "tape.jsonl", "ledger.bin", "attestation.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let o = govsim(&["verify-ledger", "out/ledger.bin"], dir.path());
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("OK") && stdout.contains("attestation OK"), "{stdout}");
    assert_eq!(code(&govsim(&["report", "out"], dir.path())), 0);
}

#[test]
fn default_output_directory_is_named_after_the_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&govsim(&["run", "baseline", "--seed", "3"], dir.path())), 0);
    assert!(dir.path().join("runs/baseline-seed3/report.json").exists());
}

#[test]
fn tampered_ledger_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&govsim(&["run", "spoofer_on", "--seed", "2", "--out", "o"], dir.path())), 0);
    let path = dir.path().join("o/ledger.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    let o = govsim(&["verify-ledger", "o/ledger.bin"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("BROKEN"));
    assert_eq!(code(&govsim(&["report", "o"], dir.path())), 4);
}

#[test]
fn truncated_ledger_fails_attestation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&govsim(&["run", "baseline", "--seed", "2", "--out", "o"], dir.path())), 0);
    let path = dir.path().join("o/ledger.bin");
    let bytes = std::fs::read(&path).unwrap();
    let (entries, _) = govsim_core::ledger::read_entries(&bytes).unwrap();
    // rewrite the file without its last entry: the chain is intact but short
    let mut l = govsim_core::Ledger::in_memory();
    for e in &entries[..entries.len() - 1] {
        l.append(e.at, &e.kind, e.payload.clone()).unwrap();
    }
    std::fs::write(&path, l.to_bytes()).unwrap();
    let o = govsim(&["verify-ledger", "o/ledger.bin"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("attestation FAILED"));
    let o = govsim(&["verify-ledger", "o/ledger.bin", "--key", "wrong"], dir.path());
    assert_eq!(code(&o), 4);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&govsim(&["run", "no_such_scenario"], dir.path())), 2);
    std::fs::write(dir.path().join("bad.json"), r#"{"name": "x", "spoof_powr": 1}"#).unwrap();
    let o = govsim(&["run", "bad.json"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("spoof_powr"));
    std::fs::write(dir.path().join("bad.cal"), "flag_threshold=oops\n").unwrap();
    assert_eq!(code(&govsim(&["run", "baseline", "--calibration", "bad.cal"], dir.path())), 2);
    assert_eq!(code(&govsim(&["calibrate", "nope", "--out", "x.cal"], dir.path())), 2);
}

#[test]
fn other_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&govsim(&["verify-ledger", "missing.bin"], dir.path())), 1);
    assert_eq!(code(&govsim(&["report", "missing"], dir.path())), 1);
}

#[test]
fn calibrate_writes_the_shipped_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = govsim(&["calibrate", "default", "--out", "d.cal"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_to_string(dir.path().join("d.cal")).unwrap();
    assert_eq!(written, Calibration::default().to_text());
    // and a run accepts it
    assert_eq!(code(&govsim(&["run", "baseline", "--calibration", "d.cal", "--out", "r"], dir.path())), 0);
}

#[test]
fn infeasible_calibration_maps_to_3() {
    let e = CliError::Infeasible(CalibrationError::InfeasibleTarget {
        target: 0.05,
        best_recall: 1.0,
        best_fpr: 0.2,
        best: Box::new(Calibration::default()),
    });
    assert_eq!(e.exit_code(), 3);
}
