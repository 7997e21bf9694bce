use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use govsim_core::calibrate::{calibrate, Calibration, CalibrationError, CalibrationSet};
use govsim_core::engine::{Engine, EngineError, RunOptions};
use govsim_core::ledger::{read_entries, verify_attestation, verify_entries, Attestation};
use govsim_core::report::{load_report, summarize, write_outputs, ATTESTATION_FILE, LEDGER_FILE};
use govsim_core::scenario::resolve_scenario;
use govsim_core::{LedgerError, ScenarioError, VerifyResult};

use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "govsim", version, about = "Limit-order-book market simulator with layered agent governance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a scenario headless and write its artifacts.
    Run {
        /// Built-in scenario name or path to a scenario file.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<scenario>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Detector calibration file (default: the shipped one).
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Also write the event trace.
        #[arg(long)]
        trace: bool,
    },
    /// Fit detector weights and thresholds on a labelled scenario set.
    Calibrate {
        set: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario behind the HTTP/JSON service.
    Serve {
        scenario: String,
        #[arg(long)]
        addr: SocketAddr,
        /// Milliseconds to wait after each step.
        #[arg(long, default_value_t = 0)]
        pace: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Hold at step 0 until `POST /run`.
        #[arg(long)]
        paused: bool,
    },
    /// Check a ledger file's hash chain and, if present, its attestation.
    VerifyLedger {
        file: PathBuf,
        /// Attestation to check (default: attestation.json next to the ledger, if any).
        #[arg(long)]
        attestation: Option<PathBuf>,
        #[arg(long, default_value = "desk-auditor")]
        key: String,
    },
    /// Summarize a run directory.
    Report { run_dir: PathBuf },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Infeasible(CalibrationError),
    #[error("{0}")]
    Ledger(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Ledger(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Scenario(s) => s.into(),
            EngineError::Policy(_) => CliError::Validation(e.to_string()),
            EngineError::Ledger(_) => CliError::Ledger(e.to_string()),
        }
    }
}

fn load_calibration(path: Option<&Path>) -> Result<Option<Calibration>, CliError> {
    path.map(|p| {
        Calibration::load(p).map_err(|e| match e {
            CalibrationError::Io(_) => CliError::Other(format!("{}: {e}", p.display())),
            _ => CliError::Validation(format!("{}: {e}", p.display())),
        })
    })
    .transpose()
}

pub fn main_with(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Run { scenario, seed, out, calibration, trace } => run(&scenario, seed, out, calibration.as_deref(), trace),
        Cmd::Calibrate { set, out } => calibrate_cmd(&set, &out),
        Cmd::Serve { scenario, addr, pace, seed, calibration, paused } => {
            serve(&scenario, addr, pace, seed, calibration.as_deref(), paused)
        }
        Cmd::VerifyLedger { file, attestation, key } => verify_ledger(&file, attestation.as_deref(), &key),
        Cmd::Report { run_dir } => report(&run_dir),
    }
}

fn run(name: &str, seed: Option<u64>, out: Option<PathBuf>, cal: Option<&Path>, trace: bool) -> Result<(), CliError> {
    let scenario = resolve_scenario(name)?;
    let seed = seed.unwrap_or(scenario.master_seed);
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{seed}", scenario.name)));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    let opts = RunOptions {
        seed: Some(seed),
        calibration: load_calibration(cal)?,
        ledger_path: Some(dir.join(LEDGER_FILE)),
        trace,
        ..Default::default()
    };
    let out = Engine::new(scenario, opts)?.finish()?;
    write_outputs(&out, &dir).map_err(|e| CliError::Other(e.to_string()))?;
    print!("{}", summarize(&out.report));
    println!("output        {}", dir.display());
    Ok(())
}

fn calibrate_cmd(set: &str, out: &Path) -> Result<(), CliError> {
    let set = CalibrationSet::builtin(set).ok_or_else(|| CliError::Validation(format!("unknown calibration set {set:?}")))?;
    match calibrate(&set) {
        Ok(cal) => {
            std::fs::write(out, cal.to_text()).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
            println!(
                "recall {:.3} fpr {:.3} flag_threshold {} collusion_threshold {} -> {}",
                cal.recall,
                cal.fpr,
                cal.flag_threshold,
                cal.collusion_threshold,
                out.display()
            );
            Ok(())
        }
        Err(e @ CalibrationError::InfeasibleTarget { .. }) => {
            if let CalibrationError::InfeasibleTarget { best, .. } = &e {
                eprint!("best grid point found:\n{}", best.to_text());
            }
            Err(CliError::Infeasible(e))
        }
        Err(CalibrationError::Precondition(m)) => Err(CliError::Validation(format!("calibration set: {m}"))),
        Err(CalibrationError::Run(e)) => Err(e.into()),
        Err(e) => Err(CliError::Other(e.to_string())),
    }
}

fn serve(name: &str, addr: SocketAddr, pace: u64, seed: Option<u64>, cal: Option<&Path>, paused: bool) -> Result<(), CliError> {
    let scenario = resolve_scenario(name)?;
    let opts = RunOptions { seed, calibration: load_calibration(cal)?, emit_events: true, ..Default::default() };
    let engine = Engine::new(scenario, opts)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Other(format!("cannot bind {addr}: {e}")))?;
        let config = ServiceConfig { pace: Duration::from_millis(pace), start_paused: paused };
        let app = service::spawn(engine, config);
        eprintln!("serving on http://{}", listener.local_addr().map_err(|e| CliError::Other(e.to_string()))?);
        axum::serve(listener, app).await.map_err(|e| CliError::Other(e.to_string()))
    })
}

fn verify_ledger(file: &Path, attestation: Option<&Path>, key: &str) -> Result<(), CliError> {
    let bytes = std::fs::read(file).map_err(|e| CliError::Other(format!("{}: {e}", file.display())))?;
    let (entries, damaged) = read_entries(&bytes).map_err(|e: LedgerError| CliError::Ledger(e.to_string()))?;
    let chain = match (verify_entries(&entries), damaged) {
        (VerifyResult::Ok { .. }, Some(i)) => VerifyResult::Broken { first_bad_seq: i },
        (r, _) => r,
    };
    if let VerifyResult::Broken { first_bad_seq } = chain {
        println!("BROKEN at entry {first_bad_seq} ({} readable entries)", entries.len());
        return Err(CliError::Ledger(format!("ledger chain broken at entry {first_bad_seq}")));
    }
    println!("OK {} entries", entries.len());
    let sibling = file.parent().map(|d| d.join(ATTESTATION_FILE)).filter(|p| p.exists());
    let Some(att_path) = attestation.map(Path::to_path_buf).or(sibling) else { return Ok(()) };
    let text = std::fs::read_to_string(&att_path).map_err(|e| CliError::Other(format!("{}: {e}", att_path.display())))?;
    let att: Attestation =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", att_path.display())))?;
    if verify_attestation(key.as_bytes(), &att, &entries) {
        println!("attestation OK at entry {}", att.head_seq);
        Ok(())
    } else {
        println!("attestation FAILED (head entry {}, {} entries present)", att.head_seq, entries.len());
        Err(CliError::Ledger("attestation does not match the ledger".into()))
    }
}

fn report(dir: &Path) -> Result<(), CliError> {
    let r = load_report(dir).map_err(|e| CliError::Other(e.to_string()))?;
    print!("{}", summarize(&r));
    let ledger = dir.join(LEDGER_FILE);
    if ledger.exists() {
        let bytes = std::fs::read(&ledger).map_err(|e| CliError::Other(format!("{}: {e}", ledger.display())))?;
        let result = govsim_core::ledger::verify_bytes(&bytes).map_err(|e| CliError::Ledger(e.to_string()))?;
        match result {
            VerifyResult::Ok { entries } if entries == r.ledger_entries => println!("ledger check  OK"),
            VerifyResult::Ok { entries } => {
                println!("ledger check  FAILED: {entries} entries on disk, report says {}", r.ledger_entries);
                return Err(CliError::Ledger("ledger does not match the report".into()));
            }
            VerifyResult::Broken { first_bad_seq } => {
                println!("ledger check  BROKEN at entry {first_bad_seq}");
                return Err(CliError::Ledger(format!("ledger chain broken at entry {first_bad_seq}")));
            }
        }
    }
    Ok(())
}
