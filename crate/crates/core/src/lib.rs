//! Deterministic limit-order-book market simulator with layered governance
//! of autonomous trading agents.

pub mod agents;
pub mod book;
pub mod calibrate;
pub mod canonical;
pub mod engine;
pub mod firm;
pub mod ledger;
pub mod policy;
pub mod regulator;
pub mod report;
pub mod scenario;
pub mod selfreg;
pub mod sim;

pub use book::{AgentId, BookError, BookSnapshot, FirmId, Order, OrderBook, OrderId, OrderKind, Price, Qty, Side, TapeRecord, Trade};
pub use ledger::{Attestation, Ledger, LedgerEntry, LedgerError, LedgerHead, VerifyResult};
pub use policy::{FilterMode, PolicyDoc, PolicyError};
pub use regulator::{AuditFlag, FlagKind, FlagStatus, MetricsReport, Regulator, RegulatorError};
pub use selfreg::{ControlAction, ControlDecision, DecisionSource, Disposition, TelemetryRecord};
pub use sim::{Kernel, SimTime};
pub use calibrate::{Calibration, CalibrationError, CalibrationSet};
pub use engine::{run_scenario, Command, CommandError, Engine, EngineError, RunOptions, RunOutput, RunReport, StateView, StreamEvent};
pub use scenario::{Scenario, ScenarioError};
