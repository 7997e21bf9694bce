//! The layered run loop: market, agents, the four governance layers and the
//! ledger, advanced one step at a time.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::{
    learner_intents, market_maker_act, ql_act, ql_update, spoofer_act, zi_act, AgentKind, AgentKindTag, AgentSpec,
    FundamentalProcess, LearnerAction, LearnerState, MarketMakerParams, OrderIntent, QLearnerParams, QTable,
    QuoteBook, SpoofRole, SpooferFsm, ZiParams,
};
use crate::book::{AgentId, BookSnapshot, FirmId, Order, OrderBook, OrderId, OrderKind, Price, Qty, Side, TapeRecord};
use crate::calibrate::Calibration;
use crate::canonical;
use crate::firm::{
    aggregate, correlate_agents, decide, evaluate_policy, step_series, AgentStatus, AgentWindowInfo, FirmAggregate,
    PendingQueue, PolicyAction, PolicySlot,
};
use crate::ledger::{Attestation, Ledger, LedgerError};
use crate::policy::{FilterMode, PolicyAutonomy, PolicyDoc, PolicyError};
use crate::regulator::{
    AuditFlag, FlagStatus, MetricsReport, QualityAccumulator, Regulator, RegulatorConfig, RegulatorError,
    ReviewVerdict,
};
use crate::scenario::{Approver, Scenario, ScenarioError};
use crate::selfreg::{
    evaluate_window, filter_action, ActionKind, ControlAction, ControlDecision, DecisionSource, DetectionVerdict,
    DetectorParams, Disposition, FeatureParams, Outcome, TelemetryRecord,
};
use crate::sim::{EventKind, Kernel, RngStream, SimTime};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("invalid initial policy: {0}")]
    Policy(#[from] PolicyError),
}

/// Operator command, applied at the next step boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Quarantine { subject: AgentId },
    Unquarantine { subject: AgentId },
    Throttle { subject: AgentId, rate: u32 },
    ApprovePending { decision_id: u64, approve: bool },
    /// Quarantine (or, with `release`, unquarantine) every agent of a firm.
    CircuitBreaker { firm_id: FirmId, release: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown firm {0}")]
    UnknownFirm(FirmId),
    #[error("no pending decision {0}")]
    UnknownPending(u64),
    #[error("throttle rate must be at least 1")]
    InvalidRate,
    #[error("the run has finished")]
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Wake { agent: AgentId },
    Timeout { agent: AgentId, order_id: OrderId },
    Shock { delta: f64 },
    Window,
    Command { command: Command },
}

/// What the service fans out to stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    Telemetry { record: TelemetryRecord },
    Verdict { verdict: DetectionVerdict },
    Decision { decision: ControlDecision },
    Flag { flag: AuditFlag },
    PolicyChanged { firm_id: FirmId, version: u64 },
    Step { step: u64, mid: Option<f64>, fundamental: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario's master seed.
    pub seed: Option<u64>,
    pub calibration: Option<Calibration>,
    /// Write the ledger ahead to this file instead of memory.
    pub ledger_path: Option<PathBuf>,
    pub trace: bool,
    /// Collect [`StreamEvent`]s for each step.
    pub emit_events: bool,
    /// Replace the scenario's scripted approver.
    pub approver: Option<Approver>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window_end: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerCounts {
    pub verdicts: u64,
    pub flagged_verdicts: u64,
    /// Keyed `source/action/disposition`.
    pub decisions: BTreeMap<String, u64>,
    pub blocked_orders: u64,
    pub flags: BTreeMap<String, u64>,
    pub pending_open: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent_id: AgentId,
    pub firm_id: FirmId,
    pub kind: AgentKindTag,
    pub cash: i64,
    pub inventory: i64,
    pub wealth: f64,
    pub submitted: u64,
    pub accepted: u64,
    pub blocked: u64,
    pub rejected: u64,
    pub max_score: f64,
    pub flagged_windows: u64,
    pub quarantined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub steps: u64,
    pub calibration_hash: String,
    pub metrics: MetricsReport,
    pub windows: Vec<WindowReport>,
    pub counts: LayerCounts,
    pub agents: Vec<AgentSummary>,
    pub firm_windows: BTreeMap<FirmId, Vec<u64>>,
    pub policy_versions: BTreeMap<FirmId, u64>,
    pub trades: u64,
    pub traded_qty: u64,
    pub ledger_head: String,
    pub ledger_entries: u64,
}

/// End-of-step market series, index 0 = step 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketSeries {
    pub mids: Vec<Option<f64>>,
    pub fundamentals: Vec<f64>,
    pub shock_steps: Vec<u64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub telemetry: Vec<TelemetryRecord>,
    pub tape: Vec<TapeRecord>,
    pub verdicts: Vec<DetectionVerdict>,
    pub decisions: Vec<ControlDecision>,
    pub flags: Vec<AuditFlag>,
    pub aggregates: Vec<FirmAggregate>,
    pub series: MarketSeries,
    pub ledger: Ledger,
    pub attestation: Option<Attestation>,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentView {
    pub agent_id: AgentId,
    pub firm_id: FirmId,
    pub kind: AgentKindTag,
    pub status: AgentStatus,
    pub last_score: f64,
    pub inventory: i64,
    pub cash: i64,
    /// Orders of this agent resting on the book.
    pub resting: usize,
}

/// Snapshot served at `/state`.
#[derive(Debug, Clone, Serialize)]
pub struct StateView {
    pub step: u64,
    pub finished: bool,
    pub book: BookSnapshot,
    pub fundamental: f64,
    pub agents: Vec<AgentView>,
    pub policy_versions: BTreeMap<FirmId, u64>,
    pub pending: Vec<ControlDecision>,
    pub open_flags: usize,
    pub ledger_entries: usize,
}

struct LearnerRt {
    params: QLearnerParams,
    q: QTable,
    last: Option<(LearnerState, LearnerAction)>,
    wealth_prev: f64,
    penalty: f64,
}

enum Brain {
    Zi(ZiParams),
    Mm(MarketMakerParams, QuoteBook),
    Spoofer(Box<SpooferFsm>),
    Learner(Box<LearnerRt>),
}

#[derive(Default)]
struct AgentStats {
    submitted: u64,
    accepted: u64,
    blocked: u64,
    rejected: u64,
    max_score: f64,
    flagged_windows: u64,
}

struct AgentRt {
    spec: AgentSpec,
    tag: AgentKindTag,
    rng: RngStream,
    brain: Brain,
    cash: i64,
    inventory: i64,
    window: VecDeque<TelemetryRecord>,
    status: AgentStatus,
    placed_this_step: u32,
    last_score: f64,
    stats: AgentStats,
    /// (window_end, wealth) at recent window closes.
    marks: VecDeque<(u64, f64)>,
}

struct FirmRt {
    slot: PolicySlot,
    agents: Vec<AgentId>,
    resolve: BTreeMap<String, AgentId>,
    windows: Vec<u64>,
}

#[derive(Clone, Copy)]
struct OrderMeta {
    qty: Qty,
    placed_step: u64,
}

pub struct Engine {
    scenario: Scenario,
    seed: u64,
    calibration: Calibration,
    calibration_hash: String,
    scenario_hash: String,
    approver: Approver,
    kernel: Kernel<Payload>,
    fundamental_rng: RngStream,
    fundamental: crate::agents::FundamentalProcess,
    book: OrderBook,
    agents: Vec<AgentRt>,
    index: BTreeMap<AgentId, usize>,
    firms: BTreeMap<FirmId, FirmRt>,
    regulator: Option<Regulator>,
    regulator_config: RegulatorConfig,
    ledger: Ledger,
    meta: HashMap<OrderId, OrderMeta>,
    next_order_id: OrderId,
    next_decision_id: u64,
    pending: PendingQueue,
    pending_since: BTreeMap<u64, u64>,
    commands: VecDeque<Command>,
    telemetry: Vec<TelemetryRecord>,
    tape: Vec<TapeRecord>,
    verdicts: Vec<DetectionVerdict>,
    decisions: Vec<ControlDecision>,
    aggregates: Vec<FirmAggregate>,
    placements: VecDeque<(u64, Qty)>,
    large_qty: Qty,
    quality_total: QualityAccumulator,
    quality_window: QualityAccumulator,
    window_reports: Vec<WindowReport>,
    series: MarketSeries,
    shock_this_step: bool,
    last_trade: Option<Price>,
    step: u64,
    emit: bool,
    events: Vec<StreamEvent>,
    ledger_failure: Option<String>,
}

impl Engine {
    pub fn new(mut scenario: Scenario, opts: RunOptions) -> Result<Self, EngineError> {
        scenario.validate()?;
        if let Some(seed) = opts.seed {
            scenario.master_seed = seed;
        }
        let seed = scenario.master_seed;
        let calibration = opts.calibration.unwrap_or_default();
        let global = scenario.policies.iter().find(|p| p.firm_id.is_none());
        let mut firms = BTreeMap::new();
        for f in &scenario.firms {
            let template = scenario.policies.iter().find(|p| p.firm_id == Some(f.firm_id)).or(global);
            let doc = template.expect("validated: every firm has a policy").resolve(&calibration);
            doc.validate()?;
            let agents: Vec<AgentId> = f.agents.iter().map(|a| a.agent_id).collect();
            let resolve =
                agents.iter().map(|&a| (crate::firm::pseudonym(seed, f.firm_id, a), a)).collect::<BTreeMap<_, _>>();
            firms.insert(f.firm_id, FirmRt { slot: PolicySlot::new(doc), agents, resolve, windows: Vec::new() });
        }
        let mut agents = Vec::new();
        let mut index = BTreeMap::new();
        for spec in scenario.agent_specs() {
            let brain = match &spec.kind {
                AgentKind::Zi(p) => Brain::Zi(p.clone()),
                AgentKind::MarketMaker(p) => Brain::Mm(p.clone(), QuoteBook::default()),
                AgentKind::ScriptedSpoofer(p) => Brain::Spoofer(Box::new(SpooferFsm::new(p.clone(), SpoofRole::Full))),
                AgentKind::ColluderInjector(p) => {
                    Brain::Spoofer(Box::new(SpooferFsm::new(p.clone(), SpoofRole::InjectOnly)))
                }
                AgentKind::ColluderExploiter(p) => {
                    Brain::Spoofer(Box::new(SpooferFsm::new(p.clone(), SpoofRole::ExploitOnly)))
                }
                AgentKind::QLearner(p) => Brain::Learner(Box::new(LearnerRt {
                    params: p.clone(),
                    q: QTable::default(),
                    last: None,
                    wealth_prev: 0.0,
                    penalty: 0.0,
                })),
            };
            index.insert(spec.agent_id, agents.len());
            agents.push(AgentRt {
                tag: spec.kind.tag(),
                rng: RngStream::new(seed, &format!("agent/{}", spec.agent_id)),
                brain,
                cash: 0,
                inventory: 0,
                window: VecDeque::new(),
                status: AgentStatus::default(),
                placed_this_step: 0,
                last_score: 0.0,
                stats: AgentStats::default(),
                marks: VecDeque::new(),
                spec,
            });
        }
        let regulator_config = scenario.regulator.resolve(&calibration);
        let regulator = scenario
            .governance
            .regulator
            .then(|| Regulator::new(regulator_config.clone(), firms.keys().copied()));
        let ledger = match &opts.ledger_path {
            Some(p) => Ledger::create(p)?,
            None => Ledger::in_memory(),
        };
        let mut kernel = Kernel::new();
        if opts.trace {
            kernel = kernel.with_trace();
        }
        for shock in &scenario.fundamental.shocks {
            if shock.step >= 1 && shock.step <= scenario.steps {
                kernel
                    .schedule(EventKind::FundamentalShock, shock.step, Payload::Shock { delta: shock.delta })
                    .expect("shock steps are in the future");
            }
        }
        let fundamental = FundamentalProcess::new(&scenario.fundamental);
        let approver = opts.approver.unwrap_or(scenario.approver);
        Ok(Self {
            calibration_hash: calibration.content_hash(),
            scenario_hash: scenario.hash(),
            seed,
            calibration,
            approver,
            kernel,
            fundamental_rng: RngStream::new(seed, "fundamental"),
            fundamental,
            book: OrderBook::new(),
            agents,
            index,
            firms,
            regulator,
            regulator_config,
            ledger,
            meta: HashMap::new(),
            next_order_id: 1,
            next_decision_id: 1,
            pending: PendingQueue::default(),
            pending_since: BTreeMap::new(),
            commands: VecDeque::new(),
            telemetry: Vec::new(),
            tape: Vec::new(),
            verdicts: Vec::new(),
            decisions: Vec::new(),
            aggregates: Vec::new(),
            placements: VecDeque::new(),
            large_qty: Qty::MAX,
            quality_total: QualityAccumulator::new(1),
            quality_window: QualityAccumulator::new(1),
            window_reports: Vec::new(),
            series: MarketSeries::default(),
            shock_this_step: false,
            last_trade: None,
            step: 0,
            emit: opts.emit_events,
            events: Vec::new(),
            ledger_failure: None,
            scenario,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Last completed step.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.scenario.steps
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn flags(&self) -> Vec<AuditFlag> {
        self.regulator.as_ref().map(|r| r.flags().to_vec()).unwrap_or_default()
    }

    pub fn pending(&self) -> &[ControlDecision] {
        self.pending.items()
    }

    pub fn policy_in_force(&self, firm: FirmId) -> Option<&PolicyDoc> {
        self.firms.get(&firm).map(|f| f.slot.in_force())
    }

    pub fn state(&self) -> StateView {
        StateView {
            step: self.step,
            finished: self.is_finished(),
            book: self.book.snapshot(self.scenario.windows.book_depth, self.kernel.now()),
            fundamental: self.fundamental.value,
            agents: self
                .agents
                .iter()
                .map(|a| AgentView {
                    agent_id: a.spec.agent_id,
                    firm_id: a.spec.firm_id,
                    kind: a.tag,
                    status: a.status,
                    last_score: a.last_score,
                    inventory: a.inventory,
                    cash: a.cash,
                    resting: self.book.resting_ids_of(a.spec.agent_id).len(),
                })
                .collect(),
            policy_versions: self.firms.iter().map(|(id, f)| (*id, f.slot.in_force().version)).collect(),
            pending: self.pending.items().to_vec(),
            open_flags: self.flags().iter().filter(|f| !f.status.is_terminal()).count(),
            ledger_entries: self.ledger.len(),
        }
    }

    /// Validate and queue an operator command for the next step boundary.
    pub fn enqueue(&mut self, cmd: Command) -> Result<(), CommandError> {
        if self.is_finished() {
            return Err(CommandError::Finished);
        }
        match &cmd {
            Command::Quarantine { subject } | Command::Unquarantine { subject } => {
                self.index.get(subject).ok_or(CommandError::UnknownAgent(*subject))?;
            }
            Command::Throttle { subject, rate } => {
                self.index.get(subject).ok_or(CommandError::UnknownAgent(*subject))?;
                if *rate == 0 {
                    return Err(CommandError::InvalidRate);
                }
            }
            Command::ApprovePending { decision_id, .. } => {
                if !self.pending.items().iter().any(|d| d.id == *decision_id) {
                    return Err(CommandError::UnknownPending(*decision_id));
                }
            }
            Command::CircuitBreaker { firm_id, .. } => {
                self.firms.get(firm_id).ok_or(CommandError::UnknownFirm(*firm_id))?;
            }
        }
        self.commands.push_back(cmd);
        Ok(())
    }

    /// Stage a policy document for its target firms at the next boundary.
    pub fn submit_policy(&mut self, doc: PolicyDoc, source: DecisionSource) -> Result<u64, PolicyError> {
        let targets: Vec<FirmId> = match doc.firm_id {
            None => self.firms.keys().copied().collect(),
            Some(f) if self.firms.contains_key(&f) => vec![f],
            Some(f) => return Err(PolicyError::Invalid(format!("unknown firm {f}"))),
        };
        for t in &targets {
            self.firms[t].slot.check(&doc)?;
        }
        if source == DecisionSource::ExternalReg {
            if let Some(reg) = self.regulator.as_mut() {
                reg.publish_policy(&doc).map_err(|e| match e {
                    RegulatorError::StaleVersion { offered, current } => PolicyError::StaleVersion { offered, current },
                    other => PolicyError::Invalid(other.to_string()),
                })?;
            }
        }
        for t in &targets {
            self.firms.get_mut(t).expect("checked").slot.update_policy(doc.clone())?;
        }
        let kind = match source {
            DecisionSource::ExternalReg => "regulator.policy_published",
            _ => "human.policy_submitted",
        };
        #[derive(Serialize)]
        struct Published<'a> {
            source: DecisionSource,
            targets: &'a [FirmId],
            content_hash: String,
            policy: &'a PolicyDoc,
        }
        let at = self.kernel.now();
        self.log(at, kind, &Published { source, targets: &targets, content_hash: doc.content_hash(), policy: &doc });
        Ok(doc.version)
    }

    pub fn review_flag(
        &mut self,
        flag_id: u64,
        verdict: ReviewVerdict,
        note: &str,
        source: DecisionSource,
    ) -> Result<AuditFlag, RegulatorError> {
        let reg = self.regulator.as_mut().ok_or(RegulatorError::UnknownFlag(flag_id))?;
        let flag = reg.review_flag(flag_id, verdict, note, source)?;
        let at = self.kernel.now();
        self.log(at, "regulator.flag_transition", &flag);
        if self.emit {
            self.events.push(StreamEvent::Flag { flag: flag.clone() });
        }
        Ok(flag)
    }

    /// Advance one step. Returns the stream events it produced.
    pub fn step_once(&mut self) -> Vec<StreamEvent> {
        if self.is_finished() {
            return Vec::new();
        }
        let s = self.step + 1;
        self.begin_step(s);
        let mut kernel = std::mem::take(&mut self.kernel);
        kernel.run_until(s, |k, ev| self.handle(k, ev.at, ev.payload));
        self.kernel = kernel;
        self.end_step(s);
        std::mem::take(&mut self.events)
    }

    /// Events produced outside a step, e.g. by a flag review.
    pub fn drain_events(&mut self) -> Vec<StreamEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn run_to_end(&mut self) {
        while !self.is_finished() {
            self.step_once();
        }
    }

    pub fn finish(mut self) -> Result<RunOutput, EngineError> {
        self.run_to_end();
        if let Some(msg) = self.ledger_failure.take() {
            return Err(EngineError::Ledger(LedgerError::Malformed(msg)));
        }
        self.ledger.flush()?;
        let attestation = self.ledger.attest(self.scenario.auditor_key.as_bytes(), self.kernel.now());
        let report = self.report();
        let flags = self.flags();
        let trace = self.kernel.trace_lines().to_vec();
        Ok(RunOutput {
            report,
            telemetry: self.telemetry,
            tape: self.tape,
            verdicts: self.verdicts,
            decisions: self.decisions,
            flags,
            aggregates: self.aggregates,
            series: self.series,
            ledger: self.ledger,
            attestation,
            trace,
        })
    }

    fn begin_step(&mut self, s: u64) {
        let w = self.scenario.windows.window;
        let cutoff = s.saturating_sub(w);
        for a in &mut self.agents {
            while a.window.front().is_some_and(|r| r.at.step <= cutoff) {
                a.window.pop_front();
            }
            a.placed_this_step = 0;
        }
        while self.placements.front().is_some_and(|(st, _)| *st <= cutoff) {
            self.placements.pop_front();
        }
        self.large_qty = self.large_threshold();

        let at = SimTime::new(s, 0);
        let mut changed = Vec::new();
        for (id, f) in &mut self.firms {
            if let Some(doc) = f.slot.on_boundary() {
                changed.push((*id, doc.version, doc.content_hash()));
            }
        }
        for (firm_id, version, content_hash) in changed {
            #[derive(Serialize)]
            struct Changed {
                firm_id: FirmId,
                version: u64,
                content_hash: String,
            }
            self.log(at, "firm.policy_changed", &Changed { firm_id, version, content_hash });
            if self.emit {
                self.events.push(StreamEvent::PolicyChanged { firm_id, version });
            }
        }
        if self.regulator.is_some() {
            let due: Vec<PolicyDoc> = self
                .scenario
                .publications
                .iter()
                .filter(|p| p.step == s)
                .map(|p| p.policy.resolve(&self.calibration))
                .collect();
            for doc in due {
                if let Err(e) = self.submit_policy(doc.clone(), DecisionSource::ExternalReg) {
                    #[derive(Serialize)]
                    struct Rejected {
                        version: u64,
                        error: String,
                    }
                    self.log(at, "regulator.policy_rejected", &Rejected { version: doc.version, error: e.to_string() });
                }
            }
        }
        self.run_approver(s);

        while let Some(command) = self.commands.pop_front() {
            self.kernel
                .schedule(EventKind::ControlCommand, s, Payload::Command { command })
                .expect("boundary is not in the past");
        }
        self.fundamental.step(&mut self.fundamental_rng);
        for i in 0..self.agents.len() {
            let a = &mut self.agents[i];
            let wake = match &a.brain {
                Brain::Zi(p) => {
                    use rand::Rng;
                    a.rng.random::<f64>() < p.wake_probability()
                }
                _ => true,
            };
            if wake {
                let agent = a.spec.agent_id;
                self.kernel.schedule(EventKind::AgentWake, s, Payload::Wake { agent }).expect("current step");
            }
        }
        if s.is_multiple_of(self.scenario.windows.eval_every) {
            self.kernel.schedule(EventKind::WindowClose, s, Payload::Window).expect("current step");
        }
    }

    fn large_threshold(&self) -> Qty {
        if self.placements.is_empty() {
            return Qty::MAX;
        }
        let mut q: Vec<Qty> = self.placements.iter().map(|(_, q)| *q).collect();
        q.sort_unstable();
        let n = q.len();
        let median = if n % 2 == 1 { q[n / 2] as f64 } else { (q[n / 2 - 1] + q[n / 2]) as f64 / 2.0 };
        ((self.scenario.windows.large_multiple * median).ceil() as Qty).max(1)
    }

    fn run_approver(&mut self, s: u64) {
        let due: Vec<(u64, bool)> = self
            .pending
            .items()
            .iter()
            .filter_map(|d| {
                let since = self.pending_since.get(&d.id).copied().unwrap_or(s);
                match self.approver {
                    Approver::Manual => None,
                    Approver::ApproveAll => Some((d.id, true)),
                    Approver::RejectAll => Some((d.id, false)),
                    Approver::ApproveAfter { k } => (s.saturating_sub(since) >= k).then_some((d.id, true)),
                }
            })
            .collect();
        let at = SimTime::new(s, 0);
        for (id, approve) in due {
            self.resolve_pending(at, id, approve);
        }
    }

    fn end_step(&mut self, s: u64) {
        let mid = self.book_mid_x2().map(|m| m as f64 / 2.0);
        let fund = self.fundamental.value;
        let shock = std::mem::take(&mut self.shock_this_step);
        self.quality_total.push_step(s, mid, fund, shock);
        self.quality_window.push_step(s, mid, fund, shock);
        self.series.mids.push(mid);
        self.series.fundamentals.push(fund);
        if shock {
            self.series.shock_steps.push(s);
        }
        debug_assert!(!self.book.is_crossed(), "book crossed after step {s}");
        if s.is_multiple_of(self.scenario.windows.eval_every) {
            self.close_quality(s);
        }

        let mark = self.mark_price();
        let depth = self.scenario.windows.book_depth;
        let snap = self.book.snapshot(depth, SimTime::new(s, 0));
        for a in &mut self.agents {
            let wealth = a.cash as f64 + a.inventory as f64 * mark;
            if let Brain::Learner(l) = &mut a.brain {
                let reward = wealth - l.wealth_prev - l.penalty;
                if let Some((st, act)) = l.last.take() {
                    let next = LearnerState::observe(a.inventory, &snap, &l.params);
                    ql_update(&mut l.q, st, act, reward, next, l.params.alpha, l.params.gamma);
                }
                l.wealth_prev = wealth;
                l.penalty = 0.0;
            }
        }
        self.step = s;
        if self.emit {
            self.events.push(StreamEvent::Step { step: s, mid, fundamental: fund });
        }
    }

    fn book_mid_x2(&self) -> Option<i64> {
        Some(self.book.best_bid()? + self.book.best_ask()?)
    }

    /// Mark-to-market price: mid, else last trade, else fundamental.
    fn mark_price(&self) -> f64 {
        match (self.book_mid_x2(), self.last_trade) {
            (Some(m), _) => m as f64 / 2.0,
            (None, Some(p)) => p as f64,
            (None, None) => self.fundamental.value,
        }
    }

    fn log<T: Serialize>(&mut self, at: SimTime, kind: &str, value: &T) {
        if self.ledger_failure.is_some() {
            return;
        }
        if let Err(e) = self.ledger.append_json(at, kind, value) {
            self.ledger_failure = Some(e.to_string());
        }
    }

    fn handle(&mut self, k: &mut Kernel<Payload>, at: SimTime, payload: Payload) {
        match payload {
            Payload::Wake { agent } => self.wake(k, at, agent),
            Payload::Timeout { agent, order_id } => {
                let live = self.book.order(order_id).is_some_and(|o| o.agent_id == agent);
                if live {
                    let idx = self.index[&agent];
                    self.act(k, at, idx, OrderIntent::Cancel { order_id });
                }
            }
            Payload::Shock { delta } => {
                self.fundamental.shock(delta);
                self.shock_this_step = true;
            }
            Payload::Window => self.close_window(at),
            Payload::Command { command } => self.apply_command(at, command),
        }
    }

    fn wake(&mut self, k: &mut Kernel<Payload>, at: SimTime, agent: AgentId) {
        let idx = self.index[&agent];
        let snap = self.book.snapshot(self.scenario.windows.book_depth, at);
        let fund = self.fundamental.value;
        let book = &self.book;
        let a = &mut self.agents[idx];
        let intents = match &mut a.brain {
            Brain::Zi(p) => zi_act(p, &snap, fund, &mut a.rng),
            Brain::Mm(p, quotes) => market_maker_act(p, &snap, fund, quotes, &|id| book.is_resting(id)),
            Brain::Spoofer(fsm) => spoofer_act(fsm, &snap, at.step).unwrap_or_default(),
            Brain::Learner(l) => {
                let st = LearnerState::observe(a.inventory, &snap, &l.params);
                let eps = l.params.epsilon_at(at.step);
                let action = ql_act(&l.q, st, eps, &mut a.rng);
                l.last = Some((st, action));
                let own = book.resting_ids_of(agent);
                learner_intents(action, &snap, fund, &l.params, &own)
            }
        };
        for intent in intents {
            let placed = self.act(k, at, idx, intent.clone());
            let (Some((id, true)), OrderIntent::Place { side, price: Some(price), .. }) = (placed, &intent) else {
                continue;
            };
            match &mut self.agents[idx].brain {
                Brain::Mm(_, quotes) => quotes.set(*side, id, *price),
                Brain::Spoofer(fsm) => fsm.register_fake(id),
                _ => {}
            }
        }
    }

    fn record(&mut self, idx: usize, mut rec: TelemetryRecord) {
        let a = &mut self.agents[idx];
        rec.score = a.last_score;
        a.window.push_back(rec.clone());
        if self.emit {
            self.events.push(StreamEvent::Telemetry { record: rec.clone() });
        }
        self.telemetry.push(rec);
    }

    fn base_record(&self, at: SimTime, idx: usize, action: ActionKind, outcome: Outcome) -> TelemetryRecord {
        let a = &self.agents[idx];
        TelemetryRecord {
            at,
            agent_id: a.spec.agent_id,
            firm_id: a.spec.firm_id,
            action,
            outcome,
            order_id: None,
            side: None,
            price: None,
            order_kind: None,
            qty: 0,
            cancelled_qty: 0,
            placed_step: None,
            trades: 0,
            traded_qty: 0,
            score: 0.0,
            tag: None,
        }
    }

    /// Route one intent through self-regulation and, if allowed, the book.
    /// Returns `(order_id, rests)` for accepted placements.
    fn act(&mut self, k: &mut Kernel<Payload>, at: SimTime, idx: usize, intent: OrderIntent) -> Option<(OrderId, bool)> {
        let (agent_id, firm_id, tag) = {
            let a = &self.agents[idx];
            (a.spec.agent_id, a.spec.firm_id, a.tag)
        };
        let policy = self.firms[&firm_id].slot.in_force();
        let mode = if self.scenario.governance.self_reg { policy.filter_mode(tag) } else { FilterMode::Off };
        let detector = DetectorParams {
            weights: self.calibration.weights,
            features: FeatureParams {
                large_qty: self.large_qty,
                short_lifetime_steps: self.scenario.windows.short_lifetime_steps,
            },
        };
        let a = &mut self.agents[idx];
        let window: &[TelemetryRecord] = a.window.make_contiguous();
        let mut outcome = filter_action(
            &intent,
            window,
            at,
            (agent_id, firm_id),
            policy,
            mode,
            a.status.quarantined,
            &detector,
        )
        .expect("windows hold one agent and weights are validated");
        if let (OrderIntent::Place { .. }, Some(rate)) = (&intent, a.status.throttle) {
            if outcome.action == ControlAction::Allow && a.placed_this_step >= rate {
                outcome.action = ControlAction::Block;
                outcome.reason = format!("throttled to {rate} orders per step");
            }
        }
        let policy_version = policy.version;
        if let Brain::Learner(l) = &mut a.brain {
            l.penalty += outcome.penalty;
        }
        if intent.is_place() {
            a.stats.submitted += 1;
        }

        match intent {
            OrderIntent::Place { side, price, qty, kind, tag } => {
                if outcome.action == ControlAction::Block {
                    a.stats.blocked += 1;
                    let mut rec = self.base_record(at, idx, ActionKind::Submit, Outcome::Blocked);
                    rec.side = Some(side);
                    rec.price = price;
                    rec.order_kind = Some(kind);
                    rec.qty = qty;
                    rec.tag = Some(tag);
                    self.record(idx, rec);
                    let d = ControlDecision {
                        id: self.take_decision_id(),
                        at,
                        source: DecisionSource::SelfReg,
                        subject: agent_id,
                        action: ControlAction::Block,
                        reason: outcome.reason,
                        policy_version,
                        disposition: Disposition::Applied,
                        rate: None,
                        resolves: None,
                    };
                    self.log_decision(d);
                    return None;
                }
                self.place(k, at, idx, side, price, qty, kind, tag)
            }
            OrderIntent::Cancel { order_id } => {
                let owned = self.book.order(order_id).filter(|o| o.agent_id == agent_id).cloned();
                let mut rec = self.base_record(at, idx, ActionKind::Cancel, Outcome::Rejected);
                rec.order_id = Some(order_id);
                match owned {
                    Some(o) => {
                        let cancelled = self.book.cancel(order_id).expect("resting order");
                        let meta = self.meta.remove(&order_id);
                        rec.outcome = Outcome::Accepted;
                        rec.side = Some(o.side);
                        rec.price = o.price;
                        rec.order_kind = Some(o.kind);
                        rec.qty = o.qty;
                        rec.cancelled_qty = cancelled;
                        rec.placed_step = meta.map(|m| m.placed_step).or(Some(o.placed_at.step));
                    }
                    None => self.agents[idx].stats.rejected += 1,
                }
                self.record(idx, rec);
                None
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn place(
        &mut self,
        k: &mut Kernel<Payload>,
        at: SimTime,
        idx: usize,
        side: Side,
        price: Option<Price>,
        qty: Qty,
        kind: OrderKind,
        tag: crate::agents::IntentTag,
    ) -> Option<(OrderId, bool)> {
        let (agent_id, firm_id) = (self.agents[idx].spec.agent_id, self.agents[idx].spec.firm_id);
        let id = self.next_order_id;
        self.next_order_id += 1;
        let order = match (kind, price) {
            (OrderKind::Limit, Some(p)) => Order::limit(id, agent_id, side, p, qty),
            (OrderKind::Limit, None) | (OrderKind::Market, _) => Order::market(id, agent_id, side, qty),
        }
        .with_firm(firm_id)
        .at(at);
        let mid_before = self.book_mid_x2();
        let mut rec = self.base_record(at, idx, ActionKind::Submit, Outcome::Accepted);
        rec.order_id = Some(id);
        rec.side = Some(side);
        rec.price = price;
        rec.order_kind = Some(kind);
        rec.qty = qty;
        rec.placed_step = Some(at.step);
        rec.tag = Some(tag);
        let out = match self.book.submit(order) {
            Ok(out) => out,
            Err(_) => {
                rec.outcome = Outcome::Rejected;
                self.agents[idx].stats.rejected += 1;
                self.record(idx, rec);
                return None;
            }
        };
        self.agents[idx].stats.accepted += 1;
        self.agents[idx].placed_this_step += 1;
        if kind == OrderKind::Limit {
            self.placements.push_back((at.step, qty));
        }
        let mut traded = 0;
        let mut fills = Vec::new();
        for t in &out.trades {
            traded += t.qty;
            let notional = t.price * t.qty as i64;
            let b = self.index[&t.buy_agent_id];
            self.agents[b].cash -= notional;
            self.agents[b].inventory += t.qty as i64;
            let sl = self.index[&t.sell_agent_id];
            self.agents[sl].cash += notional;
            self.agents[sl].inventory -= t.qty as i64;
            let tape = TapeRecord::from_trade(t, mid_before);
            self.quality_total.push_trade(&tape);
            self.quality_window.push_trade(&tape);
            self.tape.push(tape);
            self.last_trade = Some(t.price);
            let (pid, pagent, pside) = match t.aggressor_side {
                Side::Buy => (t.sell_order_id, t.sell_agent_id, Side::Sell),
                Side::Sell => (t.buy_order_id, t.buy_agent_id, Side::Buy),
            };
            fills.push((pid, pagent, pside, t.price, t.qty));
        }
        rec.trades = out.trades.len() as u32;
        rec.traded_qty = traded;
        self.record(idx, rec);
        for (pid, pagent, pside, price, q) in fills {
            let pidx = self.index[&pagent];
            let meta = self.meta.get(&pid).copied();
            let still_resting = self.book.is_resting(pid);
            let mut f = self.base_record(at, pidx, ActionKind::Fill, Outcome::Accepted);
            f.order_id = Some(pid);
            f.side = Some(pside);
            f.price = Some(price);
            f.order_kind = Some(OrderKind::Limit);
            f.qty = meta.map_or(q, |m| m.qty);
            f.placed_step = meta.map(|m| m.placed_step);
            f.trades = 1;
            f.traded_qty = q;
            self.record(pidx, f);
            if !still_resting {
                self.meta.remove(&pid);
                if let Brain::Spoofer(fsm) = &mut self.agents[pidx].brain {
                    fsm.forget_fake(pid);
                }
            }
        }
        if out.resting {
            self.meta.insert(id, OrderMeta { qty, placed_step: at.step });
            let lifetime = match &self.agents[idx].brain {
                Brain::Zi(p) => Some(p.order_lifetime),
                Brain::Learner(l) => Some(l.params.order_lifetime),
                _ => None,
            };
            if let Some(life) = lifetime {
                k.schedule(EventKind::CancelTimeout, at.step + life, Payload::Timeout { agent: agent_id, order_id: id })
                    .expect("timeouts are in the future");
            }
        }
        Some((id, out.resting))
    }

    fn take_decision_id(&mut self) -> u64 {
        let id = self.next_decision_id;
        self.next_decision_id += 1;
        id
    }

    fn log_decision(&mut self, d: ControlDecision) {
        let kind = match d.source {
            DecisionSource::SelfReg => "selfreg.decision",
            DecisionSource::FirmGov => "firm.decision",
            DecisionSource::ExternalReg => "regulator.decision",
            DecisionSource::Human => "human.decision",
        };
        self.log(d.at, kind, &d);
        if self.emit {
            self.events.push(StreamEvent::Decision { decision: d.clone() });
        }
        self.decisions.push(d);
    }

    fn firm_version(&self, agent: AgentId) -> u64 {
        let firm = self.agents[self.index[&agent]].spec.firm_id;
        self.firms[&firm].slot.in_force().version
    }

    /// Automated control request from a governance layer.
    fn propose(&mut self, at: SimTime, source: DecisionSource, req: PolicyAction, needs_approval: bool, version: u64) {
        let st = self.agents[self.index[&req.subject]].status;
        let redundant = match req.action {
            ControlAction::Quarantine => st.quarantined,
            ControlAction::Throttle => st.quarantined || st.throttle.zip(req.rate).is_some_and(|(cur, new)| cur <= new),
            _ => false,
        };
        if redundant || self.pending.contains(req.subject, req.action) {
            return;
        }
        let mut d = ControlDecision {
            id: self.take_decision_id(),
            at,
            source,
            subject: req.subject,
            action: req.action,
            reason: req.reason,
            policy_version: version,
            disposition: Disposition::Applied,
            rate: req.rate,
            resolves: None,
        };
        let held = st.held_by.filter(|h| h.rank() > source.rank());
        if needs_approval || held == Some(DecisionSource::Human) {
            d.disposition = Disposition::PendingApproval;
            self.pending.push(d.clone());
            self.pending_since.insert(d.id, at.step);
        } else if held.is_some() {
            d.disposition = Disposition::Overridden;
        } else {
            self.apply_effect(at, &d);
        }
        self.log_decision(d);
    }

    fn apply_effect(&mut self, at: SimTime, d: &ControlDecision) {
        let idx = self.index[&d.subject];
        let st = &mut self.agents[idx].status;
        if st.held_by.is_none_or(|h| h.rank() <= d.source.rank()) {
            st.held_by = Some(d.source);
        }
        match d.action {
            ControlAction::Quarantine => {
                st.quarantined = true;
                self.force_cancel(at, idx);
            }
            ControlAction::Unquarantine => {
                st.quarantined = false;
                st.throttle = None;
            }
            ControlAction::Throttle => st.throttle = d.rate,
            ControlAction::Allow | ControlAction::Modify | ControlAction::Block => {}
        }
    }

    fn force_cancel(&mut self, at: SimTime, idx: usize) {
        let agent = self.agents[idx].spec.agent_id;
        for id in self.book.resting_ids_of(agent) {
            let o = self.book.order(id).cloned().expect("listed as resting");
            let cancelled = self.book.cancel(id).expect("listed as resting");
            let meta = self.meta.remove(&id);
            let mut rec = self.base_record(at, idx, ActionKind::ForcedCancel, Outcome::Accepted);
            rec.order_id = Some(id);
            rec.side = Some(o.side);
            rec.price = o.price;
            rec.order_kind = Some(o.kind);
            rec.qty = o.qty;
            rec.cancelled_qty = cancelled;
            rec.placed_step = meta.map(|m| m.placed_step);
            self.record(idx, rec);
            if let Brain::Spoofer(fsm) = &mut self.agents[idx].brain {
                fsm.forget_fake(id);
            }
        }
    }

    fn resolve_pending(&mut self, at: SimTime, pending_id: u64, approve: bool) {
        let Some(p) = self.pending.take(pending_id) else { return };
        self.pending_since.remove(&pending_id);
        let d = ControlDecision {
            id: self.take_decision_id(),
            at,
            source: DecisionSource::Human,
            subject: p.subject,
            action: p.action,
            reason: if approve { format!("approved: {}", p.reason) } else { format!("rejected: {}", p.reason) },
            policy_version: self.firm_version(p.subject),
            disposition: if approve { Disposition::Applied } else { Disposition::Rejected },
            rate: p.rate,
            resolves: Some(p.id),
        };
        if approve {
            self.apply_effect(at, &d);
        }
        self.log_decision(d);
    }

    fn human_decision(&mut self, at: SimTime, subject: AgentId, action: ControlAction, rate: Option<u32>, reason: &str) {
        let d = ControlDecision {
            id: self.take_decision_id(),
            at,
            source: DecisionSource::Human,
            subject,
            action,
            reason: reason.to_string(),
            policy_version: self.firm_version(subject),
            disposition: Disposition::Applied,
            rate,
            resolves: None,
        };
        self.apply_effect(at, &d);
        self.log_decision(d);
    }

    fn apply_command(&mut self, at: SimTime, cmd: Command) {
        match cmd {
            Command::Quarantine { subject } => {
                self.human_decision(at, subject, ControlAction::Quarantine, None, "operator quarantine")
            }
            Command::Unquarantine { subject } => {
                self.human_decision(at, subject, ControlAction::Unquarantine, None, "operator release")
            }
            Command::Throttle { subject, rate } => {
                self.human_decision(at, subject, ControlAction::Throttle, Some(rate), "operator throttle")
            }
            Command::ApprovePending { decision_id, approve } => self.resolve_pending(at, decision_id, approve),
            Command::CircuitBreaker { firm_id, release } => {
                let members = self.firms.get(&firm_id).map(|f| f.agents.clone()).unwrap_or_default();
                let (action, reason) = if release {
                    (ControlAction::Unquarantine, "operator breaker release")
                } else {
                    (ControlAction::Quarantine, "operator tripped firm circuit breaker")
                };
                for subject in members {
                    self.human_decision(at, subject, action, None, reason);
                }
            }
        }
    }

    fn close_window(&mut self, at: SimTime) {
        let s = at.step;
        let w = self.scenario.windows.window;
        let detector = DetectorParams {
            weights: self.calibration.weights,
            features: FeatureParams {
                large_qty: self.large_qty,
                short_lifetime_steps: self.scenario.windows.short_lifetime_steps,
            },
        };
        let mark = self.mark_price();
        let mut info: BTreeMap<AgentId, AgentWindowInfo> = BTreeMap::new();
        for a in &mut self.agents {
            let wealth = a.cash as f64 + a.inventory as f64 * mark;
            let before = a.marks.iter().find(|(st, _)| *st + w == s).map_or(0.0, |(_, v)| *v);
            a.marks.push_back((s, wealth));
            while a.marks.front().is_some_and(|(st, _)| st + w < s) {
                a.marks.pop_front();
            }
            info.insert(a.spec.agent_id, AgentWindowInfo { score: 0.0, flagged: false, pnl: wealth - before });
        }

        if self.scenario.governance.self_reg {
            for idx in 0..self.agents.len() {
                let a = &mut self.agents[idx];
                let policy = self.firms[&a.spec.firm_id].slot.in_force();
                let window: &[TelemetryRecord] = a.window.make_contiguous();
                let (verdict, proposal) = evaluate_window(a.spec.agent_id, window, at, policy, &detector)
                    .expect("windows hold one agent and weights are validated");
                let version = policy.version;
                let autonomy = policy.autonomy;
                a.last_score = verdict.score;
                a.stats.max_score = a.stats.max_score.max(verdict.score);
                if verdict.flagged {
                    a.stats.flagged_windows += 1;
                }
                let e = info.get_mut(&a.spec.agent_id).expect("every agent has info");
                e.score = verdict.score;
                e.flagged = verdict.flagged;
                let subject = a.spec.agent_id;
                self.log(at, "selfreg.verdict", &verdict);
                if self.emit {
                    self.events.push(StreamEvent::Verdict { verdict: verdict.clone() });
                }
                self.verdicts.push(verdict);
                if let Some(p) = proposal {
                    let req = PolicyAction { subject, action: p.action, rate: p.rate, reason: p.reason };
                    let needs = p.needs_approval || autonomy == PolicyAutonomy::HumanInLoop;
                    self.propose(at, DecisionSource::SelfReg, req, needs, version);
                }
            }
        }

        let mut wire: Vec<Vec<u8>> = Vec::new();
        if self.scenario.governance.firm {
            let firm_ids: Vec<FirmId> = self.firms.keys().copied().collect();
            for firm_id in firm_ids {
                let members = self.firms[&firm_id].agents.clone();
                let mut records = Vec::new();
                let mut per_agent: BTreeMap<String, Vec<crate::firm::StepTotals>> = BTreeMap::new();
                let mut firm_info = BTreeMap::new();
                for agent in &members {
                    let a = &self.agents[self.index[agent]];
                    records.extend(a.window.iter().cloned());
                    let pseudo = crate::firm::pseudonym(self.seed, firm_id, *agent);
                    per_agent.insert(pseudo, step_series(a.window.iter(), self.large_qty));
                    firm_info.insert(*agent, info[agent]);
                }
                let policy = self.firms[&firm_id].slot.in_force().clone();
                let agg = aggregate(
                    firm_id,
                    &records,
                    s.saturating_sub(w),
                    at,
                    &firm_info,
                    self.large_qty,
                    self.seed,
                    policy.version,
                )
                .expect("records come from the firm's own agents");
                self.firms.get_mut(&firm_id).expect("listed").windows.push(s);

                if let Some(sig) = correlate_agents(&per_agent, self.regulator_config.tau, self.large_qty) {
                    if sig.score > 0.0 && sig.score >= self.regulator_config.collusion_threshold {
                        #[derive(Serialize)]
                        struct Signal<'a> {
                            firm_id: FirmId,
                            score: f64,
                            leader: &'a str,
                            follower: &'a str,
                        }
                        let signal = Signal { firm_id, score: sig.score, leader: &sig.implicated.0, follower: &sig.implicated.1 };
                        self.log(at, "firm.collusion_signal", &signal);
                    }
                }

                let statuses: BTreeMap<AgentId, AgentStatus> =
                    members.iter().map(|m| (*m, self.agents[self.index[m]].status)).collect();
                let actions =
                    evaluate_policy(&policy, &agg, &self.firms[&firm_id].resolve, &statuses, &self.pending);
                for act in actions {
                    let d = decide(0, at, DecisionSource::FirmGov, act.clone(), &policy);
                    let needs = d.disposition == Disposition::PendingApproval;
                    self.propose(at, DecisionSource::FirmGov, act, needs, policy.version);
                }
                wire.push(canonical::to_vec(&agg).expect("aggregates serialize"));
                self.aggregates.push(agg);
            }
        }

        let mut raised = Vec::new();
        if let Some(reg) = self.regulator.as_mut() {
            // only serialized aggregates cross the firm boundary
            let aggs: Vec<FirmAggregate> =
                wire.iter().map(|b| serde_json::from_slice(b).expect("aggregate round-trips")).collect();
            raised.extend(reg.ingest(aggs, at).expect("one aggregate per firm per window"));
            raised.extend(reg.detect_cross_firm(at));
        }
        self.log_flags(at, &raised);
        if let (Some(verdict), Some(reg)) = (self.scenario.flag_reviewer, self.regulator.as_ref()) {
            let due: Vec<u64> =
                reg.flags().iter().filter(|f| f.status == FlagStatus::Open && f.raised_at < at).map(|f| f.id).collect();
            for id in due {
                // a closing verdict passes through review first
                if verdict != ReviewVerdict::StartReview {
                    let _ = self.review_flag(id, ReviewVerdict::StartReview, "", DecisionSource::Human);
                }
                let _ = self.review_flag(id, verdict, "scripted review", DecisionSource::Human);
            }
        }
    }

    fn log_flags(&mut self, at: SimTime, raised: &[AuditFlag]) {
        for flag in raised {
            self.log(at, "regulator.flag", flag);
            if self.emit {
                self.events.push(StreamEvent::Flag { flag: flag.clone() });
            }
        }
    }

    /// Market quality over the evaluation period ending at `s`, all of
    /// step `s` included.
    fn close_quality(&mut self, s: u64) {
        let metrics = std::mem::replace(&mut self.quality_window, QualityAccumulator::new(s + 1)).report();
        let at = self.kernel.now();
        let raised: Vec<AuditFlag> =
            self.regulator.as_mut().and_then(|reg| reg.check_quality(at, &metrics)).into_iter().collect();
        self.log_flags(at, &raised);
        self.window_reports.push(WindowReport { window_end: s, metrics });
    }

    /// Report over the steps run so far.
    pub fn report(&self) -> RunReport {
        let mut counts = LayerCounts {
            verdicts: self.verdicts.len() as u64,
            flagged_verdicts: self.verdicts.iter().filter(|v| v.flagged).count() as u64,
            pending_open: self.pending.len() as u64,
            ..Default::default()
        };
        for d in &self.decisions {
            let key = format!("{:?}/{:?}/{:?}", d.source, d.action, d.disposition);
            *counts.decisions.entry(key).or_default() += 1;
        }
        for f in self.flags() {
            *counts.flags.entry(format!("{:?}", f.kind)).or_default() += 1;
        }
        let mark = self.mark_price();
        let agents: Vec<AgentSummary> = self
            .agents
            .iter()
            .map(|a| AgentSummary {
                agent_id: a.spec.agent_id,
                firm_id: a.spec.firm_id,
                kind: a.tag,
                cash: a.cash,
                inventory: a.inventory,
                wealth: a.cash as f64 + a.inventory as f64 * mark,
                submitted: a.stats.submitted,
                accepted: a.stats.accepted,
                blocked: a.stats.blocked,
                rejected: a.stats.rejected,
                max_score: a.stats.max_score,
                flagged_windows: a.stats.flagged_windows,
                quarantined: a.status.quarantined,
            })
            .collect();
        counts.blocked_orders = agents.iter().map(|a| a.blocked).sum();
        RunReport {
            scenario: self.scenario.name.clone(),
            scenario_hash: self.scenario_hash.clone(),
            seed: self.seed,
            steps: self.scenario.steps,
            calibration_hash: self.calibration_hash.clone(),
            metrics: self.quality_total.report(),
            windows: self.window_reports.clone(),
            counts,
            agents,
            firm_windows: self.firms.iter().map(|(id, f)| (*id, f.windows.clone())).collect(),
            policy_versions: self.firms.iter().map(|(id, f)| (*id, f.slot.in_force().version)).collect(),
            trades: self.tape.len() as u64,
            traded_qty: self.tape.iter().map(|t| t.qty).sum(),
            ledger_head: hex::encode(self.ledger.head_hash()),
            ledger_entries: self.ledger.len() as u64,
        }
    }
}

/// Run a scenario headless from start to finish.
pub fn run_scenario(scenario: Scenario, opts: RunOptions) -> Result<RunOutput, EngineError> {
    Engine::new(scenario, opts)?.finish()
}
