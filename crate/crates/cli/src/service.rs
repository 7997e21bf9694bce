//! HTTP/JSON service over a live run.
//!
//! The engine lives on one thread. Handlers talk to it through a request
//! channel and never touch simulation state directly; stream events fan out
//! over a broadcast channel.

use std::convert::Infallible;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use govsim_core::canonical;
use govsim_core::engine::{Command, CommandError, Engine, RunReport, StateView, StreamEvent};
use govsim_core::regulator::ReviewVerdict;
use govsim_core::{AuditFlag, DecisionSource, LedgerHead, PolicyDoc, PolicyError, RegulatorError};

const STREAM_CAPACITY: usize = 8192;

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Delay after each step.
    pub pace: Duration,
    /// Wait for `POST /run` before stepping.
    pub start_paused: bool,
}

enum Request {
    State(oneshot::Sender<StateView>),
    Flags(oneshot::Sender<Vec<AuditFlag>>),
    LedgerHead(oneshot::Sender<LedgerHead>),
    Report(oneshot::Sender<RunReport>),
    Control(Command, oneshot::Sender<Result<u64, CommandError>>),
    Policy(PolicyDoc, oneshot::Sender<Result<u64, PolicyError>>),
    Review { flag_id: u64, verdict: ReviewVerdict, note: String, reply: oneshot::Sender<Result<AuditFlag, RegulatorError>> },
    Running(bool),
}

/// One stream message: SSE event name and canonical JSON data.
#[derive(Debug, Clone)]
pub struct Published {
    pub name: String,
    pub data: String,
}

#[derive(Clone)]
pub struct AppState {
    requests: mpsc::Sender<Request>,
    events: broadcast::Sender<Published>,
}

/// Start the simulation thread and return the router serving it.
pub fn spawn(engine: Engine, config: ServiceConfig) -> Router {
    let (tx, rx) = mpsc::channel();
    let (events, _) = broadcast::channel(STREAM_CAPACITY);
    let publisher = events.clone();
    thread::Builder::new()
        .name("sim-loop".into())
        .spawn(move || sim_loop(engine, config, rx, publisher))
        .expect("spawn simulation thread");
    router(AppState { requests: tx, events })
}

fn publish(events: &broadcast::Sender<Published>, batch: Vec<StreamEvent>) {
    for ev in batch {
        let value = serde_json::to_value(&ev).expect("stream events serialize");
        let name = value["event"].as_str().unwrap_or("message").to_string();
        let data = canonical::to_string(&value).expect("value serializes");
        // no subscribers is fine
        let _ = events.send(Published { name, data });
    }
}

fn sim_loop(mut engine: Engine, config: ServiceConfig, rx: mpsc::Receiver<Request>, events: broadcast::Sender<Published>) {
    let mut running = !config.start_paused;
    loop {
        while let Ok(req) = rx.try_recv() {
            handle(&mut engine, req, &mut running, &events);
        }
        if running && !engine.is_finished() {
            let batch = engine.step_once();
            publish(&events, batch);
            let deadline = Instant::now() + config.pace;
            while let Some(left) = deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()) {
                match rx.recv_timeout(left) {
                    Ok(req) => handle(&mut engine, req, &mut running, &events),
                    Err(mpsc::RecvTimeoutError::Timeout) => break,
                    Err(mpsc::RecvTimeoutError::Disconnected) => return,
                }
            }
        } else {
            match rx.recv() {
                Ok(req) => handle(&mut engine, req, &mut running, &events),
                Err(_) => return,
            }
        }
    }
}

fn handle(engine: &mut Engine, req: Request, running: &mut bool, events: &broadcast::Sender<Published>) {
    // a dropped reply means the client went away; nothing to do
    match req {
        Request::State(reply) => {
            let _ = reply.send(engine.state());
        }
        Request::Flags(reply) => {
            let _ = reply.send(engine.flags());
        }
        Request::LedgerHead(reply) => {
            let _ = reply.send(engine.ledger().head_info());
        }
        Request::Report(reply) => {
            let _ = reply.send(engine.report());
        }
        Request::Control(cmd, reply) => {
            let _ = reply.send(engine.enqueue(cmd).map(|()| engine.step() + 1));
        }
        Request::Policy(doc, reply) => {
            let source = if doc.firm_id.is_none() { DecisionSource::ExternalReg } else { DecisionSource::Human };
            let _ = reply.send(engine.submit_policy(doc, source));
        }
        Request::Review { flag_id, verdict, note, reply } => {
            let _ = reply.send(engine.review_flag(flag_id, verdict, &note, DecisionSource::Human));
        }
        Request::Running(on) => *running = on,
    }
    publish(events, engine.drain_events());
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/telemetry/stream", get(stream))
        .route("/flags", get(get_flags))
        .route("/flags/{id}/review", post(post_review))
        .route("/control", post(post_control))
        .route("/policy", post(post_policy))
        .route("/ledger/head", get(get_ledger_head))
        .route("/report", get(get_report))
        .route("/run", post(post_run))
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), status: status.as_u16() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json(status, &self)
    }
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let body = canonical::to_vec(value).expect("responses serialize");
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.to_string()))
}

async fn ask<T>(state: &AppState, make: impl FnOnce(oneshot::Sender<T>) -> Request) -> Result<T, ApiError> {
    let (tx, rx) = oneshot::channel();
    let gone = || ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loop_stopped", "simulation loop is not running");
    state.requests.send(make(tx)).map_err(|_| gone())?;
    rx.await.map_err(|_| gone())
}

async fn get_state(State(s): State<AppState>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &ask(&s, Request::State).await?))
}

async fn get_flags(State(s): State<AppState>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &ask(&s, Request::Flags).await?))
}

async fn get_ledger_head(State(s): State<AppState>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &ask(&s, Request::LedgerHead).await?))
}

async fn get_report(State(s): State<AppState>) -> Result<Response, ApiError> {
    Ok(json(StatusCode::OK, &ask(&s, Request::Report).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    running: bool,
}

async fn post_run(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RunRequest = parse(&body)?;
    s.requests
        .send(Request::Running(req.running))
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loop_stopped", "simulation loop is not running"))?;
    Ok(json(StatusCode::OK, &serde_json::json!({ "running": req.running })))
}

/// Wire form of an operator command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRequest {
    pub command: String,
    pub subject: u64,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl ControlRequest {
    pub fn to_command(&self) -> Result<Command, String> {
        let id = |what: &str| u32::try_from(self.subject).map_err(|_| format!("{what} {} out of range", self.subject));
        let flag = |k: &str, default: bool| match self.params.get(k) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or(format!("params.{k} must be a boolean")),
        };
        let allowed: &[&str] = match self.command.as_str() {
            "throttle" => &["rate"],
            "approve_pending" => &["approve"],
            "circuit_breaker" => &["release"],
            _ => &[],
        };
        if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(format!("unknown parameter {k:?} for {}", self.command));
        }
        Ok(match self.command.as_str() {
            "quarantine" => Command::Quarantine { subject: id("agent")? },
            "unquarantine" => Command::Unquarantine { subject: id("agent")? },
            "throttle" => {
                let rate = self
                    .params
                    .get("rate")
                    .and_then(|v| v.as_u64())
                    .and_then(|r| u32::try_from(r).ok())
                    .ok_or("throttle needs params.rate, a positive integer")?;
                Command::Throttle { subject: id("agent")?, rate }
            }
            "approve_pending" => Command::ApprovePending { decision_id: self.subject, approve: flag("approve", true)? },
            "circuit_breaker" => Command::CircuitBreaker { firm_id: id("firm")?, release: flag("release", false)? },
            other => return Err(format!("unknown command {other:?}")),
        })
    }
}

async fn post_control(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: ControlRequest = parse(&body)?;
    let cmd = req.to_command().map_err(|m| ApiError::new(StatusCode::BAD_REQUEST, "invalid_command", m))?;
    let applies_at = ask(&s, |tx| Request::Control(cmd, tx)).await?.map_err(|e| {
        let (status, code) = match e {
            CommandError::UnknownAgent(_) | CommandError::UnknownFirm(_) | CommandError::UnknownPending(_) => {
                (StatusCode::NOT_FOUND, "unknown_subject")
            }
            CommandError::InvalidRate => (StatusCode::BAD_REQUEST, "invalid_command"),
            CommandError::Finished => (StatusCode::CONFLICT, "run_finished"),
        };
        ApiError::new(status, code, e.to_string())
    })?;
    Ok(json(StatusCode::ACCEPTED, &serde_json::json!({ "queued": true, "applies_at_step": applies_at })))
}

async fn post_policy(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let doc: PolicyDoc = parse(&body)?;
    doc.validate().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_policy", e.to_string()))?;
    let version = ask(&s, |tx| Request::Policy(doc, tx)).await?.map_err(|e| match e {
        PolicyError::StaleVersion { .. } => ApiError::new(StatusCode::CONFLICT, "stale_policy", e.to_string()),
        PolicyError::Invalid(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_policy", e.to_string()),
    })?;
    Ok(json(StatusCode::ACCEPTED, &serde_json::json!({ "staged_version": version })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewRequest {
    verdict: ReviewVerdict,
    #[serde(default)]
    note: String,
}

async fn post_review(State(s): State<AppState>, Path(flag_id): Path<u64>, body: Bytes) -> Result<Response, ApiError> {
    let req: ReviewRequest = parse(&body)?;
    let flag = ask(&s, |reply| Request::Review { flag_id, verdict: req.verdict, note: req.note, reply }).await?.map_err(
        |e| match e {
            RegulatorError::UnknownFlag(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown_flag", e.to_string()),
            RegulatorError::IllegalTransition { .. } => {
                ApiError::new(StatusCode::CONFLICT, "illegal_transition", e.to_string())
            }
            other => ApiError::new(StatusCode::BAD_REQUEST, "invalid_review", other.to_string()),
        },
    )?;
    Ok(json(StatusCode::OK, &flag))
}

async fn stream(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.events.subscribe();
    let events = futures::stream::unfold(rx, |mut rx| async move {
        let event = match rx.recv().await {
            Ok(p) => Event::default().event(p.name).data(p.data),
            // the client resyncs from /state
            Err(broadcast::error::RecvError::Lagged(n)) => Event::default().event("lagged").data(n.to_string()),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}
