//! Deterministic discrete-event kernel: integer virtual clock, an event queue
//! ordered by `(step, seq)`, and named reproducible random streams.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical;

/// Virtual time. Total order is lexicographic on `(step, seq)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime {
    pub step: u64,
    pub seq: u64,
}

impl SimTime {
    pub const fn new(step: u64, seq: u64) -> Self {
        Self { step, seq }
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.step, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    AgentWake,
    OrderArrival,
    CancelTimeout,
    WindowClose,
    FundamentalShock,
    ControlCommand,
}

pub type EventId = u64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event<P> {
    pub id: EventId,
    pub at: SimTime,
    pub kind: EventKind,
    pub payload: P,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("cannot schedule at step {requested}: clock is already at {now}")]
    SchedulingInPast { requested: u64, now: SimTime },
}

/// Event queue plus virtual clock.
///
/// Events sharing a step run in insertion order: `seq` is handed out by the
/// kernel from a per-step counter.
pub struct Kernel<P> {
    now: SimTime,
    next_id: EventId,
    next_seq: BTreeMap<u64, u64>,
    queue: BTreeMap<SimTime, Event<P>>,
    trace: Option<Vec<String>>,
}

impl<P: Serialize> Default for Kernel<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Serialize> Kernel<P> {
    pub fn new() -> Self {
        Self {
            now: SimTime::default(),
            next_id: 1,
            next_seq: BTreeMap::new(),
            queue: BTreeMap::new(),
            trace: None,
        }
    }

    /// Record one canonical JSON line per processed event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn peek(&self) -> Option<&Event<P>> {
        self.queue.values().next()
    }

    pub fn schedule(&mut self, kind: EventKind, step: u64, payload: P) -> Result<EventId, KernelError> {
        if step < self.now.step {
            return Err(KernelError::SchedulingInPast { requested: step, now: self.now });
        }
        let seq = self.next_seq.entry(step).or_insert(0);
        let at = SimTime::new(step, *seq);
        *seq += 1;
        let id = self.next_id;
        self.next_id += 1;
        self.queue.insert(at, Event { id, at, kind, payload });
        Ok(id)
    }

    /// Process every event with `at.step <= t_end`, including events the
    /// handler schedules along the way. Leaves the clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end: u64, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Event<P>),
    {
        let mut processed = 0;
        loop {
            let due = match self.queue.first_key_value() {
                Some((at, _)) => at.step <= t_end,
                None => false,
            };
            if !due {
                break;
            }
            let (at, event) = self.queue.pop_first().expect("checked above");
            debug_assert!(at >= self.now, "event {at} dequeued behind clock {}", self.now);
            self.now = at;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(canonical::to_string(&event).expect("event payloads serialize"));
            }
            handler(self, event);
            processed += 1;
        }
        let end = SimTime::new(t_end, 0);
        if end > self.now {
            self.now = end;
        }
        // seq counters for elapsed steps are never consulted again
        let keep = self.next_seq.split_off(&self.now.step);
        self.next_seq = keep;
        processed
    }

    pub fn trace_lines(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }
}

/// One named generator. Repeated lookups of the same label continue the
/// same sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"govsim/rng-stream/v1\0");
        h.update(master_seed.to_le_bytes());
        h.update(label.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        Self { label: label.to_string(), rng: ChaCha8Rng::from_seed(seed) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Registry of named streams derived from one master seed.
#[derive(Debug, Clone)]
pub struct RngStreams {
    master_seed: u64,
    streams: HashMap<String, RngStream>,
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed, streams: HashMap::new() }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream(&mut self, label: &str) -> &mut RngStream {
        let seed = self.master_seed;
        self.streams
            .entry(label.to_string())
            .or_insert_with(|| RngStream::new(seed, label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_event_is_queue_head() {
        let mut k: Kernel<u32> = Kernel::new();
        let id = k.schedule(EventKind::AgentWake, 5, 3).unwrap();
        assert_eq!(id, 1);
        assert_eq!(k.peek().unwrap().at.step, 5);
    }

    #[test]
    fn same_step_events_are_fifo() {
        let mut k: Kernel<&'static str> = Kernel::new();
        k.schedule(EventKind::AgentWake, 5, "first").unwrap();
        k.schedule(EventKind::AgentWake, 5, "second").unwrap();
        let mut seen = Vec::new();
        k.run_until(5, |_, ev| seen.push((ev.at, ev.payload)));
        assert_eq!(seen, vec![(SimTime::new(5, 0), "first"), (SimTime::new(5, 1), "second")]);
    }

    #[test]
    fn past_scheduling_is_rejected() {
        let mut k: Kernel<()> = Kernel::new();
        k.run_until(3, |_, _| {});
        assert_eq!(k.now(), SimTime::new(3, 0));
        let err = k.schedule(EventKind::AgentWake, 2, ()).unwrap_err();
        assert!(matches!(err, KernelError::SchedulingInPast { requested: 2, .. }));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut k: Kernel<()> = Kernel::new();
        assert_eq!(k.run_until(10, |_, _| {}), 0);
        assert_eq!(k.now(), SimTime::new(10, 0));
    }

    #[test]
    fn run_until_counts_due_events() {
        let mut k: Kernel<()> = Kernel::new();
        for step in [1, 2, 2, 3] {
            k.schedule(EventKind::AgentWake, step, ()).unwrap();
        }
        assert_eq!(k.run_until(2, |_, _| {}), 3);
        assert_eq!(k.pending(), 1);
    }

    #[test]
    fn handler_scheduled_events_run_in_same_call() {
        let mut k: Kernel<u32> = Kernel::new();
        k.schedule(EventKind::AgentWake, 1, 0).unwrap();
        let n = k.run_until(4, |k, ev| {
            if ev.payload < 3 {
                k.schedule(EventKind::AgentWake, ev.at.step + 1, ev.payload + 1).unwrap();
            }
        });
        assert_eq!(n, 4);
        assert_eq!(k.pending(), 0);
    }

    #[test]
    fn clock_never_decreases() {
        let mut k: Kernel<()> = Kernel::new();
        for step in [4, 1, 9, 4, 2] {
            k.schedule(EventKind::CancelTimeout, step, ()).unwrap();
        }
        let mut last = SimTime::default();
        k.run_until(9, |k, _| {
            assert!(k.now() >= last);
            last = k.now();
        });
    }

    #[test]
    fn trace_is_byte_identical_across_runs() {
        let build = || {
            let mut k: Kernel<u32> = Kernel::new().with_trace();
            for (i, step) in [3u64, 1, 2, 1].into_iter().enumerate() {
                k.schedule(EventKind::OrderArrival, step, i as u32).unwrap();
            }
            k.run_until(5, |_, _| {});
            k.trace_lines().join("\n")
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn stream_continues_across_lookups() {
        let mut streams = RngStreams::new(42);
        let a: u64 = streams.stream("zi_trader_0").random();
        let b: u64 = streams.stream("zi_trader_0").random();
        assert_ne!(a, b);
    }

    #[test]
    fn same_seed_and_label_reproduce() {
        let draws = |seed| {
            let mut s = RngStreams::new(seed);
            (0..100).map(|_| s.stream("x").random::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(draws(42), draws(42));
        assert_ne!(draws(42), draws(43));
    }

    #[test]
    fn distinct_labels_are_distinct_streams() {
        let mut s = RngStreams::new(42);
        let a: u64 = s.stream("a").random();
        let b: u64 = s.stream("b").random();
        assert_ne!(a, b);
    }
}
