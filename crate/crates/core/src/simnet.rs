//! Deterministic discrete-event message passing with virtual time, crash
//! injection and a timeout-based leader-election service.
//!
//! Time is measured in virtual microseconds. Latency matrices are configured
//! in milliseconds.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NodeId;

pub type Time = u64;

pub const MS: Time = 1_000;
pub const SEC: Time = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("latency matrix must be square with {0} rows")]
    MatrixShape(usize),
    #[error("latency from {0} to {1} must be positive")]
    NonPositiveDelay(usize, usize),
    #[error("node {0} is not part of the simulation")]
    UnknownNode(usize),
    #[error("node {0} is crashed twice")]
    DoubleCrash(usize),
    #[error("{crashes} crashes exceed the fault budget of {budget}")]
    FaultBudget { crashes: usize, budget: usize },
}

/// Renders a virtual time as milliseconds with three decimals.
pub fn fmt_time(t: Time) -> String {
    format!("{}.{:03}", t / MS, t % MS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyMatrix {
    /// One-way delay in milliseconds, `delay[src][dst]`.
    pub delay: Vec<Vec<u64>>,
    #[serde(default = "default_jitter")]
    pub jitter: bool,
}

fn default_jitter() -> bool {
    true
}

impl LatencyMatrix {
    pub fn uniform(n: usize, ms: u64) -> Self {
        let delay = (0..n).map(|i| (0..n).map(|j| if i == j { 0 } else { ms }).collect()).collect();
        LatencyMatrix { delay, jitter: true }
    }

    /// Five sites: two in the US, two in Europe, one in Asia.
    pub fn wan5() -> Self {
        const D: [[u64; 5]; 5] =
            [[0, 10, 43, 50, 100], [10, 0, 40, 42, 93], [43, 40, 0, 12, 60], [50, 42, 12, 0, 55], [100, 93, 60, 55, 0]];
        LatencyMatrix { delay: D.iter().map(|r| r.to_vec()).collect(), jitter: true }
    }

    pub fn without_jitter(mut self) -> Self {
        self.jitter = false;
        self
    }

    pub fn len(&self) -> usize {
        self.delay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delay.is_empty()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.delay.len();
        for (i, row) in self.delay.iter().enumerate() {
            if row.len() != n {
                return Err(SimError::MatrixShape(n));
            }
            for (j, &d) in row.iter().enumerate() {
                if i != j && d == 0 {
                    return Err(SimError::NonPositiveDelay(i, j));
                }
            }
        }
        Ok(())
    }

    pub fn max_delay_ms(&self) -> u64 {
        self.delay.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Extends the matrix by one endpoint that shares the links of `like`.
    pub fn with_colocated(&self, like: usize) -> Self {
        let mut delay = self.delay.clone();
        for (i, row) in delay.iter_mut().enumerate() {
            row.push(if i == like { 1 } else { self.delay[i][like] });
        }
        let mut extra: Vec<u64> =
            (0..self.delay.len()).map(|j| if j == like { 1 } else { self.delay[like][j] }).collect();
        extra.push(0);
        delay.push(extra);
        LatencyMatrix { delay, jitter: self.jitter }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Extra delay in `[0, base/10]`, a pure function of the seed and envelope uid.
pub fn jitter(seed: u64, uid: u64, base: Time) -> Time {
    let span = base / 10;
    if span == 0 {
        return 0;
    }
    splitmix64(seed ^ splitmix64(uid)) % (span + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultAction {
    Crash {
        node: usize,
    },
    /// Every other node wrongly suspects `node` for `for_ms` milliseconds.
    Suspect {
        node: usize,
        for_ms: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScript {
    pub events: Vec<(Time, FaultAction)>,
}

impl FaultScript {
    pub fn crash_count(&self) -> usize {
        self.events.iter().filter(|(_, a)| matches!(a, FaultAction::Crash { .. })).count()
    }

    /// With `safety`, rejects scripts that crash more than `⌊n/2⌋` nodes.
    pub fn validate(&self, n: usize, safety: bool) -> Result<(), SimError> {
        let mut crashed = vec![false; n];
        for (_, a) in &self.events {
            let node = match *a {
                FaultAction::Crash { node } | FaultAction::Suspect { node, .. } => node,
            };
            if node >= n {
                return Err(SimError::UnknownNode(node));
            }
            if let FaultAction::Crash { node } = *a {
                if std::mem::replace(&mut crashed[node], true) {
                    return Err(SimError::DoubleCrash(node));
                }
            }
        }
        let budget = n / 2;
        if safety && self.crash_count() > budget {
            return Err(SimError::FaultBudget { crashes: self.crash_count(), budget });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: Time,
    pub node: NodeId,
    pub kind: String,
    pub details: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}|{}", fmt_time(self.time), self.node, self.kind, self.details)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub latency: LatencyMatrix,
    /// Defaults to four times the largest link delay.
    pub suspicion_timeout: Option<Time>,
    pub fifo: bool,
    pub trace_messages: bool,
}

impl SimConfig {
    pub fn new(seed: u64, latency: LatencyMatrix) -> Self {
        SimConfig { seed, latency, suspicion_timeout: None, fifo: false, trace_messages: false }
    }

    pub fn suspicion_timeout(&self) -> Time {
        self.suspicion_timeout.unwrap_or(4 * self.latency.max_delay_ms() * MS)
    }
}

pub trait Process {
    type Msg: Clone + fmt::Debug;
    type Timer: Clone + fmt::Debug;

    fn on_start(&mut self, cx: &mut Context<'_, Self::Msg, Self::Timer>);
    fn on_message(&mut self, cx: &mut Context<'_, Self::Msg, Self::Timer>, from: NodeId, msg: Self::Msg);
    fn on_timer(&mut self, cx: &mut Context<'_, Self::Msg, Self::Timer>, timer: Self::Timer);
    fn on_leader_change(&mut self, _cx: &mut Context<'_, Self::Msg, Self::Timer>, _leader: NodeId) {}
}

/// Handler-side view of the network. Effects are buffered and applied when
/// the handler returns.
pub struct Context<'a, M, T> {
    now: Time,
    me: NodeId,
    members: usize,
    suspected: &'a [bool],
    leader: NodeId,
    sends: Vec<(NodeId, M)>,
    timers: Vec<(Time, T)>,
    trace: Vec<(String, String)>,
    crash: bool,
}

impl<'a, M: Clone, T> Context<'a, M, T> {
    pub fn new(now: Time, me: NodeId, members: usize, suspected: &'a [bool], leader: NodeId) -> Self {
        Context {
            now,
            me,
            members,
            suspected,
            leader,
            sends: Vec::new(),
            timers: Vec::new(),
            trace: Vec::new(),
            crash: false,
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    /// Number of consensus members. Auxiliary endpoints are excluded.
    pub fn members(&self) -> usize {
        self.members
    }

    pub fn leader(&self) -> NodeId {
        self.leader
    }

    pub fn is_suspected(&self, node: NodeId) -> bool {
        self.suspected.get(node.0).copied().unwrap_or(false)
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.sends.push((to, msg));
    }

    /// Sends to every member, including the caller when it is one.
    pub fn broadcast(&mut self, msg: M) {
        for i in 0..self.members {
            self.sends.push((NodeId(i), msg.clone()));
        }
    }

    pub fn broadcast_others(&mut self, msg: M) {
        for i in (0..self.members).filter(|&i| i != self.me.0) {
            self.sends.push((NodeId(i), msg.clone()));
        }
    }

    pub fn set_timer(&mut self, after: Time, timer: T) {
        self.timers.push((after, timer));
    }

    pub fn trace(&mut self, kind: impl Into<String>, details: impl Into<String>) {
        self.trace.push((kind.into(), details.into()));
    }

    pub fn crash_self(&mut self) {
        self.crash = true;
    }

    pub fn into_effects(self) -> Effects<M, T> {
        Effects { sends: self.sends, timers: self.timers, trace: self.trace, crash: self.crash }
    }
}

pub struct Effects<M, T> {
    pub sends: Vec<(NodeId, M)>,
    pub timers: Vec<(Time, T)>,
    pub trace: Vec<(String, String)>,
    pub crash: bool,
}

#[derive(Debug)]
enum Event<M, T> {
    Start(NodeId),
    Deliver { src: NodeId, dst: NodeId, msg: M },
    Timer { node: NodeId, timer: T },
    Crash(NodeId),
    Suspicion { observer: NodeId, target: NodeId, on: bool },
}

struct Queued<M, T> {
    time: Time,
    uid: u64,
    ev: Event<M, T>,
}

impl<M, T> PartialEq for Queued<M, T> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.uid) == (other.time, other.uid)
    }
}
impl<M, T> Eq for Queued<M, T> {}
impl<M, T> PartialOrd for Queued<M, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M, T> Ord for Queued<M, T> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.uid).cmp(&(self.time, self.uid))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

pub struct Simulation<P: Process> {
    cfg: SimConfig,
    members: usize,
    procs: Vec<P>,
    crashed: Vec<bool>,
    crash_time: Vec<Option<Time>>,
    /// `suspected[observer][target]`, counted so overlapping windows nest.
    suspected: Vec<Vec<u32>>,
    leaders: Vec<NodeId>,
    last_arrival: Vec<Vec<Time>>,
    queue: BinaryHeap<Queued<P::Msg, P::Timer>>,
    now: Time,
    next_uid: u64,
    trace: Vec<TraceEvent>,
    stats: NetStats,
}

impl<P: Process> Simulation<P> {
    /// Endpoints `0..members` take part in leader election; any further
    /// processes are auxiliary endpoints.
    pub fn new(cfg: SimConfig, procs: Vec<P>, members: usize) -> Result<Self, SimError> {
        cfg.latency.validate()?;
        let total = procs.len();
        if cfg.latency.len() != total {
            return Err(SimError::MatrixShape(total));
        }
        if members == 0 || members > total {
            return Err(SimError::UnknownNode(members));
        }
        let mut sim = Simulation {
            cfg,
            members,
            procs,
            crashed: vec![false; total],
            crash_time: vec![None; total],
            suspected: vec![vec![0; members]; total],
            leaders: vec![NodeId(0); total],
            last_arrival: vec![vec![0; total]; total],
            queue: BinaryHeap::new(),
            now: 0,
            next_uid: 0,
            trace: Vec::new(),
            stats: NetStats::default(),
        };
        for i in 0..total {
            sim.push(0, Event::Start(NodeId(i)));
        }
        Ok(sim)
    }

    pub fn apply_script(&mut self, script: &FaultScript) -> Result<(), SimError> {
        script.validate(self.members, false)?;
        for &(at, action) in &script.events {
            match action {
                FaultAction::Crash { node } => {
                    self.push(at, Event::Crash(NodeId(node)));
                }
                FaultAction::Suspect { node, for_ms } => {
                    for obs in (0..self.procs.len()).filter(|&o| o != node) {
                        let (observer, target) = (NodeId(obs), NodeId(node));
                        self.push(at, Event::Suspicion { observer, target, on: true });
                        self.push(at + for_ms * MS, Event::Suspicion { observer, target, on: false });
                    }
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, time: Time, ev: Event<P::Msg, P::Timer>) -> u64 {
        let uid = self.next_uid;
        self.next_uid += 1;
        self.queue.push(Queued { time, uid, ev });
        uid
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn process(&self, node: NodeId) -> &P {
        &self.procs[node.0]
    }

    pub fn process_mut(&mut self, node: NodeId) -> &mut P {
        &mut self.procs[node.0]
    }

    pub fn processes(&self) -> &[P] {
        &self.procs
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.crashed[node.0]
    }

    pub fn crash_time(&self, node: NodeId) -> Option<Time> {
        self.crash_time[node.0]
    }

    pub fn omega_leader(&self, observer: NodeId) -> NodeId {
        self.leaders[observer.0]
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Schedules a timer at an absolute time, from outside any handler.
    pub fn inject(&mut self, at: Time, node: NodeId, timer: P::Timer) {
        self.push(at.max(self.now), Event::Timer { node, timer });
    }

    pub fn crash(&mut self, node: NodeId, at: Time) {
        self.push(at.max(self.now), Event::Crash(node));
    }

    fn record(&mut self, node: NodeId, kind: &str, details: String) {
        self.trace.push(TraceEvent { time: self.now, node, kind: kind.to_string(), details });
    }

    fn compute_leader(&self, observer: usize) -> NodeId {
        let row = &self.suspected[observer];
        NodeId((0..self.members).find(|&q| row[q] == 0).unwrap_or(observer.min(self.members - 1)))
    }

    /// Pops and dispatches one event. `None` once the queue is empty.
    pub fn step(&mut self) -> Option<TraceEvent> {
        let Queued { time, uid, ev } = self.queue.pop()?;
        debug_assert!(time >= self.now);
        self.now = time;
        match ev {
            Event::Start(node) => {
                if !self.crashed[node.0] {
                    self.dispatch(node, |p, cx| p.on_start(cx));
                }
                Some(self.info(node, "start", String::new()))
            }
            Event::Deliver { src, dst, msg } => {
                if self.crashed[dst.0] {
                    self.stats.dropped += 1;
                    if self.cfg.trace_messages {
                        self.record(dst, "drop", format!("{src} {uid}"));
                    }
                    return Some(self.info(dst, "drop", format!("{src} {uid}")));
                }
                self.stats.delivered += 1;
                if self.cfg.trace_messages {
                    self.record(dst, "recv", format!("{src} {msg:?}"));
                }
                let info = self.info(dst, "recv", format!("{src} {uid}"));
                self.dispatch(dst, |p, cx| p.on_message(cx, src, msg));
                Some(info)
            }
            Event::Timer { node, timer } => {
                if !self.crashed[node.0] {
                    self.dispatch(node, |p, cx| p.on_timer(cx, timer));
                }
                Some(self.info(node, "timer", String::new()))
            }
            Event::Crash(node) => {
                self.do_crash(node);
                Some(self.info(node, "crash", String::new()))
            }
            Event::Suspicion { observer, target, on } => {
                let cell = &mut self.suspected[observer.0][target.0];
                if on {
                    *cell += 1;
                } else {
                    *cell = cell.saturating_sub(1);
                }
                self.refresh_leader(observer);
                Some(self.info(observer, if on { "suspect" } else { "trust" }, target.to_string()))
            }
        }
    }

    fn info(&self, node: NodeId, kind: &str, details: String) -> TraceEvent {
        TraceEvent { time: self.now, node, kind: kind.to_string(), details }
    }

    fn do_crash(&mut self, node: NodeId) {
        if self.crashed[node.0] {
            self.record(node, "crash_ignored", String::new());
            return;
        }
        self.crashed[node.0] = true;
        self.crash_time[node.0] = Some(self.now);
        self.record(node, "crash", String::new());
        if node.0 >= self.members {
            return;
        }
        let timeout = self.cfg.suspicion_timeout();
        for obs in (0..self.procs.len()).filter(|&o| o != node.0) {
            let at = self.now + timeout + self.cfg.latency.delay[node.0][obs] * MS;
            self.push(at, Event::Suspicion { observer: NodeId(obs), target: node, on: true });
        }
    }

    fn refresh_leader(&mut self, observer: NodeId) {
        let leader = self.compute_leader(observer.0);
        if leader != self.leaders[observer.0] {
            self.leaders[observer.0] = leader;
            if !self.crashed[observer.0] {
                self.record(observer, "omega", leader.to_string());
                self.dispatch(observer, |p, cx| p.on_leader_change(cx, leader));
            }
        }
    }

    fn dispatch<F>(&mut self, node: NodeId, f: F)
    where
        F: FnOnce(&mut P, &mut Context<'_, P::Msg, P::Timer>),
    {
        let suspected: Vec<bool> = self.suspected[node.0].iter().map(|&c| c > 0).collect();
        let mut cx = Context::new(self.now, node, self.members, &suspected, self.leaders[node.0]);
        f(&mut self.procs[node.0], &mut cx);
        let eff = cx.into_effects();
        for (kind, details) in eff.trace {
            self.trace.push(TraceEvent { time: self.now, node, kind, details });
        }
        for (dst, msg) in eff.sends {
            self.stats.sent += 1;
            let base = self.cfg.latency.delay[node.0][dst.0] * MS;
            let uid = self.next_uid;
            let extra = if self.cfg.latency.jitter { jitter(self.cfg.seed, uid, base) } else { 0 };
            let mut at = self.now + base + extra;
            if self.cfg.fifo {
                at = at.max(self.last_arrival[node.0][dst.0]);
                self.last_arrival[node.0][dst.0] = at;
            }
            self.push(at, Event::Deliver { src: node, dst, msg });
        }
        for (after, timer) in eff.timers {
            self.push(self.now + after, Event::Timer { node, timer });
        }
        if eff.crash {
            self.do_crash(node);
        }
    }

    /// Dispatches every event scheduled at or before `t`, then parks the clock at `t`.
    pub fn run_until(&mut self, t: Time) {
        while self.queue.peek().is_some_and(|q| q.time <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Runs until the queue drains or `max_steps` events were dispatched.
    pub fn run(&mut self, max_steps: usize) -> usize {
        let mut steps = 0;
        while steps < max_steps && self.step().is_some() {
            steps += 1;
        }
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Echo {
        got: Vec<(Time, NodeId, u32)>,
        leaders: Vec<NodeId>,
    }

    impl Process for Echo {
        type Msg = u32;
        type Timer = (NodeId, u32);

        fn on_start(&mut self, _cx: &mut Context<'_, u32, (NodeId, u32)>) {}

        fn on_message(&mut self, cx: &mut Context<'_, u32, (NodeId, u32)>, from: NodeId, msg: u32) {
            self.got.push((cx.now(), from, msg));
            cx.trace("got", format!("{from} {msg}"));
        }

        fn on_timer(&mut self, cx: &mut Context<'_, u32, (NodeId, u32)>, (to, m): (NodeId, u32)) {
            cx.send(to, m);
        }

        fn on_leader_change(&mut self, _cx: &mut Context<'_, u32, (NodeId, u32)>, leader: NodeId) {
            self.leaders.push(leader);
        }
    }

    fn sim(n: usize, ms: u64, jitter: bool) -> Simulation<Echo> {
        let mut lat = LatencyMatrix::uniform(n, ms);
        lat.jitter = jitter;
        Simulation::new(SimConfig::new(7, lat), (0..n).map(|_| Echo::default()).collect(), n).unwrap()
    }

    #[test]
    fn delivery_after_link_delay() {
        let mut s = sim(2, 50, false);
        s.inject(0, NodeId(0), (NodeId(1), 1));
        s.run(100);
        assert_eq!(s.process(NodeId(1)).got, vec![(50 * MS, NodeId(0), 1)]);
    }

    #[test]
    fn crashed_destination_drops() {
        let mut s = sim(2, 50, false);
        s.inject(0, NodeId(0), (NodeId(1), 1));
        s.crash(NodeId(1), 40 * MS);
        s.run(100);
        assert!(s.process(NodeId(1)).got.is_empty());
        assert_eq!(s.stats().dropped, 1);
    }

    #[test]
    fn duplicate_sends_are_distinct() {
        let mut s = sim(2, 50, true);
        s.inject(0, NodeId(0), (NodeId(1), 1));
        s.inject(0, NodeId(0), (NodeId(1), 1));
        s.run(100);
        assert_eq!(s.process(NodeId(1)).got.len(), 2);
    }

    #[test]
    fn ties_follow_uid() {
        let mut s = sim(3, 50, false);
        s.inject(0, NodeId(0), (NodeId(2), 7));
        s.inject(0, NodeId(1), (NodeId(2), 9));
        s.run(100);
        let got: Vec<u32> = s.process(NodeId(2)).got.iter().map(|g| g.2).collect();
        assert_eq!(got, vec![7, 9]);
    }

    #[test]
    fn jitter_is_bounded() {
        for uid in 0..1000 {
            assert!(jitter(3, uid, 50 * MS) <= 5 * MS);
        }
        assert_eq!(jitter(3, 1, 5), 0);
    }

    #[test]
    fn omega_moves_after_crash() {
        let mut s = sim(3, 10, true);
        assert_eq!(s.omega_leader(NodeId(2)), NodeId(0));
        s.crash(NodeId(0), 100 * MS);
        s.run_until(100 * MS + s.config().suspicion_timeout() + 20 * MS);
        assert_eq!(s.omega_leader(NodeId(1)), NodeId(1));
        assert_eq!(s.omega_leader(NodeId(2)), NodeId(1));
        assert_eq!(s.process(NodeId(2)).leaders, vec![NodeId(1)]);
    }

    #[test]
    fn false_suspicion_is_temporary() {
        let mut s = sim(3, 10, false);
        let script = FaultScript { events: vec![(0, FaultAction::Suspect { node: 0, for_ms: 100 })] };
        s.apply_script(&script).unwrap();
        s.run_until(50 * MS);
        assert_eq!(s.omega_leader(NodeId(2)), NodeId(1));
        s.run_until(200 * MS);
        assert_eq!(s.omega_leader(NodeId(2)), NodeId(0));
    }

    #[test]
    fn script_validation() {
        let crash = |n| (0, FaultAction::Crash { node: n });
        let three = FaultScript { events: vec![crash(0), crash(1), crash(2)] };
        assert_eq!(three.validate(5, true), Err(SimError::FaultBudget { crashes: 3, budget: 2 }));
        assert!(three.validate(5, false).is_ok());
        let twice = FaultScript { events: vec![crash(0), crash(0)] };
        assert_eq!(twice.validate(5, false), Err(SimError::DoubleCrash(0)));
    }

    #[test]
    fn wan_matrix_is_valid() {
        let m = LatencyMatrix::wan5();
        m.validate().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.delay[i][j], m.delay[j][i]);
                if i != j {
                    assert!((10..=120).contains(&m.delay[i][j]));
                }
            }
        }
        let ext = m.with_colocated(0);
        ext.validate().unwrap();
        assert_eq!(ext.delay[5][3], 50);
    }

    #[test]
    fn fifo_links_preserve_order() {
        let mut lat = LatencyMatrix::uniform(2, 50);
        lat.jitter = true;
        let mut cfg = SimConfig::new(11, lat);
        cfg.fifo = true;
        let mut s = Simulation::new(cfg, vec![Echo::default(), Echo::default()], 2).unwrap();
        for m in 0..200 {
            s.inject(m as Time * 100, NodeId(0), (NodeId(1), m));
        }
        s.run(10_000);
        let got: Vec<u32> = s.process(NodeId(1)).got.iter().map(|g| g.2).collect();
        assert_eq!(got, (0..200).collect::<Vec<_>>());
    }
}
