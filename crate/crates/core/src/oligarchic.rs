//! Ownership-partitioned ordering. Every key has its own replicated log and
//! a node must own all keys of a command before placing it. Ownership is
//! taken with a Paxos prepare over the key set; the wildcard prepare over
//! ALL is used only to place the era's Terminate after everything else.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{classic_quorum_size, Ballot, Command, EraId, KeySet, NodeId, ProtocolKind};
use crate::plugin::{
    Agreement, Entry, Execution, Learned, Order, ProtoConfig, ProtoCtx, ProtoMsg, ProtoTimer, ReleaseGuard,
};
use crate::simnet::Time;

/// Log that only Terminate occupies, so a wildcard entry always has a slot.
pub const WILDCARD_LOG: &str = "*";
const KEYLESS_LOG: &str = "#";

pub type Slot = (String, u64);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tuple {
    pub entry: Entry,
    pub positions: BTreeMap<String, u64>,
}

impl Tuple {
    fn tid(&self) -> Slot {
        let (k, p) = self.positions.iter().next().expect("tuples occupy a slot");
        (k.clone(), *p)
    }

    fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.positions.iter().map(|(k, p)| (k.clone(), *p))
    }

    fn is_terminate(&self) -> bool {
        self.entry.cmd().is_some_and(Command::is_terminate)
    }

    fn noop(key: &str, pos: u64) -> Tuple {
        Tuple { entry: Entry::Noop, positions: BTreeMap::from([(key.to_string(), pos)]) }
    }
}

fn logs_of(cmd: &Command) -> Vec<String> {
    match &cmd.keys {
        KeySet::All => vec![WILDCARD_LOG.to_string()],
        KeySet::Keys(k) if k.is_empty() => vec![KEYLESS_LOG.to_string()],
        KeySet::Keys(k) => k.iter().cloned().collect(),
    }
}

#[derive(Debug, Clone)]
pub enum Msg {
    Prepare {
        ballot: Ballot,
        keys: KeySet,
        from: BTreeMap<String, u64>,
    },
    Promise {
        ballot: Ballot,
        accepted: Vec<(Slot, Ballot, Tuple)>,
        decided: Vec<Tuple>,
    },
    /// `ballots` holds the ballot of each log; `ballot` is their maximum and
    /// names the attempt.
    Accept {
        tuple: Tuple,
        ballot: Ballot,
        ballots: BTreeMap<String, Ballot>,
        wildcard: bool,
    },
    Accepted {
        tid: Slot,
        ballot: Ballot,
    },
    Nack {
        ballot: Ballot,
        promised: Ballot,
        tid: Option<Slot>,
    },
    Decide(Tuple),
    ForwardTerminate(Command),
}

impl Msg {
    pub fn name(&self) -> &'static str {
        match self {
            Msg::Prepare { .. } => "prepare",
            Msg::Promise { .. } => "promise",
            Msg::Accept { .. } => "accept",
            Msg::Accepted { .. } => "accepted",
            Msg::Nack { .. } => "nack",
            Msg::Decide(_) => "decide",
            Msg::ForwardTerminate(_) => "forward_terminate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Backoff(u64),
}

fn wrap(m: Msg) -> ProtoMsg {
    ProtoMsg::Oligarchic(m)
}

/// Slots a promiser had accepted, and the tuples it knows are decided.
type PromiseBody = (Vec<(Slot, Ballot, Tuple)>, Vec<Tuple>);

#[derive(Debug)]
struct Acquisition {
    ballot: Ballot,
    keys: KeySet,
    from: BTreeMap<String, u64>,
    replies: BTreeMap<NodeId, PromiseBody>,
}

#[derive(Debug)]
struct InFlight {
    tuple: Tuple,
    ballot: Ballot,
    wildcard: bool,
    acks: BTreeSet<NodeId>,
}

pub struct Oligarchic {
    n: usize,
    me: NodeId,
    era: EraId,
    quorum: usize,
    backoff_base: Time,
    rng: ChaCha8Rng,

    promised: BTreeMap<String, Ballot>,
    promised_all: Ballot,
    accepted: BTreeMap<Slot, (Ballot, Tuple)>,
    decided: BTreeMap<Slot, Tuple>,
    terminate_accepted: Option<Ballot>,
    top: BTreeMap<String, u64>,
    prefix: BTreeMap<String, u64>,
    max_seen: Ballot,

    owned: BTreeMap<String, Ballot>,
    acquisition: Option<Acquisition>,
    pending: VecDeque<Command>,
    inflight: BTreeMap<Slot, InFlight>,
    terminate: Option<Command>,
    terminate_placed: bool,
    terminate_decided: bool,
    forwarded_terminate: bool,
    closing: bool,
    failures: u32,
    backoff: Option<u64>,
    attempt: u64,
}

impl Oligarchic {
    pub fn new(cfg: &ProtoConfig, me: NodeId, era: EraId) -> Self {
        let seed = cfg.seed ^ (me.0 as u64).wrapping_mul(0x9E37_79B9) ^ era.0.wrapping_mul(0x85EB_CA6B);
        Oligarchic {
            n: cfg.n,
            me,
            era,
            quorum: classic_quorum_size(cfg.n).unwrap_or(1),
            backoff_base: 2 * cfg.max_delay,
            rng: ChaCha8Rng::seed_from_u64(seed),
            promised: BTreeMap::new(),
            promised_all: Ballot::default(),
            accepted: BTreeMap::new(),
            decided: BTreeMap::new(),
            terminate_accepted: None,
            top: BTreeMap::new(),
            prefix: BTreeMap::new(),
            max_seen: Ballot::default(),
            owned: BTreeMap::new(),
            acquisition: None,
            pending: VecDeque::new(),
            inflight: BTreeMap::new(),
            terminate: None,
            terminate_placed: false,
            terminate_decided: false,
            forwarded_terminate: false,
            closing: false,
            failures: 0,
            backoff: None,
            attempt: 0,
        }
    }

    fn effective(&self, key: &str) -> Ballot {
        self.promised.get(key).copied().unwrap_or_default().max(self.promised_all)
    }

    fn note_top(&mut self, t: &Tuple) {
        for (k, p) in &t.positions {
            let e = self.top.entry(k.clone()).or_insert(0);
            *e = (*e).max(p + 1);
        }
    }

    fn see(&mut self, b: Ballot) {
        self.max_seen = self.max_seen.max(b);
    }

    fn fresh_ballot(&mut self) -> Ballot {
        let b = self.max_seen.successor(self.me);
        self.max_seen = b;
        b
    }

    fn lose(&mut self, key: &str) {
        self.owned.remove(key);
    }

    // ---- acceptor ----

    fn on_prepare(
        &mut self,
        cx: &mut ProtoCtx<'_>,
        from_node: NodeId,
        ballot: Ballot,
        keys: KeySet,
        from: BTreeMap<String, u64>,
    ) {
        self.see(ballot);
        let ok = match &keys {
            KeySet::All => ballot > self.promised_all && self.promised.values().all(|&p| ballot > p),
            KeySet::Keys(ks) => ks.iter().all(|k| ballot > self.effective(k)),
        };
        if !ok {
            let promised = match &keys {
                KeySet::All => self.promised.values().copied().fold(self.promised_all, Ballot::max),
                KeySet::Keys(ks) => ks.iter().map(|k| self.effective(k)).max().unwrap_or_default(),
            };
            cx.send(from_node, wrap(Msg::Nack { ballot, promised, tid: None }));
            return;
        }
        match &keys {
            KeySet::All => {
                self.promised_all = ballot;
                let all: Vec<String> = self.owned.keys().cloned().collect();
                for k in all {
                    self.lose(&k);
                }
            }
            KeySet::Keys(ks) => {
                for k in ks {
                    self.promised.insert(k.clone(), ballot);
                    if from_node != self.me {
                        self.lose(k);
                    }
                }
            }
        }
        let wanted = |k: &String, p: u64| keys.contains(k) && p >= from.get(k).copied().unwrap_or(0);
        let accepted = self
            .accepted
            .iter()
            .filter(|((k, p), _)| wanted(k, *p))
            .map(|(s, (b, t))| (s.clone(), *b, t.clone()))
            .collect();
        let mut seen = BTreeSet::new();
        let decided = self
            .decided
            .iter()
            .filter(|((k, p), _)| wanted(k, *p))
            .filter(|(_, t)| seen.insert(t.tid()))
            .map(|(_, t)| t.clone())
            .collect();
        cx.send(from_node, wrap(Msg::Promise { ballot, accepted, decided }));
    }

    fn on_accept(
        &mut self,
        cx: &mut ProtoCtx<'_>,
        from: NodeId,
        tuple: Tuple,
        ballot: Ballot,
        ballots: BTreeMap<String, Ballot>,
        wildcard: bool,
    ) {
        self.see(ballot);
        let tid = tuple.tid();
        let ok = if wildcard {
            ballot >= self.promised_all && self.promised.values().all(|&p| ballot >= p)
        } else {
            tuple.positions.keys().all(|k| ballots.get(k).is_some_and(|&b| b >= self.effective(k)))
                && (tuple.is_terminate() || self.terminate_accepted.is_none_or(|t| ballot >= t))
        };
        if !ok {
            let promised = if wildcard {
                self.promised.values().copied().fold(self.promised_all, Ballot::max)
            } else {
                tuple.positions.keys().map(|k| self.effective(k)).max().unwrap_or_default()
            };
            let promised = promised.max(self.terminate_accepted.unwrap_or_default());
            cx.send(from, wrap(Msg::Nack { ballot, promised, tid: Some(tid) }));
            return;
        }
        if wildcard {
            self.promised_all = ballot;
        } else {
            for k in tuple.positions.keys() {
                self.promised.insert(k.clone(), ballots[k]);
                if from != self.me {
                    self.lose(k);
                }
            }
        }
        if tuple.is_terminate() {
            self.terminate_accepted = Some(self.terminate_accepted.unwrap_or_default().max(ballot));
        }
        self.note_top(&tuple);
        for s in tuple.slots() {
            let b = if wildcard { ballot } else { ballots[&s.0] };
            self.accepted.insert(s, (b, tuple.clone()));
        }
        cx.send(from, wrap(Msg::Accepted { tid, ballot }));
    }

    fn decide(&mut self, cx: &mut ProtoCtx<'_>, tuple: Tuple) {
        if tuple.slots().all(|s| self.decided.contains_key(&s)) {
            return;
        }
        self.note_top(&tuple);
        for s in tuple.slots() {
            self.decided.insert(s, tuple.clone());
        }
        for k in tuple.positions.keys() {
            let mut p = self.prefix.get(k).copied().unwrap_or(0);
            while self.decided.contains_key(&(k.clone(), p)) {
                p += 1;
            }
            self.prefix.insert(k.clone(), p);
        }
        if tuple.is_terminate() {
            self.terminate_decided = true;
        }
        cx.learn(Learned { entry: tuple.entry.clone(), order: Order::Positions(tuple.positions) });
    }

    // ---- owner ----

    fn start_accept(&mut self, cx: &mut ProtoCtx<'_>, tuple: Tuple, ballot: Ballot, wildcard: bool) {
        let ballots = tuple.positions.keys().map(|k| (k.clone(), ballot)).collect();
        self.start_accept_with(cx, tuple, ballots, wildcard);
    }

    fn start_accept_with(
        &mut self,
        cx: &mut ProtoCtx<'_>,
        tuple: Tuple,
        ballots: BTreeMap<String, Ballot>,
        wildcard: bool,
    ) {
        let tid = tuple.tid();
        let ballot = ballots.values().copied().max().unwrap_or_default();
        cx.broadcast(self.n, wrap(Msg::Accept { tuple: tuple.clone(), ballot, ballots, wildcard }));
        self.inflight.insert(tid, InFlight { tuple, ballot, wildcard, acks: BTreeSet::new() });
    }

    fn start_acquisition(&mut self, cx: &mut ProtoCtx<'_>, keys: KeySet) {
        let ballot = self.fresh_ballot();
        let from: BTreeMap<String, u64> = match &keys {
            KeySet::All => self.prefix.clone(),
            KeySet::Keys(ks) => ks.iter().map(|k| (k.clone(), self.prefix.get(k).copied().unwrap_or(0))).collect(),
        };
        let label = match &keys {
            KeySet::All => "ALL".to_string(),
            KeySet::Keys(ks) => ks.iter().cloned().collect::<Vec<_>>().join(","),
        };
        cx.trace("acquire", format!("era={} keys={label} ballot={ballot}", self.era));
        cx.broadcast(self.n, wrap(Msg::Prepare { ballot, keys: keys.clone(), from: from.clone() }));
        self.acquisition = Some(Acquisition { ballot, keys, from, replies: BTreeMap::new() });
    }

    fn schedule_backoff(&mut self, cx: &mut ProtoCtx<'_>) {
        self.failures = (self.failures + 1).min(4);
        let cap = self.backoff_base << self.failures;
        let wait = self.rng.gen_range(self.backoff_base / 2..=cap);
        self.attempt += 1;
        self.backoff = Some(self.attempt);
        cx.timer(wait, ProtoTimer::Oligarchic(Timer::Backoff(self.attempt)));
    }

    fn drain_pending(&mut self, cx: &mut ProtoCtx<'_>) {
        for c in self.pending.drain(..) {
            cx.reject(c);
        }
    }

    fn pump(&mut self, cx: &mut ProtoCtx<'_>) {
        if self.closing || self.terminate_decided || self.terminate_accepted.is_some() {
            self.drain_pending(cx);
        }
        if self.acquisition.is_some() || self.backoff.is_some() || self.terminate_decided {
            return;
        }
        if let Some(t) = self.terminate.clone() {
            if !self.terminate_placed {
                if cx.leader == self.me {
                    self.start_acquisition(cx, KeySet::All);
                } else if !self.forwarded_terminate {
                    self.forwarded_terminate = true;
                    cx.send(cx.leader, wrap(Msg::ForwardTerminate(t)));
                }
                return;
            }
        }
        while let Some(cmd) = self.pending.front() {
            let logs = logs_of(cmd);
            let missing: Vec<String> = logs.iter().filter(|k| !self.owned.contains_key(*k)).cloned().collect();
            if !missing.is_empty() {
                let mut wanted: BTreeSet<String> = missing.into_iter().collect();
                for c in self.pending.iter().skip(1) {
                    wanted.extend(logs_of(c).into_iter().filter(|k| !self.owned.contains_key(k)));
                }
                self.start_acquisition(cx, KeySet::Keys(wanted));
                return;
            }
            let cmd = self.pending.pop_front().expect("front exists");
            // each slot goes out under the ballot its log was prepared with
            let ballots: BTreeMap<String, Ballot> = logs.iter().map(|k| (k.clone(), self.owned[k])).collect();
            let mut positions = BTreeMap::new();
            for k in &logs {
                let top = self.top.entry(k.clone()).or_insert(0);
                positions.insert(k.clone(), *top);
                *top += 1;
            }
            self.start_accept_with(cx, Tuple { entry: Entry::Cmd(cmd), positions }, ballots, false);
        }
    }

    fn finish_acquisition(&mut self, cx: &mut ProtoCtx<'_>, acq: Acquisition) {
        let mut best: BTreeMap<Slot, (Ballot, Tuple)> = BTreeMap::new();
        for (accepted, decided) in acq.replies.into_values() {
            for t in decided {
                self.decide(cx, t);
            }
            for (slot, b, t) in accepted {
                if !best.get(&slot).is_some_and(|(cur, _)| *cur >= b) {
                    best.insert(slot, (b, t));
                }
            }
        }
        best.retain(|s, _| !self.decided.contains_key(s));
        let revealed_terminate = best.values().find(|(_, t)| t.is_terminate()).map(|(_, t)| t.clone());
        let wildcard = acq.keys.is_all();

        if !wildcard {
            if let Some(t) = revealed_terminate {
                // The era is ending: only the wildcard owner may finish it.
                let cmd = t.entry.cmd().expect("terminate").clone();
                self.terminate.get_or_insert(cmd);
                self.closing = true;
                self.pump(cx);
                return;
            }
            let mut needed: BTreeSet<String> = acq.keys.keys().cloned().collect();
            for (_, t) in best.values() {
                needed.extend(t.positions.keys().cloned());
            }
            if needed.iter().any(|k| !acq.keys.contains(k)) {
                self.start_acquisition(cx, KeySet::Keys(needed));
                return;
            }
        }

        let keys: BTreeSet<String> = if wildcard {
            let mut all: BTreeSet<String> = self.top.keys().cloned().collect();
            all.extend(best.keys().map(|(k, _)| k.clone()));
            all.insert(WILDCARD_LOG.to_string());
            all
        } else {
            acq.keys.keys().cloned().collect()
        };
        for (k, p) in best.keys() {
            let e = self.top.entry(k.clone()).or_insert(0);
            *e = (*e).max(p + 1);
        }
        let viable = |t: &Tuple| {
            t.slots().all(|s| best.get(&s).is_none_or(|(_, x)| x == t) && self.decided.get(&s).is_none_or(|x| x == t))
        };
        let mut proposed = BTreeSet::new();
        let mut batch = Vec::new();
        for k in &keys {
            let start = acq.from.get(k).copied().unwrap_or(0);
            let end = self.top.get(k).copied().unwrap_or(0);
            for p in start..end {
                let slot = (k.clone(), p);
                if self.decided.contains_key(&slot) {
                    continue;
                }
                let tuple = match best.get(&slot) {
                    Some((_, t)) if viable(t) => t.clone(),
                    _ => Tuple::noop(k, p),
                };
                if proposed.insert(tuple.tid()) {
                    batch.push(tuple);
                }
            }
        }
        let terminate_reproposed = batch.iter().any(Tuple::is_terminate);
        for tuple in batch {
            let wc = tuple.is_terminate();
            self.start_accept(cx, tuple, acq.ballot, wc);
        }
        cx.trace(
            "own",
            format!(
                "era={} keys={} ballot={}",
                self.era,
                if wildcard { "ALL".to_string() } else { keys.iter().cloned().collect::<Vec<_>>().join(",") },
                acq.ballot
            ),
        );
        self.failures = 0;
        if wildcard {
            self.terminate_placed = true;
            if !terminate_reproposed {
                let cmd = self.terminate.clone().expect("wildcard acquisition is for terminate");
                let positions: BTreeMap<String, u64> =
                    keys.iter().map(|k| (k.clone(), self.top.get(k).copied().unwrap_or(0))).collect();
                let tuple = Tuple { entry: Entry::Cmd(cmd), positions };
                self.note_top(&tuple);
                self.start_accept(cx, tuple, acq.ballot, true);
            }
        } else {
            for k in keys {
                self.owned.insert(k, acq.ballot);
            }
        }
        self.pump(cx);
    }

    fn on_nack(&mut self, cx: &mut ProtoCtx<'_>, ballot: Ballot, promised: Ballot, tid: Option<Slot>) {
        self.see(promised);
        match tid {
            None => {
                if self.acquisition.as_ref().is_some_and(|a| a.ballot == ballot) {
                    self.acquisition = None;
                    self.schedule_backoff(cx);
                }
            }
            Some(tid) => {
                let Some(f) = self.inflight.get(&tid) else { return };
                if f.ballot != ballot {
                    return;
                }
                let f = self.inflight.remove(&tid).expect("present");
                for k in f.tuple.positions.keys() {
                    if self.owned.get(k).is_some_and(|b| *b <= promised) {
                        self.lose(k);
                    }
                }
                if f.wildcard {
                    self.terminate_placed = false;
                }
                if let Entry::Cmd(c) = f.tuple.entry {
                    if !c.is_terminate() {
                        self.pending.push_front(c);
                    }
                }
                if self.backoff.is_none() && self.acquisition.is_none() {
                    self.schedule_backoff(cx);
                }
                self.pump(cx);
            }
        }
    }
}

impl Agreement for Oligarchic {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Oligarchic
    }

    fn propose(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command) {
        if cmd.is_terminate() {
            self.terminate.get_or_insert(cmd);
        } else if self.pending.iter().all(|c| c.id != cmd.id) {
            self.pending.push_back(cmd);
        }
        self.pump(cx);
    }

    fn on_message(&mut self, cx: &mut ProtoCtx<'_>, from: NodeId, msg: ProtoMsg) {
        let ProtoMsg::Oligarchic(msg) = msg else { return };
        match msg {
            Msg::Prepare { ballot, keys, from: f } => self.on_prepare(cx, from, ballot, keys, f),
            Msg::Promise { ballot, accepted, decided } => {
                let Some(acq) = self.acquisition.as_mut() else { return };
                if acq.ballot != ballot {
                    return;
                }
                acq.replies.insert(from, (accepted, decided));
                if acq.replies.len() >= self.quorum {
                    let acq = self.acquisition.take().expect("present");
                    self.finish_acquisition(cx, acq);
                }
            }
            Msg::Accept { tuple, ballot, ballots, wildcard } => {
                self.on_accept(cx, from, tuple, ballot, ballots, wildcard)
            }
            Msg::Accepted { tid, ballot } => {
                let Some(f) = self.inflight.get_mut(&tid) else { return };
                if f.ballot != ballot {
                    return;
                }
                f.acks.insert(from);
                if f.acks.len() >= self.quorum {
                    let f = self.inflight.remove(&tid).expect("present");
                    cx.broadcast(self.n, wrap(Msg::Decide(f.tuple)));
                }
            }
            Msg::Nack { ballot, promised, tid } => self.on_nack(cx, ballot, promised, tid),
            Msg::Decide(t) => {
                self.decide(cx, t);
                self.pump(cx);
            }
            Msg::ForwardTerminate(cmd) => {
                if self.terminate.is_none() {
                    self.terminate = Some(cmd);
                }
                self.pump(cx);
            }
        }
    }

    fn on_timer(&mut self, cx: &mut ProtoCtx<'_>, timer: ProtoTimer) {
        let ProtoTimer::Oligarchic(Timer::Backoff(a)) = timer else { return };
        if self.backoff == Some(a) {
            self.backoff = None;
            self.pump(cx);
        }
    }

    fn on_leader_change(&mut self, cx: &mut ProtoCtx<'_>) {
        self.forwarded_terminate = false;
        self.pump(cx);
    }

    fn close(&mut self, cx: &mut ProtoCtx<'_>) {
        self.closing = true;
        self.pump(cx);
    }
}

/// Releases a command once it heads every log it occupies.
#[derive(Debug, Default)]
pub struct KeyLogExecutor {
    logs: BTreeMap<String, BTreeMap<u64, usize>>,
    next: BTreeMap<String, u64>,
    entries: Vec<Option<(Entry, BTreeMap<String, u64>)>>,
    dirty: BTreeSet<String>,
    guard: ReleaseGuard,
}

impl KeyLogExecutor {
    fn head(&self, key: &str) -> Option<usize> {
        let next = self.next.get(key).copied().unwrap_or(0);
        self.logs.get(key)?.get(&next).copied()
    }

    fn ready(&self, idx: usize) -> bool {
        let Some((_, positions)) = &self.entries[idx] else { return false };
        positions.iter().all(|(k, p)| self.next.get(k).copied().unwrap_or(0) == *p)
    }
}

impl Execution for KeyLogExecutor {
    fn append_for_execution(&mut self, learned: Learned) {
        let Order::Positions(positions) = learned.order else { return };
        let idx = self.entries.len();
        for (k, p) in &positions {
            self.logs.entry(k.clone()).or_default().insert(*p, idx);
            self.dirty.insert(k.clone());
        }
        self.entries.push(Some((learned.entry, positions)));
    }

    fn get_next_deliverable(&mut self) -> Option<Command> {
        while let Some(key) = self.dirty.pop_first() {
            let Some(idx) = self.head(&key) else { continue };
            if !self.ready(idx) {
                continue;
            }
            let (entry, positions) = self.entries[idx].take().expect("ready entries are present");
            for (k, p) in &positions {
                self.next.insert(k.clone(), p + 1);
                if let Some(log) = self.logs.get_mut(k) {
                    log.remove(p);
                }
                self.dirty.insert(k.clone());
            }
            if let Some(c) = self.guard.admit(&entry) {
                return Some(c);
            }
        }
        None
    }
}
