//! Single-leader replicated log. The leader assigns slots, collects a
//! classic quorum of accepts and announces decisions; followers forward.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::model::{classic_quorum_size, Ballot, CmdId, Command, NodeId, ProtocolKind};
use crate::plugin::{
    Agreement, Entry, Execution, Learned, Order, ProtoConfig, ProtoCtx, ProtoMsg, ProtoTimer, ReleaseGuard,
};
use crate::simnet::Time;

#[derive(Debug, Clone)]
pub enum Msg {
    Forward(Command),
    Reject(Command),
    Prepare { ballot: Ballot, from_slot: u64 },
    Promise { ballot: Ballot, accepted: Vec<(u64, Ballot, Entry)>, decided: Vec<(u64, Entry)> },
    Nack { promised: Ballot },
    Accept { ballot: Ballot, slot: u64, entry: Entry },
    Accepted { ballot: Ballot, slot: u64 },
    Decide { slot: u64, entry: Entry },
}

impl Msg {
    pub fn name(&self) -> &'static str {
        match self {
            Msg::Forward(_) => "forward",
            Msg::Reject(_) => "reject",
            Msg::Prepare { .. } => "prepare",
            Msg::Promise { .. } => "promise",
            Msg::Nack { .. } => "nack",
            Msg::Accept { .. } => "accept",
            Msg::Accepted { .. } => "accepted",
            Msg::Decide { .. } => "decide",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Retry(u64),
}

#[derive(Debug)]
enum Role {
    Follower,
    Preparing { promises: BTreeMap<NodeId, Vec<(u64, Ballot, Entry)>> },
    Leading,
}

#[derive(Debug)]
struct Proposal {
    entry: Entry,
    acks: BTreeSet<NodeId>,
}

pub struct Monarchic {
    n: usize,
    me: NodeId,
    quorum: usize,
    retry_after: Time,
    promised: Ballot,
    accepted: BTreeMap<u64, (Ballot, Entry)>,
    decided: BTreeMap<u64, Entry>,
    learn_next: u64,
    role: Role,
    ballot: Ballot,
    next_slot: u64,
    proposals: BTreeMap<u64, Proposal>,
    in_log: HashSet<CmdId>,
    terminate_slot: Option<u64>,
    queued: Vec<Command>,
    forwarded: BTreeMap<CmdId, Command>,
    attempt: u64,
}

fn wrap(m: Msg) -> ProtoMsg {
    ProtoMsg::Monarchic(m)
}

impl Monarchic {
    pub fn new(cfg: &ProtoConfig, me: NodeId) -> Self {
        let initial = Ballot::new(0, NodeId(0));
        Monarchic {
            n: cfg.n,
            me,
            quorum: classic_quorum_size(cfg.n).unwrap_or(1),
            retry_after: 4 * cfg.max_delay,
            promised: initial,
            accepted: BTreeMap::new(),
            decided: BTreeMap::new(),
            learn_next: 0,
            // Every acceptor starts promised to node 0's first ballot.
            role: if me == NodeId(0) { Role::Leading } else { Role::Follower },
            ballot: initial,
            next_slot: 0,
            proposals: BTreeMap::new(),
            in_log: HashSet::new(),
            terminate_slot: None,
            queued: Vec::new(),
            forwarded: BTreeMap::new(),
            attempt: 0,
        }
    }

    fn first_undecided(&self) -> u64 {
        let mut s = self.learn_next;
        while self.decided.contains_key(&s) {
            s += 1;
        }
        s
    }

    fn step_down(&mut self) {
        if !matches!(self.role, Role::Follower) {
            self.role = Role::Follower;
            self.proposals.clear();
            let queued = std::mem::take(&mut self.queued);
            for c in queued {
                self.forwarded.insert(c.id, c);
            }
        }
    }

    fn ensure_leadership(&mut self, cx: &mut ProtoCtx<'_>) {
        if cx.leader != self.me || !matches!(self.role, Role::Follower) {
            return;
        }
        self.ballot = self.promised.max(self.ballot).successor(self.me);
        self.role = Role::Preparing { promises: BTreeMap::new() };
        cx.trace("prepare", format!("ballot={}", self.ballot));
        let from_slot = self.first_undecided();
        cx.broadcast(self.n, wrap(Msg::Prepare { ballot: self.ballot, from_slot }));
    }

    fn assign(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command, from: NodeId) {
        if self.in_log.contains(&cmd.id) {
            return;
        }
        if self.terminate_slot.is_some() {
            if from == self.me {
                cx.reject(cmd);
            } else {
                cx.send(from, wrap(Msg::Reject(cmd)));
            }
            return;
        }
        let slot = self.next_slot;
        self.next_slot += 1;
        if cmd.is_terminate() {
            self.terminate_slot = Some(slot);
        }
        self.in_log.insert(cmd.id);
        self.start_accept(cx, slot, Entry::Cmd(cmd));
    }

    fn start_accept(&mut self, cx: &mut ProtoCtx<'_>, slot: u64, entry: Entry) {
        self.proposals.insert(slot, Proposal { entry: entry.clone(), acks: BTreeSet::new() });
        cx.broadcast(self.n, wrap(Msg::Accept { ballot: self.ballot, slot, entry }));
    }

    fn decide(&mut self, cx: &mut ProtoCtx<'_>, slot: u64, entry: Entry) {
        if self.decided.contains_key(&slot) {
            return;
        }
        if let Entry::Cmd(c) = &entry {
            self.forwarded.remove(&c.id);
            self.in_log.insert(c.id);
            if c.is_terminate() && self.terminate_slot.is_none() {
                self.terminate_slot = Some(slot);
            }
        }
        self.decided.insert(slot, entry);
        while let Some(e) = self.decided.get(&self.learn_next) {
            cx.learn(Learned { entry: e.clone(), order: Order::Slot(self.learn_next) });
            self.learn_next += 1;
        }
    }

    fn finish_prepare(&mut self, cx: &mut ProtoCtx<'_>, promises: BTreeMap<NodeId, Vec<(u64, Ballot, Entry)>>) {
        let from = self.first_undecided();
        let mut best: BTreeMap<u64, (Ballot, Entry)> = BTreeMap::new();
        for accepted in promises.into_values() {
            for (slot, b, e) in accepted {
                if slot < from || self.decided.contains_key(&slot) {
                    continue;
                }
                match best.get(&slot) {
                    Some((cur, _)) if *cur >= b => {}
                    _ => {
                        best.insert(slot, (b, e));
                    }
                }
            }
        }
        let decided_max = self.decided.keys().next_back().map_or(0, |s| s + 1);
        let top = best.keys().next_back().map_or(0, |s| s + 1).max(decided_max).max(from);
        self.role = Role::Leading;
        self.proposals.clear();
        self.terminate_slot =
            self.decided.iter().find(|(_, e)| e.cmd().is_some_and(Command::is_terminate)).map(|(s, _)| *s);
        cx.trace("lead", format!("ballot={} from={from} to={top}", self.ballot));
        for slot in from..top {
            if self.decided.contains_key(&slot) {
                continue;
            }
            let mut entry = best.remove(&slot).map_or(Entry::Noop, |(_, e)| e);
            if self.terminate_slot.is_some_and(|t| slot > t) {
                entry = Entry::Noop;
            }
            if let Entry::Cmd(c) = &entry {
                if c.is_terminate() {
                    self.terminate_slot = Some(slot);
                }
                self.in_log.insert(c.id);
            }
            self.start_accept(cx, slot, entry);
        }
        self.next_slot = top;
        let mut pending: Vec<Command> = std::mem::take(&mut self.queued);
        pending.extend(std::mem::take(&mut self.forwarded).into_values());
        for c in pending {
            self.assign(cx, c, self.me);
        }
    }
}

impl Agreement for Monarchic {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Monarchic
    }

    fn propose(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command) {
        self.ensure_leadership(cx);
        match self.role {
            Role::Leading => self.assign(cx, cmd, self.me),
            Role::Preparing { .. } => self.queued.push(cmd),
            Role::Follower => {
                cx.send(cx.leader, wrap(Msg::Forward(cmd.clone())));
                self.forwarded.insert(cmd.id, cmd);
            }
        }
    }

    fn on_message(&mut self, cx: &mut ProtoCtx<'_>, from: NodeId, msg: ProtoMsg) {
        let ProtoMsg::Monarchic(msg) = msg else { return };
        match msg {
            Msg::Forward(cmd) => {
                self.ensure_leadership(cx);
                match self.role {
                    Role::Leading => self.assign(cx, cmd, from),
                    Role::Preparing { .. } => self.queued.push(cmd),
                    Role::Follower => {
                        if cx.leader != self.me {
                            cx.send(cx.leader, wrap(Msg::Forward(cmd)));
                        }
                    }
                }
            }
            Msg::Reject(cmd) => {
                self.forwarded.remove(&cmd.id);
                cx.reject(cmd);
            }
            Msg::Prepare { ballot, from_slot } => {
                if ballot > self.promised {
                    self.promised = ballot;
                    if ballot.node != self.me {
                        self.step_down();
                    }
                    let accepted = self.accepted.range(from_slot..).map(|(s, (b, e))| (*s, *b, e.clone())).collect();
                    let decided = self.decided.range(from_slot..).map(|(s, e)| (*s, e.clone())).collect();
                    cx.send(from, wrap(Msg::Promise { ballot, accepted, decided }));
                } else {
                    cx.send(from, wrap(Msg::Nack { promised: self.promised }));
                }
            }
            Msg::Promise { ballot, accepted, decided } => {
                if ballot != self.ballot {
                    return;
                }
                for (slot, e) in decided {
                    self.decide(cx, slot, e);
                }
                let Role::Preparing { promises } = &mut self.role else { return };
                promises.insert(from, accepted);
                if promises.len() >= self.quorum {
                    let promises = std::mem::take(promises);
                    self.finish_prepare(cx, promises);
                }
            }
            Msg::Nack { promised } => {
                if promised > self.ballot && !matches!(self.role, Role::Follower) {
                    self.promised = self.promised.max(promised);
                    self.step_down();
                    self.attempt += 1;
                    cx.timer(self.retry_after, ProtoTimer::Monarchic(Timer::Retry(self.attempt)));
                }
            }
            Msg::Accept { ballot, slot, entry } => {
                if ballot >= self.promised {
                    self.promised = ballot;
                    if ballot.node != self.me {
                        self.step_down();
                    }
                    self.accepted.insert(slot, (ballot, entry));
                    cx.send(from, wrap(Msg::Accepted { ballot, slot }));
                } else {
                    cx.send(from, wrap(Msg::Nack { promised: self.promised }));
                }
            }
            Msg::Accepted { ballot, slot } => {
                if ballot != self.ballot || !matches!(self.role, Role::Leading) {
                    return;
                }
                let Some(p) = self.proposals.get_mut(&slot) else { return };
                p.acks.insert(from);
                if p.acks.len() >= self.quorum {
                    let p = self.proposals.remove(&slot).expect("present");
                    cx.broadcast(self.n, wrap(Msg::Decide { slot, entry: p.entry }));
                }
            }
            Msg::Decide { slot, entry } => self.decide(cx, slot, entry),
        }
    }

    fn on_timer(&mut self, cx: &mut ProtoCtx<'_>, timer: ProtoTimer) {
        let ProtoTimer::Monarchic(Timer::Retry(a)) = timer else { return };
        if a == self.attempt {
            self.ensure_leadership(cx);
        }
    }

    fn on_leader_change(&mut self, cx: &mut ProtoCtx<'_>) {
        if cx.leader == self.me {
            self.ensure_leadership(cx);
        } else {
            self.step_down();
            for c in self.forwarded.values() {
                cx.send(cx.leader, wrap(Msg::Forward(c.clone())));
            }
        }
    }
}

/// Releases slots strictly in order, skipping no-ops.
#[derive(Debug, Default)]
pub struct SlotExecutor {
    pool: BTreeMap<u64, Entry>,
    next: u64,
    guard: ReleaseGuard,
}

impl Execution for SlotExecutor {
    fn append_for_execution(&mut self, learned: Learned) {
        if let Order::Slot(s) = learned.order {
            if s >= self.next {
                self.pool.insert(s, learned.entry);
            }
        }
    }

    fn get_next_deliverable(&mut self) -> Option<Command> {
        while let Some(entry) = self.pool.remove(&self.next) {
            self.next += 1;
            if let Some(c) = self.guard.admit(&entry) {
                return Some(c);
            }
        }
        None
    }
}
