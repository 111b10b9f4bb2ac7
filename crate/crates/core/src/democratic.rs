//! Leaderless ordering. Every node opens instances for its own commands and
//! collects dependencies from a quorum; matching replies from a fast quorum
//! commit in one round trip, anything else goes through an accept round.
//!
//! A dependency entry `((p, k), s)` stands for every instance of `p` with
//! sequence number at most `s` that touches `k`. `DepKey::All` covers all of
//! `p`'s instances up to `s`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::model::{classic_quorum_size, fast_quorum_size, Ballot, CmdId, Command, KeySet, NodeId, ProtocolKind};
use crate::plugin::{
    Agreement, Entry, Execution, Learned, Order, ProtoConfig, ProtoCtx, ProtoMsg, ProtoTimer, ReleaseGuard,
};
use crate::simnet::Time;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId {
    pub owner: NodeId,
    pub seq: u64,
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DepKey {
    Key(String),
    All,
}

pub type Deps = BTreeMap<(NodeId, DepKey), u64>;

pub fn union(a: &Deps, b: &Deps) -> Deps {
    let mut out = a.clone();
    for (k, &s) in b {
        let e = out.entry(k.clone()).or_insert(s);
        *e = (*e).max(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    PreAccepted,
    Accepted,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub status: Status,
    pub vballot: Ballot,
    pub cmd: Command,
    pub deps: Deps,
    /// Preaccepted at the owner's initial ballot with exactly the owner's deps.
    pub matches_initial: bool,
}

#[derive(Debug, Clone)]
pub enum Msg {
    PreAccept { id: InstanceId, ballot: Ballot, cmd: Command, deps: Deps },
    PreAcceptOk { id: InstanceId, ballot: Ballot, deps: Deps },
    Accept { id: InstanceId, ballot: Ballot, cmd: Command, deps: Deps },
    AcceptOk { id: InstanceId, ballot: Ballot },
    Commit { id: InstanceId, cmd: Command, deps: Deps },
    Prepare { id: InstanceId, ballot: Ballot },
    PrepareOk { id: InstanceId, ballot: Ballot, record: Option<Record> },
    Nack { id: InstanceId, ballot: Ballot, promised: Ballot },
    ForwardTerminate(Command),
}

impl Msg {
    pub fn name(&self) -> &'static str {
        match self {
            Msg::PreAccept { .. } => "preaccept",
            Msg::PreAcceptOk { .. } => "preaccept_ok",
            Msg::Accept { .. } => "accept",
            Msg::AcceptOk { .. } => "accept_ok",
            Msg::Commit { .. } => "commit",
            Msg::Prepare { .. } => "prepare",
            Msg::PrepareOk { .. } => "prepare_ok",
            Msg::Nack { .. } => "nack",
            Msg::ForwardTerminate(_) => "forward_terminate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Fallback(InstanceId, Ballot),
    RecoveryCheck,
}

fn wrap(m: Msg) -> ProtoMsg {
    ProtoMsg::Democratic(m)
}

fn initial_ballot(owner: NodeId) -> Ballot {
    Ballot::new(0, owner)
}

#[derive(Debug)]
struct Inst {
    promised: Ballot,
    vballot: Ballot,
    status: Status,
    cmd: Command,
    deps: Deps,
    initial: Option<Deps>,
    seen_at: Time,
}

#[derive(Debug)]
enum Phase {
    PreAccept { proposed: Deps, replies: BTreeMap<NodeId, Deps>, force_slow: bool, timed_out: bool },
    Accept { deps: Deps, acks: BTreeSet<NodeId> },
    Prepare { replies: BTreeMap<NodeId, Option<Record>> },
}

#[derive(Debug)]
struct Lead {
    ballot: Ballot,
    cmd: Command,
    phase: Phase,
}

#[derive(Debug, Default)]
struct Index {
    by_key: BTreeMap<(NodeId, String), u64>,
    wildcard: BTreeMap<NodeId, u64>,
    any: BTreeMap<NodeId, u64>,
}

impl Index {
    fn record(&mut self, id: InstanceId, keys: &KeySet) {
        let bump = |m: &mut u64| *m = (*m).max(id.seq);
        match keys {
            KeySet::All => bump(self.wildcard.entry(id.owner).or_insert(id.seq)),
            KeySet::Keys(ks) => {
                for k in ks {
                    bump(self.by_key.entry((id.owner, k.clone())).or_insert(id.seq));
                }
            }
        }
        bump(self.any.entry(id.owner).or_insert(id.seq));
    }

    fn deps(&self, keys: &KeySet, owners: usize) -> Deps {
        let mut out = Deps::new();
        for p in (0..owners).map(NodeId) {
            match keys {
                KeySet::All => {
                    if let Some(&s) = self.any.get(&p) {
                        out.insert((p, DepKey::All), s);
                    }
                }
                KeySet::Keys(ks) => {
                    for k in ks {
                        let s = self.by_key.get(&(p, k.clone())).copied().max(self.wildcard.get(&p).copied());
                        if let Some(s) = s {
                            out.insert((p, DepKey::Key(k.clone())), s);
                        }
                    }
                }
            }
        }
        out
    }
}

pub struct Democratic {
    n: usize,
    me: NodeId,
    classic: usize,
    fast: usize,
    recovery_threshold: usize,
    fallback_after: Time,
    check_every: Time,
    next_seq: u64,
    insts: BTreeMap<InstanceId, Inst>,
    index: Index,
    leads: BTreeMap<InstanceId, Lead>,
    max_seen: Ballot,
    terminate_forwarded: Option<Command>,
    terminate_instance: bool,
    ticking: bool,
}

impl Democratic {
    pub fn new(cfg: &ProtoConfig, me: NodeId) -> Self {
        let classic = classic_quorum_size(cfg.n).unwrap_or(1);
        let fast = fast_quorum_size(cfg.n).unwrap_or(1);
        Democratic {
            n: cfg.n,
            me,
            classic,
            fast,
            recovery_threshold: (classic + fast).saturating_sub(cfg.n).max(1),
            fallback_after: 3 * cfg.max_delay,
            check_every: cfg.suspicion_timeout.max(1),
            next_seq: 0,
            insts: BTreeMap::new(),
            index: Index::default(),
            leads: BTreeMap::new(),
            max_seen: Ballot::default(),
            terminate_forwarded: None,
            terminate_instance: false,
            ticking: false,
        }
    }

    fn tick(&mut self, cx: &mut ProtoCtx<'_>) {
        if !self.ticking {
            self.ticking = true;
            cx.timer(self.check_every, ProtoTimer::Democratic(Timer::RecoveryCheck));
        }
    }

    fn send_others(&self, cx: &mut ProtoCtx<'_>, msg: Msg) {
        for i in (0..self.n).filter(|&i| i != self.me.0) {
            cx.send(NodeId(i), wrap(msg.clone()));
        }
    }

    fn open(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command) {
        if cmd.is_terminate() {
            self.terminate_instance = true;
        }
        let id = InstanceId { owner: self.me, seq: self.next_seq };
        self.next_seq += 1;
        let ballot = initial_ballot(self.me);
        let deps = self.index.deps(&cmd.keys, self.n);
        self.index.record(id, &cmd.keys);
        self.insts.insert(
            id,
            Inst {
                promised: ballot,
                vballot: ballot,
                status: Status::PreAccepted,
                cmd: cmd.clone(),
                deps: deps.clone(),
                initial: Some(deps.clone()),
                seen_at: cx.now,
            },
        );
        let replies = BTreeMap::from([(self.me, deps.clone())]);
        self.leads.insert(
            id,
            Lead {
                ballot,
                cmd: cmd.clone(),
                phase: Phase::PreAccept { proposed: deps.clone(), replies, force_slow: false, timed_out: false },
            },
        );
        self.send_others(cx, Msg::PreAccept { id, ballot, cmd, deps });
        cx.timer(self.fallback_after, ProtoTimer::Democratic(Timer::Fallback(id, ballot)));
        self.check_preaccept(cx, id);
    }

    /// Replica side of a preaccept. Returns the deps this node reports.
    fn preaccept_locally(
        &mut self,
        now: Time,
        id: InstanceId,
        ballot: Ballot,
        cmd: &Command,
        deps: &Deps,
    ) -> Option<Deps> {
        if let Some(i) = self.insts.get(&id) {
            if ballot < i.promised || i.status == Status::Committed {
                return None;
            }
        }
        let local = self.index.deps(&cmd.keys, self.n);
        let merged = union(deps, &local);
        self.index.record(id, &cmd.keys);
        let initial = if ballot == initial_ballot(id.owner) { Some(deps.clone()) } else { None };
        let seen_at = self.insts.get(&id).map_or(now, |i| i.seen_at);
        self.insts.insert(
            id,
            Inst {
                promised: ballot,
                vballot: ballot,
                status: Status::PreAccepted,
                cmd: cmd.clone(),
                deps: merged.clone(),
                initial,
                seen_at,
            },
        );
        Some(merged)
    }

    fn accept_locally(&mut self, now: Time, id: InstanceId, ballot: Ballot, cmd: &Command, deps: &Deps) -> bool {
        if let Some(i) = self.insts.get(&id) {
            if ballot < i.promised {
                return false;
            }
            if i.status == Status::Committed {
                return true;
            }
        }
        self.index.record(id, &cmd.keys);
        let seen_at = self.insts.get(&id).map_or(now, |i| i.seen_at);
        let initial = self.insts.get(&id).and_then(|i| i.initial.clone());
        self.insts.insert(
            id,
            Inst {
                promised: ballot,
                vballot: ballot,
                status: Status::Accepted,
                cmd: cmd.clone(),
                deps: deps.clone(),
                initial,
                seen_at,
            },
        );
        true
    }

    fn commit_locally(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId, cmd: Command, deps: Deps) {
        if self.insts.get(&id).is_some_and(|i| i.status == Status::Committed) {
            return;
        }
        self.leads.remove(&id);
        self.index.record(id, &cmd.keys);
        let entry = self.insts.entry(id).or_insert_with(|| Inst {
            promised: Ballot::default(),
            vballot: Ballot::default(),
            status: Status::Committed,
            cmd: cmd.clone(),
            deps: deps.clone(),
            initial: None,
            seen_at: cx.now,
        });
        entry.status = Status::Committed;
        entry.cmd = cmd.clone();
        entry.deps = deps.clone();
        cx.learn(Learned { entry: Entry::Cmd(cmd), order: Order::Deps { instance: id, deps } });
    }

    fn commit(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId, cmd: Command, deps: Deps) {
        self.send_others(cx, Msg::Commit { id, cmd: cmd.clone(), deps: deps.clone() });
        self.commit_locally(cx, id, cmd, deps);
    }

    fn start_accept(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId, deps: Deps) {
        let Some(lead) = self.leads.get_mut(&id) else { return };
        let ballot = lead.ballot;
        let cmd = lead.cmd.clone();
        lead.phase = Phase::Accept { deps: deps.clone(), acks: BTreeSet::new() };
        let now = cx.now;
        if self.accept_locally(now, id, ballot, &cmd, &deps) {
            if let Some(Lead { phase: Phase::Accept { acks, .. }, .. }) = self.leads.get_mut(&id) {
                acks.insert(self.me);
            }
        }
        self.send_others(cx, Msg::Accept { id, ballot, cmd, deps });
        self.check_accept(cx, id);
    }

    fn check_preaccept(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId) {
        let Some(lead) = self.leads.get(&id) else { return };
        let Phase::PreAccept { proposed, replies, force_slow, timed_out } = &lead.phase else { return };
        let all_match = replies.values().all(|d| d == proposed);
        let initial = lead.ballot == initial_ballot(id.owner) && id.owner == self.me;
        if initial && !force_slow && all_match && replies.len() >= self.fast {
            let (cmd, deps) = (lead.cmd.clone(), proposed.clone());
            cx.trace("fast_path", id.to_string());
            self.commit(cx, id, cmd, deps);
            return;
        }
        let fast_possible = initial && !force_slow && all_match && !timed_out;
        if replies.len() >= self.classic && !fast_possible {
            let deps = replies.values().fold(proposed.clone(), |acc, d| union(&acc, d));
            if initial {
                cx.trace("slow_path", id.to_string());
            }
            self.start_accept(cx, id, deps);
        }
    }

    fn check_accept(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId) {
        let Some(lead) = self.leads.get(&id) else { return };
        let Phase::Accept { deps, acks } = &lead.phase else { return };
        if acks.len() >= self.classic {
            let (cmd, deps) = (lead.cmd.clone(), deps.clone());
            self.commit(cx, id, cmd, deps);
        }
    }

    fn start_recovery(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId) {
        let Some(inst) = self.insts.get_mut(&id) else { return };
        let ballot = self.max_seen.max(inst.promised).successor(self.me);
        self.max_seen = ballot;
        inst.promised = ballot;
        let mine = Record {
            status: inst.status,
            vballot: inst.vballot,
            cmd: inst.cmd.clone(),
            deps: inst.deps.clone(),
            matches_initial: inst.status == Status::PreAccepted
                && inst.vballot == initial_ballot(id.owner)
                && inst.initial.as_ref() == Some(&inst.deps),
        };
        let cmd = inst.cmd.clone();
        cx.trace("recover", format!("{id} ballot={ballot}"));
        self.leads.insert(
            id,
            Lead { ballot, cmd, phase: Phase::Prepare { replies: BTreeMap::from([(self.me, Some(mine))]) } },
        );
        self.send_others(cx, Msg::Prepare { id, ballot });
        self.check_prepare(cx, id);
    }

    fn check_prepare(&mut self, cx: &mut ProtoCtx<'_>, id: InstanceId) {
        let Some(lead) = self.leads.get(&id) else { return };
        let Phase::Prepare { replies } = &lead.phase else { return };
        if replies.len() < self.classic {
            return;
        }
        let records: Vec<(NodeId, &Record)> = replies.iter().filter_map(|(n, r)| r.as_ref().map(|r| (*n, r))).collect();
        if let Some((_, r)) = records.iter().find(|(_, r)| r.status == Status::Committed) {
            let (cmd, deps) = (r.cmd.clone(), r.deps.clone());
            self.commit(cx, id, cmd, deps);
            return;
        }
        if let Some((_, r)) =
            records.iter().filter(|(_, r)| r.status == Status::Accepted).max_by_key(|(_, r)| r.vballot)
        {
            let (cmd, deps) = (r.cmd.clone(), r.deps.clone());
            if let Some(l) = self.leads.get_mut(&id) {
                l.cmd = cmd;
            }
            self.start_accept(cx, id, deps);
            return;
        }
        let owner_replied = replies.contains_key(&id.owner) && id.owner != self.me
            || (id.owner == self.me && replies.contains_key(&self.me));
        let matching: Vec<&Record> =
            records.iter().filter(|(n, r)| *n != id.owner && r.matches_initial).map(|(_, r)| *r).collect();
        if !owner_replied && matching.len() >= self.recovery_threshold {
            let (cmd, deps) = (matching[0].cmd.clone(), matching[0].deps.clone());
            if let Some(l) = self.leads.get_mut(&id) {
                l.cmd = cmd;
            }
            self.start_accept(cx, id, deps);
            return;
        }
        // Nothing can have been decided yet: rerun dependency collection.
        let cmd = lead.cmd.clone();
        let ballot = lead.ballot;
        let seed_deps = records.iter().fold(Deps::new(), |acc, (_, r)| union(&acc, &r.deps));
        let now = cx.now;
        let Some(mine) = self.preaccept_locally(now, id, ballot, &cmd, &seed_deps) else { return };
        let proposed = union(&seed_deps, &mine);
        if let Some(l) = self.leads.get_mut(&id) {
            l.phase = Phase::PreAccept {
                proposed: proposed.clone(),
                replies: BTreeMap::from([(self.me, mine)]),
                force_slow: true,
                timed_out: true,
            };
        }
        self.send_others(cx, Msg::PreAccept { id, ballot, cmd, deps: proposed });
        self.check_preaccept(cx, id);
    }

    fn recovery_check(&mut self, cx: &mut ProtoCtx<'_>) {
        cx.timer(self.check_every, ProtoTimer::Democratic(Timer::RecoveryCheck));
        if cx.leader != self.me {
            return;
        }
        let stale: Vec<InstanceId> = self
            .insts
            .iter()
            .filter(|(id, i)| {
                i.status != Status::Committed
                    && !self.leads.contains_key(id)
                    && (cx.is_suspected(id.owner) || cx.now >= i.seen_at + 2 * self.check_every)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            self.start_recovery(cx, id);
        }
    }

    fn forward_terminate(&mut self, cx: &mut ProtoCtx<'_>) {
        let Some(t) = self.terminate_forwarded.clone() else { return };
        if self.terminate_instance {
            return;
        }
        if cx.leader == self.me {
            self.open(cx, t);
        } else {
            cx.send(cx.leader, wrap(Msg::ForwardTerminate(t)));
        }
    }

    fn nack(&self, cx: &mut ProtoCtx<'_>, to: NodeId, id: InstanceId, ballot: Ballot) {
        let promised = self.insts.get(&id).map_or(Ballot::default(), |i| i.promised);
        cx.send(to, wrap(Msg::Nack { id, ballot, promised }));
    }
}

impl Agreement for Democratic {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Democratic
    }

    fn propose(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command) {
        self.tick(cx);
        if cmd.is_terminate() {
            if self.terminate_forwarded.is_none() {
                self.terminate_forwarded = Some(cmd);
            }
            self.forward_terminate(cx);
        } else {
            self.open(cx, cmd);
        }
    }

    fn on_message(&mut self, cx: &mut ProtoCtx<'_>, from: NodeId, msg: ProtoMsg) {
        let ProtoMsg::Democratic(msg) = msg else { return };
        self.tick(cx);
        let now = cx.now;
        match msg {
            Msg::PreAccept { id, ballot, cmd, deps } => {
                self.max_seen = self.max_seen.max(ballot);
                if cmd.is_terminate() {
                    self.terminate_instance = true;
                }
                if let Some(i) = self.insts.get(&id).filter(|i| i.status == Status::Committed) {
                    let (cmd, deps) = (i.cmd.clone(), i.deps.clone());
                    cx.send(from, wrap(Msg::Commit { id, cmd, deps }));
                    return;
                }
                match self.preaccept_locally(now, id, ballot, &cmd, &deps) {
                    Some(d) => cx.send(from, wrap(Msg::PreAcceptOk { id, ballot, deps: d })),
                    None => self.nack(cx, from, id, ballot),
                }
            }
            Msg::PreAcceptOk { id, ballot, deps } => {
                if self.insts.get(&id).is_some_and(|i| i.promised > ballot) {
                    self.leads.remove(&id);
                    return;
                }
                let Some(lead) = self.leads.get_mut(&id) else { return };
                if lead.ballot != ballot {
                    return;
                }
                let Phase::PreAccept { replies, .. } = &mut lead.phase else { return };
                replies.insert(from, deps);
                self.check_preaccept(cx, id);
            }
            Msg::Accept { id, ballot, cmd, deps } => {
                self.max_seen = self.max_seen.max(ballot);
                if cmd.is_terminate() {
                    self.terminate_instance = true;
                }
                if self.accept_locally(now, id, ballot, &cmd, &deps) {
                    cx.send(from, wrap(Msg::AcceptOk { id, ballot }));
                } else {
                    self.nack(cx, from, id, ballot);
                }
            }
            Msg::AcceptOk { id, ballot } => {
                let Some(lead) = self.leads.get_mut(&id) else { return };
                if lead.ballot != ballot {
                    return;
                }
                let Phase::Accept { acks, .. } = &mut lead.phase else { return };
                acks.insert(from);
                self.check_accept(cx, id);
            }
            Msg::Commit { id, cmd, deps } => {
                if cmd.is_terminate() {
                    self.terminate_instance = true;
                }
                self.commit_locally(cx, id, cmd, deps);
            }
            Msg::Prepare { id, ballot } => {
                self.max_seen = self.max_seen.max(ballot);
                match self.insts.get_mut(&id) {
                    Some(i) if ballot > i.promised => {
                        i.promised = ballot;
                        let record = Record {
                            status: i.status,
                            vballot: i.vballot,
                            cmd: i.cmd.clone(),
                            deps: i.deps.clone(),
                            matches_initial: i.status == Status::PreAccepted
                                && i.vballot == initial_ballot(id.owner)
                                && i.initial.as_ref() == Some(&i.deps),
                        };
                        if self.leads.get(&id).is_some_and(|l| l.ballot < ballot) {
                            self.leads.remove(&id);
                        }
                        cx.send(from, wrap(Msg::PrepareOk { id, ballot, record: Some(record) }));
                    }
                    Some(_) => self.nack(cx, from, id, ballot),
                    None => cx.send(from, wrap(Msg::PrepareOk { id, ballot, record: None })),
                }
            }
            Msg::PrepareOk { id, ballot, record } => {
                let Some(lead) = self.leads.get_mut(&id) else { return };
                if lead.ballot != ballot {
                    return;
                }
                let Phase::Prepare { replies } = &mut lead.phase else { return };
                replies.insert(from, record);
                self.check_prepare(cx, id);
            }
            Msg::Nack { id, ballot, promised } => {
                self.max_seen = self.max_seen.max(promised);
                if self.leads.get(&id).is_some_and(|l| l.ballot == ballot) {
                    self.leads.remove(&id);
                }
            }
            Msg::ForwardTerminate(cmd) => {
                if self.terminate_forwarded.is_none() {
                    self.terminate_forwarded = Some(cmd);
                }
                self.forward_terminate(cx);
            }
        }
    }

    fn on_timer(&mut self, cx: &mut ProtoCtx<'_>, timer: ProtoTimer) {
        let ProtoTimer::Democratic(timer) = timer else { return };
        match timer {
            Timer::Fallback(id, ballot) => {
                let Some(lead) = self.leads.get_mut(&id) else { return };
                if lead.ballot != ballot {
                    return;
                }
                if let Phase::PreAccept { timed_out, .. } = &mut lead.phase {
                    *timed_out = true;
                }
                self.check_preaccept(cx, id);
            }
            Timer::RecoveryCheck => self.recovery_check(cx),
        }
    }

    fn on_leader_change(&mut self, cx: &mut ProtoCtx<'_>) {
        self.tick(cx);
        self.forward_terminate(cx);
    }
}

#[derive(Debug)]
struct Committed {
    cmd: Command,
    deps: Deps,
}

/// Executes committed instances in dependency order. Strongly connected
/// components run in a fixed order: command id, then instance id.
#[derive(Debug, Default)]
pub struct DemocraticExecutor {
    pending: BTreeMap<InstanceId, Committed>,
    committed_seqs: BTreeMap<NodeId, BTreeSet<u64>>,
    frontier: BTreeMap<NodeId, u64>,
    ready: VecDeque<Command>,
    dirty: bool,
    guard: ReleaseGuard,
}

impl DemocraticExecutor {
    /// Unexecuted instances `id` waits on, or `None` if some are not yet committed.
    fn edges(&self, id: InstanceId) -> Option<Vec<InstanceId>> {
        let c = &self.pending[&id];
        let mut out = Vec::new();
        for ((p, dk), &t) in &c.deps {
            if self.frontier.get(p).copied().unwrap_or(0) <= t {
                return None;
            }
            let lo = InstanceId { owner: *p, seq: 0 };
            let hi = InstanceId { owner: *p, seq: t };
            for (other, oc) in self.pending.range(lo..=hi) {
                if *other == id {
                    continue;
                }
                let touches = match dk {
                    DepKey::All => true,
                    DepKey::Key(k) => oc.cmd.keys.contains(k),
                };
                if touches {
                    out.push(*other);
                }
            }
        }
        Some(out)
    }

    fn execute_all(&mut self) {
        let roots: Vec<InstanceId> = self.pending.keys().copied().collect();
        let mut index: BTreeMap<InstanceId, usize> = BTreeMap::new();
        let mut low: BTreeMap<InstanceId, usize> = BTreeMap::new();
        let mut blocked: BTreeMap<InstanceId, bool> = BTreeMap::new();
        let mut on_stack: BTreeSet<InstanceId> = BTreeSet::new();
        let mut done: BTreeMap<InstanceId, bool> = BTreeMap::new();
        let mut stack: Vec<InstanceId> = Vec::new();
        let mut counter = 0usize;

        for root in roots {
            if index.contains_key(&root) || !self.pending.contains_key(&root) {
                continue;
            }
            let mut work: Vec<(InstanceId, Vec<InstanceId>, usize)> = Vec::new();
            let visit = |v: InstanceId,
                         this: &Self,
                         index: &mut BTreeMap<InstanceId, usize>,
                         low: &mut BTreeMap<InstanceId, usize>,
                         blocked: &mut BTreeMap<InstanceId, bool>,
                         stack: &mut Vec<InstanceId>,
                         on_stack: &mut BTreeSet<InstanceId>,
                         counter: &mut usize| {
                index.insert(v, *counter);
                low.insert(v, *counter);
                *counter += 1;
                stack.push(v);
                on_stack.insert(v);
                match this.edges(v) {
                    Some(e) => {
                        blocked.insert(v, false);
                        e
                    }
                    None => {
                        blocked.insert(v, true);
                        Vec::new()
                    }
                }
            };
            let e = visit(root, self, &mut index, &mut low, &mut blocked, &mut stack, &mut on_stack, &mut counter);
            work.push((root, e, 0));
            while let Some((v, edges, i)) = work.last_mut() {
                let v = *v;
                if *i < edges.len() {
                    let w = edges[*i];
                    *i += 1;
                    if !index.contains_key(&w) {
                        let e =
                            visit(w, self, &mut index, &mut low, &mut blocked, &mut stack, &mut on_stack, &mut counter);
                        work.push((w, e, 0));
                    } else if on_stack.contains(&w) {
                        let lw = index[&w];
                        let lv = low.get_mut(&v).expect("visited");
                        *lv = (*lv).min(lw);
                    } else if done.get(&w).copied().unwrap_or(true) {
                        // w's component is blocked or was left unexecuted.
                        blocked.insert(v, true);
                    }
                    continue;
                }
                work.pop();
                if let Some((parent, _, _)) = work.last() {
                    let lv = low[&v];
                    let lp = low.get_mut(parent).expect("visited");
                    *lp = (*lp).min(lv);
                    if blocked[&v] && !on_stack.contains(&v) {
                        blocked.insert(*parent, true);
                    }
                }
                if low[&v] == index[&v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("component on stack");
                        on_stack.remove(&w);
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    let is_blocked = comp.iter().any(|w| blocked[w]);
                    if is_blocked {
                        for w in &comp {
                            done.insert(*w, true);
                        }
                        if let Some((parent, _, _)) = work.last() {
                            blocked.insert(*parent, true);
                        }
                        continue;
                    }
                    let mut members: Vec<(CmdId, InstanceId)> =
                        comp.iter().map(|w| (self.pending[w].cmd.id, *w)).collect();
                    members.sort();
                    for (_, w) in members {
                        done.insert(w, false);
                        let c = self.pending.remove(&w).expect("pending");
                        if let Some(cmd) = self.guard.admit(&Entry::Cmd(c.cmd)) {
                            self.ready.push_back(cmd);
                        }
                    }
                }
            }
        }
    }
}

impl Execution for DemocraticExecutor {
    fn append_for_execution(&mut self, learned: Learned) {
        let Order::Deps { instance, deps } = learned.order else { return };
        let Entry::Cmd(cmd) = learned.entry else { return };
        let seqs = self.committed_seqs.entry(instance.owner).or_default();
        if !seqs.insert(instance.seq) {
            return;
        }
        let f = self.frontier.entry(instance.owner).or_insert(0);
        while seqs.contains(f) {
            *f += 1;
        }
        self.pending.insert(instance, Committed { cmd, deps });
        self.dirty = true;
    }

    fn get_next_deliverable(&mut self) -> Option<Command> {
        if self.ready.is_empty() && self.dirty {
            self.dirty = false;
            self.execute_all();
        }
        self.ready.pop_front()
    }
}
