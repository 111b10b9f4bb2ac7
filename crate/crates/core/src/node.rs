//! A consensus member: the era-switch agreement, the per-era protocol
//! instances, the propose/deliver pump between them, and the node's
//! co-located closed-loop clients.

use std::collections::{BTreeMap, HashSet};

use crate::client::ClientPool;
use crate::history::Record;
use crate::meta::{MetaAgreement, MetaMsg, MetaOut, SwitchCommand};
use crate::model::{CmdId, Command, EraId, NodeId, ProtocolKind};
use crate::plugin::{PluginError, ProtoConfig, ProtoCtx, ProtoMsg, ProtoTimer, ProtocolInstance, ProtocolRegistry};
use crate::simnet::{Context, Process, Time, MS};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone)]
pub enum Message {
    Meta(MetaMsg),
    Proto { era: EraId, msg: ProtoMsg },
    ProposeSwitch(SwitchCommand),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeTimer {
    Proto {
        era: EraId,
        timer: ProtoTimer,
    },
    ClientNext(usize),
    Retransmit {
        client: usize,
        seq: u64,
    },
    MetaRetry,
    Rebroadcast,
    /// Asks this node to get a switch decided.
    ProposeSwitch(SwitchCommand),
    /// Makes the meta layer crash right before its next Decide broadcast.
    ArmCrashBeforeDecide,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub proto: ProtoConfig,
    pub initial: ProtocolKind,
    pub workload: WorkloadSpec,
    pub retransmit: Time,
    pub client_start: Time,
    /// Clients issue no new commands from this time on.
    pub client_stop: Time,
    pub rebroadcast: Time,
    pub meta_retry: Time,
}

impl NodeConfig {
    pub fn new(proto: ProtoConfig, initial: ProtocolKind, workload: WorkloadSpec, client_stop: Time) -> Self {
        let rebroadcast = proto.suspicion_timeout;
        let meta_retry = 2 * proto.max_delay.max(MS);
        NodeConfig {
            proto,
            initial,
            workload,
            retransmit: 1000 * MS,
            client_start: 0,
            client_stop,
            rebroadcast,
            meta_retry,
        }
    }
}

type Ctx<'a> = Context<'a, Message, NodeTimer>;

pub struct SwitchNode {
    me: NodeId,
    cfg: NodeConfig,
    meta: MetaAgreement,
    registry: ProtocolRegistry,
    protocols: BTreeMap<EraId, ProtocolInstance>,
    active: Option<EraId>,
    exec_id: EraId,
    /// Traffic for eras not created here yet.
    future: BTreeMap<EraId, Vec<(NodeId, ProtoMsg)>>,
    /// Local client commands not delivered yet, with the era they went to.
    pending: BTreeMap<CmdId, (Command, Option<EraId>)>,
    parked: Vec<Command>,
    delivered: HashSet<CmdId>,
    clients: ClientPool,
    history: Vec<Record>,
    pumping: bool,
}

impl SwitchNode {
    pub fn new(me: NodeId, cfg: NodeConfig) -> Self {
        let mut clients = ClientPool::new(me, cfg.proto.seed, cfg.workload.clone(), cfg.retransmit, cfg.client_stop);
        clients.start = cfg.client_start;
        SwitchNode {
            me,
            meta: MetaAgreement::new(cfg.proto.n, me),
            registry: ProtocolRegistry::new(cfg.proto.clone(), me),
            cfg,
            protocols: BTreeMap::new(),
            active: None,
            exec_id: EraId(1),
            future: BTreeMap::new(),
            pending: BTreeMap::new(),
            parked: Vec::new(),
            delivered: HashSet::new(),
            clients,
            history: Vec::new(),
            pumping: false,
        }
    }

    pub fn meta(&self) -> &MetaAgreement {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut MetaAgreement {
        &mut self.meta
    }

    pub fn active_era(&self) -> Option<EraId> {
        self.active
    }

    pub fn active_kind(&self) -> Option<ProtocolKind> {
        self.active.and_then(|e| self.protocols.get(&e)).map(|p| p.kind)
    }

    pub fn exec_era(&self) -> EraId {
        self.exec_id
    }

    pub fn take_history(&mut self) -> Vec<Record> {
        std::mem::take(&mut self.history)
    }

    /// Client commands still waiting for an answer.
    pub fn outstanding(&self) -> Vec<CmdId> {
        self.clients.outstanding()
    }

    fn record(&mut self, r: Record) {
        self.history.push(r);
    }

    // ---- protocol plumbing ----

    fn with_proto<R>(
        &mut self,
        cx: &mut Ctx<'_>,
        era: EraId,
        f: impl FnOnce(&mut ProtocolInstance, &mut ProtoCtx<'_>) -> R,
    ) -> Option<R> {
        let suspected: Vec<bool> = (0..self.cfg.proto.n).map(|i| cx.is_suspected(NodeId(i))).collect();
        let inst = self.protocols.get_mut(&era)?;
        let mut pcx = ProtoCtx::new(cx.now(), self.me, cx.leader(), &suspected);
        let r = f(inst, &mut pcx);
        for l in std::mem::take(&mut pcx.learned) {
            inst.append_for_execution(l);
        }
        let sends = std::mem::take(&mut pcx.sends);
        let timers = std::mem::take(&mut pcx.timers);
        let fresh = std::mem::take(&mut pcx.fresh);
        let rejected = std::mem::take(&mut pcx.rejected);
        let trace = std::mem::take(&mut pcx.trace);
        drop(pcx);
        for (kind, details) in trace {
            cx.trace(kind, details);
        }
        for (to, msg) in sends {
            cx.send(to, Message::Proto { era, msg });
        }
        for (after, timer) in timers {
            cx.set_timer(after, NodeTimer::Proto { era, timer });
        }
        let now = cx.now();
        for c in fresh {
            self.record(Record::Learn { t: now, node: self.me.0, era: era.0, cmd: c.encode() });
        }
        for c in rejected {
            self.reroute(cx, era, c);
        }
        self.pump(cx);
        Some(r)
    }

    /// A command the era `from` will not decide goes to a newer era, or waits for one.
    fn reroute(&mut self, cx: &mut Ctx<'_>, from: EraId, cmd: Command) {
        if cmd.is_terminate() || self.delivered.contains(&cmd.id) {
            return;
        }
        match self.active {
            Some(a) if a > from => self.propose_in(cx, a, cmd),
            _ => self.parked.push(cmd),
        }
    }

    fn propose_in(&mut self, cx: &mut Ctx<'_>, era: EraId, cmd: Command) {
        let id = cmd.id;
        let res = self.with_proto(cx, era, |inst, pcx| inst.propose(pcx, cmd.clone()));
        match res {
            Some(Ok(())) => {
                if let Some(p) = self.pending.get_mut(&id) {
                    p.1 = Some(era);
                }
            }
            Some(Err(PluginError::EraClosed(_))) | None => {
                if let Some((c, _)) = self.pending.get(&id) {
                    let c = c.clone();
                    self.parked.push(c);
                }
            }
            Some(Err(e)) => unreachable!("{e}"),
        }
    }

    pub fn universal_propose(&mut self, cx: &mut Ctx<'_>, cmd: Command) {
        if self.delivered.contains(&cmd.id) {
            return;
        }
        let era = self.pending.get(&cmd.id).and_then(|p| p.1);
        self.pending.insert(cmd.id, (cmd.clone(), era));
        match self.active {
            Some(a) => self.propose_in(cx, a, cmd),
            None => self.parked.push(cmd),
        }
    }

    fn on_proto_message(&mut self, cx: &mut Ctx<'_>, from: NodeId, era: EraId, msg: ProtoMsg) {
        if self.protocols.contains_key(&era) {
            self.with_proto(cx, era, |inst, pcx| inst.on_message(pcx, from, msg));
        } else {
            self.future.entry(era).or_default().push((from, msg));
        }
    }

    fn change_era(&mut self, cx: &mut Ctx<'_>, era: EraId, sc: SwitchCommand) {
        let now = cx.now();
        self.record(Record::Switch { t: now, node: self.me.0, era: era.0, id: sc.id, target: sc.target });
        cx.trace("change_era", format!("era={era} target={} id={}", sc.target, sc.id));
        if let Some(old) = self.active {
            self.with_proto(cx, old, |inst, pcx| {
                let _ = inst.propose(pcx, Command::terminate(old));
                inst.close(pcx);
            });
        }
        let inst = self.registry.init_protocol(era, sc.target).expect("eras are activated once, in order");
        self.protocols.insert(era, inst);
        self.active = Some(era);
        if cx.leader() != NodeId(0) {
            self.with_proto(cx, era, |inst, pcx| inst.on_leader_change(pcx));
        }
        for (from, msg) in self.future.remove(&era).unwrap_or_default() {
            self.with_proto(cx, era, |inst, pcx| inst.on_message(pcx, from, msg));
        }
        let parked = std::mem::take(&mut self.parked);
        let mut seen = HashSet::new();
        for c in parked {
            if seen.insert(c.id) && !self.delivered.contains(&c.id) {
                self.propose_in(cx, era, c);
            }
        }
        self.pump(cx);
    }

    /// Moves learned commands to clients, crossing era boundaries at Terminate.
    fn pump(&mut self, cx: &mut Ctx<'_>) {
        if self.pumping {
            return;
        }
        self.pumping = true;
        loop {
            let era = self.exec_id;
            let Some(inst) = self.protocols.get_mut(&era) else { break };
            let Some(c) = inst.get_next_deliverable() else { break };
            let now = cx.now();
            if c.is_terminate() {
                self.record(Record::Deliver { t: now, node: self.me.0, era: era.0, cmd: c.encode() });
                self.exec_id = era.next();
                cx.trace("exec_era", format!("era={}", self.exec_id));
                let lost: Vec<Command> =
                    self.pending.values().filter(|(_, e)| *e == Some(era)).map(|(c, _)| c.clone()).collect();
                for c in lost {
                    self.reroute(cx, era, c);
                }
                continue;
            }
            if !self.delivered.insert(c.id) {
                continue;
            }
            self.record(Record::Deliver { t: now, node: self.me.0, era: era.0, cmd: c.encode() });
            self.pending.remove(&c.id);
            self.answer_client(cx, era, c.id);
        }
        self.pumping = false;
    }

    // ---- clients ----

    fn answer_client(&mut self, cx: &mut Ctx<'_>, era: EraId, id: CmdId) {
        if let Some(i) = self.clients.answer(id, era, cx.now(), &mut self.history) {
            cx.set_timer(0, NodeTimer::ClientNext(i));
        }
    }

    fn client_next(&mut self, cx: &mut Ctx<'_>, i: usize) {
        if let Some(cmd) = self.clients.next(i, cx.now(), &mut self.history) {
            cx.set_timer(self.clients.retransmit, NodeTimer::Retransmit { client: i, seq: cmd.id.seq });
            self.universal_propose(cx, cmd);
        }
    }

    fn retransmit(&mut self, cx: &mut Ctx<'_>, i: usize, seq: u64) {
        if let Some(cmd) = self.clients.retransmit(i, seq, cx.now(), &mut self.history) {
            cx.set_timer(self.clients.retransmit, NodeTimer::Retransmit { client: i, seq });
            self.universal_propose(cx, cmd);
        }
    }

    // ---- meta ----

    fn apply_meta(&mut self, cx: &mut Ctx<'_>, outs: Vec<MetaOut>) {
        for o in outs {
            match o {
                MetaOut::Send(to, m) => cx.send(to, Message::Meta(m)),
                MetaOut::Broadcast(m) => cx.broadcast(Message::Meta(m)),
                MetaOut::ChangeEra(era, sc) => self.change_era(cx, era, sc),
                MetaOut::CrashSelf => {
                    self.record(Record::Crash { t: cx.now(), node: self.me.0 });
                    cx.crash_self();
                    return;
                }
                MetaOut::Retry => cx.set_timer(self.cfg.meta_retry, NodeTimer::MetaRetry),
                MetaOut::Trace(kind, details) => cx.trace(kind, details),
            }
        }
    }

    fn propose_switch(&mut self, cx: &mut Ctx<'_>, sc: SwitchCommand) {
        if cx.leader() == self.me {
            let outs = self.meta.era_propose(sc);
            self.apply_meta(cx, outs);
        } else {
            cx.send(cx.leader(), Message::ProposeSwitch(sc));
        }
    }
}

impl Process for SwitchNode {
    type Msg = Message;
    type Timer = NodeTimer;

    fn on_start(&mut self, cx: &mut Ctx<'_>) {
        if self.me == NodeId(0) {
            let outs = self.meta.era_propose(SwitchCommand::new(0, self.cfg.initial));
            self.apply_meta(cx, outs);
        }
        cx.set_timer(self.cfg.rebroadcast, NodeTimer::Rebroadcast);
        for i in 0..self.clients.len() {
            cx.set_timer(self.clients.start, NodeTimer::ClientNext(i));
        }
    }

    fn on_message(&mut self, cx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        match msg {
            Message::Meta(m) => {
                let outs = self.meta.on_message(from, m);
                self.apply_meta(cx, outs);
            }
            Message::Proto { era, msg } => self.on_proto_message(cx, from, era, msg),
            Message::ProposeSwitch(sc) => self.propose_switch(cx, sc),
        }
    }

    fn on_timer(&mut self, cx: &mut Ctx<'_>, timer: NodeTimer) {
        match timer {
            NodeTimer::Proto { era, timer } => {
                self.with_proto(cx, era, |inst, pcx| inst.on_timer(pcx, timer));
            }
            NodeTimer::ClientNext(i) => self.client_next(cx, i),
            NodeTimer::Retransmit { client, seq } => self.retransmit(cx, client, seq),
            NodeTimer::MetaRetry => {
                if cx.leader() == self.me {
                    let outs = self.meta.retry();
                    self.apply_meta(cx, outs);
                } else {
                    for sc in self.meta.take_queue() {
                        cx.send(cx.leader(), Message::ProposeSwitch(sc));
                    }
                }
            }
            NodeTimer::Rebroadcast => {
                if cx.leader() == self.me {
                    let outs = self.meta.rebroadcast();
                    self.apply_meta(cx, outs);
                }
                cx.set_timer(self.cfg.rebroadcast, NodeTimer::Rebroadcast);
            }
            NodeTimer::ProposeSwitch(sc) => self.propose_switch(cx, sc),
            NodeTimer::ArmCrashBeforeDecide => self.meta.crash_before_decide = true,
        }
    }

    fn on_leader_change(&mut self, cx: &mut Ctx<'_>, leader: NodeId) {
        let eras: Vec<EraId> = self.protocols.keys().copied().collect();
        for era in eras {
            self.with_proto(cx, era, |inst, pcx| inst.on_leader_change(pcx));
        }
        if leader == self.me {
            let outs = self.meta.retry();
            self.apply_meta(cx, outs);
        } else {
            for sc in self.meta.take_queue() {
                cx.send(leader, Message::ProposeSwitch(sc));
            }
        }
    }
}
