//! Stop-and-restart switching: an external coordinator stops the running
//! protocol, waits until every member has drained it, then starts the next
//! one. Submissions in between are refused.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::client::ClientPool;
use crate::history::{History, Record};
use crate::model::{CmdId, Command, EraId, NodeId, ProtocolKind};
use crate::plugin::{ProtoConfig, ProtoCtx, ProtoMsg, ProtoTimer, ProtocolInstance, ProtocolRegistry};
use crate::runner::{finish, proto_config, RunError, RunOutput};
use crate::scenario::{secs, Scenario};
use crate::simnet::{Context, Process, Simulation, Time, MS};

#[derive(Debug, Clone)]
pub enum BMsg {
    Proto { era: EraId, msg: ProtoMsg },
    Stop { era: EraId },
    Drained { era: EraId },
    Start { era: EraId, kind: ProtocolKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BTimer {
    Proto { era: EraId, timer: ProtoTimer },
    ClientNext(usize),
    Retransmit { client: usize, seq: u64 },
    BeginSwitch(ProtocolKind),
}

type Ctx<'a> = Context<'a, BMsg, BTimer>;

pub struct Member {
    me: NodeId,
    coordinator: NodeId,
    n: usize,
    registry: ProtocolRegistry,
    protocols: BTreeMap<EraId, ProtocolInstance>,
    era: EraId,
    stopped: bool,
    drained_sent: bool,
    exec_id: EraId,
    delivered: HashSet<CmdId>,
    clients: ClientPool,
    history: Vec<Record>,
}

pub struct Coordinator {
    n: usize,
    era: EraId,
    switching: Option<ProtocolKind>,
    drained: BTreeSet<NodeId>,
}

pub enum Endpoint {
    Member(Box<Member>),
    Coordinator(Coordinator),
}

impl Endpoint {
    pub fn is_stopped(&self) -> bool {
        matches!(self, Endpoint::Member(m) if m.stopped)
    }

    fn member_mut(&mut self) -> Option<&mut Member> {
        match self {
            Endpoint::Member(m) => Some(m),
            Endpoint::Coordinator(_) => None,
        }
    }

    fn outstanding(&self) -> Vec<CmdId> {
        match self {
            Endpoint::Member(m) => m.clients.outstanding(),
            Endpoint::Coordinator(_) => Vec::new(),
        }
    }
}

impl Member {
    fn new(me: NodeId, coordinator: NodeId, cfg: ProtoConfig, initial: ProtocolKind, clients: ClientPool) -> Self {
        let n = cfg.n;
        let mut registry = ProtocolRegistry::new(cfg, me);
        let first = registry.init_protocol(EraId(1), initial).expect("fresh registry");
        Member {
            me,
            coordinator,
            n,
            registry,
            protocols: BTreeMap::from([(EraId(1), first)]),
            era: EraId(1),
            stopped: false,
            drained_sent: false,
            exec_id: EraId(1),
            delivered: HashSet::new(),
            clients,
            history: Vec::new(),
        }
    }

    fn with_proto(
        &mut self,
        cx: &mut Ctx<'_>,
        era: EraId,
        f: impl FnOnce(&mut ProtocolInstance, &mut ProtoCtx<'_>) -> bool,
    ) -> bool {
        let suspected: Vec<bool> = (0..self.n).map(|i| cx.is_suspected(NodeId(i))).collect();
        let Some(inst) = self.protocols.get_mut(&era) else { return false };
        let mut pcx = ProtoCtx::new(cx.now(), self.me, cx.leader(), &suspected);
        let ok = f(inst, &mut pcx);
        for l in std::mem::take(&mut pcx.learned) {
            inst.append_for_execution(l);
        }
        for (kind, details) in std::mem::take(&mut pcx.trace) {
            cx.trace(kind, details);
        }
        for (to, msg) in std::mem::take(&mut pcx.sends) {
            cx.send(to, BMsg::Proto { era, msg });
        }
        for (after, timer) in std::mem::take(&mut pcx.timers) {
            cx.set_timer(after, BTimer::Proto { era, timer });
        }
        let now = cx.now();
        for c in std::mem::take(&mut pcx.fresh) {
            self.history.push(Record::Learn { t: now, node: self.me.0, era: era.0, cmd: c.encode() });
        }
        drop(pcx);
        self.pump(cx);
        ok
    }

    fn submit(&mut self, cx: &mut Ctx<'_>, cmd: Command) {
        if self.delivered.contains(&cmd.id) {
            return;
        }
        let era = self.era;
        let accepted = !self.stopped && self.with_proto(cx, era, |inst, pcx| inst.propose(pcx, cmd.clone()).is_ok());
        if !accepted {
            self.history.push(Record::Rejected { t: cx.now(), node: self.me.0, id: cmd.id });
        }
    }

    fn pump(&mut self, cx: &mut Ctx<'_>) {
        loop {
            let era = self.exec_id;
            let Some(inst) = self.protocols.get_mut(&era) else { break };
            let Some(c) = inst.get_next_deliverable() else { break };
            let now = cx.now();
            self.history.push(Record::Deliver { t: now, node: self.me.0, era: era.0, cmd: c.encode() });
            if c.is_terminate() {
                self.exec_id = era.next();
                continue;
            }
            if !self.delivered.insert(c.id) {
                self.history.pop();
                continue;
            }
            if let Some(i) = self.clients.answer(c.id, era, now, &mut self.history) {
                cx.set_timer(0, BTimer::ClientNext(i));
            }
        }
        if self.stopped && !self.drained_sent && self.exec_id > self.era {
            self.drained_sent = true;
            cx.send(self.coordinator, BMsg::Drained { era: self.era });
        }
    }

    fn on_message(&mut self, cx: &mut Ctx<'_>, from: NodeId, msg: BMsg) {
        match msg {
            BMsg::Proto { era, msg } => {
                self.with_proto(cx, era, |inst, pcx| {
                    inst.on_message(pcx, from, msg);
                    true
                });
            }
            BMsg::Stop { era } if era == self.era && !self.stopped => {
                self.stopped = true;
                cx.trace("stop", format!("era={era}"));
                self.with_proto(cx, era, |inst, pcx| {
                    let _ = inst.propose(pcx, Command::terminate(era));
                    true
                });
            }
            BMsg::Start { era, kind } if era == self.era.next() => {
                let inst = self.registry.init_protocol(era, kind).expect("eras start once");
                self.protocols.insert(era, inst);
                self.history.push(Record::Switch { t: cx.now(), node: self.me.0, era: era.0, id: era.0, target: kind });
                cx.trace("start", format!("era={era} target={kind}"));
                self.era = era;
                self.stopped = false;
                self.drained_sent = false;
                if cx.leader() != NodeId(0) {
                    self.with_proto(cx, era, |inst, pcx| {
                        inst.on_leader_change(pcx);
                        true
                    });
                }
                self.pump(cx);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, cx: &mut Ctx<'_>, timer: BTimer) {
        match timer {
            BTimer::Proto { era, timer } => {
                self.with_proto(cx, era, |inst, pcx| {
                    inst.on_timer(pcx, timer);
                    true
                });
            }
            BTimer::ClientNext(i) => {
                if let Some(cmd) = self.clients.next(i, cx.now(), &mut self.history) {
                    cx.set_timer(self.clients.retransmit, BTimer::Retransmit { client: i, seq: cmd.id.seq });
                    self.submit(cx, cmd);
                }
            }
            BTimer::Retransmit { client, seq } => {
                if let Some(cmd) = self.clients.retransmit(client, seq, cx.now(), &mut self.history) {
                    cx.set_timer(self.clients.retransmit, BTimer::Retransmit { client, seq });
                    self.submit(cx, cmd);
                }
            }
            BTimer::BeginSwitch(_) => {}
        }
    }
}

impl Process for Endpoint {
    type Msg = BMsg;
    type Timer = BTimer;

    fn on_start(&mut self, cx: &mut Ctx<'_>) {
        if let Endpoint::Member(m) = self {
            m.history.push(Record::Switch { t: 0, node: m.me.0, era: 1, id: 0, target: m.protocols[&EraId(1)].kind });
            for i in 0..m.clients.len() {
                cx.set_timer(m.clients.start, BTimer::ClientNext(i));
            }
        }
    }

    fn on_message(&mut self, cx: &mut Ctx<'_>, from: NodeId, msg: BMsg) {
        match self {
            Endpoint::Member(m) => m.on_message(cx, from, msg),
            Endpoint::Coordinator(c) => {
                if let BMsg::Drained { era } = msg {
                    if era != c.era {
                        return;
                    }
                    c.drained.insert(from);
                    if c.drained.len() == c.n {
                        if let Some(kind) = c.switching.take() {
                            c.era = c.era.next();
                            c.drained.clear();
                            cx.trace("coordinator_start", format!("era={} target={kind}", c.era));
                            cx.broadcast(BMsg::Start { era: c.era, kind });
                        }
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, cx: &mut Ctx<'_>, timer: BTimer) {
        match self {
            Endpoint::Member(m) => m.on_timer(cx, timer),
            Endpoint::Coordinator(c) => {
                if let BTimer::BeginSwitch(kind) = timer {
                    if c.switching.is_none() {
                        c.switching = Some(kind);
                        cx.trace("coordinator_stop", format!("era={}", c.era));
                        cx.broadcast(BMsg::Stop { era: c.era });
                    }
                }
            }
        }
    }
}

pub fn run(sc: &Scenario) -> Result<RunOutput, RunError> {
    let n = sc.nodes;
    let mut simcfg = sc.sim_config();
    simcfg.latency = simcfg.latency.with_colocated(0);
    let coordinator = NodeId(n);
    let cfg = proto_config(sc);
    let mut procs: Vec<Endpoint> = (0..n)
        .map(|i| {
            let pool =
                ClientPool::new(NodeId(i), sc.seed, sc.workload.clone(), sc.retransmit_ms * MS, secs(sc.duration));
            Endpoint::Member(Box::new(Member::new(NodeId(i), coordinator, cfg.clone(), sc.initial, pool)))
        })
        .collect();
    procs.push(Endpoint::Coordinator(Coordinator { n, era: EraId(1), switching: None, drained: BTreeSet::new() }));
    let mut sim = Simulation::new(simcfg, procs, n)?;
    sim.apply_script(&sc.fault_script())?;
    if let Some(s) = sc.switches.first() {
        sim.inject(secs(s.at), coordinator, BTimer::BeginSwitch(s.target));
    }
    if let Some(at) = sc.coordinator_crash {
        sim.crash(coordinator, secs(at));
    }
    let end: Time = secs(sc.duration + sc.grace);
    sim.run_until(end);

    let mut history = History::new();
    for i in 0..n {
        if let Some(m) = sim.process_mut(NodeId(i)).member_mut() {
            history.extend(std::mem::take(&mut m.history));
        }
    }
    let stalled = (0..n).any(|i| !sim.is_crashed(NodeId(i)) && sim.process(NodeId(i)).is_stopped());
    finish(&mut history, end, n, |i| sim.crash_time(NodeId(i)), |i| sim.process(NodeId(i)).outstanding());
    Ok(RunOutput { trace: sim.take_trace(), history, stats: sim.stats(), stalled, oracle_proposals: Vec::new(), end })
}
