//! The contract every ordering protocol implements: an agreement half that
//! turns proposals into learned entries, and an execution half that releases
//! learned commands in a conflict-respecting order.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use thiserror::Error;

use crate::democratic::{self, Democratic, DemocraticExecutor, InstanceId};
use crate::model::{CmdId, Command, EraId, NodeId, ProtocolKind};
use crate::monarchic::{self, Monarchic, SlotExecutor};
use crate::oligarchic::{self, KeyLogExecutor, Oligarchic};
use crate::simnet::Time;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PluginError {
    #[error("era {0} is closed at this node")]
    EraClosed(EraId),
    #[error("era {0} is already initialized at this node")]
    DuplicateInit(EraId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entry {
    Cmd(Command),
    Noop,
}

impl Entry {
    pub fn cmd(&self) -> Option<&Command> {
        match self {
            Entry::Cmd(c) => Some(c),
            Entry::Noop => None,
        }
    }
}

/// Where a learned entry sits in the protocol's ordering structure.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Order {
    Slot(u64),
    /// Position in each per-key log the entry occupies.
    Positions(BTreeMap<String, u64>),
    Deps {
        instance: InstanceId,
        deps: BTreeMap<(NodeId, democratic::DepKey), u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Learned {
    pub entry: Entry,
    pub order: Order,
}

#[derive(Debug, Clone)]
pub enum ProtoMsg {
    Monarchic(monarchic::Msg),
    Oligarchic(oligarchic::Msg),
    Democratic(democratic::Msg),
}

impl ProtoMsg {
    pub fn kind(&self) -> ProtocolKind {
        match self {
            ProtoMsg::Monarchic(_) => ProtocolKind::Monarchic,
            ProtoMsg::Oligarchic(_) => ProtocolKind::Oligarchic,
            ProtoMsg::Democratic(_) => ProtocolKind::Democratic,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProtoMsg::Monarchic(m) => m.name(),
            ProtoMsg::Oligarchic(m) => m.name(),
            ProtoMsg::Democratic(m) => m.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtoTimer {
    Monarchic(monarchic::Timer),
    Oligarchic(oligarchic::Timer),
    Democratic(democratic::Timer),
}

/// Static parameters shared by every instance of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtoConfig {
    pub n: usize,
    pub seed: u64,
    pub max_delay: Time,
    pub suspicion_timeout: Time,
}

/// Handler-side effects of a protocol step. The hosting node wraps sends
/// into era-tagged envelopes and forwards learns to its meta layer.
pub struct ProtoCtx<'a> {
    pub now: Time,
    pub me: NodeId,
    pub leader: NodeId,
    suspected: &'a [bool],
    pub sends: Vec<(NodeId, ProtoMsg)>,
    pub timers: Vec<(Time, ProtoTimer)>,
    pub learned: Vec<Learned>,
    pub rejected: Vec<Command>,
    /// Commands learned for the first time at this node, in learn order.
    pub fresh: Vec<Command>,
    pub trace: Vec<(String, String)>,
}

impl<'a> ProtoCtx<'a> {
    pub fn new(now: Time, me: NodeId, leader: NodeId, suspected: &'a [bool]) -> Self {
        ProtoCtx {
            now,
            me,
            leader,
            suspected,
            sends: Vec::new(),
            timers: Vec::new(),
            learned: Vec::new(),
            rejected: Vec::new(),
            fresh: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn is_suspected(&self, node: NodeId) -> bool {
        self.suspected.get(node.0).copied().unwrap_or(false)
    }

    pub fn send(&mut self, to: NodeId, msg: ProtoMsg) {
        self.sends.push((to, msg));
    }

    pub fn broadcast(&mut self, n: usize, msg: ProtoMsg) {
        for i in 0..n {
            self.sends.push((NodeId(i), msg.clone()));
        }
    }

    pub fn timer(&mut self, after: Time, t: ProtoTimer) {
        self.timers.push((after, t));
    }

    pub fn learn(&mut self, l: Learned) {
        self.learned.push(l);
    }

    pub fn reject(&mut self, cmd: Command) {
        self.rejected.push(cmd);
    }

    pub fn trace(&mut self, kind: &str, details: String) {
        self.trace.push((kind.to_string(), details));
    }
}

pub trait Agreement {
    fn kind(&self) -> ProtocolKind;
    fn propose(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command);
    fn on_message(&mut self, cx: &mut ProtoCtx<'_>, from: NodeId, msg: ProtoMsg);
    fn on_timer(&mut self, cx: &mut ProtoCtx<'_>, timer: ProtoTimer);
    fn on_leader_change(&mut self, cx: &mut ProtoCtx<'_>);
    /// A newer era is active locally. Undecided client work may be handed
    /// back through `ProtoCtx::reject`.
    fn close(&mut self, _cx: &mut ProtoCtx<'_>) {}
}

pub trait Execution {
    fn append_for_execution(&mut self, learned: Learned);
    fn get_next_deliverable(&mut self) -> Option<Command>;
}

/// Exactly-once release and the Terminate barrier, shared by all executors.
#[derive(Debug, Default, Clone)]
pub struct ReleaseGuard {
    released: HashSet<CmdId>,
    closed: bool,
}

impl ReleaseGuard {
    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Records a candidate; returns it if it should be handed out.
    pub fn admit(&mut self, entry: &Entry) -> Option<Command> {
        let cmd = entry.cmd()?;
        if self.closed || !self.released.insert(cmd.id) {
            return None;
        }
        if cmd.is_terminate() {
            self.closed = true;
        }
        Some(cmd.clone())
    }
}

/// One era's protocol pair at one node, plus the uniform bookkeeping every
/// protocol gets: idempotent learns and rejection after Terminate.
pub struct ProtocolInstance {
    pub era: EraId,
    pub kind: ProtocolKind,
    agreement: Box<dyn Agreement>,
    executor: Box<dyn Execution>,
    seen_orders: HashSet<Order>,
    learned_cmds: HashSet<CmdId>,
    terminated: bool,
    closed: bool,
}

impl ProtocolInstance {
    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn has_learned(&self, id: CmdId) -> bool {
        self.learned_cmds.contains(&id)
    }

    pub fn propose(&mut self, cx: &mut ProtoCtx<'_>, cmd: Command) -> Result<(), PluginError> {
        if self.terminated {
            return Err(PluginError::EraClosed(self.era));
        }
        if self.learned_cmds.contains(&cmd.id) {
            return Ok(());
        }
        self.agreement.propose(cx, cmd);
        self.absorb(cx);
        Ok(())
    }

    pub fn on_message(&mut self, cx: &mut ProtoCtx<'_>, from: NodeId, msg: ProtoMsg) {
        self.agreement.on_message(cx, from, msg);
        self.absorb(cx);
    }

    pub fn on_timer(&mut self, cx: &mut ProtoCtx<'_>, timer: ProtoTimer) {
        self.agreement.on_timer(cx, timer);
        self.absorb(cx);
    }

    pub fn on_leader_change(&mut self, cx: &mut ProtoCtx<'_>) {
        self.agreement.on_leader_change(cx);
        self.absorb(cx);
    }

    pub fn close(&mut self, cx: &mut ProtoCtx<'_>) {
        if !self.closed {
            self.closed = true;
            self.agreement.close(cx);
            self.absorb(cx);
        }
    }

    /// Drops repeats of an order position and notes first-time commands.
    /// Repeated command ids stay in the stream; executors release them once.
    fn absorb(&mut self, cx: &mut ProtoCtx<'_>) {
        let raw = std::mem::take(&mut cx.learned);
        for l in raw {
            if !self.seen_orders.insert(l.order.clone()) {
                continue;
            }
            if let Entry::Cmd(c) = &l.entry {
                if self.learned_cmds.insert(c.id) {
                    cx.fresh.push(c.clone());
                }
                if c.is_terminate() {
                    self.terminated = true;
                }
            }
            cx.learned.push(l);
        }
    }

    pub fn append_for_execution(&mut self, l: Learned) {
        self.executor.append_for_execution(l);
    }

    pub fn get_next_deliverable(&mut self) -> Option<Command> {
        self.executor.get_next_deliverable()
    }
}

/// Per-node factory; each era may be initialized once.
#[derive(Debug, Clone)]
pub struct ProtocolRegistry {
    cfg: ProtoConfig,
    node: NodeId,
    initialized: BTreeSet<EraId>,
}

impl ProtocolRegistry {
    pub fn new(cfg: ProtoConfig, node: NodeId) -> Self {
        ProtocolRegistry { cfg, node, initialized: BTreeSet::new() }
    }

    pub fn init_protocol(&mut self, era: EraId, kind: ProtocolKind) -> Result<ProtocolInstance, PluginError> {
        if !self.initialized.insert(era) {
            return Err(PluginError::DuplicateInit(era));
        }
        let (agreement, executor): (Box<dyn Agreement>, Box<dyn Execution>) = match kind {
            ProtocolKind::Monarchic => {
                (Box::new(Monarchic::new(&self.cfg, self.node)), Box::new(SlotExecutor::default()))
            }
            ProtocolKind::Oligarchic => {
                (Box::new(Oligarchic::new(&self.cfg, self.node, era)), Box::new(KeyLogExecutor::default()))
            }
            ProtocolKind::Democratic => {
                (Box::new(Democratic::new(&self.cfg, self.node)), Box::new(DemocraticExecutor::default()))
            }
        };
        Ok(ProtocolInstance {
            era,
            kind,
            agreement,
            executor,
            seen_orders: HashSet::new(),
            learned_cmds: HashSet::new(),
            terminated: false,
            closed: false,
        })
    }
}
