//! Agreement on era switches. One consensus instance per era decides which
//! protocol runs next; eras are activated strictly in order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{classic_quorum_size, EpochNum, EraId, NodeId, ProtocolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SwitchCommand {
    pub id: u64,
    pub target: ProtocolKind,
}

impl SwitchCommand {
    pub fn new(id: u64, target: ProtocolKind) -> Self {
        SwitchCommand { id, target }
    }
}

/// Rdec reported for values an acceptor already knows are decided.
const DECIDED_RDEC: EpochNum = EpochNum(u64::MAX);
const GAP_ID_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetaMsg {
    EraAccept {
        cmd: SwitchCommand,
        era: EraId,
        epoch: EpochNum,
    },
    AckAccept {
        era: EraId,
        epoch: EpochNum,
        ok: bool,
        seen: EpochNum,
    },
    Decide {
        cmd: SwitchCommand,
        era: EraId,
    },
    Prepare {
        era: EraId,
        epoch: EpochNum,
    },
    AckPrepare {
        era: EraId,
        epoch: EpochNum,
        ok: bool,
        seen: EpochNum,
        accepted: Vec<(EraId, SwitchCommand, EpochNum)>,
    },
}

impl MetaMsg {
    pub fn name(&self) -> &'static str {
        match self {
            MetaMsg::EraAccept { .. } => "EraAccept",
            MetaMsg::AckAccept { .. } => "AckAccept",
            MetaMsg::Decide { .. } => "Decide",
            MetaMsg::Prepare { .. } => "Prepare",
            MetaMsg::AckPrepare { .. } => "AckPrepare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MetaOut {
    Send(NodeId, MetaMsg),
    /// To every member, including the sender.
    Broadcast(MetaMsg),
    ChangeEra(EraId, SwitchCommand),
    /// Fault injection hook: the node stops right before broadcasting Decide.
    CrashSelf,
    /// The current attempt was outrun by a higher epoch.
    Retry,
    Trace(&'static str, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Phase {
    Idle,
    Preparing {
        era: EraId,
        epoch: EpochNum,
        acks: BTreeSet<NodeId>,
        accepted: BTreeMap<EraId, (SwitchCommand, EpochNum)>,
    },
    Accepting {
        era: EraId,
        epoch: EpochNum,
        cmd: SwitchCommand,
        acks: BTreeSet<NodeId>,
        plan: VecDeque<SwitchCommand>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetaAgreement {
    n: usize,
    me: NodeId,
    rnd: BTreeMap<EraId, EpochNum>,
    /// A Prepare for era e binds every era from e on.
    floor: BTreeMap<EraId, EpochNum>,
    vdec: BTreeMap<EraId, (SwitchCommand, EpochNum)>,
    decided: BTreeMap<EraId, SwitchCommand>,
    last_decided: EraId,
    epoch: EpochNum,
    own_epoch: EpochNum,
    established: bool,
    next_era: EraId,
    queue: VecDeque<SwitchCommand>,
    phase: Phase,
    pub crash_before_decide: bool,
}

impl MetaAgreement {
    pub fn new(n: usize, me: NodeId) -> Self {
        let own_epoch = EpochNum::encode(0, me, n);
        MetaAgreement {
            n,
            me,
            rnd: BTreeMap::new(),
            floor: BTreeMap::new(),
            vdec: BTreeMap::new(),
            decided: BTreeMap::new(),
            last_decided: EraId(0),
            epoch: EpochNum(0),
            own_epoch,
            established: own_epoch == EpochNum(0),
            next_era: EraId(1),
            queue: VecDeque::new(),
            phase: Phase::Idle,
            crash_before_decide: false,
        }
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn last_decided(&self) -> EraId {
        self.last_decided
    }

    pub fn decided(&self, era: EraId) -> Option<SwitchCommand> {
        self.decided.get(&era).copied()
    }

    pub fn decided_all(&self) -> &BTreeMap<EraId, SwitchCommand> {
        &self.decided
    }

    pub fn epoch(&self) -> EpochNum {
        self.epoch
    }

    pub fn rnd(&self, era: EraId) -> EpochNum {
        self.effective_rnd(era)
    }

    pub fn accepted(&self, era: EraId) -> Option<(SwitchCommand, EpochNum)> {
        self.vdec.get(&era).copied()
    }

    pub fn is_established(&self) -> bool {
        self.established
    }

    pub fn is_idle(&self) -> bool {
        self.phase == Phase::Idle
    }

    pub fn has_pending(&self) -> bool {
        !self.queue.is_empty() || self.phase != Phase::Idle
    }

    /// Hands queued switches to whoever leads now. Only while idle.
    pub fn take_queue(&mut self) -> Vec<SwitchCommand> {
        if self.phase != Phase::Idle {
            return Vec::new();
        }
        self.queue.drain(..).collect()
    }

    fn quorum(&self) -> usize {
        classic_quorum_size(self.n).expect("n >= 1")
    }

    fn effective_rnd(&self, era: EraId) -> EpochNum {
        let own = self.rnd.get(&era).copied().unwrap_or_default();
        let floor = self.floor.range(..=era).map(|(_, e)| *e).max().unwrap_or_default();
        own.max(floor)
    }

    fn highest_rnd_from(&self, era: EraId) -> EpochNum {
        let later = self.rnd.range(era..).map(|(_, e)| *e).max().unwrap_or_default();
        let floors = self.floor.values().copied().max().unwrap_or_default();
        self.effective_rnd(era).max(later).max(floors)
    }

    fn observe(&mut self, e: EpochNum) {
        if e != DECIDED_RDEC && e > self.epoch {
            self.epoch = e;
        }
    }

    fn is_known(&self, id: u64) -> bool {
        self.decided.values().any(|c| c.id == id) || self.queue.iter().any(|c| c.id == id)
    }

    /// Entry point for a new switch at the trusted leader.
    pub fn era_propose(&mut self, cmd: SwitchCommand) -> Vec<MetaOut> {
        let mut out = Vec::new();
        if self.is_known(cmd.id) {
            return out;
        }
        self.queue.push_back(cmd);
        out.push(MetaOut::Trace("era_propose", format!("id={} target={}", cmd.id, cmd.target)));
        self.kick(&mut out);
        out
    }

    /// Resumes after a Retry or a leadership gain.
    pub fn retry(&mut self) -> Vec<MetaOut> {
        let mut out = Vec::new();
        if self.phase == Phase::Idle && (!self.established || !self.queue.is_empty()) {
            self.established = false;
            self.kick(&mut out);
        }
        out
    }

    fn kick(&mut self, out: &mut Vec<MetaOut>) {
        if self.phase != Phase::Idle {
            return;
        }
        if !self.established {
            self.era_recovery(out);
            return;
        }
        if let Some(cmd) = self.queue.pop_front() {
            let era = self.next_era.max(self.last_decided.next());
            self.start_accept(era, self.own_epoch, cmd, VecDeque::new(), out);
        }
    }

    fn era_recovery(&mut self, out: &mut Vec<MetaOut>) {
        let era = self.last_decided.next();
        let epoch = self.epoch.max(self.own_epoch).next_for(self.me, self.n);
        self.epoch = epoch;
        self.own_epoch = epoch;
        self.phase = Phase::Preparing { era, epoch, acks: BTreeSet::new(), accepted: BTreeMap::new() };
        out.push(MetaOut::Trace("era_recovery", format!("era={era} epoch={epoch}")));
        out.push(MetaOut::Broadcast(MetaMsg::Prepare { era, epoch }));
    }

    fn start_accept(
        &mut self,
        era: EraId,
        epoch: EpochNum,
        cmd: SwitchCommand,
        plan: VecDeque<SwitchCommand>,
        out: &mut Vec<MetaOut>,
    ) {
        self.next_era = era.next();
        self.phase = Phase::Accepting { era, epoch, cmd, acks: BTreeSet::new(), plan };
        out.push(MetaOut::Trace(
            "era_accept_phase",
            format!("era={era} epoch={epoch} id={} target={}", cmd.id, cmd.target),
        ));
        out.push(MetaOut::Broadcast(MetaMsg::EraAccept { cmd, era, epoch }));
    }

    fn abandon(&mut self, seen: EpochNum, out: &mut Vec<MetaOut>) {
        self.observe(seen);
        if let Phase::Accepting { cmd, plan, .. } = std::mem::replace(&mut self.phase, Phase::Idle) {
            for c in plan.into_iter().rev() {
                if c.id < GAP_ID_BASE && !self.is_known(c.id) {
                    self.queue.push_front(c);
                }
            }
            if cmd.id < GAP_ID_BASE && !self.is_known(cmd.id) {
                self.queue.push_front(cmd);
            }
        }
        self.established = false;
        out.push(MetaOut::Trace("nack", format!("seen={seen}")));
        out.push(MetaOut::Retry);
    }

    pub fn on_message(&mut self, from: NodeId, msg: MetaMsg) -> Vec<MetaOut> {
        let mut out = Vec::new();
        match msg {
            MetaMsg::EraAccept { cmd, era, epoch } => self.on_era_accept(from, cmd, era, epoch, &mut out),
            MetaMsg::AckAccept { era, epoch, ok, seen } => self.on_ack_accept(from, era, epoch, ok, seen, &mut out),
            MetaMsg::Decide { cmd, era } => self.on_decide(cmd, era, &mut out),
            MetaMsg::Prepare { era, epoch } => self.on_prepare(from, era, epoch, &mut out),
            MetaMsg::AckPrepare { era, epoch, ok, seen, accepted } => {
                self.on_ack_prepare(from, era, epoch, ok, seen, accepted, &mut out)
            }
        }
        out
    }

    fn on_era_accept(&mut self, from: NodeId, cmd: SwitchCommand, era: EraId, epoch: EpochNum, out: &mut Vec<MetaOut>) {
        self.observe(epoch);
        let rnd = self.effective_rnd(era);
        let ok = rnd <= epoch;
        if ok {
            self.rnd.insert(era, epoch);
            self.vdec.insert(era, (cmd, epoch));
        }
        out.push(MetaOut::Send(from, MetaMsg::AckAccept { era, epoch, ok, seen: self.effective_rnd(era) }));
    }

    fn on_ack_accept(
        &mut self,
        from: NodeId,
        era: EraId,
        epoch: EpochNum,
        ok: bool,
        seen: EpochNum,
        out: &mut Vec<MetaOut>,
    ) {
        let quorum = self.quorum();
        let Phase::Accepting { era: e, epoch: ep, acks, .. } = &mut self.phase else {
            return;
        };
        if *e != era || *ep != epoch {
            return;
        }
        if !ok {
            self.abandon(seen, out);
            return;
        }
        acks.insert(from);
        if acks.len() < quorum {
            return;
        }
        let Phase::Accepting { era, epoch, cmd, mut plan, .. } = std::mem::replace(&mut self.phase, Phase::Idle) else {
            unreachable!()
        };
        if self.crash_before_decide {
            out.push(MetaOut::Trace("crash_before_decide", format!("era={era}")));
            out.push(MetaOut::CrashSelf);
            return;
        }
        out.push(MetaOut::Broadcast(MetaMsg::Decide { cmd, era }));
        if let Some(next) = plan.pop_front() {
            self.start_accept(era.next(), epoch, next, plan, out);
        } else {
            self.established = true;
            self.kick(out);
        }
    }

    fn on_prepare(&mut self, from: NodeId, era: EraId, epoch: EpochNum, out: &mut Vec<MetaOut>) {
        self.observe(epoch);
        let highest = self.highest_rnd_from(era);
        let ok = highest < epoch;
        let mut accepted = Vec::new();
        if ok {
            self.rnd.insert(era, epoch);
            let f = self.floor.entry(era).or_default();
            *f = (*f).max(epoch);
            for (e, (c, r)) in self.vdec.range(era..) {
                accepted.push((*e, *c, *r));
            }
            for (e, c) in self.decided.range(era..) {
                accepted.retain(|(x, _, _)| x != e);
                accepted.push((*e, *c, DECIDED_RDEC));
            }
            accepted.sort();
            if from != self.me && self.phase != Phase::Idle {
                // a higher epoch took over; our attempt can no longer succeed
                let mine = match &self.phase {
                    Phase::Preparing { epoch: ep, .. } | Phase::Accepting { epoch: ep, .. } => *ep,
                    Phase::Idle => epoch,
                };
                if mine < epoch {
                    self.abandon(epoch, out);
                }
            }
        }
        out.push(MetaOut::Send(from, MetaMsg::AckPrepare { era, epoch, ok, seen: highest.max(epoch), accepted }));
    }

    #[allow(clippy::too_many_arguments)]
    fn on_ack_prepare(
        &mut self,
        from: NodeId,
        era: EraId,
        epoch: EpochNum,
        ok: bool,
        seen: EpochNum,
        values: Vec<(EraId, SwitchCommand, EpochNum)>,
        out: &mut Vec<MetaOut>,
    ) {
        let quorum = self.quorum();
        let Phase::Preparing { era: e, epoch: ep, acks, accepted } = &mut self.phase else {
            return;
        };
        if *e != era || *ep != epoch {
            return;
        }
        if !ok {
            self.phase = Phase::Idle;
            self.abandon(seen, out);
            return;
        }
        acks.insert(from);
        for (x, c, r) in values {
            let slot = accepted.entry(x).or_insert((c, r));
            if r > slot.1 {
                *slot = (c, r);
            }
        }
        if acks.len() < quorum {
            return;
        }
        let accepted = std::mem::take(accepted);
        let mut plan: VecDeque<SwitchCommand> = VecDeque::new();
        if let Some(last) = accepted.keys().next_back().copied() {
            let mut prev = self.decided.get(&self.last_decided).map(|c| c.target);
            let mut x = era;
            while x <= last {
                let c = match accepted.get(&x) {
                    Some((c, _)) => *c,
                    None => match self.queue.pop_front() {
                        Some(c) => c,
                        None => SwitchCommand::new(GAP_ID_BASE | x.0, prev.unwrap_or(ProtocolKind::Monarchic)),
                    },
                };
                prev = Some(c.target);
                plan.push_back(c);
                x = x.next();
            }
        }
        let forced: Vec<u64> = plan.iter().map(|c| c.id).collect();
        self.queue.retain(|c| !forced.contains(&c.id));
        out.push(MetaOut::Trace("recovered", format!("era={era} epoch={epoch} forced={}", plan.len())));
        match plan.pop_front() {
            Some(first) => self.start_accept(era, epoch, first, plan, out),
            None => {
                self.phase = Phase::Idle;
                self.established = true;
                self.next_era = era;
                self.kick(out);
            }
        }
    }

    fn on_decide(&mut self, cmd: SwitchCommand, era: EraId, out: &mut Vec<MetaOut>) {
        if self.decided.contains_key(&era) {
            return;
        }
        self.decided.insert(era, cmd);
        self.queue.retain(|c| c.id != cmd.id);
        if self.next_era <= era {
            self.next_era = era.next();
        }
        out.push(MetaOut::Trace("decide", format!("era={era} id={} target={}", cmd.id, cmd.target)));
        while let Some(c) = self.decided.get(&self.last_decided.next()).copied() {
            self.last_decided = self.last_decided.next();
            out.push(MetaOut::ChangeEra(self.last_decided, c));
        }
    }

    /// Decide messages for every known era, for nodes that missed them.
    pub fn rebroadcast(&self) -> Vec<MetaOut> {
        self.decided.iter().map(|(era, cmd)| MetaOut::Broadcast(MetaMsg::Decide { cmd: *cmd, era: *era })).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(id: u64, t: ProtocolKind) -> SwitchCommand {
        SwitchCommand::new(id, t)
    }

    fn reply(out: &[MetaOut]) -> MetaMsg {
        out.iter()
            .find_map(|o| match o {
                MetaOut::Send(_, m) => Some(m.clone()),
                _ => None,
            })
            .expect("a reply")
    }

    #[test]
    fn accept_admits_equal_and_lower() {
        let mut m = MetaAgreement::new(5, NodeId(1));
        let c = sc(1, ProtocolKind::Oligarchic);
        let out = m.on_message(NodeId(0), MetaMsg::EraAccept { cmd: c, era: EraId(2), epoch: EpochNum(5) });
        assert!(matches!(reply(&out), MetaMsg::AckAccept { ok: true, .. }));
        assert_eq!(m.accepted(EraId(2)), Some((c, EpochNum(5))));
        assert_eq!(m.rnd(EraId(2)), EpochNum(5));
        let out = m.on_message(NodeId(0), MetaMsg::EraAccept { cmd: c, era: EraId(2), epoch: EpochNum(5) });
        assert!(matches!(reply(&out), MetaMsg::AckAccept { ok: true, .. }));
    }

    #[test]
    fn accept_refuses_older_epoch() {
        let mut m = MetaAgreement::new(5, NodeId(1));
        m.on_message(NodeId(4), MetaMsg::Prepare { era: EraId(2), epoch: EpochNum(9) });
        let before = m.clone();
        let out = m.on_message(
            NodeId(0),
            MetaMsg::EraAccept { cmd: sc(1, ProtocolKind::Democratic), era: EraId(2), epoch: EpochNum(5) },
        );
        assert!(matches!(reply(&out), MetaMsg::AckAccept { ok: false, .. }));
        assert_eq!(m.accepted(EraId(2)), before.accepted(EraId(2)));
        assert_eq!(m.rnd(EraId(2)), EpochNum(9));
    }

    #[test]
    fn prepare_needs_strictly_higher() {
        let mut m = MetaAgreement::new(5, NodeId(1));
        let c = sc(1, ProtocolKind::Oligarchic);
        m.on_message(NodeId(0), MetaMsg::EraAccept { cmd: c, era: EraId(2), epoch: EpochNum(5) });
        let out = m.on_message(NodeId(3), MetaMsg::Prepare { era: EraId(2), epoch: EpochNum(5) });
        assert!(matches!(reply(&out), MetaMsg::AckPrepare { ok: false, .. }));
        let out = m.on_message(NodeId(3), MetaMsg::Prepare { era: EraId(2), epoch: EpochNum(8) });
        match reply(&out) {
            MetaMsg::AckPrepare { ok, accepted, .. } => {
                assert!(ok);
                assert_eq!(accepted, vec![(EraId(2), c, EpochNum(5))]);
            }
            m => panic!("{m:?}"),
        }
        let out = m.on_message(NodeId(3), MetaMsg::Prepare { era: EraId(2), epoch: EpochNum(8) });
        assert!(matches!(reply(&out), MetaMsg::AckPrepare { ok: false, .. }));
    }

    #[test]
    fn fresh_prepare_reports_nothing() {
        let mut m = MetaAgreement::new(3, NodeId(0));
        let out = m.on_message(NodeId(2), MetaMsg::Prepare { era: EraId(1), epoch: EpochNum(2) });
        match reply(&out) {
            MetaMsg::AckPrepare { ok, accepted, .. } => assert!(ok && accepted.is_empty()),
            m => panic!("{m:?}"),
        }
    }

    #[test]
    fn prepare_binds_later_eras() {
        let mut m = MetaAgreement::new(3, NodeId(1));
        m.on_message(NodeId(2), MetaMsg::Prepare { era: EraId(2), epoch: EpochNum(2) });
        let out = m.on_message(
            NodeId(0),
            MetaMsg::EraAccept { cmd: sc(7, ProtocolKind::Monarchic), era: EraId(3), epoch: EpochNum(0) },
        );
        assert!(matches!(reply(&out), MetaMsg::AckAccept { ok: false, .. }));
    }

    #[test]
    fn decide_is_write_once_and_in_order() {
        let mut m = MetaAgreement::new(3, NodeId(1));
        let a = sc(1, ProtocolKind::Monarchic);
        let b = sc(2, ProtocolKind::Oligarchic);
        let c = sc(3, ProtocolKind::Democratic);
        let out = m.on_message(NodeId(0), MetaMsg::Decide { cmd: a, era: EraId(1) });
        assert!(out.contains(&MetaOut::ChangeEra(EraId(1), a)));
        let out = m.on_message(NodeId(0), MetaMsg::Decide { cmd: c, era: EraId(3) });
        assert!(!out.iter().any(|o| matches!(o, MetaOut::ChangeEra(..))));
        assert_eq!(m.last_decided(), EraId(1));
        let out = m.on_message(NodeId(0), MetaMsg::Decide { cmd: b, era: EraId(2) });
        let changes: Vec<_> = out.iter().filter(|o| matches!(o, MetaOut::ChangeEra(..))).collect();
        assert_eq!(changes, vec![&MetaOut::ChangeEra(EraId(2), b), &MetaOut::ChangeEra(EraId(3), c)]);
        let out = m.on_message(NodeId(0), MetaMsg::Decide { cmd: a, era: EraId(2) });
        assert!(out.is_empty());
        assert_eq!(m.decided(EraId(2)), Some(b));
    }

    /// Delivers every message instantly, in FIFO order.
    fn settle(nodes: &mut [MetaAgreement], from: usize, outs: Vec<MetaOut>, down: &[usize]) -> Vec<(usize, MetaOut)> {
        let mut q: VecDeque<(usize, MetaOut)> = outs.into_iter().map(|o| (from, o)).collect();
        let mut rest = Vec::new();
        while let Some((src, o)) = q.pop_front() {
            match o {
                MetaOut::Send(to, m) => {
                    if !down.contains(&to.0) {
                        for r in nodes[to.0].on_message(NodeId(src), m) {
                            q.push_back((to.0, r));
                        }
                    }
                }
                MetaOut::Broadcast(m) => {
                    for (to, node) in nodes.iter_mut().enumerate() {
                        if !down.contains(&to) {
                            for r in node.on_message(NodeId(src), m.clone()) {
                                q.push_back((to, r));
                            }
                        }
                    }
                }
                other => rest.push((src, other)),
            }
        }
        rest
    }

    #[test]
    fn leader_switch_decides_everywhere() {
        let mut nodes: Vec<_> = (0..5).map(|i| MetaAgreement::new(5, NodeId(i))).collect();
        let c = sc(1, ProtocolKind::Oligarchic);
        let outs = nodes[0].era_propose(c);
        settle(&mut nodes, 0, outs, &[]);
        for n in &nodes {
            assert_eq!(n.decided(EraId(1)), Some(c));
        }
    }

    #[test]
    fn recovery_forces_accepted_value() {
        let mut nodes: Vec<_> = (0..5).map(|i| MetaAgreement::new(5, NodeId(i))).collect();
        nodes[0].crash_before_decide = true;
        let c = sc(1, ProtocolKind::Oligarchic);
        let outs = nodes[0].era_propose(c);
        let rest = settle(&mut nodes, 0, outs, &[]);
        assert!(rest.iter().any(|(_, o)| *o == MetaOut::CrashSelf));
        assert!(nodes.iter().all(|n| n.decided(EraId(1)).is_none()));
        let mine = sc(2, ProtocolKind::Democratic);
        let outs = nodes[1].era_propose(mine);
        settle(&mut nodes, 1, outs, &[0]);
        for n in &nodes[1..] {
            assert_eq!(n.decided(EraId(1)), Some(c));
            assert_eq!(n.decided(EraId(2)), Some(mine));
        }
    }

    #[test]
    fn stale_leader_is_refused_and_retries() {
        let mut nodes: Vec<_> = (0..3).map(|i| MetaAgreement::new(3, NodeId(i))).collect();
        let outs = nodes[1].era_propose(sc(5, ProtocolKind::Democratic));
        settle(&mut nodes, 1, outs, &[]);
        let outs = nodes[0].era_propose(sc(6, ProtocolKind::Monarchic));
        let rest = settle(&mut nodes, 0, outs, &[]);
        assert!(rest.iter().any(|(n, o)| *n == 0 && *o == MetaOut::Retry));
        let outs = nodes[0].retry();
        settle(&mut nodes, 0, outs, &[]);
        for n in &nodes {
            assert_eq!(n.decided(EraId(1)).map(|c| c.id), Some(5));
            assert_eq!(n.decided(EraId(2)).map(|c| c.id), Some(6));
        }
    }
}
