//! Bounded exhaustive exploration of switch agreement on a tiny cluster.
//!
//! Every reachable interleaving of message deliveries, crashes and
//! leadership takeovers is visited up to a depth bound. Each state is
//! checked for agreement, and from every state at the bound a fair
//! continuation must finish the pending switches at every live node.

use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::meta::{MetaAgreement, MetaMsg, MetaOut, SwitchCommand};
use crate::model::{EpochNum, EraId, NodeId, ProtocolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub nodes: usize,
    pub depth: usize,
    pub crashes: usize,
    /// Spontaneous leadership takeovers, on top of retries after a refusal.
    pub takeovers: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { nodes: 3, depth: 10, crashes: 1, takeovers: 2 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub states: usize,
    pub decided_states: usize,
    pub crashed_states: usize,
    pub violations: Vec<String>,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

type Flight = (usize, usize, MetaMsg);

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    nodes: Vec<MetaAgreement>,
    flight: Vec<Flight>,
    crashed: Vec<bool>,
    wants_retry: Vec<bool>,
    /// Whether each node has handed its own switch to the agreement.
    proposed: Vec<bool>,
    /// Values a quorum accepted at one epoch; once here they must win.
    chosen: BTreeSet<(EraId, SwitchCommand)>,
    crashes: usize,
    takeovers: usize,
}

/// The switch each node asks for: the first leader's, then competitors'.
fn own_switch(i: usize) -> SwitchCommand {
    let target = [ProtocolKind::Oligarchic, ProtocolKind::Democratic, ProtocolKind::Monarchic][i % 3];
    SwitchCommand::new(i as u64 + 1, target)
}

impl State {
    fn root(n: usize, crash_before_decide: bool) -> Self {
        let mut nodes: Vec<_> = (0..n).map(|i| MetaAgreement::new(n, NodeId(i))).collect();
        nodes[0].crash_before_decide = crash_before_decide;
        let mut s = State {
            nodes,
            flight: Vec::new(),
            crashed: vec![false; n],
            wants_retry: vec![false; n],
            proposed: vec![false; n],
            chosen: BTreeSet::new(),
            crashes: 0,
            takeovers: 0,
        };
        s.propose(0);
        s
    }

    fn propose(&mut self, i: usize) {
        self.proposed[i] = true;
        let outs = self.nodes[i].era_propose(own_switch(i));
        self.absorb(i, outs);
    }

    fn crash(&mut self, i: usize) {
        self.crashed[i] = true;
        self.wants_retry[i] = false;
        self.crashes += 1;
        self.flight.retain(|(_, to, _)| *to != i);
    }

    fn absorb(&mut self, from: usize, outs: Vec<MetaOut>) {
        for o in outs {
            match o {
                MetaOut::Send(to, m) => {
                    if !self.crashed[to.0] {
                        self.flight.push((from, to.0, m));
                    }
                }
                MetaOut::Broadcast(m) => {
                    for to in 0..self.nodes.len() {
                        if !self.crashed[to] {
                            self.flight.push((from, to, m.clone()));
                        }
                    }
                }
                MetaOut::CrashSelf => self.crash(from),
                MetaOut::Retry => self.wants_retry[from] = true,
                MetaOut::ChangeEra(..) | MetaOut::Trace(..) => {}
            }
        }
        self.flight.sort();
    }

    fn note_chosen(&mut self) {
        let quorum = self.nodes.len() / 2 + 1;
        let mut votes: BTreeMap<(EraId, SwitchCommand, EpochNum), usize> = BTreeMap::new();
        for m in &self.nodes {
            for era in 1..=self.nodes.len() as u64 + 1 {
                if let Some((c, e)) = m.accepted(EraId(era)) {
                    *votes.entry((EraId(era), c, e)).or_default() += 1;
                }
            }
        }
        for ((era, c, _), k) in votes {
            if k >= quorum {
                self.chosen.insert((era, c));
            }
        }
    }

    fn deliver(&mut self, k: usize) {
        let (from, to, m) = self.flight.remove(k);
        if self.crashed[to] {
            return;
        }
        let outs = self.nodes[to].on_message(NodeId(from), m);
        self.absorb(to, outs);
        self.note_chosen();
    }

    fn retry(&mut self, i: usize) {
        self.wants_retry[i] = false;
        let outs = self.nodes[i].retry();
        self.absorb(i, outs);
    }

    fn successors(&self, b: &Bounds) -> Vec<(Step, State)> {
        let mut out = Vec::new();
        for k in 0..self.flight.len() {
            if k > 0 && self.flight[k] == self.flight[k - 1] {
                continue;
            }
            let (from, to, m) = &self.flight[k];
            let step = Step::Deliver(m.name(), *from, *to);
            let mut s = self.clone();
            s.deliver(k);
            out.push((step, s));
        }
        let armed = self.nodes.iter().any(|m| m.crash_before_decide);
        for i in 0..self.nodes.len() {
            if self.crashed[i] {
                continue;
            }
            if self.wants_retry[i] {
                let mut s = self.clone();
                s.retry(i);
                out.push((Step::Retry(i), s));
            }
            if self.takeovers < b.takeovers && !self.proposed[i] {
                let mut s = self.clone();
                s.takeovers += 1;
                s.propose(i);
                out.push((Step::Takeover(i), s));
            }
            if self.crashes < b.crashes && !armed {
                let mut s = self.clone();
                s.crash(i);
                out.push((Step::Crash(i), s));
            }
        }
        out
    }

    fn fingerprint(&self) -> u128 {
        let mut lo = DefaultHasher::new();
        self.hash(&mut lo);
        let mut hi = DefaultHasher::new();
        0xa5u8.hash(&mut hi);
        self.hash(&mut hi);
        (u128::from(hi.finish()) << 64) | u128::from(lo.finish())
    }

    fn check_agreement(&self) -> Result<(), String> {
        let mut first: BTreeMap<EraId, (usize, SwitchCommand)> = BTreeMap::new();
        for (i, m) in self.nodes.iter().enumerate() {
            for (era, cmd) in m.decided_all() {
                let (j, other) = *first.entry(*era).or_insert((i, *cmd));
                if other != *cmd {
                    return Err(format!("era {era}: node {j} decided {other:?}, node {i} decided {cmd:?}"));
                }
                if cmd.id > self.nodes.len() as u64 && cmd.id < 1 << 62 {
                    return Err(format!("era {era}: {cmd:?} was never proposed"));
                }
            }
        }
        for (era, c) in &self.chosen {
            if let Some((i, d)) = first.get(era) {
                if d != c {
                    return Err(format!("era {era}: node {i} decided {d:?} over chosen {c:?}"));
                }
            }
        }
        Ok(())
    }

    fn drain(&mut self) -> Result<(), String> {
        let mut steps = 0;
        while !self.flight.is_empty() {
            steps += 1;
            if steps > 10_000 {
                return Err("continuation does not quiesce".into());
            }
            self.deliver(0);
        }
        Ok(())
    }

    /// Runs the lowest live node as a stable leader until nothing moves.
    fn complete(mut self) -> Result<(), String> {
        for m in &mut self.nodes {
            m.crash_before_decide = false;
        }
        let n = self.nodes.len();
        let leader = (0..n).find(|&i| !self.crashed[i]).expect("a live node");
        let live: Vec<usize> = (0..n).filter(|&i| !self.crashed[i]).collect();
        for _ in 0..6 {
            self.drain()?;
            for &i in live.iter().filter(|&&i| i != leader) {
                for c in self.nodes[i].take_queue() {
                    let outs = self.nodes[leader].era_propose(c);
                    self.absorb(leader, outs);
                }
            }
            self.retry(leader);
            self.drain()?;
            for &i in &live {
                let outs = self.nodes[i].rebroadcast();
                self.absorb(i, outs);
            }
            self.drain()?;
            self.check_agreement()?;
        }
        let reference = self.nodes[leader].decided_all();
        for &i in &live {
            if self.nodes[i].decided_all() != reference {
                return Err(format!("nodes {leader} and {i} end with different decisions"));
            }
            if self.proposed[i] && !reference.values().any(|c| *c == own_switch(i)) {
                return Err(format!("the switch proposed by live node {i} is never decided"));
            }
        }
        for (era, c) in &self.chosen {
            if reference.get(era) != Some(c) {
                return Err(format!("chosen {c:?} for era {era} is never decided"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Deliver(&'static str, usize, usize),
    Retry(usize),
    Takeover(usize),
    Crash(usize),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Deliver(m, from, to) => write!(f, "deliver {m} {from}->{to}"),
            Step::Retry(i) => write!(f, "retry {i}"),
            Step::Takeover(i) => write!(f, "takeover {i}"),
            Step::Crash(i) => write!(f, "crash {i}"),
        }
    }
}

struct Search {
    bounds: Bounds,
    /// Fingerprint to the most steps still allowed when it was visited.
    seen: HashMap<u128, usize>,
    path: Vec<Step>,
    outcome: Outcome,
}

impl Search {
    fn visit(&mut self, s: State) {
        let budget = self.bounds.depth - self.path.len();
        match self.seen.entry(s.fingerprint()) {
            Entry::Occupied(mut e) => {
                if *e.get() >= budget {
                    return;
                }
                e.insert(budget);
            }
            Entry::Vacant(e) => {
                e.insert(budget);
                self.outcome.states += 1;
                if s.nodes.iter().any(|m| !m.decided_all().is_empty()) {
                    self.outcome.decided_states += 1;
                }
                if s.crashes > 0 {
                    self.outcome.crashed_states += 1;
                }
            }
        }
        let next = if budget == 0 { Vec::new() } else { s.successors(&self.bounds) };
        let verdict = match s.check_agreement() {
            Ok(()) if next.is_empty() => s.complete(),
            v => v,
        };
        if let Err(e) = verdict {
            if self.outcome.violations.len() < 10 {
                let path: Vec<String> = self.path.iter().map(Step::to_string).collect();
                self.outcome.violations.push(format!("{e} after [{}]", path.join(", ")));
            }
            return;
        }
        for (step, next) in next {
            self.path.push(step);
            self.visit(next);
            self.path.pop();
        }
    }
}

/// Visits every distinct state reachable within the bounds, from a start
/// with and without the leader's crash-before-decide hook armed.
pub fn explore(bounds: Bounds) -> Outcome {
    let mut search = Search { bounds, seen: HashMap::new(), path: Vec::new(), outcome: Outcome::default() };
    for armed in [false, true] {
        search.visit(State::root(bounds.nodes, armed));
    }
    search.outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_exploration_is_clean() {
        let o = explore(Bounds { depth: 7, ..Bounds::default() });
        assert!(o.ok(), "{:?}", o.violations);
        assert!(o.states > 100);
    }
}
