//! Switch agreement under random schedules: reordering, loss, competing
//! proposers and retries never produce two decisions for one era.

use std::collections::BTreeMap;

use eraswitch::meta::{MetaAgreement, MetaMsg, MetaOut, SwitchCommand};
use eraswitch::{EraId, NodeId, ProtocolKind};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Step {
    Deliver(usize),
    Drop(usize),
    Propose(usize),
    Retry(usize),
    Rebroadcast(usize),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => any::<usize>().prop_map(Step::Deliver),
        1 => any::<usize>().prop_map(Step::Drop),
        1 => any::<usize>().prop_map(Step::Propose),
        1 => any::<usize>().prop_map(Step::Retry),
        1 => any::<usize>().prop_map(Step::Rebroadcast),
    ]
}

struct World {
    nodes: Vec<MetaAgreement>,
    flight: Vec<(usize, usize, MetaMsg)>,
    changes: Vec<Vec<(EraId, SwitchCommand)>>,
    next_id: u64,
}

impl World {
    fn new(n: usize) -> Self {
        World {
            nodes: (0..n).map(|i| MetaAgreement::new(n, NodeId(i))).collect(),
            flight: Vec::new(),
            changes: vec![Vec::new(); n],
            next_id: 1,
        }
    }

    fn absorb(&mut self, from: usize, outs: Vec<MetaOut>) {
        for o in outs {
            match o {
                MetaOut::Send(to, m) => self.flight.push((from, to.0, m)),
                MetaOut::Broadcast(m) => {
                    for to in 0..self.nodes.len() {
                        self.flight.push((from, to, m.clone()));
                    }
                }
                MetaOut::ChangeEra(e, c) => self.changes[from].push((e, c)),
                MetaOut::CrashSelf | MetaOut::Retry | MetaOut::Trace(..) => {}
            }
        }
    }

    fn apply(&mut self, s: &Step) {
        let n = self.nodes.len();
        match *s {
            Step::Deliver(k) if !self.flight.is_empty() => {
                let (from, to, m) = self.flight.remove(k % self.flight.len());
                let outs = self.nodes[to].on_message(NodeId(from), m);
                self.absorb(to, outs);
            }
            Step::Drop(k) if !self.flight.is_empty() => {
                self.flight.remove(k % self.flight.len());
            }
            Step::Propose(i) => {
                let kinds = [ProtocolKind::Monarchic, ProtocolKind::Oligarchic, ProtocolKind::Democratic];
                let cmd = SwitchCommand::new(self.next_id, kinds[self.next_id as usize % 3]);
                self.next_id += 1;
                let outs = self.nodes[i % n].era_propose(cmd);
                self.absorb(i % n, outs);
            }
            Step::Retry(i) => {
                let outs = self.nodes[i % n].retry();
                self.absorb(i % n, outs);
            }
            Step::Rebroadcast(i) => {
                let outs = self.nodes[i % n].rebroadcast();
                self.absorb(i % n, outs);
            }
            _ => {}
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn one_decision_per_era(n in prop_oneof![Just(3usize), Just(5usize)], steps in proptest::collection::vec(step(), 1..300)) {
        let mut w = World::new(n);
        w.apply(&Step::Propose(0));
        for s in &steps {
            w.apply(s);
        }
        let mut agreed: BTreeMap<EraId, SwitchCommand> = BTreeMap::new();
        for node in &w.nodes {
            for (e, c) in node.decided_all() {
                let prev = agreed.entry(*e).or_insert_with(|| *c);
                prop_assert_eq!(&*prev, c, "era {:?}", e);
            }
        }
        for (i, ch) in w.changes.iter().enumerate() {
            // eras are activated in order, each once, with the decided command
            for pair in ch.windows(2) {
                prop_assert!(pair[0].0 < pair[1].0, "node {} activated {:?} then {:?}", i, pair[0].0, pair[1].0);
            }
            for (e, c) in ch {
                prop_assert_eq!(agreed.get(e), Some(c));
            }
        }
    }

    #[test]
    fn quiet_network_decides_the_first_switch(n in 1usize..8) {
        let mut w = World::new(n);
        w.apply(&Step::Propose(0));
        while !w.flight.is_empty() {
            w.apply(&Step::Deliver(0));
        }
        for node in &w.nodes {
            prop_assert_eq!(node.decided_all().len(), 1);
            prop_assert_eq!(node.decided_all().values().next().map(|c| c.id), Some(1));
        }
    }
}
