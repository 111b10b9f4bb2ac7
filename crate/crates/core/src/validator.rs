//! Offline safety checks over a run's history.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use crate::cstruct::sequences_prefix_consistent;
use crate::history::Record;
use crate::model::{CmdId, Command, CommandKind, KeySet};
use crate::simnet::Time;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    /// First counterexample, if the check failed.
    pub failure: Option<String>,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub checks: Vec<Check>,
    /// Client commands at surviving nodes that never got an answer.
    pub unanswered: usize,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::ok)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.ok()).collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match &c.failure {
                None => writeln!(f, "PASS {}", c.name)?,
                Some(e) => writeln!(f, "FAIL {}: {e}", c.name)?,
            }
        }
        writeln!(f, "unanswered {}", self.unanswered)
    }
}

pub const NON_TRIVIALITY: &str = "non-triviality";
pub const STABILITY: &str = "stability";
pub const CONSISTENCY: &str = "consistency";
pub const EXACTLY_ONCE: &str = "exactly-once";
pub const CROSS_ERA_ORDER: &str = "cross-era-order";
pub const TERMINATE_BARRIER: &str = "terminate-barrier";

#[derive(Debug, Clone)]
struct Delivery {
    t: Time,
    era: u64,
    cmd: Command,
}

/// Crashed nodes named by `crash` lines of a text trace (`time|node|kind|details`).
pub fn crashed_in_trace(trace: &str) -> BTreeSet<usize> {
    trace
        .lines()
        .filter_map(|l| {
            let mut parts = l.split('|');
            let _t = parts.next()?;
            let node = parts.next()?.trim_start_matches('n').parse().ok()?;
            (parts.next()? == "crash").then_some(node)
        })
        .collect()
}

pub fn validate(records: &[Record], trace: Option<&str>) -> Report {
    let mut crashed: BTreeSet<usize> = trace.map(crashed_in_trace).unwrap_or_default();
    let mut submitted: HashMap<CmdId, String> = HashMap::new();
    let mut deliveries: BTreeMap<usize, Vec<Delivery>> = BTreeMap::new();
    let mut learns: BTreeMap<(usize, u64), Vec<(Time, CmdId)>> = BTreeMap::new();
    let mut answers: BTreeMap<usize, Vec<(Time, CmdId, u64)>> = BTreeMap::new();
    let mut bad_encoding: Option<String> = None;
    let mut truncated: BTreeMap<usize, usize> = BTreeMap::new();

    for r in records {
        match r {
            Record::Submit { cmd, .. } => {
                if let Ok(c) = Command::decode(cmd) {
                    submitted.insert(c.id, cmd.clone());
                }
            }
            Record::Deliver { t, node, era, cmd } => match Command::decode(cmd) {
                Ok(c) => deliveries.entry(*node).or_default().push(Delivery { t: *t, era: *era, cmd: c }),
                Err(e) => {
                    bad_encoding.get_or_insert(format!("node {node}: {e}"));
                }
            },
            Record::Learn { t, node, era, cmd } => {
                if let Ok(c) = Command::decode(cmd) {
                    learns.entry((*node, *era)).or_default().push((*t, c.id));
                }
            }
            Record::Decide { t, node, id, era, .. } => answers.entry(*node).or_default().push((*t, *id, *era)),
            Record::Crash { node, .. } => {
                crashed.insert(*node);
            }
            Record::Truncated { node, .. } => *truncated.entry(*node).or_default() += 1,
            _ => {}
        }
    }

    let checks = vec![
        Check { name: NON_TRIVIALITY, failure: non_triviality(&deliveries, &submitted).or(bad_encoding) },
        Check { name: STABILITY, failure: stability(&deliveries, &learns) },
        Check { name: CONSISTENCY, failure: consistency(&deliveries) },
        Check { name: EXACTLY_ONCE, failure: exactly_once(&deliveries, &answers) },
        Check { name: CROSS_ERA_ORDER, failure: cross_era(&deliveries, &answers) },
        Check { name: TERMINATE_BARRIER, failure: terminate_barrier(&deliveries) },
    ];
    let unanswered = truncated.iter().filter(|(n, _)| !crashed.contains(n)).map(|(_, c)| c).sum();
    Report { checks, unanswered }
}

fn non_triviality(deliveries: &BTreeMap<usize, Vec<Delivery>>, submitted: &HashMap<CmdId, String>) -> Option<String> {
    for (node, ds) in deliveries {
        for d in ds {
            match d.cmd.kind {
                CommandKind::Client => match submitted.get(&d.cmd.id) {
                    None => return Some(format!("node {node} delivered {} which no client submitted", d.cmd.id)),
                    Some(s) if *s != d.cmd.encode() => {
                        return Some(format!("node {node} delivered {} with altered contents", d.cmd.id))
                    }
                    _ => {}
                },
                CommandKind::Terminate => {
                    if d.cmd.id.seq != d.era {
                        return Some(format!(
                            "node {node} delivered the terminate of era {} in era {}",
                            d.cmd.id.seq, d.era
                        ));
                    }
                }
                CommandKind::Switch => {}
            }
        }
    }
    None
}

fn stability(
    deliveries: &BTreeMap<usize, Vec<Delivery>>,
    learns: &BTreeMap<(usize, u64), Vec<(Time, CmdId)>>,
) -> Option<String> {
    for ((node, era), ls) in learns {
        let mut seen = HashSet::new();
        for (_, id) in ls {
            if !seen.insert(*id) {
                return Some(format!("node {node} learned {id} twice in era {era}"));
            }
        }
    }
    for (node, ds) in deliveries {
        if let Some(w) = ds.windows(2).find(|w| w[1].t < w[0].t) {
            return Some(format!("node {node} delivered {} before the earlier {}", w[1].cmd.id, w[0].cmd.id));
        }
        for d in ds {
            let learned =
                learns.get(&(*node, d.era)).is_some_and(|ls| ls.iter().any(|(t, id)| *id == d.cmd.id && *t <= d.t));
            if !learned {
                return Some(format!("node {node} delivered {} in era {} without learning it", d.cmd.id, d.era));
            }
        }
    }
    None
}

fn lane_keys(c: &Command) -> Vec<Option<&str>> {
    match &c.keys {
        KeySet::All => vec![None],
        KeySet::Keys(k) => k.iter().map(|k| Some(k.as_str())).collect(),
    }
}

/// The first conflicting pair two nodes order differently, if any.
fn first_inversion(a: &[Command], b: &[Command]) -> Option<(CmdId, CmdId)> {
    let pos_b: HashMap<CmdId, usize> = b.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut last: HashMap<Option<&str>, (CmdId, usize)> = HashMap::new();
    let mut last_any: Option<(CmdId, usize)> = None;
    let mut wild: Option<(CmdId, usize)> = None;
    for c in a {
        let Some(&pb) = pos_b.get(&c.id) else { continue };
        let mut prev: Vec<(CmdId, usize)> = Vec::new();
        match &c.keys {
            KeySet::All => prev.extend(last_any),
            _ => {
                for k in lane_keys(c) {
                    prev.extend(last.get(&k).copied());
                }
                prev.extend(wild);
            }
        }
        if let Some(&(p, _)) = prev.iter().find(|(_, q)| *q > pb) {
            return Some((p, c.id));
        }
        match &c.keys {
            KeySet::All => {
                if wild.is_none_or(|(_, q)| pb >= q) {
                    wild = Some((c.id, pb));
                }
            }
            _ => {
                for k in lane_keys(c) {
                    let e = last.entry(k).or_insert((c.id, pb));
                    if pb >= e.1 {
                        *e = (c.id, pb);
                    }
                }
            }
        }
        if last_any.is_none_or(|(_, q)| pb >= q) {
            last_any = Some((c.id, pb));
        }
    }
    None
}

fn consistency(deliveries: &BTreeMap<usize, Vec<Delivery>>) -> Option<String> {
    let seqs: Vec<(usize, Vec<Command>)> =
        deliveries.iter().map(|(n, ds)| (*n, ds.iter().map(|d| d.cmd.clone()).collect())).collect();
    for (i, (na, a)) in seqs.iter().enumerate() {
        for (nb, b) in &seqs[i + 1..] {
            if let Some((x, y)) = first_inversion(a, b) {
                return Some(format!("nodes {na} and {nb} order conflicting {x} and {y} differently"));
            }
            if !sequences_prefix_consistent(a, b) {
                return Some(format!("nodes {na} and {nb} have no common extension"));
            }
        }
    }
    None
}

fn exactly_once(
    deliveries: &BTreeMap<usize, Vec<Delivery>>,
    answers: &BTreeMap<usize, Vec<(Time, CmdId, u64)>>,
) -> Option<String> {
    for (node, ds) in deliveries {
        let mut seen = HashSet::new();
        for d in ds {
            if !seen.insert(d.cmd.id) {
                return Some(format!("node {node} delivered {} twice", d.cmd.id));
            }
        }
    }
    for (node, xs) in answers {
        let mut seen = HashSet::new();
        for (_, id, _) in xs {
            if !seen.insert(*id) {
                return Some(format!("client of node {node} got two answers for {id}"));
            }
        }
    }
    None
}

fn cross_era(
    deliveries: &BTreeMap<usize, Vec<Delivery>>,
    answers: &BTreeMap<usize, Vec<(Time, CmdId, u64)>>,
) -> Option<String> {
    for (node, ds) in deliveries {
        if let Some(w) = ds.windows(2).find(|w| w[1].era < w[0].era) {
            return Some(format!(
                "node {node} delivered {} of era {} after {} of era {}",
                w[1].cmd.id, w[1].era, w[0].cmd.id, w[0].era
            ));
        }
    }
    for (node, xs) in answers {
        if let Some(w) = xs.windows(2).find(|w| w[1].2 < w[0].2) {
            return Some(format!("node {node} answered {} of era {} after era {}", w[1].1, w[1].2, w[0].2));
        }
    }
    None
}

fn terminate_barrier(deliveries: &BTreeMap<usize, Vec<Delivery>>) -> Option<String> {
    for (node, ds) in deliveries {
        let mut closed: BTreeSet<u64> = BTreeSet::new();
        let mut current: Option<u64> = None;
        for d in ds {
            if closed.contains(&d.era) {
                return Some(format!("node {node} delivered {} in era {} after its terminate", d.cmd.id, d.era));
            }
            if let Some(e) = current {
                if d.era > e && !closed.contains(&e) {
                    return Some(format!("node {node} entered era {} before closing era {e}", d.era));
                }
            }
            current = Some(d.era);
            if d.cmd.is_terminate() {
                closed.insert(d.era);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EraId;

    fn cmd(client: u64, seq: u64, keys: &[&str]) -> Command {
        Command::client(CmdId::new(client, seq), KeySet::of(keys.iter().copied()), vec![1])
    }

    fn clean() -> Vec<Record> {
        let a = cmd(0, 1, &["x"]);
        let b = cmd(1000, 1, &["x"]);
        let c = cmd(2000, 1, &["y"]);
        let t = Command::terminate(EraId(1));
        let d = cmd(0, 2, &["x"]);
        let mut out = Vec::new();
        for x in [&a, &b, &c, &d] {
            out.push(Record::Submit { t: 0, node: 0, cmd: x.encode(), retry: false });
        }
        for node in 0..3 {
            let order: Vec<(&Command, u64)> = if node == 1 {
                vec![(&c, 1), (&a, 1), (&b, 1), (&t, 1), (&d, 2)]
            } else {
                vec![(&a, 1), (&b, 1), (&c, 1), (&t, 1), (&d, 2)]
            };
            for (i, (x, era)) in order.into_iter().enumerate() {
                out.push(Record::Learn { t: i as u64, node, era, cmd: x.encode() });
                out.push(Record::Deliver { t: i as u64, node, era, cmd: x.encode() });
            }
        }
        out
    }

    #[test]
    fn clean_history_passes() {
        let r = validate(&clean(), None);
        assert!(r.passed(), "{r}");
    }

    /// Swaps two commands in node 2's learn and delivery records.
    fn swap_at_node2(h: &mut [Record], x: &str, y: &str) {
        for r in h.iter_mut() {
            if let Record::Deliver { node: 2, cmd, .. } | Record::Learn { node: 2, cmd, .. } = r {
                if cmd == x {
                    *cmd = y.to_string();
                } else if cmd == y {
                    *cmd = x.to_string();
                }
            }
        }
    }

    #[test]
    fn swapped_conflicting_pair_is_named() {
        let mut h = clean();
        swap_at_node2(&mut h, &cmd(0, 1, &["x"]).encode(), &cmd(1000, 1, &["x"]).encode());
        let r = validate(&h, None);
        let f = r.failed();
        assert_eq!(f.len(), 1, "{r}");
        assert_eq!(f[0].name, CONSISTENCY);
        let msg = f[0].failure.as_ref().unwrap();
        assert!(msg.contains("0.1") && msg.contains("1000.1"), "{msg}");
    }

    #[test]
    fn commuting_swap_is_fine() {
        let mut h = clean();
        swap_at_node2(&mut h, &cmd(1000, 1, &["x"]).encode(), &cmd(2000, 1, &["y"]).encode());
        assert!(validate(&h, None).passed());
    }

    #[test]
    fn duplicated_delivery_is_caught() {
        let mut h = clean();
        let dup = h.iter().find(|r| matches!(r, Record::Deliver { node: 0, era: 1, .. })).cloned().unwrap();
        let pos = h.iter().position(|r| matches!(r, Record::Deliver { node: 0, era: 1, .. })).unwrap();
        h.insert(pos + 1, dup);
        let r = validate(&h, None);
        assert!(r.failed().iter().any(|c| c.name == EXACTLY_ONCE), "{r}");
    }

    #[test]
    fn era_inversion_is_caught() {
        let mut h = clean();
        let pos = h.iter().rposition(|r| matches!(r, Record::Deliver { node: 0, era: 2, .. })).unwrap();
        let rec = h.remove(pos);
        let first = h.iter().position(|r| matches!(r, Record::Deliver { node: 0, .. })).unwrap();
        h.insert(first, rec);
        let r = validate(&h, None);
        let names: Vec<_> = r.failed().iter().map(|c| c.name).collect();
        assert!(names.contains(&CROSS_ERA_ORDER), "{r}");
    }

    #[test]
    fn unsubmitted_command_is_caught() {
        let mut h = clean();
        h.retain(|r| !matches!(r, Record::Submit { cmd, .. } if cmd.starts_with("2000.1")));
        let r = validate(&h, None);
        assert_eq!(r.failed()[0].name, NON_TRIVIALITY);
    }

    #[test]
    fn delivery_past_terminate_is_caught() {
        let mut h = clean();
        let extra = cmd(3000, 1, &["z"]);
        h.push(Record::Submit { t: 0, node: 0, cmd: extra.encode(), retry: false });
        let pos = h.iter().position(|r| matches!(r, Record::Deliver { node: 0, era: 2, .. })).unwrap();
        h.insert(pos, Record::Learn { t: 3, node: 0, era: 1, cmd: extra.encode() });
        h.insert(pos + 1, Record::Deliver { t: 3, node: 0, era: 1, cmd: extra.encode() });
        let r = validate(&h, None);
        assert!(r.failed().iter().any(|c| c.name == TERMINATE_BARRIER), "{r}");
    }

    #[test]
    fn crashes_from_trace() {
        let t = "0.000|n0|start|\n12.500|n2|crash|\n";
        assert_eq!(crashed_in_trace(t), BTreeSet::from([2]));
    }
}
