//! Command structures: sequences that are equal up to reordering of
//! commuting neighbours.
//!
//! Both relations below work on per-key projections. Two sequences are
//! equivalent iff they hold the same commands and agree on the order of every
//! conflicting pair; restricting each sequence to the commands touching one
//! key captures exactly the conflicting pairs on that key.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{CmdId, Command, KeySet};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CStruct {
    seq: Vec<Command>,
}

impl CStruct {
    pub fn new() -> Self {
        Self::default()
    }

    /// The `•` operator. Existing entries are never rewritten.
    pub fn append(&mut self, cmd: Command) {
        self.seq.push(cmd);
    }

    pub fn commands(&self) -> &[Command] {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }
}

impl From<Vec<Command>> for CStruct {
    fn from(seq: Vec<Command>) -> Self {
        CStruct { seq }
    }
}

impl FromIterator<Command> for CStruct {
    fn from_iter<I: IntoIterator<Item = Command>>(iter: I) -> Self {
        CStruct { seq: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Lane<'a> {
    Key(&'a str),
    Wildcard,
}

/// Lanes in which a command appears, given the full key universe.
fn lanes<'a>(keys: &'a KeySet, universe: &[&'a str]) -> Vec<Lane<'a>> {
    match keys {
        KeySet::All => universe.iter().map(|k| Lane::Key(k)).chain(std::iter::once(Lane::Wildcard)).collect(),
        KeySet::Keys(k) => k.iter().map(|k| Lane::Key(k.as_str())).collect(),
    }
}

fn universe<'a>(seqs: &[&'a [Command]]) -> Vec<&'a str> {
    let mut keys: Vec<&str> =
        seqs.iter().flat_map(|s| s.iter()).flat_map(|c| c.keys.keys().map(String::as_str)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

fn projections<'a>(seq: &'a [Command], universe: &[&'a str]) -> BTreeMap<Lane<'a>, Vec<CmdId>> {
    let mut out: BTreeMap<Lane<'a>, Vec<CmdId>> = BTreeMap::new();
    for c in seq {
        for lane in lanes(&c.keys, universe) {
            out.entry(lane).or_default().push(c.id);
        }
    }
    out
}

/// True iff `b` can be obtained from `a` by swapping adjacent commuting commands.
pub fn cstruct_equivalent(a: &CStruct, b: &CStruct) -> bool {
    sequences_equivalent(a.commands(), b.commands())
}

pub fn sequences_equivalent(a: &[Command], b: &[Command]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut ids_a: Vec<CmdId> = a.iter().map(|c| c.id).collect();
    let mut ids_b: Vec<CmdId> = b.iter().map(|c| c.id).collect();
    ids_a.sort_unstable();
    ids_b.sort_unstable();
    if ids_a != ids_b {
        return false;
    }
    let uni = universe(&[a, b]);
    projections(a, &uni) == projections(b, &uni)
}

fn first_occurrences(seq: &[Command]) -> Vec<&Command> {
    let mut seen = HashSet::new();
    seq.iter().filter(|c| seen.insert(c.id)).collect()
}

/// True iff some command structure extends both `a` and `b`.
///
/// Every conflicting pair inside a history is ordered as in that history, and
/// every command of a history precedes any conflicting command the history
/// has not decided yet. A common extension exists iff these constraints are
/// acyclic. Repeated ids are judged by their first occurrence.
pub fn cstruct_prefix_consistent(a: &CStruct, b: &CStruct) -> bool {
    sequences_prefix_consistent(a.commands(), b.commands())
}

pub fn sequences_prefix_consistent(a: &[Command], b: &[Command]) -> bool {
    let a = first_occurrences(a);
    let b = first_occurrences(b);
    let mut index: HashMap<CmdId, usize> = HashMap::new();
    let mut nodes: Vec<&Command> = Vec::new();
    for c in a.iter().chain(b.iter()) {
        index.entry(c.id).or_insert_with(|| {
            nodes.push(c);
            nodes.len() - 1
        });
    }
    let owned_a: Vec<Command> = a.iter().map(|c| (*c).clone()).collect();
    let owned_b: Vec<Command> = b.iter().map(|c| (*c).clone()).collect();
    let uni = universe(&[&owned_a, &owned_b]);

    let mut edges: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut add_side = |side: &[&Command], other: &[&Command]| {
        let inside: HashSet<CmdId> = side.iter().map(|c| c.id).collect();
        let mut last: BTreeMap<Lane<'_>, usize> = BTreeMap::new();
        for c in side {
            let v = index[&c.id];
            for lane in lanes(&c.keys, &uni) {
                if let Some(&u) = last.get(&lane) {
                    edges[u].push(v);
                }
                last.insert(lane, v);
            }
        }
        for c in other.iter().filter(|c| !inside.contains(&c.id)) {
            let v = index[&c.id];
            for lane in lanes(&c.keys, &uni) {
                if let Some(&u) = last.get(&lane) {
                    edges[u].push(v);
                }
            }
        }
    };
    add_side(&a, &b);
    add_side(&b, &a);
    is_acyclic(&edges)
}

fn is_acyclic(edges: &[Vec<usize>]) -> bool {
    let mut indeg = vec![0usize; edges.len()];
    for outs in edges {
        for &v in outs {
            indeg[v] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..edges.len()).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(u) = queue.pop_front() {
        seen += 1;
        for &v in &edges[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    seen == edges.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{conflicts, EraId};
    use proptest::prelude::*;

    fn cmd(seq: u64, keys: &[&str]) -> Command {
        Command::client(CmdId::new(1, seq), KeySet::of(keys.iter().copied()), vec![])
    }

    /// Breadth-first search over adjacent swaps of commuting neighbours.
    fn brute_equivalent(a: &[Command], b: &[Command]) -> bool {
        let start: Vec<CmdId> = a.iter().map(|c| c.id).collect();
        let goal: Vec<CmdId> = b.iter().map(|c| c.id).collect();
        if a.len() != b.len() {
            return false;
        }
        let by_id: HashMap<CmdId, &Command> = a.iter().map(|c| (c.id, c)).collect();
        if goal.iter().any(|id| !by_id.contains_key(id)) {
            return false;
        }
        let mut seen = HashSet::from([start.clone()]);
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            if cur == goal {
                return true;
            }
            for i in 0..cur.len().saturating_sub(1) {
                if !conflicts(by_id[&cur[i]], by_id[&cur[i + 1]]) {
                    let mut next = cur.clone();
                    next.swap(i, i + 1);
                    if seen.insert(next.clone()) {
                        queue.push_back(next);
                    }
                }
            }
        }
        false
    }

    fn permutations(items: &[Command]) -> Vec<Vec<Command>> {
        if items.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head.clone());
                out.push(p);
            }
        }
        out
    }

    /// Does some ordering of the union extend both histories?
    fn brute_prefix_consistent(a: &[Command], b: &[Command]) -> bool {
        let mut union: Vec<Command> = a.to_vec();
        for c in b {
            if !union.iter().any(|x| x.id == c.id) {
                union.push(c.clone());
            }
        }
        let extends = |p: &[Command], h: &[Command]| {
            let mut target: Vec<Command> = h.to_vec();
            target.extend(p.iter().filter(|c| !h.iter().any(|x| x.id == c.id)).cloned());
            brute_equivalent(p, &target)
        };
        permutations(&union).iter().any(|p| extends(p, a) && extends(p, b))
    }

    #[test]
    fn equivalence_examples() {
        let tri = cmd(1, &["x"]);
        let sq = cmd(2, &["x"]);
        assert!(!sequences_equivalent(&[tri.clone(), sq.clone()], &[sq, tri.clone()]));
        let sq = cmd(2, &["y"]);
        assert!(sequences_equivalent(&[tri.clone(), sq.clone()], &[sq, tri]));
        assert!(cstruct_equivalent(&CStruct::new(), &CStruct::new()));
    }

    #[test]
    fn prefix_examples() {
        let tri = cmd(1, &["x"]);
        let sq = cmd(2, &["x"]);
        assert!(sequences_prefix_consistent(std::slice::from_ref(&tri), &[tri.clone(), sq.clone()]));
        assert!(!sequences_prefix_consistent(std::slice::from_ref(&tri), std::slice::from_ref(&sq)));
        assert!(!brute_prefix_consistent(std::slice::from_ref(&tri), &[sq]));
        let dia = cmd(3, &["z"]);
        assert!(sequences_prefix_consistent(&[tri.clone(), dia.clone()], &[dia, tri]));
    }

    #[test]
    fn wildcard_orders_against_everything() {
        let t = Command::terminate(EraId(1));
        let a = cmd(1, &["x"]);
        assert!(!sequences_prefix_consistent(&[a.clone(), t.clone()], &[t.clone(), a.clone()]));
        assert!(sequences_prefix_consistent(&[a.clone(), t.clone()], std::slice::from_ref(&a)));
        assert!(!sequences_prefix_consistent(std::slice::from_ref(&t), std::slice::from_ref(&a)));
        let free = cmd(9, &[]);
        assert!(sequences_equivalent(&[free.clone(), t.clone()], &[t, free]));
    }

    fn arb_history() -> impl Strategy<Value = Vec<Command>> {
        let keys = prop_oneof![
            1 => Just(KeySet::All),
            8 => proptest::collection::btree_set("[abc]", 0..3).prop_map(KeySet::Keys),
        ];
        proptest::collection::vec(keys, 0..=6).prop_map(|ks| {
            ks.into_iter().enumerate().map(|(i, k)| Command::client(CmdId::new(1, i as u64), k, vec![])).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn equivalence_matches_swap_search(h in arb_history(), perm_seed in any::<u64>()) {
            let mut shuffled = h.clone();
            let mut s = perm_seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(sequences_equivalent(&h, &shuffled), brute_equivalent(&h, &shuffled));
        }

        #[test]
        fn equivalence_is_an_equivalence(h in arb_history(), s1 in any::<u64>(), s2 in any::<u64>()) {
            let shuffle = |seed: u64| {
                let mut v = h.clone();
                let mut s = seed;
                for i in (1..v.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    v.swap(i, (s >> 33) as usize % (i + 1));
                }
                v
            };
            let (x, y) = (shuffle(s1), shuffle(s2));
            prop_assert!(sequences_equivalent(&h, &h));
            prop_assert_eq!(sequences_equivalent(&h, &x), sequences_equivalent(&x, &h));
            if sequences_equivalent(&h, &x) && sequences_equivalent(&x, &y) {
                prop_assert!(sequences_equivalent(&h, &y));
            }
        }

        #[test]
        fn prefix_consistency_matches_enumeration(a in arb_history(), cut in 0usize..7, drop in 0usize..7, s in any::<u64>()) {
            // b: a shuffled copy of a, truncated, with one entry dropped.
            let mut b = a.clone();
            let mut st = s;
            for i in (1..b.len()).rev() {
                st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                b.swap(i, (st >> 33) as usize % (i + 1));
            }
            b.truncate(cut.min(b.len()));
            if drop < b.len() { b.remove(drop); }
            let a_prefix: Vec<Command> = a.iter().take(a.len().saturating_sub(1)).cloned().collect();
            prop_assert_eq!(
                sequences_prefix_consistent(&a_prefix, &b),
                brute_prefix_consistent(&a_prefix, &b)
            );
        }
    }
}
