//! Shared vocabulary: node identities, commands and their conflict relation,
//! quorum arithmetic, eras, epochs and ballots.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("quorum size requested for {0} nodes")]
    EmptyMembership(usize),
    #[error("malformed command encoding: {0}")]
    BadEncoding(String),
    #[error("unknown protocol kind `{0}`")]
    UnknownProtocol(String),
}

/// Index of a process in the fixed membership `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Iterator over the membership `0..n`.
pub fn members(n: usize) -> impl Iterator<Item = NodeId> {
    (0..n).map(NodeId)
}

/// Smallest quorum such that any two quorums intersect: `floor(n/2) + 1`.
pub fn classic_quorum_size(n: usize) -> Result<usize, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyMembership(n));
    }
    Ok(n / 2 + 1)
}

/// Quorum needed for two-step decisions: `ceil(3n/4)`.
pub fn fast_quorum_size(n: usize) -> Result<usize, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyMembership(n));
    }
    Ok((3 * n).div_ceil(4))
}

/// Client id reserved for era-closing markers.
pub const TERMINATE_CLIENT: u64 = u64::MAX;
/// Client id reserved for switch commands.
pub const SWITCH_CLIENT: u64 = u64::MAX - 1;

/// Stable identity of a logical command: retransmissions reuse it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct CmdId {
    pub client: u64,
    pub seq: u64,
}

impl CmdId {
    pub const fn new(client: u64, seq: u64) -> Self {
        CmdId { client, seq }
    }

    /// The era-closing marker for `era`; identical at every node.
    pub const fn terminate(era: EraId) -> Self {
        CmdId::new(TERMINATE_CLIENT, era.0)
    }

    pub fn is_terminate(&self) -> bool {
        self.client == TERMINATE_CLIENT
    }
}

impl fmt::Display for CmdId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.client, self.seq)
    }
}

impl FromStr for CmdId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadEncoding(format!("cmd id `{s}`"));
        let (c, q) = s.split_once('.').ok_or_else(bad)?;
        Ok(CmdId::new(c.parse().map_err(|_| bad())?, q.parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Client,
    Terminate,
    Switch,
}

impl CommandKind {
    fn as_str(self) -> &'static str {
        match self {
            CommandKind::Client => "client",
            CommandKind::Terminate => "terminate",
            CommandKind::Switch => "switch",
        }
    }
}

/// The objects a command touches. `All` is the wildcard carried by the
/// era-closing marker.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KeySet {
    All,
    Keys(BTreeSet<String>),
}

impl KeySet {
    pub fn of<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        KeySet::Keys(keys.into_iter().map(Into::into).collect())
    }

    pub fn empty() -> Self {
        KeySet::Keys(BTreeSet::new())
    }

    pub fn is_all(&self) -> bool {
        matches!(self, KeySet::All)
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, KeySet::Keys(k) if k.is_empty())
    }

    /// Concrete keys, empty for the wildcard.
    pub fn keys(&self) -> impl Iterator<Item = &String> {
        let set = match self {
            KeySet::All => None,
            KeySet::Keys(k) => Some(k),
        };
        set.into_iter().flatten()
    }

    pub fn contains(&self, key: &str) -> bool {
        match self {
            KeySet::All => true,
            KeySet::Keys(k) => k.contains(key),
        }
    }

    pub fn intersects(&self, other: &KeySet) -> bool {
        match (self, other) {
            (KeySet::All, KeySet::All) => true,
            (KeySet::All, KeySet::Keys(k)) | (KeySet::Keys(k), KeySet::All) => !k.is_empty(),
            (KeySet::Keys(a), KeySet::Keys(b)) => {
                let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
                small.iter().any(|k| large.contains(k))
            }
        }
    }
}

/// Family of a pluggable ordering protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProtocolKind {
    /// Ownership-partitioned multi-leader ordering.
    Oligarchic,
    /// Leaderless dependency-graph ordering.
    Democratic,
    /// Single-leader replicated log.
    Monarchic,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 3] = [ProtocolKind::Oligarchic, ProtocolKind::Democratic, ProtocolKind::Monarchic];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Monarchic => "MONARCHIC",
            ProtocolKind::Oligarchic => "OLIGARCHIC",
            ProtocolKind::Democratic => "DEMOCRATIC",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MONARCHIC" => Ok(ProtocolKind::Monarchic),
            "OLIGARCHIC" => Ok(ProtocolKind::Oligarchic),
            "DEMOCRATIC" => Ok(ProtocolKind::Democratic),
            _ => Err(ModelError::UnknownProtocol(s.to_string())),
        }
    }
}

/// A client-submitted unit of work, or one of the two control commands.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Command {
    pub id: CmdId,
    pub kind: CommandKind,
    pub keys: KeySet,
    pub payload: Vec<u8>,
    pub switch_target: Option<ProtocolKind>,
}

impl Command {
    pub fn client(id: CmdId, keys: KeySet, payload: Vec<u8>) -> Self {
        Command { id, kind: CommandKind::Client, keys, payload, switch_target: None }
    }

    /// The era-closing marker; conflicts with every command.
    pub fn terminate(era: EraId) -> Self {
        Command {
            id: CmdId::terminate(era),
            kind: CommandKind::Terminate,
            keys: KeySet::All,
            payload: Vec::new(),
            switch_target: None,
        }
    }

    pub fn switch(seq: u64, target: ProtocolKind) -> Self {
        Command {
            id: CmdId::new(SWITCH_CLIENT, seq),
            kind: CommandKind::Switch,
            keys: KeySet::empty(),
            payload: Vec::new(),
            switch_target: Some(target),
        }
    }

    pub fn is_terminate(&self) -> bool {
        self.kind == CommandKind::Terminate
    }

    /// Canonical one-line encoding: `cmd_id|kind|sorted_keys_or_ALL|payload_hex`.
    /// Switch commands append the target after the kind (`switch:MONARCHIC`).
    pub fn encode(&self) -> String {
        let keys = match &self.keys {
            KeySet::All => "ALL".to_string(),
            KeySet::Keys(k) => k.iter().map(String::as_str).collect::<Vec<_>>().join(","),
        };
        let kind = match (self.kind, self.switch_target) {
            (CommandKind::Switch, Some(t)) => format!("switch:{t}"),
            (k, _) => k.as_str().to_string(),
        };
        let hex: String = self.payload.iter().map(|b| format!("{b:02x}")).collect();
        format!("{}|{}|{}|{}", self.id, kind, keys, hex)
    }

    pub fn decode(s: &str) -> Result<Self, ModelError> {
        let bad = |what: &str| ModelError::BadEncoding(format!("{what} in `{s}`"));
        let mut parts = s.splitn(4, '|');
        let id: CmdId = parts.next().ok_or_else(|| bad("missing id"))?.parse()?;
        let kind_s = parts.next().ok_or_else(|| bad("missing kind"))?;
        let keys_s = parts.next().ok_or_else(|| bad("missing keys"))?;
        let hex = parts.next().ok_or_else(|| bad("missing payload"))?;
        let (kind, switch_target) = match kind_s.split_once(':') {
            Some(("switch", t)) => (CommandKind::Switch, Some(t.parse()?)),
            Some(_) => return Err(bad("kind")),
            None => match kind_s {
                "client" => (CommandKind::Client, None),
                "terminate" => (CommandKind::Terminate, None),
                "switch" => (CommandKind::Switch, None),
                _ => return Err(bad("kind")),
            },
        };
        let keys = match keys_s {
            "ALL" => KeySet::All,
            "" => KeySet::empty(),
            k => KeySet::of(k.split(',')),
        };
        if hex.len() % 2 != 0 {
            return Err(bad("payload"));
        }
        let payload = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| bad("payload")))
            .collect::<Result<Vec<u8>, _>>()?;
        Ok(Command { id, kind, keys, payload, switch_target })
    }
}

/// `a ~ b`: the commands do not commute.
pub fn conflicts(a: &Command, b: &Command) -> bool {
    a.keys.intersects(&b.keys)
}

/// Lifetime index of one protocol instance. Eras start at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct EraId(pub u64);

impl EraId {
    pub fn next(self) -> EraId {
        EraId(self.0 + 1)
    }
}

impl fmt::Display for EraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordering number for competing switch proposers. Unique per proposer:
/// `counter * n + node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct EpochNum(pub u64);

impl EpochNum {
    pub fn encode(counter: u64, node: NodeId, n: usize) -> Self {
        EpochNum(counter * n as u64 + node.0 as u64)
    }

    /// Smallest epoch owned by `node` strictly greater than `self`.
    pub fn next_for(self, node: NodeId, n: usize) -> Self {
        let counter = self.0 / n as u64 + 1;
        let candidate = EpochNum::encode(counter - 1, node, n);
        if candidate > self {
            candidate
        } else {
            EpochNum::encode(counter, node, n)
        }
    }

    pub fn owner(self, n: usize) -> NodeId {
        NodeId((self.0 % n as u64) as usize)
    }
}

impl fmt::Display for EpochNum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Paxos-style ballot used inside the ordering protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct Ballot {
    pub round: u64,
    pub node: NodeId,
}

impl Ballot {
    pub const fn new(round: u64, node: NodeId) -> Self {
        Ballot { round, node }
    }

    /// Smallest ballot owned by `node` above `self`.
    pub fn successor(self, node: NodeId) -> Ballot {
        if node > self.node {
            Ballot::new(self.round, node)
        } else {
            Ballot::new(self.round + 1, node)
        }
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.round, self.node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cmd(seq: u64, keys: &[&str]) -> Command {
        Command::client(CmdId::new(1, seq), KeySet::of(keys.iter().copied()), vec![])
    }

    #[test]
    fn conflict_examples() {
        assert!(!conflicts(&cmd(1, &["x"]), &cmd(2, &["y"])));
        assert!(conflicts(&cmd(1, &["x"]), &Command::terminate(EraId(1))));
        assert!(conflicts(&cmd(1, &["x", "y"]), &cmd(2, &["y", "z"])));
        assert!(conflicts(&Command::terminate(EraId(1)), &Command::terminate(EraId(2))));
        assert!(!conflicts(&cmd(1, &[]), &Command::terminate(EraId(1))));
    }

    #[test]
    fn quorum_examples() {
        assert_eq!(classic_quorum_size(5), Ok(3));
        assert_eq!(classic_quorum_size(1), Ok(1));
        assert_eq!(classic_quorum_size(4), Ok(3));
        assert_eq!(fast_quorum_size(5), Ok(4));
        assert_eq!(fast_quorum_size(4), Ok(3));
        assert_eq!(fast_quorum_size(1), Ok(1));
        assert!(classic_quorum_size(0).is_err());
        assert!(fast_quorum_size(0).is_err());
    }

    #[test]
    fn epochs_are_owned_and_increase() {
        let n = 5;
        let e = EpochNum::encode(3, NodeId(2), n);
        assert_eq!(e.owner(n), NodeId(2));
        for node in members(n) {
            let next = e.next_for(node, n);
            assert!(next > e);
            assert_eq!(next.owner(n), node);
            assert!(next.0 - e.0 <= n as u64);
        }
    }

    #[test]
    fn ballot_successor() {
        let b = Ballot::new(4, NodeId(2));
        assert_eq!(b.successor(NodeId(3)), Ballot::new(4, NodeId(3)));
        assert_eq!(b.successor(NodeId(1)), Ballot::new(5, NodeId(1)));
        assert!(b.successor(NodeId(2)) > b);
    }

    #[test]
    fn encoding_matches_layout() {
        let c = Command::client(CmdId::new(7, 3), KeySet::of(["b", "a"]), vec![0xde, 0x01]);
        assert_eq!(c.encode(), "7.3|client|a,b|de01");
        assert_eq!(Command::terminate(EraId(2)).encode(), format!("{}.2|terminate|ALL|", u64::MAX));
        let s = Command::switch(1, ProtocolKind::Democratic);
        assert_eq!(Command::decode(&s.encode()).unwrap(), s);
        assert!(Command::decode("1.2|client|x").is_err());
        assert!(Command::decode("1.2|bogus|x|").is_err());
    }

    fn arb_keys() -> impl Strategy<Value = KeySet> {
        prop_oneof![
            1 => Just(KeySet::All),
            6 => proptest::collection::btree_set("[a-e]", 0..4).prop_map(KeySet::Keys),
        ]
    }

    proptest! {
        #[test]
        fn conflicts_is_symmetric(a in arb_keys(), b in arb_keys()) {
            let x = Command::client(CmdId::new(1, 1), a, vec![]);
            let y = Command::client(CmdId::new(1, 2), b, vec![]);
            prop_assert_eq!(conflicts(&x, &y), conflicts(&y, &x));
        }

        #[test]
        fn encoding_round_trips(keys in arb_keys(), payload in proptest::collection::vec(any::<u8>(), 0..8),
                                client in 0u64..1000, seq in 0u64..1000) {
            let c = Command::client(CmdId::new(client, seq), keys, payload);
            prop_assert_eq!(Command::decode(&c.encode()).unwrap(), c);
        }

        #[test]
        fn quorums_intersect(n in 1usize..=100) {
            let cq = classic_quorum_size(n).unwrap();
            let fq = fast_quorum_size(n).unwrap();
            prop_assert!(2 * cq > n);
            prop_assert!(fq >= cq);
        }
    }
}
