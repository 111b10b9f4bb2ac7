//! Closed-loop client workload with a contention knob.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{CmdId, Command, KeySet, NodeId};
use crate::simnet::{Time, SEC};

/// Client ids are grouped per node so the owning node can be recovered.
pub const CLIENTS_PER_NODE_STRIDE: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    /// Virtual seconds from run start.
    pub start: f64,
    pub conflict_pct: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub clients_per_node: usize,
    pub phases: Vec<PhaseSpec>,
    /// Number of shared keys conflicting commands pick from.
    pub hot_keys: usize,
    pub payload_bytes: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            clients_per_node: 50,
            phases: vec![PhaseSpec { start: 0.0, conflict_pct: 0 }],
            hot_keys: 1,
            payload_bytes: 8,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WorkloadError {
    #[error("conflict_pct {0} is outside 0..=100")]
    Percent(u32),
    #[error("phases must be time-ordered")]
    Unordered,
    #[error("at least one phase and one hot key are required")]
    Empty,
    #[error("at most {CLIENTS_PER_NODE_STRIDE} clients per node")]
    TooManyClients,
}

pub fn client_id(node: NodeId, i: usize) -> u64 {
    node.0 as u64 * CLIENTS_PER_NODE_STRIDE + i as u64
}

pub fn client_node(client: u64) -> NodeId {
    NodeId((client / CLIENTS_PER_NODE_STRIDE) as usize)
}

pub fn private_key(client: u64) -> String {
    format!("k{client}")
}

pub fn hot_key(j: usize) -> String {
    if j == 0 {
        "hot".to_string()
    } else {
        format!("hot{j}")
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.phases.is_empty() || self.hot_keys == 0 {
            return Err(WorkloadError::Empty);
        }
        if self.clients_per_node as u64 > CLIENTS_PER_NODE_STRIDE {
            return Err(WorkloadError::TooManyClients);
        }
        for p in &self.phases {
            if p.conflict_pct > 100 {
                return Err(WorkloadError::Percent(p.conflict_pct));
            }
        }
        if self.phases.windows(2).any(|w| w[1].start < w[0].start) {
            return Err(WorkloadError::Unordered);
        }
        Ok(())
    }

    pub fn phase_start(p: &PhaseSpec) -> Time {
        (p.start * SEC as f64).round() as Time
    }

    pub fn conflict_pct_at(&self, t: Time) -> u32 {
        self.phases
            .iter()
            .take_while(|p| Self::phase_start(p) <= t)
            .last()
            .or(self.phases.first())
            .map_or(0, |p| p.conflict_pct)
    }

    /// Whether the `seq`-th command of `client` targets a shared key.
    /// Each block of ten commands gets a seeded permutation; the first
    /// `round(pct/10)` positions of it are hot.
    pub fn is_hot(&self, seed: u64, client: u64, seq: u64, pct: u32) -> bool {
        let block = seq / 10;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ client.rotate_left(20) ^ block.rotate_left(44));
        let mut order: Vec<u64> = (0..10).collect();
        order.shuffle(&mut rng);
        let hot = ((pct as f64) / 10.0).round() as usize;
        order[..hot.min(10)].contains(&(seq % 10))
    }

    pub fn command(&self, seed: u64, client: u64, seq: u64, now: Time) -> Command {
        let pct = self.conflict_pct_at(now);
        let mut keys = vec![private_key(client)];
        if self.is_hot(seed, client, seq, pct) {
            let j = if self.hot_keys > 1 {
                ChaCha8Rng::seed_from_u64(seed ^ client ^ seq.rotate_left(32)).gen_range(0..self.hot_keys)
            } else {
                0
            };
            keys.push(hot_key(j));
        }
        let mut payload = seq.to_le_bytes().to_vec();
        payload.resize(self.payload_bytes, 0);
        Command::client(CmdId::new(client, seq), KeySet::of(keys), payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::conflicts;

    fn spec(pct: u32) -> WorkloadSpec {
        WorkloadSpec { phases: vec![PhaseSpec { start: 0.0, conflict_pct: pct }], ..Default::default() }
    }

    #[test]
    fn zero_percent_is_disjoint() {
        let w = spec(0);
        let cmds: Vec<_> =
            (0..20u64).flat_map(|c| (1..=30).map(move |s| (c, s))).map(|(c, s)| w.command(7, c, s, 0)).collect();
        for a in &cmds {
            for b in &cmds {
                if a.id.client != b.id.client {
                    assert!(!conflicts(a, b));
                }
            }
        }
    }

    #[test]
    fn ten_percent_is_one_in_ten() {
        let w = spec(10);
        for client in 0..50 {
            for block in 0..20u64 {
                let hot = (block * 10..block * 10 + 10).filter(|&s| w.is_hot(3, client, s, 10)).count();
                assert_eq!(hot, 1);
            }
        }
    }

    #[test]
    fn schedule_is_seeded() {
        let w = spec(50);
        let a: Vec<_> = (0..100).map(|s| w.command(11, 4, s, 0)).collect();
        let b: Vec<_> = (0..100).map(|s| w.command(11, 4, s, 0)).collect();
        assert_eq!(a, b);
        let c: Vec<_> = (0..100).map(|s| w.command(12, 4, s, 0)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn phases_select_by_time() {
        let w = WorkloadSpec {
            phases: vec![
                PhaseSpec { start: 0.0, conflict_pct: 0 },
                PhaseSpec { start: 30.0, conflict_pct: 10 },
                PhaseSpec { start: 95.0, conflict_pct: 50 },
            ],
            ..Default::default()
        };
        assert!(w.validate().is_ok());
        assert_eq!(w.conflict_pct_at(29 * SEC), 0);
        assert_eq!(w.conflict_pct_at(30 * SEC), 10);
        assert_eq!(w.conflict_pct_at(200 * SEC), 50);
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(spec(101).validate(), Err(WorkloadError::Percent(101)));
        let w = WorkloadSpec {
            phases: vec![PhaseSpec { start: 5.0, conflict_pct: 0 }, PhaseSpec { start: 1.0, conflict_pct: 0 }],
            ..Default::default()
        };
        assert_eq!(w.validate(), Err(WorkloadError::Unordered));
    }
}
