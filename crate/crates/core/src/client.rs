//! Closed-loop clients co-located with one node: one outstanding command
//! each, resent under the same id until answered.

use crate::history::Record;
use crate::model::{CmdId, Command, EraId, NodeId};
use crate::simnet::Time;
use crate::workload::{client_id, client_node, WorkloadSpec};

#[derive(Debug, Clone)]
struct Outstanding {
    cmd: Command,
    first: Time,
}

#[derive(Debug, Clone)]
struct Client {
    id: u64,
    seq: u64,
    outstanding: Option<Outstanding>,
}

#[derive(Debug, Clone)]
pub struct ClientPool {
    me: NodeId,
    seed: u64,
    workload: WorkloadSpec,
    pub retransmit: Time,
    pub start: Time,
    pub stop: Time,
    clients: Vec<Client>,
}

impl ClientPool {
    pub fn new(me: NodeId, seed: u64, workload: WorkloadSpec, retransmit: Time, stop: Time) -> Self {
        let clients = (0..workload.clients_per_node)
            .map(|i| Client { id: client_id(me, i), seq: 0, outstanding: None })
            .collect();
        ClientPool { me, seed, workload, retransmit, start: 0, stop, clients }
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn outstanding(&self) -> Vec<CmdId> {
        self.clients.iter().filter_map(|c| c.outstanding.as_ref().map(|o| o.cmd.id)).collect()
    }

    /// Issues client `i`'s next command, if it is idle and the run is still open.
    pub fn next(&mut self, i: usize, now: Time, log: &mut Vec<Record>) -> Option<Command> {
        if now >= self.stop {
            return None;
        }
        let cl = self.clients.get_mut(i)?;
        if cl.outstanding.is_some() {
            return None;
        }
        cl.seq += 1;
        let cmd = self.workload.command(self.seed, cl.id, cl.seq, now);
        cl.outstanding = Some(Outstanding { cmd: cmd.clone(), first: now });
        log.push(Record::Submit { t: now, node: self.me.0, cmd: cmd.encode(), retry: false });
        Some(cmd)
    }

    /// The retransmission timer for `(i, seq)` fired; returns the command to resend.
    pub fn retransmit(&mut self, i: usize, seq: u64, now: Time, log: &mut Vec<Record>) -> Option<Command> {
        let o = self.clients.get(i)?.outstanding.as_ref()?;
        if o.cmd.id.seq != seq {
            return None;
        }
        let cmd = o.cmd.clone();
        log.push(Record::Timeout { t: now, node: self.me.0, id: cmd.id });
        log.push(Record::Submit { t: now, node: self.me.0, cmd: cmd.encode(), retry: true });
        Some(cmd)
    }

    /// Delivers an answer; returns the client index that became idle.
    pub fn answer(&mut self, id: CmdId, era: EraId, now: Time, log: &mut Vec<Record>) -> Option<usize> {
        if client_node(id.client) != self.me {
            return None;
        }
        let i = (id.client - client_id(self.me, 0)) as usize;
        let cl = self.clients.get_mut(i)?;
        if cl.outstanding.as_ref()?.cmd.id != id {
            return None;
        }
        let o = cl.outstanding.take()?;
        log.push(Record::Decide { t: now, node: self.me.0, id, era: era.0, latency: now - o.first });
        Some(i)
    }
}
