//! Per-run event log, one JSON object per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::{CmdId, ProtocolKind};
use crate::simnet::Time;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Record {
    /// A client handed a command to its node; `retry` marks retransmissions.
    Submit {
        t: Time,
        node: usize,
        cmd: String,
        retry: bool,
    },
    /// The client got its answer.
    Decide {
        t: Time,
        node: usize,
        id: CmdId,
        era: u64,
        latency: Time,
    },
    Timeout {
        t: Time,
        node: usize,
        id: CmdId,
    },
    /// The submission was refused outright.
    Rejected {
        t: Time,
        node: usize,
        id: CmdId,
    },
    Learn {
        t: Time,
        node: usize,
        era: u64,
        cmd: String,
    },
    Deliver {
        t: Time,
        node: usize,
        era: u64,
        cmd: String,
    },
    Switch {
        t: Time,
        node: usize,
        era: u64,
        id: u64,
        target: ProtocolKind,
    },
    Crash {
        t: Time,
        node: usize,
    },
    /// Still outstanding when the run stopped.
    Truncated {
        t: Time,
        node: usize,
        id: CmdId,
    },
}

impl Record {
    pub fn time(&self) -> Time {
        match self {
            Record::Submit { t, .. }
            | Record::Decide { t, .. }
            | Record::Timeout { t, .. }
            | Record::Rejected { t, .. }
            | Record::Learn { t, .. }
            | Record::Deliver { t, .. }
            | Record::Switch { t, .. }
            | Record::Crash { t, .. }
            | Record::Truncated { t, .. } => *t,
        }
    }

    pub fn node(&self) -> usize {
        match self {
            Record::Submit { node, .. }
            | Record::Decide { node, .. }
            | Record::Timeout { node, .. }
            | Record::Rejected { node, .. }
            | Record::Learn { node, .. }
            | Record::Deliver { node, .. }
            | Record::Switch { node, .. }
            | Record::Crash { node, .. }
            | Record::Truncated { node, .. } => *node,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub records: Vec<Record>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, recs: impl IntoIterator<Item = Record>) {
        self.records.extend(recs);
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, HistoryError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| HistoryError::Parse(i + 1, e))?);
        }
        Ok(History { records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: {1}")]
    Parse(usize, serde_json::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let h = History {
            records: vec![
                Record::Submit { t: 5, node: 1, cmd: "1000.1|client|k1000|00".into(), retry: false },
                Record::Decide { t: 9, node: 1, id: CmdId::new(1000, 1), era: 1, latency: 4 },
                Record::Switch { t: 2, node: 0, era: 1, id: 0, target: ProtocolKind::Monarchic },
            ],
        };
        let s = h.to_jsonl();
        assert_eq!(s.lines().count(), 3);
        let back = History::read_jsonl(s.as_bytes()).unwrap();
        assert_eq!(back, h);
    }
}
