//! Human-readable summary of a run history.

use std::collections::BTreeMap;
use std::fmt;

use crate::history::Record;
use crate::metrics::{count_timeouts, downtime, p90_between, samples, Sample};
use crate::model::ProtocolKind;
use crate::simnet::{fmt_time, Time, MS};

/// Gap between answers that counts as downtime.
pub const DOWNTIME_GAP: Time = 100 * MS;

#[derive(Debug, Clone, PartialEq)]
pub struct EraSummary {
    pub era: u64,
    pub target: ProtocolKind,
    pub start: Time,
    pub end: Time,
    pub answers: usize,
    pub p90_ms: Option<f64>,
    pub p90_by_node: BTreeMap<usize, f64>,
    pub timeouts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub nodes: usize,
    pub end: Time,
    pub submitted: usize,
    pub answered: usize,
    pub timeouts: usize,
    pub rejected: usize,
    pub truncated: usize,
    pub crashes: Vec<(Time, usize)>,
    pub downtime: Time,
    pub eras: Vec<EraSummary>,
}

impl Summary {
    pub fn from_records(records: &[Record]) -> Self {
        let nodes = records.iter().map(|r| r.node() + 1).max().unwrap_or(0);
        let end = records.iter().map(Record::time).max().unwrap_or(0);
        let mut s = Summary {
            nodes,
            end,
            submitted: 0,
            answered: 0,
            timeouts: 0,
            rejected: 0,
            truncated: 0,
            crashes: Vec::new(),
            downtime: 0,
            eras: Vec::new(),
        };
        let mut starts: BTreeMap<u64, (Time, ProtocolKind)> = BTreeMap::new();
        for r in records {
            match r {
                Record::Submit { retry: false, .. } => s.submitted += 1,
                Record::Decide { .. } => s.answered += 1,
                Record::Timeout { .. } => s.timeouts += 1,
                Record::Rejected { .. } => s.rejected += 1,
                Record::Truncated { .. } => s.truncated += 1,
                Record::Crash { t, node } => s.crashes.push((*t, *node)),
                Record::Switch { t, era, target, .. } => {
                    starts.entry(*era).or_insert((*t, *target));
                }
                _ => {}
            }
        }
        let all: Vec<usize> = (0..nodes).collect();
        let samples: Vec<Sample> = samples(records);
        let first = samples.iter().map(|x| x.t).min().unwrap_or(0);
        let last = samples.iter().map(|x| x.t + 1).max().unwrap_or(0);
        s.downtime = downtime(&samples, &all, first, last, DOWNTIME_GAP);
        let bounds: Vec<(u64, Time, ProtocolKind)> = starts.iter().map(|(e, (t, k))| (*e, *t, *k)).collect();
        for (i, &(era, start, target)) in bounds.iter().enumerate() {
            let stop = bounds.get(i + 1).map_or(end + 1, |b| b.1);
            let mine: Vec<Sample> = samples.iter().filter(|x| x.era == era).copied().collect();
            let mut p90_by_node = BTreeMap::new();
            for n in 0..nodes {
                if let Some(p) = p90_between(&mine, &[n], 0, Time::MAX) {
                    p90_by_node.insert(n, p);
                }
            }
            s.eras.push(EraSummary {
                era,
                target,
                start,
                end: stop,
                answers: mine.len(),
                p90_ms: p90_between(&mine, &all, 0, Time::MAX),
                p90_by_node,
                timeouts: count_timeouts(records, start, stop).values().sum(),
            });
        }
        s
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes {}  end {} ms", self.nodes, fmt_time(self.end))?;
        writeln!(
            f,
            "commands: {} submitted, {} answered, {} timeouts, {} rejected, {} truncated",
            self.submitted, self.answered, self.timeouts, self.rejected, self.truncated
        )?;
        for (t, n) in &self.crashes {
            writeln!(f, "crash: node {n} at {} ms", fmt_time(*t))?;
        }
        writeln!(f, "downtime after the first answer: {} ms", fmt_time(self.downtime))?;
        for e in &self.eras {
            let p90 = e.p90_ms.map_or("-".to_string(), |p| format!("{p:.1}"));
            write!(
                f,
                "era {} {:<10} from {:>10} ms  answers {:>6}  timeouts {:>4}  p90 {:>7} ms  per node",
                e.era,
                e.target.to_string(),
                fmt_time(e.start),
                e.answers,
                e.timeouts,
                p90
            )?;
            for (n, p) in &e.p90_by_node {
                write!(f, " {n}:{p:.1}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CmdId;

    #[test]
    fn summarises_eras() {
        let recs = vec![
            Record::Switch { t: 0, node: 0, era: 1, id: 0, target: ProtocolKind::Monarchic },
            Record::Decide { t: 50 * MS, node: 0, id: CmdId::new(0, 1), era: 1, latency: 10 * MS },
            Record::Switch { t: 60 * MS, node: 1, era: 2, id: 1, target: ProtocolKind::Democratic },
            Record::Decide { t: 300 * MS, node: 1, id: CmdId::new(1000, 1), era: 2, latency: 20 * MS },
            Record::Timeout { t: 310 * MS, node: 1, id: CmdId::new(1000, 2) },
        ];
        let s = Summary::from_records(&recs);
        assert_eq!((s.nodes, s.answered, s.timeouts), (2, 2, 1));
        assert_eq!(s.eras.len(), 2);
        assert_eq!(s.eras[1].p90_ms, Some(20.0));
        assert_eq!(s.eras[1].timeouts, 1);
        assert_eq!(s.downtime, 250 * MS);
        assert!(s.to_string().contains("era 2 DEMOCRATIC"));
    }
}
