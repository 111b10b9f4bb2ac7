//! Windowed metrics for the oracle, and offline latency analysis of a history.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::history::Record;
use crate::model::{classic_quorum_size, fast_quorum_size, Command, KeySet, NodeId};
use crate::oracle::{percentile, MetricsSnapshot, NodeWindow, RoundTrips};
use crate::simnet::{LatencyMatrix, Time, MS, SEC};

/// Round trips from `node` to its cheapest classic and fast quorums and to `leader`.
pub fn round_trips(m: &LatencyMatrix, node: NodeId, leader: NodeId) -> RoundTrips<f64> {
    let n = m.len();
    let mut rtts: Vec<u64> = (0..n).map(|j| m.delay[node.0][j] + m.delay[j][node.0]).collect();
    rtts.sort_unstable();
    let q = classic_quorum_size(n).unwrap_or(1);
    let fq = fast_quorum_size(n).unwrap_or(1);
    RoundTrips {
        qrtt: rtts[q - 1] as f64,
        fqrtt: rtts[fq - 1] as f64,
        frtt: (m.delay[node.0][leader.0] + m.delay[leader.0][node.0]) as f64,
    }
}

#[derive(Debug, Clone)]
struct Submission {
    t: Time,
    node: usize,
    client: u64,
    keys: Vec<String>,
}

/// Sliding window over first submissions and client answers.
#[derive(Debug, Clone, Default)]
pub struct MetricsCollector {
    n: usize,
    window: Time,
    submissions: VecDeque<Submission>,
    decides: VecDeque<(Time, usize, Time)>,
}

impl MetricsCollector {
    pub fn new(n: usize, window: Time) -> Self {
        MetricsCollector { n, window, ..Default::default() }
    }

    pub fn ingest(&mut self, r: &Record) {
        match r {
            Record::Submit { t, node, cmd, retry: false } => {
                if let Ok(c) = Command::decode(cmd) {
                    let keys = match &c.keys {
                        KeySet::All => vec!["*".to_string()],
                        KeySet::Keys(k) => k.iter().cloned().collect(),
                    };
                    self.submissions.push_back(Submission { t: *t, node: *node, client: c.id.client, keys });
                }
            }
            Record::Decide { t, node, latency, .. } => self.decides.push_back((*t, *node, *latency)),
            _ => {}
        }
    }

    fn evict(&mut self, now: Time) {
        let from = now.saturating_sub(self.window);
        while self.submissions.front().is_some_and(|s| s.t < from) {
            self.submissions.pop_front();
        }
        while self.decides.front().is_some_and(|d| d.0 < from) {
            self.decides.pop_front();
        }
    }

    /// Fraction of each node's submissions that share a key with another
    /// client's submission in the window, rounded to whole percent.
    pub fn contention(&self) -> Vec<Option<f64>> {
        let mut touching: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
        for s in &self.submissions {
            for k in &s.keys {
                touching.entry(k.as_str()).or_default().insert(s.client);
            }
        }
        let mut total = vec![0usize; self.n];
        let mut hit = vec![0usize; self.n];
        for s in &self.submissions {
            total[s.node] += 1;
            if s.keys.iter().any(|k| touching[k.as_str()].len() > 1) {
                hit[s.node] += 1;
            }
        }
        (0..self.n)
            .map(|i| (total[i] > 0).then(|| ((hit[i] as f64 / total[i] as f64) * 100.0).round() / 100.0))
            .collect()
    }

    pub fn latency_p90(&self) -> Vec<Option<f64>> {
        let mut per: Vec<Vec<f64>> = vec![Vec::new(); self.n];
        for &(_, node, lat) in &self.decides {
            per[node].push(lat as f64 / MS as f64);
        }
        per.iter().map(|v| percentile(v, 0.9)).collect()
    }

    pub fn snapshot(&mut self, now: Time, rtts: &[RoundTrips<f64>]) -> MetricsSnapshot<f64> {
        self.evict(now);
        let c = self.contention();
        let l = self.latency_p90();
        MetricsSnapshot {
            now,
            nodes: (0..self.n).map(|i| NodeWindow { latency_p90: l[i], contention: c[i], rtt: rtts[i] }).collect(),
        }
    }
}

/// One answered client command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: Time,
    pub node: usize,
    pub era: u64,
    pub latency_ms: f64,
}

pub fn samples(records: &[Record]) -> Vec<Sample> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Decide { t, node, era, latency, .. } => {
                Some(Sample { t: *t, node: *node, era: *era, latency_ms: *latency as f64 / MS as f64 })
            }
            _ => None,
        })
        .collect()
}

/// p90 of the answers received in `[from, to)` at the given nodes.
pub fn p90_between(samples: &[Sample], nodes: &[usize], from: Time, to: Time) -> Option<f64> {
    let v: Vec<f64> =
        samples.iter().filter(|s| s.t >= from && s.t < to && nodes.contains(&s.node)).map(|s| s.latency_ms).collect();
    percentile(&v, 0.9)
}

/// Per-second p90 for each node and for all nodes together (`node = None`).
pub fn p90_series(samples: &[Sample]) -> Vec<(u64, Option<usize>, usize, f64)> {
    let mut buckets: BTreeMap<(u64, Option<usize>), Vec<f64>> = BTreeMap::new();
    for s in samples {
        let sec = s.t / SEC;
        buckets.entry((sec, Some(s.node))).or_default().push(s.latency_ms);
        buckets.entry((sec, None)).or_default().push(s.latency_ms);
    }
    buckets.into_iter().filter_map(|((sec, node), v)| percentile(&v, 0.9).map(|p| (sec, node, v.len(), p))).collect()
}

/// Total length of stretches longer than `gap` with no client answer at
/// any of `nodes`, inside `[from, to)`.
pub fn downtime(samples: &[Sample], nodes: &[usize], from: Time, to: Time, gap: Time) -> Time {
    let mut ts: Vec<Time> =
        samples.iter().filter(|s| nodes.contains(&s.node) && s.t >= from && s.t < to).map(|s| s.t).collect();
    ts.sort_unstable();
    let mut edges = vec![from];
    edges.extend(ts);
    edges.push(to);
    edges.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > gap).sum()
}

pub fn count_timeouts(records: &[Record], from: Time, to: Time) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Record::Timeout { t, node, .. } | Record::Rejected { t, node, .. } | Record::Truncated { t, node, .. } =
            r
        {
            if *t >= from && *t < to {
                *out.entry(*node).or_default() += 1;
            }
        }
    }
    out
}

pub fn latency_csv(samples: &[Sample]) -> String {
    let mut s = String::from("t_ms,node,era,latency_ms\n");
    for x in samples {
        let _ = writeln!(s, "{:.3},{},{},{:.3}", x.t as f64 / MS as f64, x.node, x.era, x.latency_ms);
    }
    s
}

pub fn p90_csv(samples: &[Sample]) -> String {
    let mut s = String::from("second,node,samples,p90_ms\n");
    for (sec, node, count, p) in p90_series(samples) {
        let node = node.map_or("all".to_string(), |x| x.to_string());
        let _ = writeln!(s, "{sec},{node},{count},{p:.3}");
    }
    s
}

pub fn events_csv(records: &[Record]) -> String {
    let mut s = String::from("t_ms,node,event,detail\n");
    for r in records {
        let line = match r {
            Record::Switch { t, node, era, target, .. } => {
                Some((*t, *node, "switch", format!("era={era} target={target}")))
            }
            Record::Crash { t, node } => Some((*t, *node, "crash", String::new())),
            Record::Timeout { t, node, id } => Some((*t, *node, "timeout", id.to_string())),
            Record::Rejected { t, node, id } => Some((*t, *node, "rejected", id.to_string())),
            _ => None,
        };
        if let Some((t, node, ev, d)) = line {
            let _ = writeln!(s, "{:.3},{node},{ev},{d}", t as f64 / MS as f64);
        }
    }
    s
}
