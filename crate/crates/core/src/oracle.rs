//! Switching policy: watches windowed latency and contention, and decides
//! which protocol family should run next.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::model::ProtocolKind;
use crate::simnet::{Time, SEC};

/// Contention boundaries: below `low` ownership wins, below `high` the
/// leaderless family wins, otherwise a single leader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds<T> {
    pub low: T,
    pub high: T,
}

impl<T: Float> Default for Thresholds<T> {
    fn default() -> Self {
        Thresholds { low: T::from(0.10).unwrap(), high: T::from(0.50).unwrap() }
    }
}

/// Round-trip estimates at one node, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTrips<T> {
    /// To the nearest classic quorum.
    pub qrtt: T,
    /// To the nearest fast quorum.
    pub fqrtt: T,
    /// To the current leader.
    pub frtt: T,
}

pub fn choose_best_by_contention<T: Float>(contention: T, th: &Thresholds<T>) -> ProtocolKind {
    if contention < th.low {
        ProtocolKind::Oligarchic
    } else if contention < th.high {
        ProtocolKind::Democratic
    } else {
        ProtocolKind::Monarchic
    }
}

pub fn choose_best_by_latency<T: Float>(latency: T, rt: &RoundTrips<T>) -> ProtocolKind {
    if latency < rt.fqrtt {
        ProtocolKind::Oligarchic
    } else if latency <= rt.qrtt + rt.frtt {
        ProtocolKind::Democratic
    } else {
        ProtocolKind::Monarchic
    }
}

/// Nearest-rank percentile, `p` in `[0, 1]`.
pub fn percentile<T: Float>(samples: &[T], p: T) -> Option<T> {
    if samples.is_empty() {
        return None;
    }
    let mut v: Vec<T> = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = T::from(v.len()).unwrap();
    let rank = (p * n).ceil().to_usize().unwrap_or(0).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Most frequent kind; ties go to the earlier family.
pub fn mode(kinds: &[ProtocolKind]) -> Option<ProtocolKind> {
    ProtocolKind::ALL
        .iter()
        .map(|k| (kinds.iter().filter(|x| *x == k).count(), *k))
        .filter(|(c, _)| *c > 0)
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, k)| k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeWindow<T> {
    pub latency_p90: Option<T>,
    pub contention: Option<T>,
    pub rtt: RoundTrips<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSnapshot<T> {
    pub now: Time,
    pub nodes: Vec<NodeWindow<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OraclePolicy {
    pub low_pct: f64,
    pub high_pct: f64,
    pub period_s: f64,
    pub window_s: f64,
    pub cooldown_s: f64,
    pub observation_delay_s: f64,
    /// Whether a quiet contention signal lets latency drive switches.
    pub latency_branch: bool,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        OraclePolicy {
            low_pct: 10.0,
            high_pct: 50.0,
            period_s: 1.0,
            window_s: 10.0,
            cooldown_s: 20.0,
            observation_delay_s: 35.0,
            latency_branch: false,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("thresholds must satisfy 0 <= low < high <= 100")]
    Thresholds,
    #[error("period, window and cooldown must be positive")]
    Timing,
}

fn secs(s: f64) -> Time {
    (s * SEC as f64).round() as Time
}

impl OraclePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0 <= self.low_pct && self.low_pct < self.high_pct && self.high_pct <= 100.0) {
            return Err(PolicyError::Thresholds);
        }
        if self.period_s <= 0.0 || self.window_s <= 0.0 || self.cooldown_s <= 0.0 || self.observation_delay_s < 0.0 {
            return Err(PolicyError::Timing);
        }
        Ok(())
    }

    pub fn thresholds<T: Float>(&self) -> Thresholds<T> {
        Thresholds { low: T::from(self.low_pct / 100.0).unwrap(), high: T::from(self.high_pct / 100.0).unwrap() }
    }

    pub fn period(&self) -> Time {
        secs(self.period_s)
    }

    pub fn window(&self) -> Time {
        secs(self.window_s)
    }

    pub fn cooldown(&self) -> Time {
        secs(self.cooldown_s)
    }

    pub fn observation_delay(&self) -> Time {
        secs(self.observation_delay_s)
    }
}

pub trait Oracle<T: Float> {
    fn name(&self) -> &'static str;
    /// Called once per period; returns the family to switch to, if any.
    fn tick(&mut self, snap: &MetricsSnapshot<T>, current: ProtocolKind) -> Option<ProtocolKind>;
}

/// Change detection shared by both oracles: a new contention band must
/// persist for the observation delay, and triggers respect the cooldown.
/// Bands seen since a change away from the stable band was first noticed.
#[derive(Debug, Clone)]
struct Observation {
    since: Time,
    seen: Vec<ProtocolKind>,
}

#[derive(Debug, Clone)]
struct Trigger {
    policy: OraclePolicy,
    band: Option<ProtocolKind>,
    watching: Option<Observation>,
    last_trigger: Option<Time>,
}

impl Trigger {
    fn new(policy: OraclePolicy) -> Self {
        Trigger { policy, band: None, watching: None, last_trigger: None }
    }

    fn cooled(&self, now: Time) -> bool {
        self.last_trigger.is_none_or(|t| now >= t + self.policy.cooldown())
    }

    fn fire(&mut self, now: Time, v: ProtocolKind, current: ProtocolKind) -> Option<ProtocolKind> {
        if v == current {
            return None;
        }
        self.last_trigger = Some(now);
        Some(v)
    }

    /// `None` leaves the decision to the latency branch.
    fn on_band(&mut self, now: Time, band: ProtocolKind, current: ProtocolKind) -> Option<Option<ProtocolKind>> {
        let Some(stable) = self.band else {
            self.band = Some(band);
            return Some(None);
        };
        let obs = match &mut self.watching {
            Some(obs) => obs,
            None if band == stable => return None,
            None => self.watching.insert(Observation { since: now, seen: Vec::new() }),
        };
        obs.seen.push(band);
        let since = obs.since;
        if now < since + self.policy.observation_delay() || !self.cooled(now) {
            return Some(None);
        }
        let winner = self.watching.as_ref().and_then(|o| mode(&o.seen)).unwrap_or(stable);
        self.watching = None;
        if winner == stable {
            return Some(None);
        }
        self.band = Some(winner);
        Some(self.fire(now, winner, current))
    }
}

#[derive(Debug, Clone)]
pub struct ThresholdOracle<T> {
    trigger: Trigger,
    thresholds: Thresholds<T>,
}

impl<T: Float> ThresholdOracle<T> {
    pub fn new(policy: OraclePolicy) -> Self {
        ThresholdOracle { thresholds: policy.thresholds(), trigger: Trigger::new(policy) }
    }
}

impl<T: Float> Oracle<T> for ThresholdOracle<T> {
    fn name(&self) -> &'static str {
        "threshold"
    }

    fn tick(&mut self, snap: &MetricsSnapshot<T>, current: ProtocolKind) -> Option<ProtocolKind> {
        let votes: Vec<ProtocolKind> = snap
            .nodes
            .iter()
            .filter_map(|n| n.contention)
            .map(|c| choose_best_by_contention(c, &self.thresholds))
            .collect();
        if let Some(band) = mode(&votes) {
            if let Some(decision) = self.trigger.on_band(snap.now, band, current) {
                return decision;
            }
        }
        if !self.trigger.policy.latency_branch || !self.trigger.cooled(snap.now) {
            return None;
        }
        let votes: Vec<ProtocolKind> =
            snap.nodes.iter().filter_map(|n| n.latency_p90.map(|l| choose_best_by_latency(l, &n.rtt))).collect();
        let v = mode(&votes)?;
        self.trigger.fire(snap.now, v, current)
    }
}

/// Reads contention from the scenario's phase script instead of measuring it.
#[derive(Debug, Clone)]
pub struct StaticOracle<T> {
    trigger: Trigger,
    thresholds: Thresholds<T>,
    /// `(start, conflict fraction)`, time-ordered.
    script: Vec<(Time, T)>,
}

impl<T: Float> StaticOracle<T> {
    pub fn new(policy: OraclePolicy, script: Vec<(Time, T)>) -> Self {
        StaticOracle { thresholds: policy.thresholds(), trigger: Trigger::new(policy), script }
    }

    fn scripted(&self, now: Time) -> Option<T> {
        self.script.iter().take_while(|(t, _)| *t <= now).last().map(|(_, c)| *c)
    }
}

impl<T: Float> Oracle<T> for StaticOracle<T> {
    fn name(&self) -> &'static str {
        "static"
    }

    fn tick(&mut self, snap: &MetricsSnapshot<T>, current: ProtocolKind) -> Option<ProtocolKind> {
        let c = self.scripted(snap.now)?;
        let band = choose_best_by_contention(c, &self.thresholds);
        self.trigger.on_band(snap.now, band, current).flatten()
    }
}
