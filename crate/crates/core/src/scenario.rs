//! Scenario files (TOML).

use serde::{Deserialize, Serialize};

use crate::model::{NodeId, ProtocolKind};
use crate::oracle::OraclePolicy;
use crate::simnet::{FaultAction, FaultScript, LatencyMatrix, SimConfig, Time, MS, SEC};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencySpec {
    Wan5,
    Uniform { ms: u64 },
    Matrix { delay: Vec<Vec<u64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchSpec {
    pub at: f64,
    pub target: ProtocolKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at: f64,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    None,
    Threshold,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Switching,
    StopAndRestart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub nodes: usize,
    pub latency: LatencySpec,
    pub jitter: bool,
    pub fifo: bool,
    /// Clients stop issuing new commands at this virtual second.
    pub duration: f64,
    /// Extra virtual seconds to let outstanding work finish.
    pub grace: f64,
    pub initial: ProtocolKind,
    pub workload: WorkloadSpec,
    pub switches: Vec<SwitchSpec>,
    pub faults: Vec<FaultSpec>,
    /// Arms the meta leader to crash before its next Decide, at this second.
    pub crash_before_decide: Option<f64>,
    pub oracle: OracleKind,
    pub policy: OraclePolicy,
    pub retransmit_ms: u64,
    pub suspicion_timeout_ms: Option<u64>,
    pub mode: Mode,
    /// Crash of the external coordinator, stop-and-restart only.
    pub coordinator_crash: Option<f64>,
    pub trace_messages: bool,
    /// Enforce the crash budget of safety runs.
    pub safety: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 1,
            nodes: 5,
            latency: LatencySpec::Wan5,
            jitter: true,
            fifo: false,
            duration: 30.0,
            grace: 10.0,
            initial: ProtocolKind::Monarchic,
            workload: WorkloadSpec::default(),
            switches: Vec::new(),
            faults: Vec::new(),
            crash_before_decide: None,
            oracle: OracleKind::None,
            policy: OraclePolicy::default(),
            retransmit_ms: 1000,
            suspicion_timeout_ms: None,
            mode: Mode::Switching,
            coordinator_crash: None,
            trace_messages: false,
            safety: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

pub fn secs(s: f64) -> Time {
    (s * SEC as f64).round() as Time
}

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn matrix(&self) -> LatencyMatrix {
        let mut m = match &self.latency {
            LatencySpec::Wan5 => LatencyMatrix::wan5(),
            LatencySpec::Uniform { ms } => LatencyMatrix::uniform(self.nodes, *ms),
            LatencySpec::Matrix { delay } => LatencyMatrix { delay: delay.clone(), jitter: true },
        };
        m.jitter = self.jitter;
        m
    }

    pub fn sim_config(&self) -> SimConfig {
        let mut cfg = SimConfig::new(self.seed, self.matrix());
        cfg.fifo = self.fifo;
        cfg.trace_messages = self.trace_messages;
        cfg.suspicion_timeout = self.suspicion_timeout_ms.map(|ms| ms * MS);
        cfg
    }

    pub fn fault_script(&self) -> FaultScript {
        FaultScript { events: self.faults.iter().map(|f| (secs(f.at), f.action)).collect() }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.nodes == 0 {
            return bad("nodes must be positive".into());
        }
        let m = self.matrix();
        if m.len() != self.nodes {
            return bad(format!("latency matrix has {} rows for {} nodes", m.len(), self.nodes));
        }
        m.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.workload.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.fault_script().validate(self.nodes, self.safety).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.duration <= 0.0 || self.grace < 0.0 {
            return bad("duration must be positive and grace non-negative".into());
        }
        if self.retransmit_ms == 0 {
            return bad("retransmit_ms must be positive".into());
        }
        if self.mode == Mode::StopAndRestart && self.switches.len() > 1 {
            return bad("stop-and-restart runs take a single switch".into());
        }
        Ok(())
    }

    pub fn crashed_nodes(&self) -> Vec<NodeId> {
        self.faults
            .iter()
            .filter_map(|f| match f.action {
                FaultAction::Crash { node } => Some(NodeId(node)),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_file() {
        let s = r#"
            name = "rise"
            seed = 9
            duration = 160.0
            initial = "OLIGARCHIC"
            oracle = "threshold"

            [workload]
            clients_per_node = 10
            phases = [{ start = 0.0, conflict_pct = 0 }, { start = 30.0, conflict_pct = 10 }]

            [[switches]]
            at = 12.5
            target = "DEMOCRATIC"

            [[faults]]
            at = 20.0
            action = "crash"
            node = 2
        "#;
        let sc = Scenario::from_toml(s).unwrap();
        assert_eq!(sc.nodes, 5);
        assert_eq!(sc.workload.clients_per_node, 10);
        assert_eq!(sc.switches[0].target, ProtocolKind::Democratic);
        assert_eq!(sc.fault_script().events, vec![(20 * SEC, FaultAction::Crash { node: 2 })]);
        let back = Scenario::from_toml(&sc.to_toml()).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn rejects_over_budget_crashes() {
        let mut sc = Scenario {
            faults: (0..3).map(|i| FaultSpec { at: 1.0, action: FaultAction::Crash { node: i } }).collect(),
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());
        sc.safety = false;
        assert!(sc.validate().is_ok());
    }
}
