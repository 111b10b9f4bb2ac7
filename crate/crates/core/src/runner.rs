//! Drives one scenario through the simulator and collects its artifacts.

use crate::baseline;
use crate::history::{History, Record};
use crate::meta::SwitchCommand;
use crate::metrics::{round_trips, MetricsCollector};
use crate::model::{NodeId, ProtocolKind};
use crate::node::{NodeConfig, NodeTimer, SwitchNode};
use crate::oracle::{Oracle, StaticOracle, ThresholdOracle};
use crate::plugin::ProtoConfig;
use crate::scenario::{secs, Mode, OracleKind, Scenario, ScenarioError};
use crate::simnet::{NetStats, SimError, Simulation, Time, TraceEvent, MS};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceEvent>,
    pub history: History,
    pub stats: NetStats,
    /// Baseline only: the coordinator never finished the transition.
    pub stalled: bool,
    /// `(time, target)` of every switch the oracle asked for.
    pub oracle_proposals: Vec<(Time, ProtocolKind)>,
    pub end: Time,
}

impl RunOutput {
    pub fn trace_text(&self) -> String {
        let mut s = String::new();
        for e in &self.trace {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    /// First activation time of each era anywhere, with its target.
    pub fn switches(&self) -> Vec<(Time, u64, ProtocolKind)> {
        let mut out: Vec<(Time, u64, ProtocolKind)> = Vec::new();
        for r in &self.history.records {
            if let Record::Switch { t, era, target, .. } = r {
                if !out.iter().any(|(_, e, _)| e == era) {
                    out.push((*t, *era, *target));
                }
            }
        }
        out.sort_by_key(|x| x.1);
        out
    }
}

enum Control {
    Switch(ProtocolKind),
    Arm,
    Tick,
}

pub fn run(sc: &Scenario) -> Result<RunOutput, RunError> {
    sc.validate()?;
    match sc.mode {
        Mode::Switching => run_switching(sc),
        Mode::StopAndRestart => baseline::run(sc),
    }
}

pub fn proto_config(sc: &Scenario) -> ProtoConfig {
    let cfg = sc.sim_config();
    ProtoConfig {
        n: sc.nodes,
        seed: sc.seed,
        max_delay: cfg.latency.max_delay_ms() * MS,
        suspicion_timeout: cfg.suspicion_timeout(),
    }
}

fn make_oracle(sc: &Scenario) -> Option<Box<dyn Oracle<f64>>> {
    match sc.oracle {
        OracleKind::None => None,
        OracleKind::Threshold => Some(Box::new(ThresholdOracle::new(sc.policy))),
        OracleKind::Static => {
            let script = sc.workload.phases.iter().map(|p| (secs(p.start), p.conflict_pct as f64 / 100.0)).collect();
            Some(Box::new(StaticOracle::new(sc.policy, script)))
        }
    }
}

fn run_switching(sc: &Scenario) -> Result<RunOutput, RunError> {
    let n = sc.nodes;
    let simcfg = sc.sim_config();
    let matrix = simcfg.latency.clone();
    let mut nodecfg = NodeConfig::new(proto_config(sc), sc.initial, sc.workload.clone(), secs(sc.duration));
    nodecfg.retransmit = sc.retransmit_ms * MS;
    let procs = (0..n).map(|i| SwitchNode::new(NodeId(i), nodecfg.clone())).collect();
    let mut sim = Simulation::new(simcfg, procs, n)?;
    sim.apply_script(&sc.fault_script())?;

    let end = secs(sc.duration + sc.grace);
    let mut controls: Vec<(Time, u8, Control)> = Vec::new();
    for s in &sc.switches {
        controls.push((secs(s.at), 0, Control::Switch(s.target)));
    }
    if let Some(at) = sc.crash_before_decide {
        controls.push((secs(at), 1, Control::Arm));
    }
    let mut oracle = make_oracle(sc);
    if oracle.is_some() {
        let period = sc.policy.period();
        let mut t = period;
        while t <= secs(sc.duration) {
            controls.push((t, 2, Control::Tick));
            t += period;
        }
    }
    controls.sort_by_key(|c| (c.0, c.1));

    let mut history = History::new();
    let mut collector = MetricsCollector::new(n, sc.policy.window());
    let mut current = (0u64, sc.initial);
    let mut next_id = 1u64;
    let mut proposals = Vec::new();

    let drain = |sim: &mut Simulation<SwitchNode>,
                 history: &mut History,
                 collector: &mut MetricsCollector,
                 current: &mut (u64, ProtocolKind)| {
        for i in 0..n {
            for r in sim.process_mut(NodeId(i)).take_history() {
                collector.ingest(&r);
                if let Record::Switch { era, target, .. } = &r {
                    if *era > current.0 {
                        *current = (*era, *target);
                    }
                }
                history.records.push(r);
            }
        }
    };

    for (at, _, c) in controls {
        if at > end {
            break;
        }
        sim.run_until(at);
        drain(&mut sim, &mut history, &mut collector, &mut current);
        let observer = (0..n).map(NodeId).find(|&i| !sim.is_crashed(i)).unwrap_or(NodeId(0));
        let leader = sim.omega_leader(observer);
        match c {
            Control::Switch(target) => {
                sim.inject(at, leader, NodeTimer::ProposeSwitch(SwitchCommand::new(next_id, target)));
                next_id += 1;
            }
            Control::Arm => sim.inject(at, leader, NodeTimer::ArmCrashBeforeDecide),
            Control::Tick => {
                let rtts: Vec<_> =
                    (0..n).map(|i| round_trips(&matrix, NodeId(i), sim.omega_leader(NodeId(i)))).collect();
                let snap = collector.snapshot(at, &rtts);
                if let Some(v) = oracle.as_mut().and_then(|o| o.tick(&snap, current.1)) {
                    proposals.push((at, v));
                    sim.inject(at, leader, NodeTimer::ProposeSwitch(SwitchCommand::new(next_id, v)));
                    next_id += 1;
                }
            }
        }
    }
    sim.run_until(end);
    drain(&mut sim, &mut history, &mut collector, &mut current);
    finish(&mut history, end, n, |i| sim.crash_time(NodeId(i)), |i| sim.process(NodeId(i)).outstanding());

    Ok(RunOutput {
        trace: sim.take_trace(),
        history,
        stats: sim.stats(),
        stalled: false,
        oracle_proposals: proposals,
        end,
    })
}

/// Adds crash and truncation records, then orders the log by time.
pub(crate) fn finish(
    history: &mut History,
    end: Time,
    n: usize,
    crash_time: impl Fn(usize) -> Option<Time>,
    outstanding: impl Fn(usize) -> Vec<crate::model::CmdId>,
) {
    for i in 0..n {
        if let Some(t) = crash_time(i) {
            let known = history.records.iter().any(|r| matches!(r, Record::Crash { node, .. } if *node == i));
            if !known {
                history.records.push(Record::Crash { t, node: i });
            }
        }
        for id in outstanding(i) {
            history.records.push(Record::Truncated { t: end, node: i, id });
        }
    }
    history.records.sort_by_key(|r| r.time());
}
