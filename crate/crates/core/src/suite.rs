//! Randomised safety runs: short scenarios with crashes, false suspicions
//! and switches, each checked by the validator.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::ProtocolKind;
use crate::runner::{run, RunError};
use crate::scenario::{FaultSpec, Scenario, SwitchSpec};
use crate::simnet::FaultAction;
use crate::validator::{validate, Report};
use crate::workload::{PhaseSpec, WorkloadSpec};

/// Protocol schedule of one safety configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub initial: ProtocolKind,
    pub targets: Vec<ProtocolKind>,
}

impl Plan {
    /// Each protocol alone, every ordered pair, and one run through all three.
    pub fn standard() -> Vec<Plan> {
        use ProtocolKind::*;
        let kinds = [Monarchic, Oligarchic, Democratic];
        let mut out: Vec<Plan> = kinds.iter().map(|&k| Plan { initial: k, targets: vec![] }).collect();
        for &a in &kinds {
            for &b in &kinds {
                if a != b {
                    out.push(Plan { initial: a, targets: vec![b] });
                }
            }
        }
        out.push(Plan { initial: Oligarchic, targets: vec![Democratic, Monarchic, Oligarchic] });
        out
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.initial)?;
        for t in &self.targets {
            write!(f, "->{t}")?;
        }
        Ok(())
    }
}

/// Length of the client phase of a safety run, in seconds.
pub const SAFETY_DURATION: f64 = 4.0;

/// A 5-node WAN run with up to two crashes, a few false suspicions and the
/// plan's switches at random times, all drawn from `seed`.
pub fn safety_scenario(plan: &Plan, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5AFE_5AFE);
    let mut sc = Scenario {
        name: format!("safety-{plan}-{seed}"),
        seed,
        initial: plan.initial,
        duration: SAFETY_DURATION,
        grace: 4.0,
        workload: WorkloadSpec {
            clients_per_node: 2,
            phases: vec![PhaseSpec { start: 0.0, conflict_pct: rng.gen_range(0..=10) * 10 }],
            ..WorkloadSpec::default()
        },
        fifo: rng.gen_bool(0.5),
        ..Scenario::default()
    };
    let mut at: Vec<f64> = (0..plan.targets.len()).map(|_| rng.gen_range(0.3..SAFETY_DURATION)).collect();
    at.sort_by(f64::total_cmp);
    sc.switches = plan.targets.iter().zip(at).map(|(&target, at)| SwitchSpec { at, target }).collect();

    let armed = !sc.switches.is_empty() && rng.gen_bool(0.25);
    if armed {
        sc.crash_before_decide = Some(sc.switches[0].at - 0.1);
    }
    let mut nodes: Vec<usize> = (0..sc.nodes).collect();
    nodes.shuffle(&mut rng);
    let crashes = rng.gen_range(0..=2 - usize::from(armed));
    for &node in &nodes[..crashes] {
        sc.faults
            .push(FaultSpec { at: rng.gen_range(0.2..SAFETY_DURATION + 1.0), action: FaultAction::Crash { node } });
    }
    for _ in 0..rng.gen_range(0..=2) {
        let node = rng.gen_range(0..sc.nodes);
        sc.faults.push(FaultSpec {
            at: rng.gen_range(0.2..SAFETY_DURATION),
            action: FaultAction::Suspect { node, for_ms: rng.gen_range(100..1500) },
        });
    }
    sc.faults.sort_by(|a, b| a.at.total_cmp(&b.at));
    sc
}

/// Runs one safety scenario and validates its history and trace.
pub fn check(sc: &Scenario) -> Result<Report, RunError> {
    let out = run(sc)?;
    Ok(validate(&out.history.records, Some(&out.trace_text())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_plans() {
        let plans = Plan::standard();
        assert_eq!(plans.len(), 10);
        assert_eq!(plans[9].to_string(), "OLIGARCHIC->DEMOCRATIC->MONARCHIC->OLIGARCHIC");
    }

    #[test]
    fn scenarios_respect_the_crash_budget() {
        for plan in Plan::standard() {
            for seed in 0..50 {
                let sc = safety_scenario(&plan, seed);
                let crashes = sc.faults.iter().filter(|f| matches!(f.action, FaultAction::Crash { .. })).count();
                let armed = usize::from(sc.crash_before_decide.is_some());
                assert!(crashes + armed <= 2, "{}", sc.name);
                assert!(sc.validate().is_ok());
                assert_eq!(sc.switches.len(), plan.targets.len());
            }
        }
    }
}
