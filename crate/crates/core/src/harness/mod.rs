//! Scenario execution, ground-truth observers, metrics, and the experiment
//! drivers behind the CLI.

pub mod experiments;
pub mod metrics;
pub mod observers;
pub mod scenario;

pub use experiments::{sweep_election, measure_expel, measure_new_process};
pub use metrics::{collect_metrics, MetricsReport};
pub use observers::{
    check_convergence, compute_census, CensusTracker, ConvergenceVerdict, SafetyMonitor, Violation,
};
pub use scenario::{EventSpec, ProfileKind, Scenario, ScenarioError, ScenarioEvent};

use std::collections::BTreeMap;

use crate::engine::EngineConfig;
use crate::simnet::{
    install_steady_cluster, FaultSpec, LatencyProfile, SimError, Simulation, TamperSpec, TraceMode,
};
use crate::types::{HostId, ProcessId};

/// Maps the scenario's profile onto concrete link latencies.
pub fn latency_profile(s: &Scenario) -> LatencyProfile {
    match s.profile {
        ProfileKind::Local => LatencyProfile::local(),
        ProfileKind::Gcp => LatencyProfile::gcp(),
        ProfileKind::Custom => {
            let hosts: BTreeMap<String, HostId> = s.declared_hosts().into_iter().collect();
            LatencyProfile::custom(s.latency_pairs.iter().map(|(a, b, us)| {
                (
                    *hosts.get(a).expect("validated at parse"),
                    *hosts.get(b).expect("validated at parse"),
                    *us,
                )
            }))
        }
    }
}

/// Builds the simulation a scenario describes: the initial steady cluster,
/// delegate pairings, and every scheduled event.
pub fn instantiate(s: &Scenario, seed_override: Option<u64>, trace_mode: TraceMode) -> Simulation {
    let seed = seed_override.unwrap_or(s.seed);
    let mut cfg = EngineConfig::new(s.timeout_config(), s.sla_max, seed);
    cfg.had_enabled = s.had;
    cfg.join_vote_approve = s.join_vote;
    let mut sim = Simulation::new(cfg, latency_profile(s), trace_mode);
    if let Some(o) = s.send_overhead_us {
        sim.set_send_overhead(o);
    }

    let mut pids: BTreeMap<u32, ProcessId> = BTreeMap::new();
    for i in 1..=s.n_initial {
        pids.insert(i, ProcessId::new(i, s.initial_host(i)));
    }
    let members: Vec<ProcessId> = pids.values().copied().collect();
    install_steady_cluster(&mut sim, &members);
    if s.had {
        sim.pair_all_hosts();
    }

    for ev in &s.events {
        let at = ev.at_us;
        match &ev.kind {
            EventSpec::Crash { p } => {
                sim.schedule_fault(at, FaultSpec::Crash { pid: pids[p] });
            }
            EventSpec::Join {
                p,
                host,
                wrong_measurement,
            } => {
                let host = s.host_id(host).expect("validated at parse");
                let pid = ProcessId::new(*p, host);
                pids.insert(*p, pid);
                sim.schedule_join(at, pid, *wrong_measurement);
            }
            EventSpec::Isolate { p, until_us } => {
                sim.schedule_fault(
                    at,
                    FaultSpec::Isolate {
                        pid: pids[p],
                        until: *until_us,
                    },
                );
            }
            EventSpec::Partition { a, b, until_us } => {
                sim.schedule_fault(
                    at,
                    FaultSpec::Partition {
                        group_a: a.iter().map(|p| pids[p]).collect(),
                        group_b: b.iter().map(|p| pids[p]).collect(),
                        until: *until_us,
                    },
                );
            }
            EventSpec::Delay {
                a,
                b,
                extra_us,
                until_us,
            } => {
                sim.schedule_fault(
                    at,
                    FaultSpec::LinkDelay {
                        a: pids[a],
                        b: pids[b],
                        extra_us: *extra_us,
                        until: *until_us,
                    },
                );
            }
            EventSpec::Tamper { kind, until_us } => {
                sim.schedule_fault(
                    at,
                    FaultSpec::Tamper {
                        spec: TamperSpec { kind: *kind },
                        until: *until_us,
                    },
                );
            }
            EventSpec::Shutdown => sim.schedule_owner_shutdown(at),
        }
    }
    sim
}

/// Everything a finished scenario run produced.
pub struct RunOutcome {
    pub sim: Simulation,
    pub report: MetricsReport,
    pub violations: Vec<Violation>,
    pub convergence: ConvergenceVerdict,
}

impl RunOutcome {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Runs a scenario to its horizon with all observers attached.
pub fn run_scenario(
    s: &Scenario,
    seed_override: Option<u64>,
    trace_mode: TraceMode,
) -> Result<RunOutcome, SimError> {
    let mut sim = instantiate(s, seed_override, trace_mode);
    let bootstrap = ProcessId::new(1, s.initial_host(1));
    let mut safety = SafetyMonitor::new(bootstrap, s.sla_max);
    let mut census = CensusTracker::new(bootstrap);
    sim.run_until_with(s.horizon_us(), &mut [&mut safety, &mut census])?;
    census.finish(sim.now());
    let convergence = check_convergence(sim.states().values());
    let mut report = collect_metrics(sim.trace());
    report.anarchy_intervals = census.intervals.clone();
    report.final_convergence = convergence.converged;
    Ok(RunOutcome {
        sim,
        report,
        violations: safety.violations,
        convergence,
    })
}
