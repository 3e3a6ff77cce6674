//! Measured outcomes of one run, derived from the trace.

use std::collections::BTreeMap;

use crate::simnet::TraceRecord;
use crate::types::VirtualTime;

/// Per-run measurements. Latencies are in virtual microseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsReport {
    /// One entry per completed election: time from the latest preceding
    /// crash to the new leader's first majority-acknowledged heartbeat.
    pub election_latency_us: Vec<u64>,
    /// Joiner id -> time from its instantiation to receiving the secret.
    pub new_process_latency_us: BTreeMap<u32, u64>,
    /// Suspect id -> time from its crash to the leader committing its
    /// expulsion. Only crashes with a matching expulsion appear.
    pub expel_latency_us: BTreeMap<u32, u64>,
    /// Attestation-service round trips during the run (excluding any
    /// delegate pre-pairing done before t=0).
    pub ias_call_count: u64,
    pub anarchy_intervals: Vec<(VirtualTime, VirtualTime)>,
    pub final_convergence: bool,
    pub seal_count: u64,
    /// Halt reason per process that stopped, keyed by id.
    pub halted: BTreeMap<u32, String>,
}

impl MetricsReport {
    pub fn mean_election_latency_us(&self) -> Option<u64> {
        mean(&self.election_latency_us)
    }
}

pub fn mean(xs: &[u64]) -> Option<u64> {
    if xs.is_empty() {
        None
    } else {
        Some((xs.iter().map(|x| u128::from(*x)).sum::<u128>() / xs.len() as u128) as u64)
    }
}

/// Extracts the measurement events back out of a trace. Works on both full
/// and light traces; everything it needs is always recorded.
pub fn collect_metrics(trace: &[TraceRecord]) -> MetricsReport {
    let mut report = MetricsReport::default();
    let mut last_crash: Option<VirtualTime> = None;
    let mut crash_time: BTreeMap<u32, VirtualTime> = BTreeMap::new();
    let mut spawn_time: BTreeMap<u32, VirtualTime> = BTreeMap::new();

    for r in trace {
        match r.kind {
            "crash" => {
                if let Some(p) = r.actor {
                    crash_time.entry(p.id).or_insert(r.at);
                }
                last_crash = Some(last_crash.map_or(r.at, |c: u64| c.max(r.at)));
            }
            "spawn" => {
                if r.detail == "joiner" {
                    if let Some(p) = r.actor {
                        spawn_time.entry(p.id).or_insert(r.at);
                    }
                }
            }
            "provisioned" => {
                if let Some(p) = r.actor {
                    if let Some(t0) = spawn_time.get(&p.id) {
                        report
                            .new_process_latency_us
                            .entry(p.id)
                            .or_insert(r.at - t0);
                    }
                }
            }
            "seal" => report.seal_count += 1,
            "halt" => {
                if let Some(p) = r.actor {
                    report.halted.insert(p.id, r.detail.clone());
                }
            }
            "mark" => {
                if r.detail == "authority_acked" {
                    if let Some(crash) = last_crash {
                        if r.at >= crash {
                            report.election_latency_us.push(r.at - crash);
                        }
                    }
                } else if let Some(rest) = r.detail.strip_prefix("expel_committed p") {
                    if let Ok(id) = rest.trim().parse::<u32>() {
                        if let Some(t0) = crash_time.get(&id) {
                            report.expel_latency_us.entry(id).or_insert(r.at - t0);
                        }
                    }
                } else if r.detail.starts_with("ias_verify") {
                    report.ias_call_count += 1;
                }
            }
            _ => {}
        }
    }
    report
}
