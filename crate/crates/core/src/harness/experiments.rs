//! Experiment drivers: leader-election sweeps, commissioning cost with and
//! without attestation delegates, and expulsion latency. Each (cell, run)
//! pair is an independent seeded simulation; cells share per-run seeds so
//! cross-cell comparisons cancel the timeout draws.

use rayon::prelude::*;

use crate::engine::EngineConfig;
use crate::harness::scenario::ProfileKind;
use crate::simnet::{install_steady_cluster, FaultSpec, LatencyProfile, Simulation, TraceMode};
use crate::types::{mix64, HostId, ProcessId, TimeoutConfig, VirtualTime};

fn profile_latency(kind: ProfileKind) -> LatencyProfile {
    match kind {
        ProfileKind::Local => LatencyProfile::local(),
        ProfileKind::Gcp => LatencyProfile::gcp(),
        ProfileKind::Custom => LatencyProfile::local(),
    }
}

fn profile_name(kind: ProfileKind) -> &'static str {
    match kind {
        ProfileKind::Local => "local",
        ProfileKind::Gcp => "gcp",
        ProfileKind::Custom => "custom",
    }
}

/// Member ids with profile-appropriate host placement: one host per process
/// on the local cluster, round-robin across the four regions on GCP.
pub fn member_pids(n: u32, profile: ProfileKind) -> Vec<ProcessId> {
    (1..=n)
        .map(|i| {
            let host = match profile {
                ProfileKind::Local | ProfileKind::Custom => HostId(i as u16),
                ProfileKind::Gcp => HostId(((i - 1) % 4) as u16 + 1),
            };
            ProcessId::new(i, host)
        })
        .collect()
}

fn timeouts_for(range_ms: (u64, u64)) -> TimeoutConfig {
    let delta_us = (range_ms.0 * 1_000 / 2).min(10_000).max(1);
    TimeoutConfig::from_millis(range_ms.0, range_ms.1, 5, delta_us)
}

fn steady_sim(n: u32, range_ms: (u64, u64), profile: ProfileKind, seed: u64, had: bool) -> Simulation {
    let mut cfg = EngineConfig::new(timeouts_for(range_ms), n as usize + 2, seed);
    cfg.had_enabled = had;
    let mut sim = Simulation::new(cfg, profile_latency(profile), TraceMode::Light);
    let pids = member_pids(n, profile);
    install_steady_cluster(&mut sim, &pids);
    sim
}

/// Advances the simulation in slices until `want` finds a trace record, the
/// horizon passes, or nothing operational remains. Returns the matching
/// record's time.
fn run_until_mark(
    sim: &mut Simulation,
    from: VirtualTime,
    horizon: VirtualTime,
    want: impl Fn(&crate::simnet::TraceRecord) -> bool,
) -> Option<VirtualTime> {
    let mut t = from;
    let mut scanned = 0usize;
    loop {
        t = (t + 50_000).min(horizon);
        sim.run_until(t).expect("experiment run hit a contract violation");
        let trace = sim.trace();
        for r in &trace[scanned..] {
            if r.at >= from && want(r) {
                return Some(r.at);
            }
        }
        scanned = trace.len();
        if t >= horizon {
            return None;
        }
        if sim.operational().count() == 0 {
            // Nobody left to produce the event; drain the horizon.
            sim.run_until(horizon).expect("experiment drain");
            let trace = sim.trace();
            for r in &trace[scanned..] {
                if r.at >= from && want(r) {
                    return Some(r.at);
                }
            }
            return None;
        }
    }
}

// ----------------------------------------------------------------------
// Leader election sweep.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionRow {
    pub profile: &'static str,
    pub n: u32,
    pub range_ms: (u64, u64),
    pub run: u32,
    pub latency_us: u64,
    pub elected: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ElectionSweep {
    pub rows: Vec<ElectionRow>,
}

impl ElectionSweep {
    pub fn mean_us(&self, n: u32, range_ms: (u64, u64)) -> Option<u64> {
        let xs: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.n == n && r.range_ms == range_ms)
            .map(|r| r.latency_us)
            .collect();
        super::metrics::mean(&xs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("profile,n,range,run,latency_us\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}-{},{},{}\n",
                r.profile, r.n, r.range_ms.0, r.range_ms.1, r.run, r.latency_us
            ));
        }
        let mut cells: Vec<(u32, (u64, u64), &'static str)> = self
            .rows
            .iter()
            .map(|r| (r.n, r.range_ms, r.profile))
            .collect();
        cells.dedup();
        for (n, range, profile) in cells {
            if let Some(m) = self.mean_us(n, range) {
                out.push_str(&format!(
                    "{profile},{n},{}-{},mean,{m}\n",
                    range.0, range.1
                ));
            }
        }
        out
    }
}

/// Measurement window for one election cell. Shared by every cell so means
/// stay comparable: a run that never elects scores the whole window.
pub const ELECTION_WINDOW_US: u64 = 4_000_000;

/// Crashes the leader of an n-member steady cluster and measures the time
/// until the new leader's first heartbeat is acknowledged by a majority.
/// A run with no election within the window (possible when the timeouts are
/// small against the link latency and every candidacy times out) scores the
/// full window.
pub fn election_run(
    n: u32,
    range_ms: (u64, u64),
    profile: ProfileKind,
    seed: u64,
) -> (u64, bool) {
    let mut sim = steady_sim(n, range_ms, profile, seed, false);
    let crash_at: VirtualTime = 100_000;
    let leader = member_pids(n, profile)[0];
    sim.schedule_fault(crash_at, FaultSpec::Crash { pid: leader });
    let horizon = crash_at + ELECTION_WINDOW_US;
    match run_until_mark(&mut sim, crash_at, horizon, |r| {
        r.kind == "mark" && r.detail == "authority_acked"
    }) {
        Some(at) => (at - crash_at, true),
        None => (ELECTION_WINDOW_US, false),
    }
}

pub fn sweep_election(
    ns: &[u32],
    ranges_ms: &[(u64, u64)],
    profile: ProfileKind,
    runs: u32,
    base_seed: u64,
) -> ElectionSweep {
    let mut cells: Vec<(u32, (u64, u64), u32)> = Vec::new();
    for &n in ns {
        for &range in ranges_ms {
            for run in 0..runs {
                cells.push((n, range, run));
            }
        }
    }
    let mut rows: Vec<ElectionRow> = cells
        .par_iter()
        .map(|&(n, range, run)| {
            // Same per-run seed across cells: timeout draws pair up and the
            // cell-to-cell comparison isolates the configured difference.
            let seed = mix64(base_seed ^ u64::from(run).wrapping_mul(0x9e37));
            let (latency_us, elected) = election_run(n, range, profile, seed);
            ElectionRow {
                profile: profile_name(profile),
                n,
                range_ms: range,
                run,
                latency_us,
                elected,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.n, r.range_ms, r.run));
    ElectionSweep { rows }
}

// ----------------------------------------------------------------------
// Commissioning cost.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRow {
    pub profile: &'static str,
    pub n: u32,
    pub had: bool,
    pub run: u32,
    pub latency_us: u64,
    pub ias_calls: u64,
    pub provisioned: bool,
}

#[derive(Debug, Clone, Default)]
pub struct JoinBench {
    pub rows: Vec<JoinRow>,
}

impl JoinBench {
    pub fn mean_us(&self, n: u32, had: bool) -> Option<u64> {
        let xs: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.n == n && r.had == had)
            .map(|r| r.latency_us)
            .collect();
        super::metrics::mean(&xs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("profile,n,had,run,latency_us,ias_calls\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.profile,
                r.n,
                if r.had { "on" } else { "off" },
                r.run,
                r.latency_us,
                r.ias_calls
            ));
        }
        let mut cells: Vec<(u32, bool, &'static str)> =
            self.rows.iter().map(|r| (r.n, r.had, r.profile)).collect();
        cells.dedup();
        for (n, had, profile) in cells {
            if let Some(m) = self.mean_us(n, had) {
                out.push_str(&format!(
                    "{profile},{n},{},mean,{m},\n",
                    if had { "on" } else { "off" }
                ));
            }
        }
        out
    }
}

/// Heartbeat timeout range appropriate to a profile: the timeouts must sit
/// an order of magnitude above the broadcast time, which on the cloud
/// profile means the 200-300 ms band.
fn join_range(profile: ProfileKind) -> (u64, u64) {
    match profile {
        ProfileKind::Local | ProfileKind::Custom => (50, 150),
        ProfileKind::Gcp => (200, 300),
    }
}

/// Commissions one joiner into an n-member cluster and measures the time
/// from its instantiation to it holding the application secret, plus the
/// attestation-service calls spent inside that window.
pub fn join_run(n: u32, profile: ProfileKind, had: bool, seed: u64) -> JoinRow {
    let mut sim = steady_sim(n, join_range(profile), profile, seed, had);
    if had {
        sim.pair_all_hosts();
    }
    // Joiner lands on a host other than the leader's, so the attestation is
    // genuinely remote.
    let host = match profile {
        ProfileKind::Local | ProfileKind::Custom => HostId(n as u16 + 1),
        ProfileKind::Gcp => HostId(2),
    };
    let joiner = ProcessId::new(n + 1, host);
    let spawn_at: VirtualTime = 50_000;
    sim.schedule_join(spawn_at, joiner, false);
    let horizon = spawn_at + 5_000_000;
    let done = run_until_mark(&mut sim, spawn_at, horizon, |r| {
        r.kind == "provisioned"
    });
    let ias_calls = sim
        .trace()
        .iter()
        .filter(|r| {
            r.kind == "mark"
                && r.detail.starts_with("ias_verify")
                && r.at >= spawn_at
                && done.map_or(true, |d| r.at <= d)
        })
        .count() as u64;
    JoinRow {
        profile: profile_name(profile),
        n,
        had,
        run: 0,
        latency_us: done.map_or(horizon - spawn_at, |d| d - spawn_at),
        ias_calls,
        provisioned: done.is_some(),
    }
}

pub fn measure_new_process(
    ns: &[u32],
    profile: ProfileKind,
    had: bool,
    runs: u32,
    base_seed: u64,
) -> JoinBench {
    let mut cells: Vec<(u32, u32)> = Vec::new();
    for &n in ns {
        for run in 0..runs {
            cells.push((n, run));
        }
    }
    let mut rows: Vec<JoinRow> = cells
        .par_iter()
        .map(|&(n, run)| {
            let seed = mix64(base_seed ^ u64::from(run).wrapping_mul(0x9e37));
            let mut row = join_run(n, profile, had, seed);
            row.run = run;
            row
        })
        .collect();
    rows.sort_by_key(|r| (r.n, r.run));
    JoinBench { rows }
}

// ----------------------------------------------------------------------
// Expulsion latency.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpelRow {
    pub profile: &'static str,
    pub n: u32,
    pub range_ms: (u64, u64),
    pub run: u32,
    pub latency_us: u64,
    pub expelled: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExpelBench {
    pub rows: Vec<ExpelRow>,
}

impl ExpelBench {
    pub fn mean_us(&self, n: u32) -> Option<u64> {
        let xs: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.n == n)
            .map(|r| r.latency_us)
            .collect();
        super::metrics::mean(&xs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("profile,n,range,run,latency_us\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}-{},{},{}\n",
                r.profile, r.n, r.range_ms.0, r.range_ms.1, r.run, r.latency_us
            ));
        }
        let mut cells: Vec<(u32, (u64, u64), &'static str)> = self
            .rows
            .iter()
            .map(|r| (r.n, r.range_ms, r.profile))
            .collect();
        cells.dedup();
        for (n, range, profile) in cells {
            if let Some(m) = self.mean_us(n) {
                out.push_str(&format!(
                    "{profile},{n},{}-{},mean,{m}\n",
                    range.0, range.1
                ));
            }
        }
        out
    }
}

/// Crashes one follower and measures the time until the leader commits its
/// expulsion. The crashed follower is always p3 so the detection timeout
/// draw pairs up across cluster sizes.
pub fn expel_run(n: u32, range_ms: (u64, u64), profile: ProfileKind, seed: u64) -> (u64, bool) {
    assert!(n >= 3, "needs a follower besides the leader");
    let mut sim = steady_sim(n, range_ms, profile, seed, false);
    let victim = member_pids(n, profile)[2];
    let crash_at: VirtualTime = 100_000;
    sim.schedule_fault(crash_at, FaultSpec::Crash { pid: victim });
    let horizon = crash_at + 10 * range_ms.1 * 1_000 + 1_000_000;
    let want = format!("expel_committed {victim}");
    match run_until_mark(&mut sim, crash_at, horizon, |r| {
        r.kind == "mark" && r.detail == want
    }) {
        Some(at) => (at - crash_at, true),
        None => (horizon - crash_at, false),
    }
}

pub fn measure_expel(
    ns: &[u32],
    range_ms: (u64, u64),
    profile: ProfileKind,
    runs: u32,
    base_seed: u64,
) -> ExpelBench {
    let mut cells: Vec<(u32, u32)> = Vec::new();
    for &n in ns {
        for run in 0..runs {
            cells.push((n, run));
        }
    }
    let mut rows: Vec<ExpelRow> = cells
        .par_iter()
        .map(|&(n, run)| {
            let seed = mix64(base_seed ^ u64::from(run).wrapping_mul(0x9e37));
            let (latency_us, expelled) = expel_run(n, range_ms, profile, seed);
            ExpelRow {
                profile: profile_name(profile),
                n,
                range_ms,
                run,
                latency_us,
                expelled,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.n, r.run));
    ExpelBench { rows }
}
