//! Deterministic discrete-event simulator: virtual clock, per-pair channels,
//! an adversarial delivery scheduler, and fault injection.
//!
//! One simulation instance is strictly single-threaded; the event loop owns
//! every process state. Determinism contract: the trace is a pure function of
//! (scenario, seed). Ties at equal timestamps break by insertion order, never
//! randomly, so counterexamples replay exactly.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::attest::{AttestOutcome, Measurement, Registry};
use crate::engine::{
    Action, Envelope, EngineConfig, EngineError, Input, Message, MsgKind, ProcessState, Role,
    SecretHandle, TimerKind,
};
use crate::types::{mix64, HostId, PeerList, ProcessId, ReplicatedLog, VirtualTime};

/// Messages queued forever on one channel before an accounting warning.
const CHANNEL_BACKLOG_WARN: u64 = 10_000;

/// Latency charged on links to the owner actor, which stands outside the
/// host latency model.
const OWNER_LINK_US: u64 = 130;

/// Per-message serialization overhead at the sender: the i-th send emitted in
/// one step departs i slots late. This is what makes gathering a larger
/// quorum measurably slower, as on real clusters.
pub const DEFAULT_SEND_OVERHEAD_US: u64 = 300;

/// Base one-way latency between hosts.
#[derive(Debug, Clone)]
pub enum LatencyProfile {
    Uniform { base_us: u64 },
    Matrix { us: BTreeMap<(HostId, HostId), u64> },
}

impl LatencyProfile {
    /// In-house cluster: roughly 0.13 ms between any two servers.
    pub fn local() -> Self {
        LatencyProfile::Uniform { base_us: 130 }
    }

    /// Cloud deployment spanning four regions; values are the measured
    /// region-to-region latencies in microseconds.
    pub fn gcp() -> Self {
        let mut us = BTreeMap::new();
        let mut put = |a: u16, b: u16, v: u64| {
            us.insert((HostId(a), HostId(b)), v);
            us.insert((HostId(b), HostId(a)), v);
        };
        // us-west1=h1, us-west2=h2, us-east1=h3, us-east4=h4
        put(1, 2, 24_700);
        put(1, 3, 66_700);
        put(1, 4, 59_000);
        put(2, 3, 62_900);
        put(2, 4, 60_500);
        put(3, 4, 12_700);
        LatencyProfile::Matrix { us }
    }

    pub fn custom(pairs: impl IntoIterator<Item = (HostId, HostId, u64)>) -> Self {
        let mut us = BTreeMap::new();
        for (a, b, v) in pairs {
            us.insert((a, b), v);
            us.insert((b, a), v);
        }
        LatencyProfile::Matrix { us }
    }

    pub fn latency_us(&self, a: HostId, b: HostId) -> u64 {
        if a == ProcessId::OWNER.host || b == ProcessId::OWNER.host {
            return OWNER_LINK_US;
        }
        if a == b {
            return 0;
        }
        match self {
            LatencyProfile::Uniform { base_us } => *base_us,
            LatencyProfile::Matrix { us } => us.get(&(a, b)).copied().unwrap_or(0),
        }
    }

    pub fn max_latency_us(&self) -> u64 {
        match self {
            LatencyProfile::Uniform { base_us } => *base_us,
            LatencyProfile::Matrix { us } => us.values().copied().max().unwrap_or(0),
        }
    }

    /// GCP region hosts, in declaration order.
    pub fn gcp_hosts() -> [HostId; 4] {
        [HostId(1), HostId(2), HostId(3), HostId(4)]
    }
}

/// Which messages a tampering adversary corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TamperSpec {
    /// Restrict to one message kind; `None` corrupts everything in range.
    pub kind: Option<MsgKind>,
}

/// Injected faults. Windowed faults stay active from their injection time
/// until `until` (`None` = forever).
#[derive(Debug, Clone)]
pub enum FaultSpec {
    /// Halt a process without a protocol transition or farewell message.
    Crash { pid: ProcessId },
    /// Extra delay on one link; `extra_us = None` models adversarial drop as
    /// an infinite delay (the channel itself never loses a message).
    LinkDelay {
        a: ProcessId,
        b: ProcessId,
        extra_us: Option<u64>,
        until: Option<VirtualTime>,
    },
    /// No message crosses between the two groups while active.
    Partition {
        group_a: Vec<ProcessId>,
        group_b: Vec<ProcessId>,
        until: Option<VirtualTime>,
    },
    /// Cut one process off from everyone else.
    Isolate {
        pid: ProcessId,
        until: Option<VirtualTime>,
    },
    /// Corrupt matching messages in flight.
    Tamper {
        spec: TamperSpec,
        until: Option<VirtualTime>,
    },
}

impl FaultSpec {
    fn describe(&self) -> String {
        match self {
            FaultSpec::Crash { pid } => format!("crash {pid}"),
            FaultSpec::LinkDelay { a, b, extra_us, .. } => match extra_us {
                Some(d) => format!("delay {a} {b} extra={d}us"),
                None => format!("delay {a} {b} extra=inf"),
            },
            FaultSpec::Partition { group_a, group_b, .. } => {
                let fmt = |g: &[ProcessId]| {
                    g.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
                };
                format!("partition {}|{}", fmt(group_a), fmt(group_b))
            }
            FaultSpec::Isolate { pid, .. } => format!("isolate {pid}"),
            FaultSpec::Tamper { spec, .. } => match spec.kind {
                Some(k) => format!("tamper kind={k}"),
                None => "tamper all".to_string(),
            },
        }
    }
}

#[derive(Debug, Clone)]
struct ActiveFault {
    from: VirtualTime,
    spec: FaultSpec,
}

impl ActiveFault {
    fn window_until(&self) -> Option<VirtualTime> {
        match &self.spec {
            FaultSpec::Crash { .. } => Some(self.from),
            FaultSpec::LinkDelay { until, .. }
            | FaultSpec::Partition { until, .. }
            | FaultSpec::Isolate { until, .. }
            | FaultSpec::Tamper { until, .. } => *until,
        }
    }

    fn active_at(&self, t: VirtualTime) -> bool {
        t >= self.from && self.window_until().map_or(true, |end| t < end)
    }
}

/// Simulation events in (time, insertion-sequence) order.
#[derive(Debug, Clone)]
enum EventKind {
    Deliver {
        env: Envelope,
    },
    Timer {
        pid: ProcessId,
        kind: TimerKind,
    },
    Verdict {
        pid: ProcessId,
        joiner: ProcessId,
        outcome: AttestOutcome,
    },
    Fault(FaultSpec),
    SpawnJoiner {
        pid: ProcessId,
        wrong_measurement: bool,
    },
    OwnerShutdown {
        attempts: u32,
    },
}

#[derive(Debug)]
struct Scheduled {
    at: VirtualTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// One line of the append-only run trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: VirtualTime,
    pub actor: Option<ProcessId>,
    pub kind: &'static str,
    pub detail: String,
}

impl TraceRecord {
    pub fn render(&self) -> String {
        let actor = match self.actor {
            Some(p) => p.to_string(),
            None => "sim".to_string(),
        };
        format!("{},{},{},{}", self.at, actor, self.kind, self.detail)
    }
}

/// How much of the run is recorded. Sweeps use `Light` to keep memory flat;
/// everything metrics need is still recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Full,
    Light,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("contract violation at t={at}us event #{seq} ({actor}): {source}")]
pub struct SimError {
    pub at: VirtualTime,
    pub seq: u64,
    pub actor: ProcessId,
    pub source: EngineError,
}

/// Everything an observer may inspect after one executed event.
pub struct StepView<'a> {
    pub at: VirtualTime,
    pub seq: u64,
    pub actor: Option<ProcessId>,
    pub kind: &'static str,
    pub detail: &'a str,
    pub actions: &'a [Action],
    pub states: &'a BTreeMap<ProcessId, ProcessState>,
    pub registry: &'a Registry,
    links: LinkView<'a>,
}

impl<'a> StepView<'a> {
    /// Whether the direct channel between two processes currently delivers
    /// within the synchrony bound.
    pub fn link_synchronous(&self, a: ProcessId, b: ProcessId) -> bool {
        self.links.synchronous(a, b, self.at)
    }
}

#[derive(Clone, Copy)]
struct LinkView<'a> {
    faults: &'a [ActiveFault],
    profile: &'a LatencyProfile,
    delta_us: u64,
}

impl<'a> LinkView<'a> {
    fn synchronous(&self, a: ProcessId, b: ProcessId, now: VirtualTime) -> bool {
        if self.profile.latency_us(a.host, b.host) > self.delta_us {
            return false;
        }
        match link_effect(self.faults, a, b, now) {
            LinkEffect::Clear => true,
            LinkEffect::Extra(d) => d <= self.delta_us,
            LinkEffect::Blocked => false,
        }
    }
}

pub trait Observer {
    fn on_step(&mut self, view: &StepView<'_>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkEffect {
    Clear,
    Extra(u64),
    Blocked,
}

/// Latest-injected fault covering the link wins when several overlap.
fn link_effect(faults: &[ActiveFault], a: ProcessId, b: ProcessId, t: VirtualTime) -> LinkEffect {
    let mut effect = LinkEffect::Clear;
    for f in faults {
        if !f.active_at(t) {
            continue;
        }
        match &f.spec {
            FaultSpec::LinkDelay { a: x, b: y, extra_us, .. } => {
                let hit = (a == *x && b == *y) || (a == *y && b == *x);
                if hit {
                    effect = match extra_us {
                        Some(d) => LinkEffect::Extra(*d),
                        None => LinkEffect::Blocked,
                    };
                }
            }
            FaultSpec::Partition { group_a, group_b, .. } => {
                let cross = (group_a.contains(&a) && group_b.contains(&b))
                    || (group_a.contains(&b) && group_b.contains(&a));
                if cross {
                    effect = LinkEffect::Blocked;
                }
            }
            FaultSpec::Isolate { pid, .. } => {
                if a == *pid || b == *pid {
                    effect = LinkEffect::Blocked;
                }
            }
            _ => {}
        }
    }
    effect
}

pub struct Simulation {
    now: VirtualTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    states: BTreeMap<ProcessId, ProcessState>,
    registry: Registry,
    engine_cfg: EngineConfig,
    profile: LatencyProfile,
    send_overhead_us: u64,
    secret: SecretHandle,
    app_key: u64,
    faults: Vec<ActiveFault>,
    trace: Vec<TraceRecord>,
    trace_mode: TraceMode,
    undeliverable: BTreeMap<(ProcessId, ProcessId), u64>,
    warned_backlog: bool,
}

impl Simulation {
    pub fn new(engine_cfg: EngineConfig, profile: LatencyProfile, trace_mode: TraceMode) -> Self {
        let seed = engine_cfg.seed;
        let expected = Measurement::of_code(b"ames application enclave v1");
        let mut registry = Registry::new(seed, expected);
        if let LatencyProfile::Matrix { us } = &profile {
            for (a, b) in us.keys() {
                registry.declare_host(*a);
                registry.declare_host(*b);
            }
        }
        Simulation {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            states: BTreeMap::new(),
            registry,
            engine_cfg,
            profile,
            send_overhead_us: DEFAULT_SEND_OVERHEAD_US,
            secret: SecretHandle(mix64(seed ^ 0x5ec)),
            app_key: mix64(seed ^ 0xa77),
            faults: Vec::new(),
            trace: Vec::new(),
            trace_mode,
            undeliverable: BTreeMap::new(),
            warned_backlog: false,
        }
    }

    pub fn set_send_overhead(&mut self, us: u64) {
        self.send_overhead_us = us;
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn states(&self) -> &BTreeMap<ProcessId, ProcessState> {
        &self.states
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn render_trace(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&r.render());
            out.push('\n');
        }
        out
    }

    pub fn secret(&self) -> SecretHandle {
        self.secret
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.profile
    }

    pub fn engine_config(&self) -> &EngineConfig {
        &self.engine_cfg
    }

    /// Count of messages parked forever on blocked channels.
    pub fn undeliverable_count(&self) -> u64 {
        self.undeliverable.values().sum()
    }

    /// Processes holding the secret and still running.
    pub fn operational(&self) -> impl Iterator<Item = &ProcessState> {
        self.states.values().filter(|s| s.is_operational())
    }

    /// The operational leader of the highest term, if any.
    pub fn current_leader(&self) -> Option<ProcessId> {
        self.operational()
            .filter(|s| s.role() == Role::Leader)
            .max_by_key(|s| s.term())
            .map(|s| s.id())
    }

    fn record(&mut self, actor: Option<ProcessId>, kind: &'static str, detail: String) {
        if self.trace_mode == TraceMode::Light {
            let keep = matches!(
                kind,
                "mark" | "halt" | "crash" | "seal" | "provisioned" | "spawn" | "fault" | "warn"
            );
            if !keep {
                return;
            }
        }
        self.trace.push(TraceRecord {
            at: self.now,
            actor,
            kind,
            detail,
        });
    }

    fn push_event(&mut self, at: VirtualTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, kind }));
    }

    // ------------------------------------------------------------------
    // Population.

    /// Bootstraps the very first process as leader. The owner-side
    /// attestation must already have succeeded; model hostile bootstraps by
    /// driving the attestation registry directly.
    pub fn add_bootstrap_leader(&mut self, pid: ProcessId) {
        let expected = self.registry.expected_measurement();
        self.registry.register_enclave(pid, expected);
        self.registry.record_accepted(pid);
        let (state, actions) =
            ProcessState::bootstrap_first(self.engine_cfg.clone(), pid, self.secret, self.now);
        self.states.insert(pid, state);
        self.record(Some(pid), "spawn", "bootstrap_leader".to_string());
        self.execute_actions(pid, &actions);
    }

    /// Installs an already-operational member of a steady cluster.
    pub fn add_assembled_member(
        &mut self,
        pid: ProcessId,
        peers: PeerList,
        log: ReplicatedLog,
        leader: ProcessId,
    ) {
        let expected = self.registry.expected_measurement();
        self.registry.register_enclave(pid, expected);
        self.registry.record_accepted(pid);
        let (state, actions) = ProcessState::assemble_member(
            self.engine_cfg.clone(),
            pid,
            peers,
            log,
            leader,
            self.secret,
            self.now,
        );
        self.states.insert(pid, state);
        self.execute_actions(pid, &actions);
    }

    /// Schedules instantiation of a fresh, nonoperational process that will
    /// ask the cluster to commission it.
    pub fn schedule_join(&mut self, at: VirtualTime, pid: ProcessId, wrong_measurement: bool) {
        self.push_event(
            at,
            EventKind::SpawnJoiner {
                pid,
                wrong_measurement,
            },
        );
    }

    pub fn schedule_fault(&mut self, at: VirtualTime, fault: FaultSpec) {
        self.push_event(at, EventKind::Fault(fault));
    }

    /// Immediate fault activation.
    pub fn inject(&mut self, fault: FaultSpec) {
        let detail = fault.describe();
        self.record(None, "fault", detail);
        self.apply_fault(fault);
    }

    pub fn schedule_owner_shutdown(&mut self, at: VirtualTime) {
        self.push_event(at, EventKind::OwnerShutdown { attempts: 0 });
    }

    /// Pre-establishes delegate channels between every pair of member hosts,
    /// the deployment mode that amortizes attestation-service traffic.
    pub fn pair_all_hosts(&mut self) {
        let mut hosts: Vec<HostId> = self.states.values().map(|s| s.id().host).collect();
        if let LatencyProfile::Matrix { us } = &self.profile {
            hosts.extend(us.keys().map(|(a, _)| *a));
        }
        hosts.sort_unstable();
        hosts.dedup();
        for h in &hosts {
            self.registry.declare_host(*h);
        }
        for i in 0..hosts.len() {
            for j in (i + 1)..hosts.len() {
                let _ = self.registry.had_pair(hosts[i], hosts[j]);
            }
        }
    }

    /// Pairs one (possibly new) host with every member host.
    pub fn pair_host_with_all(&mut self, host: HostId) {
        self.registry.declare_host(host);
        let others: Vec<HostId> = self
            .states
            .values()
            .map(|s| s.id().host)
            .filter(|h| *h != host)
            .collect();
        for h in others {
            let _ = self.registry.had_pair(host, h);
        }
    }

    // ------------------------------------------------------------------
    // Wire.

    fn msg_tag(&self, from: ProcessId, to: ProcessId, msg: &Message) -> u64 {
        let key = match msg.kind() {
            // Handshake traffic has no channel yet; its integrity rests on
            // the attestation contents.
            MsgKind::JoinRequest | MsgKind::AttestChallenge | MsgKind::AttestQuote => 0,
            // Provisioning is keyed to the joiner's ephemeral key from its
            // accepted quote.
            MsgKind::Provision => mix64(self.registry.ephemeral_key(to)),
            _ => self.app_key,
        };
        let mut h = mix64(key ^ u64::from(from.id) ^ (u64::from(to.id) << 32));
        for b in format!("{msg:?}").bytes() {
            h = h.wrapping_mul(0x100_0000_01b3) ^ u64::from(b);
        }
        mix64(h)
    }

    fn tamper_active(&self, msg: &Message, t: VirtualTime) -> bool {
        self.faults.iter().any(|f| {
            f.active_at(t)
                && matches!(&f.spec,
                    FaultSpec::Tamper { spec, .. }
                        if spec.kind.map_or(true, |k| k == msg.kind()))
        })
    }

    fn schedule_send(&mut self, from: ProcessId, to: ProcessId, msg: Message, depart: VirtualTime) {
        let mut msg = msg;
        let tampered = self.tamper_active(&msg, depart);
        if tampered {
            self.record(None, "tamper", format!("{from}->{to} {}", msg.kind()));
            corrupt_in_flight(&mut msg);
        }
        let mut tag = self.msg_tag(from, to, &msg);
        if tampered && !msg.is_handshake() {
            // Authenticated channel: all the adversary can do is break the
            // tag; the receiver will discard the message.
            tag ^= 0x1;
        }
        let base = self.profile.latency_us(from.host, to.host);
        let deliver_at = match link_effect(&self.faults, from, to, depart) {
            LinkEffect::Clear => depart + base,
            LinkEffect::Extra(extra) => depart + base + extra,
            LinkEffect::Blocked => {
                // The channel never drops: a bounded block postpones past its
                // end, an unbounded one parks the message forever.
                let mut end: Option<VirtualTime> = Some(depart);
                for f in self.faults.iter().filter(|f| f.active_at(depart)) {
                    if link_effect(std::slice::from_ref(f), from, to, depart) == LinkEffect::Blocked
                    {
                        end = match (end, f.window_until()) {
                            (None, _) | (_, None) => None,
                            (Some(a), Some(b)) => Some(a.max(b)),
                        };
                    }
                }
                match end {
                    Some(end) => end + base,
                    None => {
                        let n = self.undeliverable.entry((from, to)).or_insert(0);
                        *n += 1;
                        if *n > CHANNEL_BACKLOG_WARN && !self.warned_backlog {
                            self.warned_backlog = true;
                            self.record(
                                None,
                                "warn",
                                format!("channel {from}->{to} backlog exceeds cap"),
                            );
                        }
                        return;
                    }
                }
            }
        };
        let env = Envelope { from, to, msg, tag };
        self.push_event(deliver_at, EventKind::Deliver { env });
    }

    fn execute_actions(&mut self, pid: ProcessId, actions: &[Action]) {
        let mut send_slot: u64 = 0;
        for action in actions {
            match action {
                Action::Send {
                    to,
                    msg,
                    processing_us,
                } => {
                    send_slot += 1;
                    let depart = self.now + processing_us + send_slot * self.send_overhead_us;
                    if self.trace_mode == TraceMode::Full {
                        self.record(Some(pid), "send", format!("{to} {}", msg.kind()));
                    }
                    self.schedule_send(pid, *to, msg.clone(), depart);
                }
                Action::ArmTimer { kind, deadline } => {
                    self.push_event(*deadline, EventKind::Timer { pid, kind: *kind });
                }
                Action::ProduceEvidence {
                    verifier,
                    challenge,
                } => {
                    let cheap = pid.host == verifier.host
                        || (self.engine_cfg.had_enabled
                            && self.registry.had_paired(pid.host, verifier.host));
                    let cost = self.engine_cfg.costs.evidence_cost_us(cheap);
                    match self.registry.generate_quote(pid, *challenge) {
                        Ok(quote) => {
                            send_slot += 1;
                            let depart = self.now + cost + send_slot * self.send_overhead_us;
                            self.schedule_send(
                                pid,
                                *verifier,
                                Message::AttestQuote { joiner: pid, quote },
                                depart,
                            );
                        }
                        Err(_) => {
                            self.record(Some(pid), "warn", "unregistered enclave".to_string());
                        }
                    }
                }
                Action::VerifyAttestation {
                    joiner,
                    quote,
                    challenge,
                } => {
                    let costs = self.engine_cfg.costs;
                    let had = self.engine_cfg.had_enabled;
                    let (outcome, wait_us, used_ias) = self.registry.evaluate_commission(
                        quote,
                        *joiner,
                        pid,
                        *challenge,
                        &costs,
                        had,
                        self.now,
                    );
                    if used_ias {
                        self.record(Some(pid), "mark", format!("ias_verify {joiner}"));
                    }
                    self.push_event(
                        self.now + wait_us,
                        EventKind::Verdict {
                            pid,
                            joiner: *joiner,
                            outcome,
                        },
                    );
                }
                Action::SealData => {
                    self.record(Some(pid), "seal", String::new());
                }
                Action::Halt { reason } => {
                    self.record(Some(pid), "halt", reason.to_string());
                }
                Action::ProvisionComplete { process } => {
                    self.record(Some(pid), "provisioned", process.to_string());
                }
                Action::MetricsMark { label } => {
                    self.record(Some(pid), "mark", label.clone());
                }
            }
        }
    }

    fn apply_fault(&mut self, fault: FaultSpec) {
        if let FaultSpec::Crash { pid } = &fault {
            if let Some(s) = self.states.get_mut(pid) {
                s.crash();
            }
            self.record(Some(*pid), "crash", String::new());
            return;
        }
        self.faults.push(ActiveFault {
            from: self.now,
            spec: fault,
        });
    }

    fn spawn_joiner(&mut self, pid: ProcessId, wrong_measurement: bool) {
        let m = if wrong_measurement {
            Measurement::of_code(b"ames application enclave v1-forged")
        } else {
            self.registry.expected_measurement()
        };
        self.registry.register_enclave(pid, m);
        if self.engine_cfg.had_enabled {
            self.pair_host_with_all(pid.host);
        }
        let contacts: Vec<ProcessId> = self
            .states
            .values()
            .filter(|s| s.is_operational())
            .map(|s| s.id())
            .collect();
        let (state, actions) =
            ProcessState::new_joiner(self.engine_cfg.clone(), pid, contacts, self.now);
        self.states.insert(pid, state);
        self.execute_actions(pid, &actions);
    }

    fn owner_shutdown(&mut self, attempts: u32) {
        match self.current_leader() {
            Some(leader) => {
                self.record(None, "mark", "owner_shutdown_request".to_string());
                self.schedule_send(
                    ProcessId::OWNER,
                    leader,
                    Message::ShutdownRequest,
                    self.now + self.send_overhead_us,
                );
            }
            None => {
                // No leader to talk to; the owner retries while anything
                // still runs.
                if attempts < 5_000 && self.states.values().any(|s| s.is_operational()) {
                    self.push_event(
                        self.now + 10_000,
                        EventKind::OwnerShutdown {
                            attempts: attempts + 1,
                        },
                    );
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Event loop.

    /// Executes every event scheduled at or before `t`, notifying the given
    /// observers after each one. The clock ends at exactly `t`.
    pub fn run_until_with(
        &mut self,
        t: VirtualTime,
        observers: &mut [&mut dyn Observer],
    ) -> Result<(), SimError> {
        loop {
            let due = matches!(self.queue.peek(), Some(Reverse(ev)) if ev.at <= t);
            if !due {
                break;
            }
            let Reverse(ev) = self.queue.pop().expect("peeked");
            self.now = self.now.max(ev.at);
            self.dispatch(ev, observers)?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    pub fn run_until(&mut self, t: VirtualTime) -> Result<(), SimError> {
        self.run_until_with(t, &mut [])
    }

    fn dispatch(
        &mut self,
        ev: Scheduled,
        observers: &mut [&mut dyn Observer],
    ) -> Result<(), SimError> {
        let seq = ev.seq;
        let mut actor: Option<ProcessId> = None;
        let mut kind: &'static str;
        let detail: String;
        let mut actions: Vec<Action> = Vec::new();
        match ev.kind {
            EventKind::Deliver { env } => {
                actor = Some(env.to);
                let from = env.from;
                let msg_kind = env.msg.kind();
                detail = format!("{from} {msg_kind}");
                if env.to == ProcessId::OWNER {
                    kind = "owner_notified";
                    self.record(None, kind, detail.clone());
                } else {
                    match self.states.get(&env.to) {
                        None => {
                            kind = "drop_unknown";
                            self.record(actor, kind, detail.clone());
                        }
                        Some(s) if s.role() == Role::Halted => {
                            kind = "drop_halted";
                            self.record(actor, kind, detail.clone());
                        }
                        Some(_) => {
                            let expected = self.msg_tag(env.from, env.to, &env.msg);
                            if env.tag != expected {
                                // Authenticity check failed: discarded with
                                // no state change at the receiver.
                                kind = "auth_reject";
                                self.record(actor, kind, detail.clone());
                            } else {
                                kind = "deliver";
                                let to = env.to;
                                let state = self.states.get_mut(&to).expect("present");
                                match state.step(Input::Deliver(env), self.now) {
                                    Ok(a) => actions = a,
                                    Err(source) => {
                                        return Err(SimError {
                                            at: self.now,
                                            seq,
                                            actor: to,
                                            source,
                                        })
                                    }
                                }
                                self.record(actor, kind, detail.clone());
                                self.execute_actions(to, &actions);
                            }
                        }
                    }
                }
            }
            EventKind::Timer { pid, kind: tk } => {
                actor = Some(pid);
                kind = "timer";
                detail = tk.to_string();
                if let Some(state) = self.states.get_mut(&pid) {
                    if state.role() != Role::Halted {
                        match state.step(Input::Timer(tk), self.now) {
                            Ok(a) => actions = a,
                            Err(source) => {
                                return Err(SimError {
                                    at: self.now,
                                    seq,
                                    actor: pid,
                                    source,
                                })
                            }
                        }
                    }
                }
                if !actions.is_empty() {
                    self.record(actor, kind, detail.clone());
                }
                self.execute_actions(pid, &actions);
            }
            EventKind::Verdict {
                pid,
                joiner,
                outcome,
            } => {
                actor = Some(pid);
                kind = "verdict";
                detail = format!(
                    "{joiner} {}",
                    if outcome.accepted() { "accept" } else { "reject" }
                );
                if let Some(state) = self.states.get_mut(&pid) {
                    if state.role() != Role::Halted {
                        match state.step(Input::AttestVerdict { joiner, outcome }, self.now) {
                            Ok(a) => actions = a,
                            Err(source) => {
                                return Err(SimError {
                                    at: self.now,
                                    seq,
                                    actor: pid,
                                    source,
                                })
                            }
                        }
                    }
                }
                self.record(actor, kind, detail.clone());
                self.execute_actions(pid, &actions);
            }
            EventKind::Fault(f) => {
                kind = "fault";
                detail = f.describe();
                self.record(None, kind, detail.clone());
                self.apply_fault(f);
            }
            EventKind::SpawnJoiner {
                pid,
                wrong_measurement,
            } => {
                actor = Some(pid);
                kind = "spawn";
                detail = "joiner".to_string();
                self.record(actor, kind, detail.clone());
                self.spawn_joiner(pid, wrong_measurement);
            }
            EventKind::OwnerShutdown { attempts } => {
                kind = "owner";
                detail = "shutdown".to_string();
                self.owner_shutdown(attempts);
            }
        }
        if !observers.is_empty() {
            let view = StepView {
                at: self.now,
                seq,
                actor,
                kind,
                detail: &detail,
                actions: &actions,
                states: &self.states,
                registry: &self.registry,
                links: LinkView {
                    faults: &self.faults,
                    profile: &self.profile,
                    delta_us: self.engine_cfg.timeouts.delta_us,
                },
            };
            for obs in observers.iter_mut() {
                obs.on_step(&view);
            }
        }
        Ok(())
    }
}

/// Deterministic in-flight corruption. Authenticated messages only need
/// their tag broken (done by the caller); handshake messages get their
/// security-relevant payload bytes flipped.
fn corrupt_in_flight(msg: &mut Message) {
    match msg {
        Message::AttestQuote { quote, .. } => {
            quote.signature ^= 1 << 7;
        }
        Message::AttestChallenge { nonce, .. } => {
            *nonce ^= 1 << 11;
        }
        Message::JoinRequest { joiner } => {
            joiner.id ^= 1 << 30;
        }
        _ => {}
    }
}

/// Builds the committed log and peer list of an n-member steady cluster led
/// by the first pid, and installs all members into the simulation.
pub fn install_steady_cluster(sim: &mut Simulation, member_pids: &[ProcessId]) {
    assert!(!member_pids.is_empty());
    let leader = member_pids[0];
    let mut log = ReplicatedLog::new();
    for p in &member_pids[1..] {
        log.append_command(crate::types::Term(1), crate::types::Command::Add(*p));
    }
    log.advance_commit(log.last_index());
    let peers = PeerList::from_members(member_pids.iter().copied());
    for p in member_pids {
        sim.add_assembled_member(*p, peers.clone(), log.clone(), leader);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Term, TimeoutConfig};

    fn pid(n: u32) -> ProcessId {
        ProcessId::new(n, HostId(n as u16))
    }

    fn sim(seed: u64, n: u32) -> Simulation {
        let cfg = EngineConfig::new(TimeoutConfig::from_millis(50, 150, 5, 10_000), 8, seed);
        let mut s = Simulation::new(cfg, LatencyProfile::local(), TraceMode::Full);
        let pids: Vec<ProcessId> = (1..=n).map(pid).collect();
        install_steady_cluster(&mut s, &pids);
        s
    }

    #[test]
    fn empty_queue_jumps_the_clock() {
        let cfg = EngineConfig::new(TimeoutConfig::from_millis(50, 150, 5, 10_000), 8, 1);
        let mut s = Simulation::new(cfg, LatencyProfile::local(), TraceMode::Full);
        s.run_until(5_000_000).unwrap();
        assert_eq!(s.now(), 5_000_000);
        assert!(s.trace().is_empty());
    }

    #[test]
    fn steady_cluster_stays_steady() {
        let mut s = sim(3, 5);
        s.run_until(2_000_000).unwrap();
        assert_eq!(s.operational().count(), 5);
        assert!(s.states().values().all(|st| st.term() == Term(1)));
        assert_eq!(s.current_leader(), Some(pid(1)));
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let build = || {
            let mut s = sim(99, 5);
            s.schedule_fault(400_000, FaultSpec::Crash { pid: pid(1) });
            s.run_until(3_000_000).unwrap();
            s.render_trace()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn local_delivery_arrives_at_base_latency_plus_serialization() {
        let mut s = sim(7, 2);
        // First leader tick at 10ms; its single heartbeat departs one send
        // slot later and lands base_us after that.
        let expect = 10_000 + DEFAULT_SEND_OVERHEAD_US + 130;
        s.run_until(expect).unwrap();
        let deliver = s
            .trace()
            .iter()
            .find(|r| r.kind == "deliver" && r.detail.starts_with("p1 heartbeat"))
            .expect("heartbeat delivered");
        assert_eq!(deliver.at, expect);
    }

    #[test]
    fn leader_crash_elects_a_new_leader() {
        let mut s = sim(11, 5);
        s.schedule_fault(500_000, FaultSpec::Crash { pid: pid(1) });
        s.run_until(6_000_000).unwrap();
        let leader = s.current_leader().expect("someone took over");
        assert_ne!(leader, pid(1));
        for st in s.operational() {
            assert!(!st.peer_list().contains(pid(1)), "{} still lists p1", st.id());
        }
    }

    #[test]
    fn infinite_link_delay_parks_messages_forever() {
        let mut s = sim(13, 3);
        s.inject(FaultSpec::LinkDelay {
            a: pid(1),
            b: pid(2),
            extra_us: None,
            until: None,
        });
        s.run_until(1_000_000).unwrap();
        let delivered_to_p2 = s
            .trace()
            .iter()
            .filter(|r| r.kind == "deliver" && r.actor == Some(pid(2)))
            .count();
        assert_eq!(delivered_to_p2, 0);
        assert!(s.undeliverable_count() > 0);
    }

    #[test]
    fn partition_window_postpones_delivery_past_its_end() {
        let mut s = sim(17, 2);
        s.inject(FaultSpec::Partition {
            group_a: vec![pid(1)],
            group_b: vec![pid(2)],
            until: Some(200_000),
        });
        s.run_until(400_000).unwrap();
        let first = s
            .trace()
            .iter()
            .find(|r| r.kind == "deliver" && r.actor == Some(pid(2)))
            .expect("delivered after heal");
        assert!(first.at >= 200_000);
    }

    #[test]
    fn tampered_messages_change_no_receiver_state() {
        let mut s = sim(19, 3);
        s.inject(FaultSpec::Tamper {
            spec: TamperSpec {
                kind: Some(MsgKind::Heartbeat),
            },
            until: None,
        });
        let before: Vec<(ProcessId, Term, u64)> = s
            .states()
            .values()
            .map(|st| (st.id(), st.term(), st.log().commit_index()))
            .collect();
        s.run_until(120_000).unwrap();
        let rejects = s.trace().iter().filter(|r| r.kind == "auth_reject").count();
        assert!(rejects > 0);
        let after: Vec<(ProcessId, Term, u64)> = s
            .states()
            .values()
            .map(|st| (st.id(), st.term(), st.log().commit_index()))
            .collect();
        assert_eq!(before, after);
    }
}
