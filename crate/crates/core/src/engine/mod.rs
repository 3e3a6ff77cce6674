//! The per-process membership protocol state machine.
//!
//! Each process runs one instance. A step consumes a timestamped input — a
//! delivered message, a timer expiry, or an attestation verdict — and emits
//! actions: sends, timer arms, seals, halts. The machine performs no I/O and
//! draws no entropy beyond its seeded stream, so identical input sequences
//! produce identical traces.

mod message;

pub use message::{Envelope, JoinVote, Message, MsgKind, SecretHandle};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attest::{AttestOutcome, LatencyModel, Quote};
use crate::types::{
    draw_timeout, log_dominates, majority_quorum, mix64, Command, Dominance, LogEntry, LogIndex,
    PeerList, ProcessId, ReplicatedLog, Term, TimeoutConfig, VirtualTime,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Leader,
    Follower,
    Candidate,
    /// Absorbing: no input ever transitions out of Halted.
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// Candidature timeout expired without winning or hearing a new leader.
    Suicide,
    /// Leader lost contact with a quorum for a full heartbeat window.
    Isolated,
    /// Applied its own committed expulsion.
    Expelled,
    /// Orderly application shutdown.
    Shutdown,
    /// Killed by the environment, not by the protocol.
    Crashed,
}

impl std::fmt::Display for HaltReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HaltReason::Suicide => "suicide",
            HaltReason::Isolated => "isolated",
            HaltReason::Expelled => "expelled",
            HaltReason::Shutdown => "shutdown",
            HaltReason::Crashed => "crashed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    /// Follower-side wait for the next heartbeat (its personal timeout).
    LeaderContact,
    /// Candidate-side wait before re-campaigning at a higher term.
    CandidateRetry,
    /// Hard deadline on an entire candidacy; expiry is suicide.
    Candidature,
    /// Leader heartbeat cadence.
    LeaderTick,
    /// Nonoperational joiner re-announcing itself.
    JoinRetry,
    /// Leader-side bound on one commissioning session.
    JoinSessionExpiry,
}

impl std::fmt::Display for TimerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TimerKind::LeaderContact => "leader_contact",
            TimerKind::CandidateRetry => "candidate_retry",
            TimerKind::Candidature => "candidature",
            TimerKind::LeaderTick => "leader_tick",
            TimerKind::JoinRetry => "join_retry",
            TimerKind::JoinSessionExpiry => "join_session_expiry",
        };
        f.write_str(s)
    }
}

/// One timestamped input to the state machine.
#[derive(Debug, Clone)]
pub enum Input {
    Deliver(Envelope),
    Timer(TimerKind),
    /// Result of an attestation the process requested via
    /// [`Action::VerifyAttestation`].
    AttestVerdict {
        joiner: ProcessId,
        outcome: AttestOutcome,
    },
}

/// Effects the simulator executes on the process's behalf.
#[derive(Debug, Clone)]
pub enum Action {
    Send {
        to: ProcessId,
        msg: Message,
        /// Local crypto/processing time charged before the message reaches
        /// the wire.
        processing_us: u64,
    },
    ArmTimer {
        kind: TimerKind,
        deadline: VirtualTime,
    },
    /// Produce attestation evidence bound to `challenge` and send it to
    /// `verifier`. Evidence is minted by the trusted side so the engine never
    /// holds signing keys.
    ProduceEvidence {
        verifier: ProcessId,
        challenge: u64,
    },
    /// Ask the attestation layer to verify a joiner's evidence; the verdict
    /// comes back as an input after the verification latency.
    VerifyAttestation {
        joiner: ProcessId,
        quote: Quote,
        challenge: u64,
    },
    /// Seal application data to persistent storage.
    SealData,
    Halt {
        reason: HaltReason,
    },
    /// A process became operational (bootstrap or received provisioning).
    ProvisionComplete {
        process: ProcessId,
    },
    /// Measurement hook for the harness; never read by the protocol.
    MetricsMark {
        label: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("committed entry {index} missing from the log (last {last})")]
    MissingCommitted { index: LogIndex, last: LogIndex },
}

/// Static per-process configuration, fixed at instantiation.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub timeouts: TimeoutConfig,
    pub costs: LatencyModel,
    pub sla_max: usize,
    pub seed: u64,
    pub had_enabled: bool,
    /// How a co-member answers membership queries in the two-process case;
    /// refusal is only useful for exercising the abort path.
    pub join_vote_approve: bool,
}

impl EngineConfig {
    pub fn new(timeouts: TimeoutConfig, sla_max: usize, seed: u64) -> Self {
        EngineConfig {
            timeouts,
            costs: LatencyModel::default(),
            sla_max,
            seed,
            had_enabled: false,
            join_vote_approve: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct QueuedVote {
    candidate: ProcessId,
    term: Term,
    last_log_index: LogIndex,
}

#[derive(Debug, Clone, Copy)]
struct VoteRecord {
    term: Term,
    candidate: ProcessId,
    last_log_index: LogIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JoinPhase {
    /// Challenge sent, waiting for evidence.
    Attesting,
    /// Evidence handed to the attestation layer, waiting for the verdict.
    Verifying,
    /// Two-process case: verdict accepted, waiting for the co-member's vote.
    AwaitingVote,
    /// Verdict (and vote) in hand but another membership entry is still in
    /// flight; append as soon as the window frees up.
    AwaitingWindow,
    /// Add entry appended at `entry_index`; provision once it commits.
    Replicating { entry_index: LogIndex },
}

/// Leader-side state of one commissioning. At most one session is active at a
/// time; later join requests queue behind it.
#[derive(Debug, Clone)]
struct JoinSession {
    joiner: ProcessId,
    case_n: usize,
    phase: JoinPhase,
    challenge: u64,
    vote: Option<bool>,
    deadline: VirtualTime,
}

/// Full protocol state of one process.
#[derive(Debug, Clone)]
pub struct ProcessState {
    id: ProcessId,
    config: EngineConfig,
    role: Role,
    term: Term,
    log: ReplicatedLog,
    peer_list: PeerList,
    has_secret: bool,
    secret: Option<SecretHandle>,
    sealed: bool,
    halt_reason: Option<HaltReason>,
    applied_index: LogIndex,
    my_timeout_us: u64,
    current_leader: Option<ProcessId>,

    // Follower side.
    leader_contact_deadline: Option<VirtualTime>,
    queued_vote: Option<QueuedVote>,
    voted_for: Option<VoteRecord>,
    /// Highest index at which this log verifiably matches the current
    /// leader's; resets whenever leader or term changes.
    match_claim: LogIndex,

    // Candidate side.
    candidature_deadline: Option<VirtualTime>,
    retry_deadline: Option<VirtualTime>,
    votes: BTreeSet<ProcessId>,
    deposed_leader: Option<ProcessId>,

    // Leader side.
    follower_deadlines: BTreeMap<ProcessId, VirtualTime>,
    match_index: BTreeMap<ProcessId, LogIndex>,
    acked_this_term: BTreeSet<ProcessId>,
    authority_acked: bool,
    next_tick: Option<VirtualTime>,
    quorum_loss_since: Option<VirtualTime>,
    session: Option<JoinSession>,
    join_queue: VecDeque<ProcessId>,
    expel_queue: VecDeque<ProcessId>,

    // Joiner side.
    join_retry_deadline: Option<VirtualTime>,
    contacts: Vec<ProcessId>,

    rng: ChaCha8Rng,
}

impl ProcessState {
    fn base(config: EngineConfig, id: ProcessId) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ u64::from(id.id)));
        let my_timeout_us = draw_timeout(config.seed, id, &config.timeouts);
        ProcessState {
            id,
            config,
            role: Role::Follower,
            term: Term(0),
            log: ReplicatedLog::new(),
            peer_list: PeerList::new(),
            has_secret: false,
            secret: None,
            sealed: false,
            halt_reason: None,
            applied_index: 0,
            my_timeout_us,
            current_leader: None,
            leader_contact_deadline: None,
            queued_vote: None,
            voted_for: None,
            match_claim: 0,
            candidature_deadline: None,
            retry_deadline: None,
            votes: BTreeSet::new(),
            deposed_leader: None,
            follower_deadlines: BTreeMap::new(),
            match_index: BTreeMap::new(),
            acked_this_term: BTreeSet::new(),
            authority_acked: false,
            next_tick: None,
            quorum_loss_since: None,
            session: None,
            join_queue: VecDeque::new(),
            expel_queue: VecDeque::new(),
            join_retry_deadline: None,
            contacts: Vec::new(),
            rng,
        }
    }

    /// First process of the application, provisioned directly by the owner
    /// after a successful bootstrap attestation. Leader of term 1 with itself
    /// as the entire membership.
    pub fn bootstrap_first(
        config: EngineConfig,
        id: ProcessId,
        owner_secret: SecretHandle,
        now: VirtualTime,
    ) -> (Self, Vec<Action>) {
        let mut s = Self::base(config, id);
        s.role = Role::Leader;
        s.term = Term(1);
        s.peer_list = PeerList::singleton(id);
        s.has_secret = true;
        s.secret = Some(owner_secret);
        s.current_leader = Some(id);
        s.voted_for = Some(VoteRecord {
            term: s.term,
            candidate: id,
            last_log_index: 0,
        });
        s.authority_acked = true;
        let tick = now + s.config.timeouts.leader_send_interval_us;
        s.next_tick = Some(tick);
        let actions = vec![
            Action::ProvisionComplete { process: id },
            Action::ArmTimer {
                kind: TimerKind::LeaderTick,
                deadline: tick,
            },
        ];
        (s, actions)
    }

    /// A freshly instantiated, nonoperational process. It only knows the
    /// contact points the environment gave it and keeps announcing itself
    /// until someone commissions it.
    pub fn new_joiner(
        config: EngineConfig,
        id: ProcessId,
        contacts: Vec<ProcessId>,
        now: VirtualTime,
    ) -> (Self, Vec<Action>) {
        let mut s = Self::base(config, id);
        s.contacts = contacts;
        let mut actions = Vec::new();
        s.announce_join(now, &mut actions);
        (s, actions)
    }

    /// Directly assembles an operational member of a steady cluster, used by
    /// experiment drivers to skip the bootstrap prelude. `leader` decides the
    /// role; the log must already be consistent across the assembled cluster.
    pub fn assemble_member(
        config: EngineConfig,
        id: ProcessId,
        peers: PeerList,
        log: ReplicatedLog,
        leader: ProcessId,
        secret: SecretHandle,
        now: VirtualTime,
    ) -> (Self, Vec<Action>) {
        let mut s = Self::base(config, id);
        s.term = Term(1);
        s.peer_list = peers;
        s.applied_index = log.commit_index();
        s.log = log;
        s.has_secret = true;
        s.secret = Some(secret);
        s.current_leader = Some(leader);
        let mut actions = Vec::new();
        if id == leader {
            s.role = Role::Leader;
            s.voted_for = Some(VoteRecord {
                term: s.term,
                candidate: id,
                last_log_index: s.log.last_index(),
            });
            s.authority_acked = true;
            for f in s.peer_list.others(id).collect::<Vec<_>>() {
                let t = draw_timeout(s.config.seed, f, &s.config.timeouts);
                s.follower_deadlines.insert(f, now + t);
                s.match_index.insert(f, s.log.last_index());
            }
            let tick = now + s.config.timeouts.leader_send_interval_us;
            s.next_tick = Some(tick);
            actions.push(Action::ArmTimer {
                kind: TimerKind::LeaderTick,
                deadline: tick,
            });
        } else {
            s.role = Role::Follower;
            s.match_claim = s.log.last_index();
            let dl = now + s.my_timeout_us;
            s.leader_contact_deadline = Some(dl);
            actions.push(Action::ArmTimer {
                kind: TimerKind::LeaderContact,
                deadline: dl,
            });
        }
        (s, actions)
    }

    // ------------------------------------------------------------------
    // Accessors.

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> Term {
        self.term
    }

    pub fn log(&self) -> &ReplicatedLog {
        &self.log
    }

    pub fn peer_list(&self) -> &PeerList {
        &self.peer_list
    }

    pub fn has_secret(&self) -> bool {
        self.has_secret
    }

    /// Operational: provisioned with the secret and still running.
    pub fn is_operational(&self) -> bool {
        self.has_secret && self.role != Role::Halted
    }

    pub fn halt_reason(&self) -> Option<HaltReason> {
        self.halt_reason
    }

    pub fn sealed(&self) -> bool {
        self.sealed
    }

    pub fn my_timeout_us(&self) -> u64 {
        self.my_timeout_us
    }

    pub fn current_leader(&self) -> Option<ProcessId> {
        self.current_leader
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn shutting_down(&self) -> bool {
        self.log
            .entries()
            .iter()
            .any(|e| e.command == Command::PreShutdown)
    }

    /// Kill switch used by the fault injector; not a protocol transition.
    pub fn crash(&mut self) {
        if self.role != Role::Halted {
            self.role = Role::Halted;
            self.halt_reason = Some(HaltReason::Crashed);
        }
    }

    // ------------------------------------------------------------------
    // Step dispatch.

    pub fn step(&mut self, input: Input, now: VirtualTime) -> Result<Vec<Action>, EngineError> {
        if self.role == Role::Halted {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        match input {
            Input::Deliver(env) => self.on_message(env, now, &mut out)?,
            Input::Timer(kind) => self.on_timer(kind, now, &mut out)?,
            Input::AttestVerdict { joiner, outcome } => {
                self.on_attest_verdict(joiner, outcome, now, &mut out)?
            }
        }
        debug_assert!(self.log.commit_index() >= self.applied_index);
        Ok(out)
    }

    fn on_message(
        &mut self,
        env: Envelope,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        let from = env.from;
        match env.msg {
            Message::Heartbeat {
                leader,
                term,
                commit_index,
                prev_index,
                prev_term,
                entries,
                join_query,
            } => self.on_heartbeat(
                leader,
                term,
                commit_index,
                prev_index,
                prev_term,
                entries,
                join_query,
                now,
                out,
            ),
            Message::HeartbeatAck {
                follower,
                term,
                acked_index,
                join_vote,
            } => self.on_heartbeat_ack(follower, term, acked_index, join_vote, now, out),
            Message::RequestVote {
                candidate,
                term,
                last_log_index,
            } => {
                self.on_request_vote(candidate, term, last_log_index, now, out);
                Ok(())
            }
            Message::VoteGrant { voter, term } => {
                self.on_vote_grant(voter, term, now, out);
                Ok(())
            }
            Message::CandidateInfo {
                dominating,
                last_log_index,
            } => {
                self.on_candidate_info(from, dominating, last_log_index, now, out);
                Ok(())
            }
            Message::FetchEntries {
                follower,
                from_index,
            } => {
                self.on_fetch_entries(follower, from_index, out);
                Ok(())
            }
            Message::JoinRequest { joiner } => {
                self.on_join_request(joiner, now, out);
                Ok(())
            }
            Message::AttestChallenge { verifier, nonce } => {
                self.on_attest_challenge(verifier, nonce, out);
                Ok(())
            }
            Message::AttestQuote { joiner, quote } => {
                self.on_attest_quote(joiner, quote, out);
                Ok(())
            }
            Message::Provision {
                leader,
                term,
                secret,
                peer_list,
                assigned_timeout_us,
                log,
            } => {
                self.on_provision(leader, term, secret, peer_list, assigned_timeout_us, log, now, out);
                Ok(())
            }
            Message::ShutdownRequest => self.on_shutdown_request(from, now, out),
            Message::CommitShutdown { .. } => {
                self.on_commit_shutdown(from, out);
                Ok(())
            }
        }
    }

    fn on_timer(
        &mut self,
        kind: TimerKind,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        let due = match kind {
            TimerKind::LeaderContact => self.leader_contact_deadline,
            TimerKind::CandidateRetry => self.retry_deadline,
            TimerKind::Candidature => self.candidature_deadline,
            TimerKind::LeaderTick => self.next_tick,
            TimerKind::JoinRetry => self.join_retry_deadline,
            TimerKind::JoinSessionExpiry => self.session.as_ref().map(|s| s.deadline),
        };
        // Superseded or cancelled timers fire harmlessly.
        let Some(deadline) = due else {
            return Ok(());
        };
        if now < deadline {
            return Ok(());
        }
        match kind {
            TimerKind::LeaderContact => {
                if self.role == Role::Follower {
                    self.on_heartbeat_timeout(now, out);
                }
                Ok(())
            }
            TimerKind::CandidateRetry => {
                if self.role == Role::Candidate {
                    self.become_candidate(now, out);
                }
                Ok(())
            }
            TimerKind::Candidature => {
                if self.role == Role::Candidate {
                    self.halt(HaltReason::Suicide, out);
                }
                Ok(())
            }
            TimerKind::LeaderTick => self.leader_tick(now, out),
            TimerKind::JoinRetry => {
                if !self.has_secret {
                    self.announce_join(now, out);
                }
                Ok(())
            }
            TimerKind::JoinSessionExpiry => {
                if self.role == Role::Leader {
                    if let Some(s) = &self.session {
                        if !matches!(s.phase, JoinPhase::Replicating { .. }) {
                            out.push(Action::MetricsMark {
                                label: format!("join_session_expired {}", s.joiner),
                            });
                            self.session = None;
                            self.pump_membership_queue(now, out);
                        }
                    }
                }
                Ok(())
            }
        }
    }

    // ------------------------------------------------------------------
    // Heartbeats and replication.

    #[allow(clippy::too_many_arguments)]
    fn on_heartbeat(
        &mut self,
        leader: ProcessId,
        term: Term,
        commit_index: LogIndex,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        join_query: Option<ProcessId>,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        // A heartbeat from a process outside the peer list is discarded with
        // no state change, which is what excommunicates an expelled leader.
        if !self.peer_list.contains(leader) {
            return Ok(());
        }
        if term < self.term {
            return Ok(());
        }
        match self.role {
            Role::Leader => {
                // Equal terms would mean two leaders in one term; a strictly
                // newer leader deposes us.
                if term == self.term {
                    debug_assert!(leader == self.id, "two leaders in one term");
                    return Ok(());
                }
                self.become_follower(term);
            }
            Role::Candidate => {
                // A leader at least as recent as our candidacy ends it.
                self.become_follower(term);
            }
            Role::Follower => {}
            Role::Halted => unreachable!("step gates on Halted"),
        }
        if term > self.term || self.current_leader != Some(leader) {
            self.match_claim = 0;
        }
        self.term = term;
        self.current_leader = Some(leader);
        // Fresh contact: push out our timeout and drop any queued candidacy.
        self.queued_vote = None;
        let dl = now + self.my_timeout_us;
        self.leader_contact_deadline = Some(dl);
        out.push(Action::ArmTimer {
            kind: TimerKind::LeaderContact,
            deadline: dl,
        });

        match self.integrate_entries(prev_index, prev_term, entries, out) {
            Integration::Matched(m) => {
                self.match_claim = self.match_claim.max(m);
            }
            Integration::Gap => {
                out.push(Action::Send {
                    to: leader,
                    msg: Message::FetchEntries {
                        follower: self.id,
                        from_index: self.log.last_index() + 1,
                    },
                    processing_us: 0,
                });
            }
            Integration::CommittedConflict => {
                // Refused: our committed prefix wins. The ack below simply
                // keeps claiming the old match point.
            }
        }

        if self.log.advance_commit(commit_index.min(self.log.last_index())) {
            self.apply_committed(now, out)?;
            if self.role == Role::Halted {
                return Ok(());
            }
        }

        let join_vote = join_query.map(|joiner| JoinVote {
            joiner,
            approve: self.config.join_vote_approve && !self.shutting_down(),
        });
        out.push(Action::Send {
            to: leader,
            msg: Message::HeartbeatAck {
                follower: self.id,
                term,
                acked_index: self.match_claim,
                join_vote,
            },
            processing_us: 0,
        });
        Ok(())
    }

    fn on_heartbeat_ack(
        &mut self,
        follower: ProcessId,
        term: Term,
        acked_index: LogIndex,
        join_vote: Option<JoinVote>,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        if self.role != Role::Leader || term != self.term {
            return Ok(());
        }
        if !self.peer_list.contains(follower) {
            return Ok(());
        }
        let m = self.match_index.entry(follower).or_insert(0);
        *m = (*m).max(acked_index);
        // Only followers not already slated for expulsion get their lease
        // renewed; a suspicion, once raised, stands.
        if self.follower_deadlines.contains_key(&follower) {
            let t = draw_timeout(self.config.seed, follower, &self.config.timeouts);
            self.follower_deadlines.insert(follower, now + t);
        }
        self.acked_this_term.insert(follower);
        if !self.authority_acked {
            let quorum = majority_quorum(self.peer_list.len()).unwrap_or(usize::MAX);
            if 1 + self.acked_this_term.len() >= quorum {
                self.authority_acked = true;
                out.push(Action::MetricsMark {
                    label: "authority_acked".to_string(),
                });
            }
        }
        if let Some(vote) = join_vote {
            self.on_join_vote(vote, now, out);
        }
        self.try_advance_commit(now, out)?;
        if self.role != Role::Halted {
            self.update_quorum_health(now);
        }
        Ok(())
    }

    /// Leader-side commit rule: an entry of the current term commits once it
    /// is replicated on a majority of the membership (counting the leader);
    /// expulsions count their majority over the membership excluding the
    /// suspect. Committing an entry commits everything before it.
    fn try_advance_commit(
        &mut self,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        let n = self.peer_list.len();
        let mut target = self.log.commit_index();
        let mut idx = target + 1;
        while idx <= self.log.last_index() {
            let entry = *self.log.get(idx).expect("contiguous log");
            if entry.term == self.term {
                let (threshold, excluded) = match entry.command {
                    Command::Expel(suspect) => {
                        (majority_quorum(n.saturating_sub(1)).unwrap_or(1), Some(suspect))
                    }
                    _ => (majority_quorum(n).unwrap_or(usize::MAX), None),
                };
                let mut replicas = 1; // the leader itself
                for (p, m) in &self.match_index {
                    if Some(*p) == excluded || !self.peer_list.contains(*p) {
                        continue;
                    }
                    if *m >= idx {
                        replicas += 1;
                    }
                }
                if replicas >= threshold {
                    target = idx;
                } else {
                    break;
                }
            }
            idx += 1;
        }
        if self.log.advance_commit(target) {
            self.apply_committed(now, out)?;
            if self.role == Role::Halted {
                return Ok(());
            }
            self.on_commit_progress(now, out);
        }
        Ok(())
    }

    /// Applies every newly committed entry, in order.
    fn apply_committed(
        &mut self,
        _now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        while self.applied_index < self.log.commit_index() {
            let index = self.applied_index + 1;
            let Some(entry) = self.log.get(index).copied() else {
                return Err(EngineError::MissingCommitted {
                    index,
                    last: self.log.last_index(),
                });
            };
            self.applied_index = index;
            match entry.command {
                Command::Add(p) => {
                    self.peer_list.insert(p);
                }
                Command::Expel(p) => {
                    self.peer_list.remove(p);
                    self.follower_deadlines.remove(&p);
                    self.match_index.remove(&p);
                    self.acked_this_term.remove(&p);
                    if self.role == Role::Leader {
                        out.push(Action::MetricsMark {
                            label: format!("expel_committed {p}"),
                        });
                    }
                    if p == self.id {
                        // Our own committed excommunication: fulfill it now
                        // rather than waiting out the candidature clock.
                        self.halt(HaltReason::Expelled, out);
                        return Ok(());
                    }
                }
                Command::PreShutdown => {
                    self.seal_once(out);
                    if self.role == Role::Leader {
                        for p in self.peer_list.others(self.id).collect::<Vec<_>>() {
                            out.push(Action::Send {
                                to: p,
                                msg: Message::CommitShutdown { term: self.term },
                                processing_us: 0,
                            });
                        }
                        out.push(Action::Send {
                            to: ProcessId::OWNER,
                            msg: Message::CommitShutdown { term: self.term },
                            processing_us: 0,
                        });
                        out.push(Action::MetricsMark {
                            label: "shutdown_committed".to_string(),
                        });
                        self.halt(HaltReason::Shutdown, out);
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    }

    fn seal_once(&mut self, out: &mut Vec<Action>) {
        if !self.sealed {
            self.sealed = true;
            out.push(Action::SealData);
        }
    }

    fn halt(&mut self, reason: HaltReason, out: &mut Vec<Action>) {
        debug_assert!(self.role != Role::Halted, "halt is emitted at most once");
        self.role = Role::Halted;
        self.halt_reason = Some(reason);
        self.leader_contact_deadline = None;
        self.retry_deadline = None;
        self.candidature_deadline = None;
        self.next_tick = None;
        self.join_retry_deadline = None;
        out.push(Action::Halt { reason });
    }

    /// Folds a replication batch into the local log. `Matched(m)` means the
    /// local log now verifiably equals the leader's up to `m`.
    fn integrate_entries(
        &mut self,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        out: &mut Vec<Action>,
    ) -> Integration {
        if prev_index > self.log.last_index() {
            return Integration::Gap;
        }
        if prev_index > 0 {
            let local = self.log.get(prev_index).expect("within last_index");
            if local.term != prev_term {
                if prev_index <= self.log.commit_index() {
                    return Integration::CommittedConflict;
                }
                self.log.truncate_from(prev_index);
                return Integration::Gap;
            }
        }
        debug_assert!(
            entries.first().map_or(true, |e| e.index == prev_index + 1),
            "replication batches are contiguous after the anchor"
        );
        for entry in entries.iter() {
            if entry.index <= self.log.last_index() {
                let local = self.log.get(entry.index).expect("within last_index");
                if local.term == entry.term {
                    continue; // already replicated
                }
                if entry.index <= self.log.commit_index() {
                    // A leader rewriting our committed prefix is the known
                    // hazard of index-only candidate comparison; we keep the
                    // committed entry and simply never acknowledge the
                    // conflicting suffix.
                    return Integration::CommittedConflict;
                }
                self.log.truncate_from(entry.index);
            }
            debug_assert_eq!(entry.index, self.log.last_index() + 1);
            self.log.append_entry(*entry);
            if entry.command == Command::PreShutdown {
                // Upcoming shutdown: persist application data as soon as the
                // order is seen, not only at commit.
                self.seal_once(out);
            }
        }
        Integration::Matched(prev_index + entries.len() as LogIndex)
    }

    /// Builds the heartbeat for one follower from the leader's view of its
    /// replication progress.
    fn heartbeat_for(&self, follower: ProcessId, from_index: Option<LogIndex>) -> Message {
        let matched = from_index
            .map(|i| i.saturating_sub(1))
            .unwrap_or_else(|| self.match_index.get(&follower).copied().unwrap_or(0))
            .min(self.log.last_index());
        let prev_term = self.log.get(matched).map(|e| e.term).unwrap_or(Term(0));
        let entries = self.log.suffix_from(matched + 1).to_vec();
        let join_query = match &self.session {
            Some(s) if s.case_n == 2 && s.vote.is_none() => Some(s.joiner),
            _ => None,
        };
        Message::Heartbeat {
            leader: self.id,
            term: self.term,
            commit_index: self.log.commit_index(),
            prev_index: matched,
            prev_term,
            entries,
            join_query,
        }
    }

    fn broadcast_heartbeats(&mut self, out: &mut Vec<Action>) {
        for f in self.peer_list.others(self.id).collect::<Vec<_>>() {
            let msg = self.heartbeat_for(f, None);
            out.push(Action::Send {
                to: f,
                msg,
                processing_us: 0,
            });
        }
    }

    fn on_fetch_entries(&mut self, follower: ProcessId, from_index: LogIndex, out: &mut Vec<Action>) {
        if self.role != Role::Leader || !self.peer_list.contains(follower) {
            return;
        }
        let from = from_index.clamp(1, self.log.last_index() + 1);
        let msg = self.heartbeat_for(follower, Some(from));
        out.push(Action::Send {
            to: follower,
            msg,
            processing_us: 0,
        });
    }

    fn leader_tick(&mut self, now: VirtualTime, out: &mut Vec<Action>) -> Result<(), EngineError> {
        if self.role != Role::Leader {
            return Ok(());
        }
        // Followers that stayed silent past their personal timeout are
        // suspected of having halted and queued for expulsion.
        let expired: Vec<ProcessId> = self
            .follower_deadlines
            .iter()
            .filter(|(_, dl)| **dl <= now)
            .map(|(p, _)| *p)
            .collect();
        for p in expired {
            self.follower_deadlines.remove(&p);
            if !self.expel_queue.contains(&p) {
                self.expel_queue.push_back(p);
            }
        }
        self.pump_membership_queue(now, out);
        if self.role == Role::Halted {
            return Ok(());
        }
        self.try_advance_commit(now, out)?;
        if self.role == Role::Halted {
            return Ok(());
        }
        self.broadcast_heartbeats(out);
        self.update_quorum_health(now);
        if let Some(since) = self.quorum_loss_since {
            if now.saturating_sub(since) >= self.config.timeouts.heartbeat_max_us {
                // Cannot reach a quorum of our own membership: we are the
                // isolated one. Halt rather than rule over a minority.
                self.halt(HaltReason::Isolated, out);
                return Ok(());
            }
        }
        let tick = now + self.config.timeouts.leader_send_interval_us;
        self.next_tick = Some(tick);
        out.push(Action::ArmTimer {
            kind: TimerKind::LeaderTick,
            deadline: tick,
        });
        Ok(())
    }

    fn update_quorum_health(&mut self, now: VirtualTime) {
        let quorum = majority_quorum(self.peer_list.len()).unwrap_or(1);
        let fresh = self
            .follower_deadlines
            .values()
            .filter(|dl| **dl > now)
            .count();
        if 1 + fresh >= quorum {
            self.quorum_loss_since = None;
        } else if self.quorum_loss_since.is_none() {
            self.quorum_loss_since = Some(now);
        }
    }

    // ------------------------------------------------------------------
    // Elections.

    fn on_heartbeat_timeout(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        // Act on a queued candidacy first: grant when the candidate's log is
        // at least as up to date as ours and its term is new to us; otherwise
        // discard it and campaign ourselves.
        if let Some(q) = self.queued_vote.take() {
            let fresh_term =
                q.term >= self.term && self.voted_for.map_or(true, |v| v.term < q.term);
            if fresh_term && q.last_log_index >= self.log.last_index() {
                self.grant_vote(q.candidate, q.term, q.last_log_index, now, out);
                return;
            }
        }
        self.become_candidate(now, out);
    }

    fn grant_vote(
        &mut self,
        candidate: ProcessId,
        term: Term,
        candidate_last_index: LogIndex,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) {
        self.term = self.term.max(term);
        self.voted_for = Some(VoteRecord {
            term,
            candidate,
            last_log_index: candidate_last_index,
        });
        out.push(Action::Send {
            to: candidate,
            msg: Message::VoteGrant {
                voter: self.id,
                term,
            },
            processing_us: 0,
        });
        // Wait one more personal timeout for the winner to show itself.
        let dl = now + self.my_timeout_us;
        self.leader_contact_deadline = Some(dl);
        out.push(Action::ArmTimer {
            kind: TimerKind::LeaderContact,
            deadline: dl,
        });
    }

    fn become_candidate(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        self.term = self.term.next();
        self.role = Role::Candidate;
        if self.candidature_deadline.is_none() {
            // Anchored once per candidacy spell; retries never extend it.
            self.deposed_leader = self.current_leader;
            let dl = now + self.config.timeouts.candidature_timeout_us();
            self.candidature_deadline = Some(dl);
            out.push(Action::ArmTimer {
                kind: TimerKind::Candidature,
                deadline: dl,
            });
        }
        self.voted_for = Some(VoteRecord {
            term: self.term,
            candidate: self.id,
            last_log_index: self.log.last_index(),
        });
        self.votes.clear();
        self.votes.insert(self.id);
        self.queued_vote = None;
        self.leader_contact_deadline = None;
        for p in self.peer_list.others(self.id).collect::<Vec<_>>() {
            out.push(Action::Send {
                to: p,
                msg: Message::RequestVote {
                    candidate: self.id,
                    term: self.term,
                    last_log_index: self.log.last_index(),
                },
                processing_us: 0,
            });
        }
        let retry = now + self.my_timeout_us;
        self.retry_deadline = Some(retry);
        out.push(Action::ArmTimer {
            kind: TimerKind::CandidateRetry,
            deadline: retry,
        });
        // A lone survivor can win immediately.
        if self.votes.len() >= majority_quorum(self.peer_list.len()).unwrap_or(usize::MAX) {
            self.become_leader(now, out);
        }
    }

    fn on_request_vote(
        &mut self,
        candidate: ProcessId,
        term: Term,
        last_log_index: LogIndex,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) {
        if !self.peer_list.contains(candidate) {
            return;
        }
        match self.role {
            Role::Leader => {
                // An active leader asserts itself through heartbeats; vote
                // solicitations do not move it.
            }
            Role::Follower => {
                if let Some(v) = self.voted_for {
                    if v.term >= term {
                        // Already committed to a candidacy at least this
                        // recent; point at it unless the newcomer strictly
                        // dominates it (in which case we stay silent — the
                        // vote is spent either way).
                        if log_dominates(last_log_index, v.last_log_index) != Dominance::First {
                            out.push(Action::Send {
                                to: candidate,
                                msg: Message::CandidateInfo {
                                    dominating: v.candidate,
                                    last_log_index: v.last_log_index,
                                },
                                processing_us: 0,
                            });
                        }
                        return;
                    }
                }
                // Leader contact still fresh: queue at most one candidacy,
                // keeping the dominating one on a clash.
                match self.queued_vote {
                    None => {
                        self.queued_vote = Some(QueuedVote {
                            candidate,
                            term,
                            last_log_index,
                        });
                    }
                    Some(q) if q.candidate == candidate => {
                        self.queued_vote = Some(QueuedVote {
                            candidate,
                            term: q.term.max(term),
                            last_log_index,
                        });
                    }
                    Some(q) => match log_dominates(last_log_index, q.last_log_index) {
                        Dominance::First => {
                            out.push(Action::Send {
                                to: q.candidate,
                                msg: Message::CandidateInfo {
                                    dominating: candidate,
                                    last_log_index,
                                },
                                processing_us: 0,
                            });
                            self.queued_vote = Some(QueuedVote {
                                candidate,
                                term,
                                last_log_index,
                            });
                        }
                        _ => {
                            // Tie favors the incumbent claim.
                            out.push(Action::Send {
                                to: candidate,
                                msg: Message::CandidateInfo {
                                    dominating: q.candidate,
                                    last_log_index: q.last_log_index,
                                },
                                processing_us: 0,
                            });
                        }
                    },
                }
            }
            Role::Candidate => {
                if term > self.term && last_log_index >= self.log.last_index() {
                    // A strictly newer election era whose candidate is at
                    // least as up to date takes our vote; standing on a stale
                    // candidacy would deadlock the election among peers with
                    // equal logs.
                    self.become_follower(term);
                    self.grant_vote(candidate, term, last_log_index, now, out);
                } else if log_dominates(last_log_index, self.log.last_index()) == Dominance::First {
                    // Outweighed: hold this candidacy and wait to be
                    // contacted by the dominating candidate.
                    let retry = now + self.my_timeout_us;
                    self.retry_deadline = Some(retry);
                    out.push(Action::ArmTimer {
                        kind: TimerKind::CandidateRetry,
                        deadline: retry,
                    });
                } else {
                    out.push(Action::Send {
                        to: candidate,
                        msg: Message::CandidateInfo {
                            dominating: self.id,
                            last_log_index: self.log.last_index(),
                        },
                        processing_us: 0,
                    });
                }
            }
            Role::Halted => unreachable!("step gates on Halted"),
        }
    }

    fn on_vote_grant(
        &mut self,
        voter: ProcessId,
        term: Term,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) {
        if self.role != Role::Candidate || term != self.term {
            return; // stale grants from earlier election rounds
        }
        if !self.peer_list.contains(voter) {
            return;
        }
        self.votes.insert(voter);
        if self.votes.len() >= majority_quorum(self.peer_list.len()).unwrap_or(usize::MAX) {
            self.become_leader(now, out);
        }
    }

    fn on_candidate_info(
        &mut self,
        from: ProcessId,
        _dominating: ProcessId,
        last_log_index: LogIndex,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) {
        if self.role != Role::Candidate || !self.peer_list.contains(from) {
            return;
        }
        if log_dominates(last_log_index, self.log.last_index()) == Dominance::First {
            // Someone better-placed is campaigning; give them a full timeout
            // to pronounce their leadership before we retry.
            let retry = now + self.my_timeout_us;
            self.retry_deadline = Some(retry);
            out.push(Action::ArmTimer {
                kind: TimerKind::CandidateRetry,
                deadline: retry,
            });
        }
    }

    fn become_follower(&mut self, term: Term) {
        debug_assert!(term >= self.term);
        if term > self.term {
            self.match_claim = 0;
        }
        self.term = term;
        self.role = Role::Follower;
        self.candidature_deadline = None;
        self.retry_deadline = None;
        self.votes.clear();
        self.deposed_leader = None;
        // Leader-side machinery, if any, is surrendered.
        self.follower_deadlines.clear();
        self.match_index.clear();
        self.acked_this_term.clear();
        self.next_tick = None;
        self.quorum_loss_since = None;
        self.session = None;
        self.join_queue.clear();
        self.expel_queue.clear();
    }

    fn become_leader(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        self.role = Role::Leader;
        let old_leader = self.deposed_leader.take();
        self.current_leader = Some(self.id);
        self.candidature_deadline = None;
        self.retry_deadline = None;
        self.leader_contact_deadline = None;
        self.queued_vote = None;
        self.votes.clear();
        self.authority_acked = false;
        self.acked_this_term.clear();
        self.match_index.clear();
        self.follower_deadlines.clear();
        self.quorum_loss_since = None;
        for f in self.peer_list.others(self.id).collect::<Vec<_>>() {
            let t = draw_timeout(self.config.seed, f, &self.config.timeouts);
            self.follower_deadlines.insert(f, now + t);
            self.match_index.insert(f, 0);
        }
        out.push(Action::MetricsMark {
            label: "leader_elected".to_string(),
        });
        // First order of business: drive the old leader out of the
        // membership through the ordinary expulsion pipeline.
        if let Some(old) = old_leader {
            if old != self.id && self.peer_list.contains(old) && !self.expel_queue.contains(&old) {
                self.expel_queue.push_front(old);
            }
        }
        self.pump_membership_queue(now, out);
        if self.role == Role::Halted {
            return;
        }
        self.broadcast_heartbeats(out);
        let tick = now + self.config.timeouts.leader_send_interval_us;
        self.next_tick = Some(tick);
        out.push(Action::ArmTimer {
            kind: TimerKind::LeaderTick,
            deadline: tick,
        });
    }

    // ------------------------------------------------------------------
    // Membership changes: one at a time.

    /// True while an entry of the current term is still awaiting commit.
    /// Older uncommitted entries never block: only a fresh current-term entry
    /// can commit them.
    fn entry_in_flight(&self) -> bool {
        let last = self.log.last_index();
        last > self.log.commit_index()
            && self.log.get(last).map(|e| e.term) == Some(self.term)
    }

    /// Opens the next queued membership change if the single-change window is
    /// free: expulsions first, then commissionings.
    fn pump_membership_queue(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        if self.role != Role::Leader {
            return;
        }
        while !self.entry_in_flight() {
            if let Some(suspect) = self.expel_queue.pop_front() {
                self.start_expel(suspect, now, out);
                continue;
            }
            break;
        }
        if self.shutting_down() {
            self.join_queue.clear();
            return;
        }
        // Resume a session that was waiting for the window.
        if let Some(s) = &self.session {
            if s.phase == JoinPhase::AwaitingWindow && !self.entry_in_flight() {
                self.append_add_for_session(now, out);
            }
            return;
        }
        if !self.entry_in_flight() {
            if let Some(joiner) = self.join_queue.pop_front() {
                self.open_join_session(joiner, now, out);
            }
        }
    }

    /// Appends and replicates the expulsion of `suspect`.
    fn start_expel(&mut self, suspect: ProcessId, now: VirtualTime, out: &mut Vec<Action>) {
        if self.role != Role::Leader || !self.peer_list.contains(suspect) || suspect == self.id {
            return;
        }
        // Already on the books?
        let dup = self
            .log
            .suffix_from(self.log.commit_index() + 1)
            .iter()
            .any(|e| e.command == Command::Expel(suspect));
        if dup {
            return;
        }
        self.log.append_command(self.term, Command::Expel(suspect));
        self.follower_deadlines.remove(&suspect);
        // A two-process cluster commits an expulsion alone.
        let _ = self.try_advance_commit(now, out);
        if self.role == Role::Halted {
            return;
        }
        self.broadcast_heartbeats(out);
    }

    fn on_commit_progress(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        if self.role != Role::Leader {
            return;
        }
        // Provision a joiner whose Add just committed.
        if let Some(s) = &self.session {
            if let JoinPhase::Replicating { entry_index } = s.phase {
                if self.log.commit_index() >= entry_index {
                    let joiner = s.joiner;
                    self.finish_provision(joiner, now, out);
                }
            }
        }
        self.pump_membership_queue(now, out);
    }

    fn finish_provision(&mut self, joiner: ProcessId, now: VirtualTime, out: &mut Vec<Action>) {
        let assigned = draw_timeout(self.config.seed, joiner, &self.config.timeouts);
        let secret = self.secret.expect("leaders are operational");
        out.push(Action::Send {
            to: joiner,
            msg: Message::Provision {
                leader: self.id,
                term: self.term,
                secret,
                peer_list: self.peer_list.clone(),
                assigned_timeout_us: assigned,
                log: self.log.clone(),
            },
            processing_us: self.config.costs.symmetric_us,
        });
        out.push(Action::MetricsMark {
            label: format!("provision_sent {joiner}"),
        });
        self.follower_deadlines.insert(joiner, now + assigned);
        self.match_index.insert(joiner, self.log.last_index());
        self.session = None;
    }

    fn open_join_session(&mut self, joiner: ProcessId, now: VirtualTime, out: &mut Vec<Action>) {
        let challenge = self.rng.gen::<u64>();
        let deadline = now + self.config.timeouts.candidature_timeout_us();
        self.session = Some(JoinSession {
            joiner,
            case_n: self.peer_list.len(),
            phase: JoinPhase::Attesting,
            challenge,
            vote: None,
            deadline,
        });
        out.push(Action::ArmTimer {
            kind: TimerKind::JoinSessionExpiry,
            deadline,
        });
        out.push(Action::Send {
            to: joiner,
            msg: Message::AttestChallenge {
                verifier: self.id,
                nonce: challenge,
            },
            processing_us: 0,
        });
    }

    fn on_join_request(&mut self, joiner: ProcessId, now: VirtualTime, out: &mut Vec<Action>) {
        if self.role != Role::Leader || self.peer_list.contains(joiner) || self.shutting_down() {
            return;
        }
        if self.peer_list.len() >= self.config.sla_max {
            // Commission quota exhausted; the joiner never becomes
            // operational.
            out.push(Action::MetricsMark {
                label: format!("join_rejected_sla {joiner}"),
            });
            return;
        }
        let engaged = self.session.as_ref().map(|s| s.joiner) == Some(joiner)
            || self.join_queue.contains(&joiner);
        if engaged {
            return;
        }
        if self.session.is_none() && !self.entry_in_flight() {
            self.open_join_session(joiner, now, out);
        } else {
            self.join_queue.push_back(joiner);
        }
    }

    fn on_attest_challenge(&mut self, verifier: ProcessId, nonce: u64, out: &mut Vec<Action>) {
        if self.has_secret {
            return; // members are attested exactly once, at commissioning
        }
        out.push(Action::ProduceEvidence {
            verifier,
            challenge: nonce,
        });
    }

    fn on_attest_quote(&mut self, joiner: ProcessId, quote: Quote, out: &mut Vec<Action>) {
        if self.role != Role::Leader {
            return;
        }
        let Some(s) = &mut self.session else { return };
        if s.joiner != joiner || s.phase != JoinPhase::Attesting {
            return;
        }
        s.phase = JoinPhase::Verifying;
        let challenge = s.challenge;
        out.push(Action::VerifyAttestation {
            joiner,
            quote,
            challenge,
        });
    }

    fn on_attest_verdict(
        &mut self,
        joiner: ProcessId,
        outcome: AttestOutcome,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        if self.role != Role::Leader {
            return Ok(());
        }
        let Some(s) = &mut self.session else {
            return Ok(());
        };
        if s.joiner != joiner || s.phase != JoinPhase::Verifying {
            return Ok(());
        }
        if !outcome.accepted() {
            out.push(Action::MetricsMark {
                label: format!("attest_reject {joiner}"),
            });
            self.session = None;
            self.pump_membership_queue(now, out);
            return Ok(());
        }
        out.push(Action::MetricsMark {
            label: format!("attest_accept {joiner}"),
        });
        match (s.case_n, s.vote) {
            (2, None) => {
                // Wait for the co-member's piggybacked vote.
                s.phase = JoinPhase::AwaitingVote;
            }
            (2, Some(false)) => {
                self.session = None;
                self.pump_membership_queue(now, out);
            }
            _ => {
                self.append_add_for_session(now, out);
            }
        }
        Ok(())
    }

    fn on_join_vote(&mut self, vote: JoinVote, now: VirtualTime, out: &mut Vec<Action>) {
        let Some(s) = &mut self.session else { return };
        if s.joiner != vote.joiner || s.vote.is_some() {
            return;
        }
        s.vote = Some(vote.approve);
        if !vote.approve {
            if !matches!(s.phase, JoinPhase::Replicating { .. }) {
                out.push(Action::MetricsMark {
                    label: format!("join_vote_refused {}", vote.joiner),
                });
                self.session = None;
                self.pump_membership_queue(now, out);
            }
            return;
        }
        if s.phase == JoinPhase::AwaitingVote {
            self.append_add_for_session(now, out);
        }
    }

    fn append_add_for_session(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        if self.entry_in_flight() {
            if let Some(s) = &mut self.session {
                s.phase = JoinPhase::AwaitingWindow;
            }
            return;
        }
        let Some(s) = &mut self.session else { return };
        let joiner = s.joiner;
        let entry = self.log.append_command(self.term, Command::Add(joiner));
        if let Some(s) = &mut self.session {
            s.phase = JoinPhase::Replicating {
                entry_index: entry.index,
            };
        }
        // A singleton cluster commits by itself; larger ones need acks.
        let _ = self.try_advance_commit(now, out);
        if self.role == Role::Halted {
            return;
        }
        self.broadcast_heartbeats(out);
    }

    fn announce_join(&mut self, now: VirtualTime, out: &mut Vec<Action>) {
        for c in self.contacts.clone() {
            out.push(Action::Send {
                to: c,
                msg: Message::JoinRequest { joiner: self.id },
                processing_us: 0,
            });
        }
        let retry = now + self.config.timeouts.heartbeat_max_us;
        self.join_retry_deadline = Some(retry);
        out.push(Action::ArmTimer {
            kind: TimerKind::JoinRetry,
            deadline: retry,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn on_provision(
        &mut self,
        leader: ProcessId,
        term: Term,
        secret: SecretHandle,
        peer_list: PeerList,
        assigned_timeout_us: u64,
        log: ReplicatedLog,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) {
        if self.has_secret {
            return; // duplicate provision
        }
        self.has_secret = true;
        self.secret = Some(secret);
        self.role = Role::Follower;
        self.term = term;
        self.peer_list = peer_list;
        self.applied_index = log.commit_index();
        self.match_claim = log.last_index();
        self.log = log;
        self.my_timeout_us = assigned_timeout_us;
        self.current_leader = Some(leader);
        self.join_retry_deadline = None;
        let dl = now + self.my_timeout_us;
        self.leader_contact_deadline = Some(dl);
        out.push(Action::ArmTimer {
            kind: TimerKind::LeaderContact,
            deadline: dl,
        });
        out.push(Action::ProvisionComplete { process: self.id });
    }

    // ------------------------------------------------------------------
    // Shutdown.

    fn on_shutdown_request(
        &mut self,
        from: ProcessId,
        now: VirtualTime,
        out: &mut Vec<Action>,
    ) -> Result<(), EngineError> {
        // Only the owner may order a shutdown; the channel tag already
        // authenticated the envelope.
        if from != ProcessId::OWNER || self.role != Role::Leader {
            return Ok(());
        }
        if self.shutting_down() {
            return Ok(());
        }
        self.log.append_command(self.term, Command::PreShutdown);
        self.seal_once(out);
        self.session = None;
        self.join_queue.clear();
        self.try_advance_commit(now, out)?;
        if self.role == Role::Halted {
            return Ok(());
        }
        self.broadcast_heartbeats(out);
        Ok(())
    }

    fn on_commit_shutdown(&mut self, from: ProcessId, out: &mut Vec<Action>) {
        if !self.peer_list.contains(from) {
            return;
        }
        self.seal_once(out);
        self.halt(HaltReason::Shutdown, out);
    }
}

enum Integration {
    /// Local log verifiably matches the leader through the given index.
    Matched(LogIndex),
    /// Entries are missing; a fetch is required.
    Gap,
    /// The batch contradicts our committed prefix; refused.
    CommittedConflict,
}

#[cfg(test)]
mod tests;
