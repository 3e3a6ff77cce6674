//! Core domain types and pure membership arithmetic shared by all modules.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Virtual time, microseconds since simulation start.
pub type VirtualTime = u64;

/// One-based index into a replicated log.
pub type LogIndex = u64;

/// Sentinel for "never delivered"; kept well below `u64::MAX` so additions
/// cannot overflow.
pub const NEVER: VirtualTime = u64::MAX / 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("census inconsistent: f={f} + i={i} exceeds n={n}")]
    InconsistentCensus { n: usize, f: usize, i: usize },
    #[error("census requires at least one process")]
    EmptyCensus,
    #[error("quorum undefined for an empty cluster")]
    EmptyCluster,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimeoutConfigError {
    #[error("heartbeat_min ({min_us}us) exceeds heartbeat_max ({max_us}us)")]
    MinAboveMax { min_us: u64, max_us: u64 },
    #[error("delta ({delta_us}us) must be strictly below heartbeat_min ({min_us}us)")]
    DeltaTooLarge { delta_us: u64, min_us: u64 },
    #[error("candidature timeout (factor {factor}) must be at least one heartbeat_max")]
    CandidatureBelowHeartbeat { factor: u32 },
    #[error("timeouts must be positive")]
    ZeroTimeout,
}

/// Identifier of a physical host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(pub u16);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

/// Identifier of one enclave process instance.
///
/// Ids are never reused within a run: a restarted enclave is a new process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId {
    pub id: u32,
    pub host: HostId,
}

impl ProcessId {
    pub const fn new(id: u32, host: HostId) -> Self {
        ProcessId { id, host }
    }

    /// Reserved endpoint for the application owner actor. The owner is not a
    /// process and never appears in any peer list.
    pub const OWNER: ProcessId = ProcessId {
        id: 0,
        host: HostId(0),
    };
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == ProcessId::OWNER {
            write!(f, "owner")
        } else {
            write!(f, "p{}", self.id)
        }
    }
}

/// Election epoch counter; monotonically nondecreasing per process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Term(pub u64);

impl Term {
    pub fn next(self) -> Term {
        Term(self.0 + 1)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Membership command carried by a log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Add(ProcessId),
    Expel(ProcessId),
    PreShutdown,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Add(p) => write!(f, "add {p}"),
            Command::Expel(p) => write!(f, "expel {p}"),
            Command::PreShutdown => write!(f, "pre_shutdown"),
        }
    }
}

/// A term- and index-stamped membership command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub term: Term,
    pub index: LogIndex,
    pub command: Command,
}

/// Replicated log: contiguous entries starting at index 1 plus the highest
/// index known committed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplicatedLog {
    entries: Vec<LogEntry>,
    commit_index: LogIndex,
}

impl ReplicatedLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_index(&self) -> LogIndex {
        self.entries.len() as LogIndex
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn get(&self, index: LogIndex) -> Option<&LogEntry> {
        if index == 0 {
            return None;
        }
        self.entries.get(index as usize - 1)
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Entries with index >= `from`, empty when `from` is past the end.
    pub fn suffix_from(&self, from: LogIndex) -> &[LogEntry] {
        if from == 0 || from > self.last_index() {
            return &[];
        }
        &self.entries[from as usize - 1..]
    }

    /// Appends a fresh command, stamping it with `term` and the next index.
    pub fn append_command(&mut self, term: Term, command: Command) -> LogEntry {
        debug_assert!(self.entries.last().map_or(true, |e| e.term <= term));
        let entry = LogEntry {
            term,
            index: self.last_index() + 1,
            command,
        };
        self.entries.push(entry);
        entry
    }

    /// Appends an already-stamped entry received from a leader.
    pub fn append_entry(&mut self, entry: LogEntry) {
        debug_assert_eq!(entry.index, self.last_index() + 1);
        debug_assert!(self.entries.last().map_or(true, |e| e.term <= entry.term));
        self.entries.push(entry);
    }

    /// Drops every entry with index >= `from`. Never touches the committed
    /// prefix.
    pub fn truncate_from(&mut self, from: LogIndex) {
        debug_assert!(from > self.commit_index);
        let keep = from.saturating_sub(1) as usize;
        self.entries.truncate(keep);
    }

    /// Raises the commit index; it never decreases and never passes the last
    /// entry.
    pub fn advance_commit(&mut self, to: LogIndex) -> bool {
        let to = to.min(self.last_index());
        if to > self.commit_index {
            self.commit_index = to;
            true
        } else {
            false
        }
    }
}

/// A process's view of the application's active membership.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PeerList {
    members: BTreeSet<ProcessId>,
}

impl PeerList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn singleton(p: ProcessId) -> Self {
        let mut members = BTreeSet::new();
        members.insert(p);
        PeerList { members }
    }

    pub fn from_members(members: impl IntoIterator<Item = ProcessId>) -> Self {
        PeerList {
            members: members.into_iter().collect(),
        }
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        self.members.contains(&p)
    }

    pub fn insert(&mut self, p: ProcessId) -> bool {
        self.members.insert(p)
    }

    pub fn remove(&mut self, p: ProcessId) -> bool {
        self.members.remove(&p)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.members.iter().copied()
    }

    /// Members other than `me`, in id order.
    pub fn others(&self, me: ProcessId) -> impl Iterator<Item = ProcessId> + '_ {
        self.members.iter().copied().filter(move |p| *p != me)
    }
}

impl fmt::Display for PeerList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, p) in self.members.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "}}")
    }
}

/// Derives the membership implied by the committed prefix of a log: the
/// bootstrap member plus every committed add, minus every committed expel.
pub fn fold_membership(bootstrap: ProcessId, log: &ReplicatedLog) -> PeerList {
    let mut list = PeerList::singleton(bootstrap);
    for entry in log.entries() {
        if entry.index > log.commit_index() {
            break;
        }
        match entry.command {
            Command::Add(p) => {
                list.insert(p);
            }
            Command::Expel(p) => {
                list.remove(p);
            }
            Command::PreShutdown => {}
        }
    }
    list
}

/// Timing parameters of the heartbeat and election machinery.
///
/// Each follower's heartbeat timeout is drawn uniformly from
/// `[heartbeat_min_us, heartbeat_max_us]`; the candidature timeout is
/// `candidature_factor * heartbeat_max_us` and is the same for every process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeoutConfig {
    pub heartbeat_min_us: u64,
    pub heartbeat_max_us: u64,
    pub candidature_factor: u32,
    /// Leader heartbeat cadence. The protocol only requires it to be well
    /// below the smallest heartbeat timeout; a fifth leaves room for jitter.
    pub leader_send_interval_us: u64,
    /// Synchronous-channel bound: without faults every message arrives within
    /// this delay.
    pub delta_us: u64,
}

impl TimeoutConfig {
    /// Standard construction from millisecond bounds; the leader cadence is
    /// derived so at least five heartbeats fit in the smallest timeout.
    pub fn from_millis(min_ms: u64, max_ms: u64, factor: u32, delta_us: u64) -> Self {
        let heartbeat_min_us = min_ms * 1_000;
        TimeoutConfig {
            heartbeat_min_us,
            heartbeat_max_us: max_ms * 1_000,
            candidature_factor: factor,
            leader_send_interval_us: (heartbeat_min_us / 5).max(1),
            delta_us,
        }
    }

    pub fn candidature_timeout_us(&self) -> u64 {
        self.heartbeat_max_us * u64::from(self.candidature_factor)
    }

    pub fn validate(&self) -> Result<(), TimeoutConfigError> {
        if self.heartbeat_min_us == 0 || self.leader_send_interval_us == 0 {
            return Err(TimeoutConfigError::ZeroTimeout);
        }
        if self.heartbeat_min_us > self.heartbeat_max_us {
            return Err(TimeoutConfigError::MinAboveMax {
                min_us: self.heartbeat_min_us,
                max_us: self.heartbeat_max_us,
            });
        }
        if self.delta_us >= self.heartbeat_min_us {
            return Err(TimeoutConfigError::DeltaTooLarge {
                delta_us: self.delta_us,
                min_us: self.heartbeat_min_us,
            });
        }
        if self.candidature_factor == 0 {
            return Err(TimeoutConfigError::CandidatureBelowHeartbeat {
                factor: self.candidature_factor,
            });
        }
        Ok(())
    }
}

/// Ground-truth head count of a cluster at one instant: existing, faulty
/// (halted or crashed) and isolated processes. Computed by the harness from
/// simulator state; processes themselves can never know `f` and `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterCensus {
    pub n: usize,
    pub f: usize,
    pub i: usize,
}

/// The cluster is in anarchy when faulty plus isolated processes outnumber
/// what a strict majority of the remainder could outvote:
/// `f + i > floor((n - 1) / 2)`.
pub fn is_anarchy(census: ClusterCensus) -> Result<bool, DomainError> {
    if census.n == 0 {
        return Err(DomainError::EmptyCensus);
    }
    if census.f + census.i > census.n {
        return Err(DomainError::InconsistentCensus {
            n: census.n,
            f: census.f,
            i: census.i,
        });
    }
    Ok(census.f + census.i > (census.n - 1) / 2)
}

/// Smallest head count that constitutes a majority of `n` processes:
/// `floor(n / 2) + 1`.
pub fn majority_quorum(n: usize) -> Result<usize, DomainError> {
    if n == 0 {
        return Err(DomainError::EmptyCluster);
    }
    Ok(n / 2 + 1)
}

/// Outcome of comparing two candidates' logs by last entry index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dominance {
    /// First log is strictly more up to date.
    First,
    /// Second log is strictly more up to date.
    Second,
    Tie,
}

/// Compares candidate logs by the index of their last entries. A tie is not
/// domination: election rules let the incumbent candidate keep its claim.
pub fn log_dominates(a_last: LogIndex, b_last: LogIndex) -> Dominance {
    match a_last.cmp(&b_last) {
        std::cmp::Ordering::Greater => Dominance::First,
        std::cmp::Ordering::Less => Dominance::Second,
        std::cmp::Ordering::Equal => Dominance::Tie,
    }
}

/// splitmix64 finalizer; used to derive independent seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-process heartbeat timeout, drawn uniformly from the configured range.
///
/// The draw is a pure function of (seed, process id) so that any process that
/// knows the cluster seed — in particular a freshly elected leader — can
/// recompute every member's timeout without a negotiation round.
pub fn draw_timeout(seed: u64, p: ProcessId, cfg: &TimeoutConfig) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ u64::from(p.id).wrapping_mul(0xd6e8)));
    rng.gen_range(cfg.heartbeat_min_us..=cfg.heartbeat_max_us)
}
