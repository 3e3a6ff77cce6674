//! Wire-level protocol messages and their authenticated envelopes.

use crate::attest::Quote;
use crate::types::{LogEntry, LogIndex, PeerList, ProcessId, ReplicatedLog, Term};

/// Mock application secret. Possession of a value equal to the owner's makes
/// a process operational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretHandle(pub u64);

/// A follower's answer to a membership query piggybacked on a heartbeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinVote {
    pub joiner: ProcessId,
    pub approve: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Leader's periodic authority and replication message. `entries` carry
    /// the suffix the leader believes the follower is missing, anchored at
    /// (`prev_index`, `prev_term`) for the consistency check. A membership
    /// query to the sole co-member rides along in the two-process case.
    Heartbeat {
        leader: ProcessId,
        term: Term,
        commit_index: LogIndex,
        prev_index: LogIndex,
        prev_term: Term,
        entries: Vec<LogEntry>,
        join_query: Option<ProcessId>,
    },
    /// Follower acknowledgement: `acked_index` is the highest index at which
    /// the follower has verified its log matches the leader's.
    HeartbeatAck {
        follower: ProcessId,
        term: Term,
        acked_index: LogIndex,
        join_vote: Option<JoinVote>,
    },
    RequestVote {
        candidate: ProcessId,
        term: Term,
        last_log_index: LogIndex,
    },
    VoteGrant {
        voter: ProcessId,
        term: Term,
    },
    /// Tells a candidate that a competing candidacy it does not dominate
    /// exists, naming the dominating candidate.
    CandidateInfo {
        dominating: ProcessId,
        last_log_index: LogIndex,
    },
    /// Lagging follower asks for entries it is missing; answered with an
    /// immediate heartbeat carrying the suffix.
    FetchEntries {
        follower: ProcessId,
        from_index: LogIndex,
    },
    /// A freshly instantiated, still nonoperational process asking to be
    /// commissioned.
    JoinRequest {
        joiner: ProcessId,
    },
    AttestChallenge {
        verifier: ProcessId,
        nonce: u64,
    },
    AttestQuote {
        joiner: ProcessId,
        quote: Quote,
    },
    /// Everything a new member needs: the application secret, the current
    /// membership, its assigned heartbeat timeout, and a log snapshot.
    Provision {
        leader: ProcessId,
        term: Term,
        secret: SecretHandle,
        peer_list: PeerList,
        assigned_timeout_us: u64,
        log: ReplicatedLog,
    },
    /// Owner's request to terminate the application; accepted only from the
    /// owner endpoint over the authenticated channel.
    ShutdownRequest,
    CommitShutdown {
        term: Term,
    },
}

/// Fieldless tag of a message variant; used by tamper predicates and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MsgKind {
    Heartbeat,
    HeartbeatAck,
    RequestVote,
    VoteGrant,
    CandidateInfo,
    FetchEntries,
    JoinRequest,
    AttestChallenge,
    AttestQuote,
    Provision,
    ShutdownRequest,
    CommitShutdown,
}

impl Message {
    pub fn kind(&self) -> MsgKind {
        match self {
            Message::Heartbeat { .. } => MsgKind::Heartbeat,
            Message::HeartbeatAck { .. } => MsgKind::HeartbeatAck,
            Message::RequestVote { .. } => MsgKind::RequestVote,
            Message::VoteGrant { .. } => MsgKind::VoteGrant,
            Message::CandidateInfo { .. } => MsgKind::CandidateInfo,
            Message::FetchEntries { .. } => MsgKind::FetchEntries,
            Message::JoinRequest { .. } => MsgKind::JoinRequest,
            Message::AttestChallenge { .. } => MsgKind::AttestChallenge,
            Message::AttestQuote { .. } => MsgKind::AttestQuote,
            Message::Provision { .. } => MsgKind::Provision,
            Message::ShutdownRequest => MsgKind::ShutdownRequest,
            Message::CommitShutdown { .. } => MsgKind::CommitShutdown,
        }
    }

    /// Join-handshake kinds may reach a process that has no authenticated
    /// channel yet; their security rests on the attestation contents instead
    /// of the channel tag.
    pub fn is_handshake(&self) -> bool {
        matches!(
            self.kind(),
            MsgKind::JoinRequest | MsgKind::AttestChallenge | MsgKind::AttestQuote
        )
    }
}

impl std::fmt::Display for MsgKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MsgKind::Heartbeat => "heartbeat",
            MsgKind::HeartbeatAck => "ack",
            MsgKind::RequestVote => "request_vote",
            MsgKind::VoteGrant => "vote_grant",
            MsgKind::CandidateInfo => "candidate_info",
            MsgKind::FetchEntries => "fetch_entries",
            MsgKind::JoinRequest => "join_request",
            MsgKind::AttestChallenge => "attest_challenge",
            MsgKind::AttestQuote => "attest_quote",
            MsgKind::Provision => "provision",
            MsgKind::ShutdownRequest => "shutdown_request",
            MsgKind::CommitShutdown => "commit_shutdown",
        };
        f.write_str(s)
    }
}

/// A message in flight together with its channel authenticity tag. The tag is
/// computed and checked by the trusted side; a process never sees a message
/// whose tag failed verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: ProcessId,
    pub to: ProcessId,
    pub msg: Message,
    pub tag: u64,
}
