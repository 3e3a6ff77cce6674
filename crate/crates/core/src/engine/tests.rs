use super::*;
use crate::attest::{Measurement, Registry, RejectReason};
use crate::types::{HostId, TimeoutConfig};

fn pid(n: u32) -> ProcessId {
    ProcessId::new(n, HostId(n as u16))
}

fn cfg(seed: u64) -> EngineConfig {
    EngineConfig::new(TimeoutConfig::from_millis(50, 150, 5, 130), 8, seed)
}

fn env(from: ProcessId, to: ProcessId, msg: Message) -> Input {
    Input::Deliver(Envelope {
        from,
        to,
        msg,
        tag: 0,
    })
}

/// Assembles an n-member steady cluster led by p1 whose log holds the
/// committed adds of p2..pn.
fn cluster(n: u32, seed: u64) -> Vec<ProcessState> {
    let leader = pid(1);
    let mut log = ReplicatedLog::new();
    for i in 2..=n {
        log.append_command(Term(1), Command::Add(pid(i)));
    }
    log.advance_commit(log.last_index());
    let peers = PeerList::from_members((1..=n).map(pid));
    (1..=n)
        .map(|i| {
            ProcessState::assemble_member(
                cfg(seed),
                pid(i),
                peers.clone(),
                log.clone(),
                leader,
                SecretHandle(7),
                0,
            )
            .0
        })
        .collect()
}

fn heartbeat_from_leader(leader: &ProcessState, follower: ProcessId) -> Message {
    leader.heartbeat_for(follower, None)
}

fn sends(actions: &[Action]) -> Vec<(ProcessId, MsgKind)> {
    actions
        .iter()
        .filter_map(|a| match a {
            Action::Send { to, msg, .. } => Some((*to, msg.kind())),
            _ => None,
        })
        .collect()
}

fn marks(actions: &[Action]) -> Vec<String> {
    actions
        .iter()
        .filter_map(|a| match a {
            Action::MetricsMark { label } => Some(label.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn bootstrap_first_is_a_singleton_leader() {
    let (s, actions) = ProcessState::bootstrap_first(cfg(1), pid(1), SecretHandle(9), 0);
    assert_eq!(s.role(), Role::Leader);
    assert_eq!(s.term(), Term(1));
    assert!(s.has_secret());
    assert_eq!(s.peer_list().len(), 1);
    assert!(s.peer_list().contains(pid(1)));
    assert_eq!(s.log().last_index(), 0);
    assert!(actions
        .iter()
        .any(|a| matches!(a, Action::ProvisionComplete { .. })));
}

#[test]
fn steady_heartbeat_is_acked_and_resets_the_deadline() {
    let mut c = cluster(5, 42);
    let hb = heartbeat_from_leader(&c[0], pid(2));
    let f = &mut c[1];
    let before_deadline = f.leader_contact_deadline.unwrap();
    let actions = f.step(env(pid(1), pid(2), hb), 10_000).unwrap();
    assert!(f.leader_contact_deadline.unwrap() > before_deadline || 10_000 == 0);
    assert_eq!(f.leader_contact_deadline.unwrap(), 10_000 + f.my_timeout_us());
    let acked = actions.iter().find_map(|a| match a {
        Action::Send {
            msg: Message::HeartbeatAck { acked_index, .. },
            ..
        } => Some(*acked_index),
        _ => None,
    });
    assert_eq!(acked, Some(f.log().last_index()));
}

#[test]
fn heartbeat_from_non_member_changes_nothing() {
    let mut c = cluster(5, 42);
    let stranger = pid(77);
    let f = &mut c[1];
    let snapshot = format!("{f:?}");
    let hb = Message::Heartbeat {
        leader: stranger,
        term: Term(9),
        commit_index: 0,
        prev_index: 0,
        prev_term: Term(0),
        entries: vec![],
        join_query: None,
    };
    let actions = f.step(env(stranger, pid(2), hb), 5_000).unwrap();
    assert!(actions.is_empty());
    assert_eq!(snapshot, format!("{f:?}"));
}

#[test]
fn candidate_returns_to_follower_on_equal_term_heartbeat() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    f.step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    assert_eq!(f.role(), Role::Candidate);
    let term = f.term();
    // A new leader at the candidate's own term announces itself.
    let hb = Message::Heartbeat {
        leader: pid(3),
        term,
        commit_index: 4,
        prev_index: 4,
        prev_term: Term(1),
        entries: vec![],
        join_query: None,
    };
    let actions = f.step(env(pid(3), pid(2), hb), deadline + 10).unwrap();
    assert_eq!(f.role(), Role::Follower);
    assert!(f.candidature_deadline.is_none());
    assert!(sends(&actions).contains(&(pid(3), MsgKind::HeartbeatAck)));
}

#[test]
fn stale_term_heartbeat_is_discarded() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    f.term = Term(3);
    let snapshot = format!("{f:?}");
    let hb = Message::Heartbeat {
        leader: pid(1),
        term: Term(2),
        commit_index: 4,
        prev_index: 4,
        prev_term: Term(1),
        entries: vec![],
        join_query: None,
    };
    let actions = f.step(env(pid(1), pid(2), hb), 1_000).unwrap();
    assert!(actions.is_empty());
    assert_eq!(snapshot, format!("{f:?}"));
}

#[test]
fn gap_in_entries_triggers_a_fetch() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let last = f.log().last_index();
    let hb = Message::Heartbeat {
        leader: pid(1),
        term: Term(1),
        commit_index: last,
        prev_index: last + 3, // implies entries we do not have
        prev_term: Term(1),
        entries: vec![],
        join_query: None,
    };
    let actions = f.step(env(pid(1), pid(2), hb), 1_000).unwrap();
    let fetch = actions.iter().find_map(|a| match a {
        Action::Send {
            msg: Message::FetchEntries { from_index, .. },
            ..
        } => Some(*from_index),
        _ => None,
    });
    assert_eq!(fetch, Some(last + 1));
}

#[test]
fn commit_advances_once_a_majority_holds_the_entry() {
    let mut c = cluster(5, 42);
    let leader = &mut c[0];
    let entry = leader.log.append_command(Term(1), Command::Add(pid(6)));
    let k = entry.index;
    let ack = |f: u32| Message::HeartbeatAck {
        follower: pid(f),
        term: Term(1),
        acked_index: k,
        join_vote: None,
    };
    leader.step(env(pid(2), pid(1), ack(2)), 1_000).unwrap();
    // Leader + one follower = 2 replicas < majority_quorum(5) = 3.
    assert_eq!(leader.log().commit_index(), k - 1);
    leader.step(env(pid(3), pid(1), ack(3)), 1_100).unwrap();
    assert_eq!(leader.log().commit_index(), k);
    assert!(leader.peer_list().contains(pid(6)));
    // Duplicate ack is idempotent.
    let before = format!("{:?}", leader.log());
    leader.step(env(pid(3), pid(1), ack(3)), 1_200).unwrap();
    assert_eq!(before, format!("{:?}", leader.log()));
}

#[test]
fn ack_from_non_member_is_discarded() {
    let mut c = cluster(3, 42);
    let leader = &mut c[0];
    let snapshot = format!("{leader:?}");
    let ack = Message::HeartbeatAck {
        follower: pid(9),
        term: Term(1),
        acked_index: 2,
        join_vote: None,
    };
    let actions = leader.step(env(pid(9), pid(1), ack), 500).unwrap();
    assert!(actions.is_empty());
    assert_eq!(snapshot, format!("{leader:?}"));
}

#[test]
fn heartbeat_timeout_starts_a_campaign() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    let actions = f
        .step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    assert_eq!(f.role(), Role::Candidate);
    assert_eq!(f.term(), Term(2));
    let rv: Vec<_> = sends(&actions)
        .into_iter()
        .filter(|(_, k)| *k == MsgKind::RequestVote)
        .collect();
    assert_eq!(rv.len(), 4); // everyone but itself, dead leader included
    assert!(f.candidature_deadline.is_some());
}

#[test]
fn candidate_retry_raises_the_term_but_not_the_deadline() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    f.step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    let candidature = f.candidature_deadline.unwrap();
    let retry = f.retry_deadline.unwrap();
    let actions = f.step(Input::Timer(TimerKind::CandidateRetry), retry).unwrap();
    assert_eq!(f.term(), Term(3));
    assert_eq!(f.candidature_deadline.unwrap(), candidature);
    assert_eq!(
        sends(&actions)
            .iter()
            .filter(|(_, k)| *k == MsgKind::RequestVote)
            .count(),
        4
    );
}

#[test]
fn candidature_expiry_is_suicide() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    f.step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    let cd = f.candidature_deadline.unwrap();
    let actions = f.step(Input::Timer(TimerKind::Candidature), cd).unwrap();
    assert_eq!(f.role(), Role::Halted);
    assert_eq!(f.halt_reason(), Some(HaltReason::Suicide));
    assert!(actions
        .iter()
        .any(|a| matches!(a, Action::Halt { reason: HaltReason::Suicide })));
    // Absorbing: a late grant does nothing.
    let grant = Message::VoteGrant {
        voter: pid(3),
        term: f.term(),
    };
    let after = f.step(env(pid(3), pid(2), grant), cd + 10).unwrap();
    assert!(after.is_empty());
    assert_eq!(f.role(), Role::Halted);
}

#[test]
fn vote_request_from_non_member_gets_no_reply() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let snapshot = format!("{f:?}");
    let rv = Message::RequestVote {
        candidate: pid(66),
        term: Term(5),
        last_log_index: 10,
    };
    let actions = f.step(env(pid(66), pid(2), rv), 100).unwrap();
    assert!(actions.is_empty());
    assert_eq!(snapshot, format!("{f:?}"));
}

#[test]
fn fresh_contact_queues_the_request_without_replying() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let rv = Message::RequestVote {
        candidate: pid(3),
        term: Term(2),
        last_log_index: 4,
    };
    let actions = f.step(env(pid(3), pid(2), rv), 100).unwrap();
    assert!(sends(&actions).is_empty());
    assert!(f.queued_vote.is_some());
}

#[test]
fn queued_candidates_are_compared_and_the_dominated_one_informed() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let rv = |cand: u32, idx: LogIndex| Message::RequestVote {
        candidate: pid(cand),
        term: Term(2),
        last_log_index: idx,
    };
    f.step(env(pid(3), pid(2), rv(3, 4)), 100).unwrap();
    // A with a longer log displaces the queued candidate, who gets told.
    let actions = f.step(env(pid(4), pid(2), rv(4, 6)), 200).unwrap();
    assert_eq!(sends(&actions), vec![(pid(3), MsgKind::CandidateInfo)]);
    assert_eq!(f.queued_vote.unwrap().candidate, pid(4));
    // A tie does not displace: the incumbent keeps the slot.
    let actions = f.step(env(pid(5), pid(2), rv(5, 6)), 300).unwrap();
    assert_eq!(sends(&actions), vec![(pid(5), MsgKind::CandidateInfo)]);
    assert_eq!(f.queued_vote.unwrap().candidate, pid(4));
}

#[test]
fn voted_follower_names_its_candidate_to_a_dominated_one() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    f.voted_for = Some(VoteRecord {
        term: Term(2),
        candidate: pid(4),
        last_log_index: 7,
    });
    f.term = Term(2);
    let rv = Message::RequestVote {
        candidate: pid(3),
        term: Term(2),
        last_log_index: 5,
    };
    let actions = f.step(env(pid(3), pid(2), rv), 100).unwrap();
    let info = actions.iter().find_map(|a| match a {
        Action::Send {
            to,
            msg:
                Message::CandidateInfo {
                    dominating,
                    last_log_index,
                },
            ..
        } => Some((*to, *dominating, *last_log_index)),
        _ => None,
    });
    assert_eq!(info, Some((pid(3), pid(4), 7)));
}

#[test]
fn queued_vote_is_granted_at_timeout_when_candidate_is_up_to_date() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let last = f.log().last_index();
    let rv = Message::RequestVote {
        candidate: pid(3),
        term: Term(2),
        last_log_index: last,
    };
    f.step(env(pid(3), pid(2), rv), 100).unwrap();
    let deadline = f.leader_contact_deadline.unwrap();
    let actions = f
        .step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    assert_eq!(f.role(), Role::Follower); // granted, not campaigning
    assert!(sends(&actions).contains(&(pid(3), MsgKind::VoteGrant)));
    assert_eq!(f.voted_for.unwrap().candidate, pid(3));
    // And the voter keeps a fresh deadline to await the winner.
    assert!(f.leader_contact_deadline.unwrap() > deadline);
}

#[test]
fn dominated_queued_vote_is_discarded_for_own_campaign() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let rv = Message::RequestVote {
        candidate: pid(3),
        term: Term(2),
        last_log_index: f.log().last_index() - 1,
    };
    f.step(env(pid(3), pid(2), rv), 100).unwrap();
    let deadline = f.leader_contact_deadline.unwrap();
    let actions = f
        .step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    assert_eq!(f.role(), Role::Candidate);
    assert!(sends(&actions)
        .iter()
        .all(|(_, k)| *k != MsgKind::VoteGrant));
}

#[test]
fn candidate_collects_quorum_and_assumes_leadership() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    f.step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    let term = f.term();
    let grant = |v: u32| Message::VoteGrant {
        voter: pid(v),
        term,
    };
    f.step(env(pid(3), pid(2), grant(3)), deadline + 10).unwrap();
    assert_eq!(f.role(), Role::Candidate);
    let actions = f.step(env(pid(4), pid(2), grant(4)), deadline + 20).unwrap();
    // Self + two grants = majority_quorum(5).
    assert_eq!(f.role(), Role::Leader);
    assert!(marks(&actions).contains(&"leader_elected".to_string()));
    // First act: the deposed leader's expulsion is on the log and announced.
    assert!(f
        .log()
        .entries()
        .iter()
        .any(|e| e.command == Command::Expel(pid(1))));
    assert!(sends(&actions)
        .iter()
        .any(|(to, k)| *k == MsgKind::Heartbeat && *to == pid(3)));
}

#[test]
fn stale_grants_do_not_count() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    f.step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    let old_term = f.term();
    f.step(Input::Timer(TimerKind::CandidateRetry), f.retry_deadline.unwrap())
        .unwrap();
    let grant = Message::VoteGrant {
        voter: pid(3),
        term: old_term,
    };
    f.step(env(pid(3), pid(2), grant), deadline + 500).unwrap();
    assert_eq!(f.votes.len(), 1); // still only the self-vote
}

#[test]
fn candidate_info_from_a_dominating_candidate_delays_the_retry() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let deadline = f.leader_contact_deadline.unwrap();
    f.step(Input::Timer(TimerKind::LeaderContact), deadline)
        .unwrap();
    let old_retry = f.retry_deadline.unwrap();
    let info = Message::CandidateInfo {
        dominating: pid(4),
        last_log_index: f.log().last_index() + 3,
    };
    let now = deadline + 1_000;
    f.step(env(pid(3), pid(2), info), now).unwrap();
    assert_eq!(f.role(), Role::Candidate);
    assert_eq!(f.retry_deadline.unwrap(), now + f.my_timeout_us());
    assert!(f.retry_deadline.unwrap() > old_retry);
    // Info naming a dominated candidate is ignored.
    let weaker = Message::CandidateInfo {
        dominating: pid(5),
        last_log_index: 0,
    };
    let retry = f.retry_deadline.unwrap();
    f.step(env(pid(5), pid(2), weaker), now + 10).unwrap();
    assert_eq!(f.retry_deadline.unwrap(), retry);
}

#[test]
fn candidate_info_at_a_follower_is_ignored() {
    let mut c = cluster(5, 42);
    let f = &mut c[1];
    let snapshot = format!("{f:?}");
    let info = Message::CandidateInfo {
        dominating: pid(4),
        last_log_index: 9,
    };
    let actions = f.step(env(pid(3), pid(2), info), 100).unwrap();
    assert!(actions.is_empty());
    assert_eq!(snapshot, format!("{f:?}"));
}

#[test]
fn applying_own_expulsion_halts_immediately() {
    let mut c = cluster(5, 42);
    let leader_log = {
        let l = &mut c[0];
        l.log.append_command(Term(1), Command::Expel(pid(2)));
        l.log.clone()
    };
    let f = &mut c[1];
    let hb = Message::Heartbeat {
        leader: pid(1),
        term: Term(1),
        commit_index: leader_log.last_index(),
        prev_index: f.log().last_index(),
        prev_term: Term(1),
        entries: leader_log.suffix_from(f.log().last_index() + 1).to_vec(),
        join_query: None,
    };
    let actions = f.step(env(pid(1), pid(2), hb), 1_000).unwrap();
    assert_eq!(f.role(), Role::Halted);
    assert_eq!(f.halt_reason(), Some(HaltReason::Expelled));
    assert!(actions
        .iter()
        .any(|a| matches!(a, Action::Halt { reason: HaltReason::Expelled })));
}

#[test]
fn expel_commit_counts_majority_excluding_the_suspect() {
    let mut c = cluster(5, 42);
    let leader = &mut c[0];
    leader.expel_queue.push_back(pid(3));
    leader.pump_membership_queue(1_000, &mut Vec::new());
    let k = leader.log().last_index();
    assert_eq!(
        leader.log().get(k).unwrap().command,
        Command::Expel(pid(3))
    );
    let mk = |f: u32| Message::HeartbeatAck {
        follower: pid(f),
        term: Term(1),
        acked_index: k,
        join_vote: None,
    };
    // Suspect's own ack must not help commit its expulsion.
    leader.step(env(pid(3), pid(1), mk(3)), 1_100).unwrap();
    assert_eq!(leader.log().commit_index(), k - 1);
    leader.step(env(pid(2), pid(1), mk(2)), 1_200).unwrap();
    assert_eq!(leader.log().commit_index(), k - 1);
    // Leader + two of the remaining four reach majority_quorum(4) = 3.
    let actions = leader.step(env(pid(4), pid(1), mk(4)), 1_300).unwrap();
    assert_eq!(leader.log().commit_index(), k);
    assert!(!leader.peer_list().contains(pid(3)));
    assert!(marks(&actions).iter().any(|m| m.contains("expel_committed")));
}

#[test]
fn two_member_cluster_commits_an_expel_alone() {
    let mut c = cluster(2, 42);
    let leader = &mut c[0];
    let mut out = Vec::new();
    leader.expel_queue.push_back(pid(2));
    leader.pump_membership_queue(500, &mut out);
    assert!(!leader.peer_list().contains(pid(2)));
    assert_eq!(leader.peer_list().len(), 1);
    assert_eq!(leader.log().commit_index(), leader.log().last_index());
}

#[test]
fn leader_expels_a_silent_follower_after_its_timeout() {
    let mut c = cluster(5, 42);
    let leader = &mut c[0];
    let t3 = *leader.follower_deadlines.get(&pid(3)).unwrap();
    // Keep everyone else fresh right up to the tick.
    for f in [2u32, 4, 5] {
        let ack = Message::HeartbeatAck {
            follower: pid(f),
            term: Term(1),
            acked_index: 4,
            join_vote: None,
        };
        leader.step(env(pid(f), pid(1), ack), t3 - 1).unwrap();
    }
    leader.next_tick = Some(t3);
    let actions = leader.step(Input::Timer(TimerKind::LeaderTick), t3).unwrap();
    assert!(leader
        .log()
        .entries()
        .iter()
        .any(|e| e.command == Command::Expel(pid(3))));
    assert!(sends(&actions)
        .iter()
        .any(|(_, k)| *k == MsgKind::Heartbeat));
}

#[test]
fn isolated_leader_halts_within_one_heartbeat_window() {
    let mut c = cluster(5, 42);
    let leader = &mut c[0];
    let max_deadline = *leader.follower_deadlines.values().max().unwrap();
    leader.next_tick = Some(max_deadline);
    leader
        .step(Input::Timer(TimerKind::LeaderTick), max_deadline)
        .unwrap();
    assert_eq!(leader.role(), Role::Leader);
    assert!(leader.quorum_loss_since.is_some());
    let halt_at = max_deadline + leader.config.timeouts.heartbeat_max_us;
    leader.next_tick = Some(halt_at);
    let actions = leader.step(Input::Timer(TimerKind::LeaderTick), halt_at).unwrap();
    assert_eq!(leader.role(), Role::Halted);
    assert_eq!(leader.halt_reason(), Some(HaltReason::Isolated));
    assert!(actions
        .iter()
        .any(|a| matches!(a, Action::Halt { reason: HaltReason::Isolated })));
}

#[test]
fn singleton_join_provisions_right_after_the_verdict() {
    let seed = 5;
    let good = Measurement::of_code(b"prog");
    let mut reg = Registry::new(seed, good);
    let p1 = pid(1);
    let p2 = pid(2);
    reg.register_enclave(p1, good);
    reg.register_enclave(p2, good);

    let (mut leader, _) = ProcessState::bootstrap_first(cfg(seed), p1, SecretHandle(9), 0);
    let (mut joiner, joiner_actions) =
        ProcessState::new_joiner(cfg(seed), p2, vec![p1], 0);
    assert!(sends(&joiner_actions).contains(&(p1, MsgKind::JoinRequest)));

    let a = leader
        .step(env(p2, p1, Message::JoinRequest { joiner: p2 }), 100)
        .unwrap();
    let nonce = a
        .iter()
        .find_map(|x| match x {
            Action::Send {
                msg: Message::AttestChallenge { nonce, .. },
                ..
            } => Some(*nonce),
            _ => None,
        })
        .expect("challenge sent");

    let a = joiner
        .step(
            env(p1, p2, Message::AttestChallenge { verifier: p1, nonce }),
            200,
        )
        .unwrap();
    assert!(a
        .iter()
        .any(|x| matches!(x, Action::ProduceEvidence { challenge, .. } if *challenge == nonce)));

    let quote = reg.generate_quote(p2, nonce).unwrap();
    let a = leader
        .step(env(p2, p1, Message::AttestQuote { joiner: p2, quote }), 300)
        .unwrap();
    assert!(a
        .iter()
        .any(|x| matches!(x, Action::VerifyAttestation { joiner, .. } if *joiner == p2)));

    // Accepted verdict: the add commits locally (no consensus round) and the
    // provision goes out in the same step.
    let a = leader
        .step(
            Input::AttestVerdict {
                joiner: p2,
                outcome: AttestOutcome::Accept,
            },
            251_000,
        )
        .unwrap();
    assert!(sends(&a).contains(&(p2, MsgKind::Provision)));
    assert!(leader.peer_list().contains(p2));
    assert_eq!(leader.log().commit_index(), 1);

    let provision = a
        .iter()
        .find_map(|x| match x {
            Action::Send { msg: m @ Message::Provision { .. }, .. } => Some(m.clone()),
            _ => None,
        })
        .unwrap();
    let a = joiner.step(env(p1, p2, provision), 252_000).unwrap();
    assert!(joiner.has_secret());
    assert_eq!(joiner.role(), Role::Follower);
    assert_eq!(joiner.peer_list().len(), 2);
    assert!(a
        .iter()
        .any(|x| matches!(x, Action::ProvisionComplete { process } if *process == p2)));
}

#[test]
fn rejected_attestation_aborts_the_session_without_a_secret() {
    let seed = 6;
    let p1 = pid(1);
    let p2 = pid(2);
    let (mut leader, _) = ProcessState::bootstrap_first(cfg(seed), p1, SecretHandle(9), 0);
    leader
        .step(env(p2, p1, Message::JoinRequest { joiner: p2 }), 100)
        .unwrap();
    let good = Measurement::of_code(b"prog");
    let mut reg = Registry::new(seed, good);
    reg.register_enclave(p2, good);
    let quote = reg.generate_quote(p2, 1).unwrap();
    leader
        .step(env(p2, p1, Message::AttestQuote { joiner: p2, quote }), 200)
        .unwrap();
    let a = leader
        .step(
            Input::AttestVerdict {
                joiner: p2,
                outcome: AttestOutcome::Reject(RejectReason::BadSignature),
            },
            300,
        )
        .unwrap();
    assert!(marks(&a).iter().any(|m| m.starts_with("attest_reject")));
    assert!(!leader.peer_list().contains(p2));
    assert_eq!(leader.log().last_index(), 0);
    assert!(leader.session.is_none());
}

#[test]
fn join_beyond_the_sla_quota_is_rejected() {
    let p1 = pid(1);
    let p2 = pid(2);
    let mut config = cfg(3);
    config.sla_max = 1;
    let (mut leader, _) = ProcessState::bootstrap_first(config, p1, SecretHandle(9), 0);
    let a = leader
        .step(env(p2, p1, Message::JoinRequest { joiner: p2 }), 100)
        .unwrap();
    assert!(marks(&a).iter().any(|m| m.starts_with("join_rejected_sla")));
    assert!(leader.session.is_none());
    assert!(sends(&a).is_empty());
}

#[test]
fn two_member_join_waits_for_the_piggybacked_vote() {
    let mut c = cluster(2, 42);
    let p3 = pid(3);
    let leader = &mut c[0];
    leader
        .step(env(p3, pid(1), Message::JoinRequest { joiner: p3 }), 100)
        .unwrap();
    let good = Measurement::of_code(b"prog");
    let mut reg = Registry::new(42, good);
    reg.register_enclave(p3, good);
    let nonce = leader.session.as_ref().unwrap().challenge;
    let quote = reg.generate_quote(p3, nonce).unwrap();
    leader
        .step(env(p3, pid(1), Message::AttestQuote { joiner: p3, quote }), 200)
        .unwrap();
    let a = leader
        .step(
            Input::AttestVerdict {
                joiner: p3,
                outcome: AttestOutcome::Accept,
            },
            300,
        )
        .unwrap();
    // No provision yet: the co-member has not voted.
    assert!(!sends(&a).contains(&(p3, MsgKind::Provision)));
    assert_eq!(leader.session.as_ref().unwrap().phase, JoinPhase::AwaitingVote);

    // The query rides the next heartbeat.
    let hb = leader.heartbeat_for(pid(2), None);
    match &hb {
        Message::Heartbeat { join_query, .. } => assert_eq!(*join_query, Some(p3)),
        _ => unreachable!(),
    }

    // The yes-vote piggybacks on the ack; the add is appended and the
    // follower's ack of it commits.
    let vote_ack = Message::HeartbeatAck {
        follower: pid(2),
        term: Term(1),
        acked_index: leader.log().last_index(),
        join_vote: Some(JoinVote {
            joiner: p3,
            approve: true,
        }),
    };
    let a = leader.step(env(pid(2), pid(1), vote_ack), 400).unwrap();
    let k = leader.log().last_index();
    assert_eq!(leader.log().get(k).unwrap().command, Command::Add(p3));
    assert!(!sends(&a).contains(&(p3, MsgKind::Provision)));
    let entry_ack = Message::HeartbeatAck {
        follower: pid(2),
        term: Term(1),
        acked_index: k,
        join_vote: None,
    };
    let a = leader.step(env(pid(2), pid(1), entry_ack), 500).unwrap();
    assert!(sends(&a).contains(&(p3, MsgKind::Provision)));
    assert!(leader.peer_list().contains(p3));
}

#[test]
fn two_member_join_aborts_on_a_no_vote() {
    let mut c = cluster(2, 42);
    let p3 = pid(3);
    let leader = &mut c[0];
    leader
        .step(env(p3, pid(1), Message::JoinRequest { joiner: p3 }), 100)
        .unwrap();
    let good = Measurement::of_code(b"prog");
    let mut reg = Registry::new(42, good);
    reg.register_enclave(p3, good);
    let nonce = leader.session.as_ref().unwrap().challenge;
    let quote = reg.generate_quote(p3, nonce).unwrap();
    leader
        .step(env(p3, pid(1), Message::AttestQuote { joiner: p3, quote }), 200)
        .unwrap();
    leader
        .step(
            Input::AttestVerdict {
                joiner: p3,
                outcome: AttestOutcome::Accept,
            },
            300,
        )
        .unwrap();
    let no = Message::HeartbeatAck {
        follower: pid(2),
        term: Term(1),
        acked_index: leader.log().last_index(),
        join_vote: Some(JoinVote {
            joiner: p3,
            approve: false,
        }),
    };
    let a = leader.step(env(pid(2), pid(1), no), 400).unwrap();
    assert!(marks(&a).iter().any(|m| m.starts_with("join_vote_refused")));
    assert!(leader.session.is_none());
    assert!(!leader.peer_list().contains(p3));
}

#[test]
fn shutdown_flow_seals_commits_and_halts_everyone() {
    let mut c = cluster(5, 42);
    let leader = &mut c[0];
    let a = leader
        .step(
            env(ProcessId::OWNER, pid(1), Message::ShutdownRequest),
            1_000,
        )
        .unwrap();
    assert!(a.iter().any(|x| matches!(x, Action::SealData)));
    let k = leader.log().last_index();
    assert_eq!(leader.log().get(k).unwrap().command, Command::PreShutdown);

    let ack = |f: u32| Message::HeartbeatAck {
        follower: pid(f),
        term: Term(1),
        acked_index: k,
        join_vote: None,
    };
    leader.step(env(pid(2), pid(1), ack(2)), 1_100).unwrap();
    let a = leader.step(env(pid(3), pid(1), ack(3)), 1_200).unwrap();
    assert_eq!(leader.role(), Role::Halted);
    assert_eq!(leader.halt_reason(), Some(HaltReason::Shutdown));
    let commit_targets: Vec<_> = a
        .iter()
        .filter_map(|x| match x {
            Action::Send {
                to,
                msg: Message::CommitShutdown { .. },
                ..
            } => Some(*to),
            _ => None,
        })
        .collect();
    assert!(commit_targets.contains(&ProcessId::OWNER));
    assert_eq!(commit_targets.len(), 5); // 4 followers + the owner

    // A follower that appended the entry halts and seals on the commit.
    let f = &mut c[1];
    let hb = Message::Heartbeat {
        leader: pid(1),
        term: Term(1),
        commit_index: k - 1,
        prev_index: k - 1,
        prev_term: Term(1),
        entries: vec![LogEntry {
            term: Term(1),
            index: k,
            command: Command::PreShutdown,
        }],
        join_query: None,
    };
    let a = f.step(env(pid(1), pid(2), hb), 1_150).unwrap();
    assert!(a.iter().any(|x| matches!(x, Action::SealData)));
    let a = f
        .step(env(pid(1), pid(2), Message::CommitShutdown { term: Term(1) }), 1_300)
        .unwrap();
    assert_eq!(f.role(), Role::Halted);
    assert_eq!(f.halt_reason(), Some(HaltReason::Shutdown));
    // Sealed exactly once.
    assert!(!a.iter().any(|x| matches!(x, Action::SealData)));
}

#[test]
fn shutdown_request_from_anyone_but_the_owner_is_ignored() {
    let mut c = cluster(3, 42);
    let leader = &mut c[0];
    let snapshot = format!("{leader:?}");
    let a = leader
        .step(env(pid(2), pid(1), Message::ShutdownRequest), 700)
        .unwrap();
    assert!(a.is_empty());
    assert_eq!(snapshot, format!("{leader:?}"));
}

#[test]
fn reordered_replication_batches_converge_via_fetch() {
    let mut c = cluster(3, 42);
    let entries: Vec<LogEntry> = {
        let leader = &mut c[0];
        leader.log.append_command(Term(1), Command::Add(pid(4)));
        leader.log.append_command(Term(1), Command::Add(pid(5)));
        leader.log.suffix_from(1).to_vec()
    };
    let last = entries.last().unwrap().index;
    let f = &mut c[1];
    // Later batch arrives first: gap, fetch.
    let hb_late = Message::Heartbeat {
        leader: pid(1),
        term: Term(1),
        commit_index: 2,
        prev_index: last - 1,
        prev_term: Term(1),
        entries: entries[entries.len() - 1..].to_vec(),
        join_query: None,
    };
    let a = f.step(env(pid(1), pid(2), hb_late), 100).unwrap();
    assert!(sends(&a).iter().any(|(_, k)| *k == MsgKind::FetchEntries));
    // The fetch answer carries the suffix after the follower's last entry.
    let hb_fill = Message::Heartbeat {
        leader: pid(1),
        term: Term(1),
        commit_index: 2,
        prev_index: 2,
        prev_term: Term(1),
        entries: entries[2..].to_vec(),
        join_query: None,
    };
    let a = f.step(env(pid(1), pid(2), hb_fill), 200).unwrap();
    assert_eq!(f.log().last_index(), last);
    let acked = a.iter().find_map(|x| match x {
        Action::Send {
            msg: Message::HeartbeatAck { acked_index, .. },
            ..
        } => Some(*acked_index),
        _ => None,
    });
    assert_eq!(acked, Some(last));
}

#[test]
fn committed_prefix_is_never_rewritten() {
    let mut c = cluster(3, 42);
    let f = &mut c[1];
    let committed = f.log().commit_index();
    assert!(committed >= 1);
    // A (hypothetical) leader presenting a conflicting entry inside our
    // committed prefix is refused: log unchanged, ack does not cover it.
    let conflict = Message::Heartbeat {
        leader: pid(1),
        term: Term(2),
        commit_index: committed,
        prev_index: 0,
        prev_term: Term(0),
        entries: vec![LogEntry {
            term: Term(2),
            index: 1,
            command: Command::Expel(pid(3)),
        }],
        join_query: None,
    };
    let before = f.log().get(1).copied().unwrap();
    let a = f.step(env(pid(1), pid(2), conflict), 100).unwrap();
    assert_eq!(f.log().get(1).copied().unwrap(), before);
    let acked = a.iter().find_map(|x| match x {
        Action::Send {
            msg: Message::HeartbeatAck { acked_index, .. },
            ..
        } => Some(*acked_index),
        _ => None,
    });
    assert_eq!(acked, Some(0)); // nothing verified against this claim
}
