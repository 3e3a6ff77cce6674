//! Ground-truth observers evaluated outside the protocol: they see simulator
//! state the processes themselves never could (who crashed, which links are
//! severed) and check the properties the protocol promises.

use std::collections::{BTreeMap, BTreeSet};

use crate::engine::{ProcessState, Role};
use crate::simnet::{Observer, StepView};
use crate::types::{
    fold_membership, is_anarchy, ClusterCensus, LogEntry, LogIndex, ProcessId, Term, VirtualTime,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub at: VirtualTime,
    pub seq: u64,
    pub kind: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "t={}us event #{} {}: {}",
            self.at, self.seq, self.kind, self.detail
        )
    }
}

/// Checks the safety properties after every simulation event: one leader per
/// term, agreement on committed entries, peer lists derived from committed
/// logs, the commission quota, per-process monotonicity, absorbing halts,
/// and secret confinement.
pub struct SafetyMonitor {
    bootstrap: ProcessId,
    sla_max: usize,
    leaders_by_term: BTreeMap<Term, ProcessId>,
    /// First committed entry observed at each index; any later disagreement
    /// is a fork.
    committed: BTreeMap<LogIndex, LogEntry>,
    commit_seen: BTreeMap<ProcessId, LogIndex>,
    term_seen: BTreeMap<ProcessId, Term>,
    halted_seen: BTreeSet<ProcessId>,
    operational_roots: BTreeSet<ProcessId>,
    pub violations: Vec<Violation>,
}

impl SafetyMonitor {
    pub fn new(bootstrap: ProcessId, sla_max: usize) -> Self {
        SafetyMonitor {
            bootstrap,
            sla_max,
            leaders_by_term: BTreeMap::new(),
            committed: BTreeMap::new(),
            commit_seen: BTreeMap::new(),
            term_seen: BTreeMap::new(),
            halted_seen: BTreeSet::new(),
            operational_roots: BTreeSet::new(),
            violations: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, view: &StepView<'_>, kind: &'static str, detail: String) {
        self.violations.push(Violation {
            at: view.at,
            seq: view.seq,
            kind,
            detail,
        });
    }
}

impl Observer for SafetyMonitor {
    fn on_step(&mut self, view: &StepView<'_>) {
        let mut operational = 0usize;
        for (pid, st) in view.states.iter() {
            let pid = *pid;
            // Monotonicity of terms.
            let prev_term = self.term_seen.get(&pid).copied().unwrap_or(Term(0));
            if st.term() < prev_term {
                self.flag(
                    view,
                    "term_monotonicity",
                    format!("{pid} term went {prev_term} -> {}", st.term()),
                );
            }
            self.term_seen.insert(pid, st.term().max(prev_term));

            // Halted is absorbing.
            if self.halted_seen.contains(&pid) && st.role() != Role::Halted {
                self.flag(view, "halt_absorbing", format!("{pid} left Halted"));
            }
            if st.role() == Role::Halted {
                self.halted_seen.insert(pid);
            }

            // Election safety: one leader per term, ever.
            if st.role() == Role::Leader {
                match self.leaders_by_term.get(&st.term()) {
                    Some(other) if *other != pid => {
                        self.flag(
                            view,
                            "election_safety",
                            format!("term {} has leaders {other} and {pid}", st.term()),
                        );
                    }
                    _ => {
                        self.leaders_by_term.insert(st.term(), pid);
                    }
                }
            }

            // Committed-prefix agreement and fork detection: every commit of
            // an index must carry the same entry everywhere, forever.
            let prev_commit = self.commit_seen.get(&pid).copied().unwrap_or(0);
            let now_commit = st.log().commit_index();
            if now_commit < prev_commit {
                self.flag(
                    view,
                    "commit_monotonicity",
                    format!("{pid} commitIndex went {prev_commit} -> {now_commit}"),
                );
            }
            for idx in (prev_commit + 1)..=now_commit {
                match st.log().get(idx) {
                    None => self.flag(
                        view,
                        "commit_gap",
                        format!("{pid} commitIndex {now_commit} beyond log"),
                    ),
                    Some(entry) => match self.committed.get(&idx) {
                        None => {
                            self.committed.insert(idx, *entry);
                        }
                        Some(first) if first != entry => {
                            self.flag(
                                view,
                                "committed_prefix_divergence",
                                format!(
                                    "index {idx}: {pid} committed '{}' vs established '{}'",
                                    entry.command, first.command
                                ),
                            );
                        }
                        Some(_) => {}
                    },
                }
            }
            self.commit_seen.insert(pid, now_commit.max(prev_commit));

            if st.is_operational() {
                operational += 1;
                // Peer list coherence with the committed log.
                let folded = fold_membership(self.bootstrap, st.log());
                if folded != *st.peer_list() {
                    self.flag(
                        view,
                        "peerlist_coherence",
                        format!(
                            "{pid} peerList {} != folded {}",
                            st.peer_list(),
                            folded
                        ),
                    );
                }
                // Secret confinement: operational implies an accepted
                // attestation somewhere in the trace.
                if !view.registry.was_accepted(pid) {
                    self.flag(
                        view,
                        "secret_confinement",
                        format!("{pid} operational without accepted attestation"),
                    );
                }
            }
        }
        if operational > self.sla_max {
            self.flag(
                view,
                "sla_bound",
                format!("{operational} operational processes exceed quota {}", self.sla_max),
            );
        }

        // Fork of the whole application: more than one independent singleton
        // root (double bootstrap) shows up as disjoint leaders at term 1 with
        // empty logs.
        for st in view.states.values() {
            if st.role() == Role::Leader && st.term() == Term(1) && st.log().last_index() == 0 {
                self.operational_roots.insert(st.id());
            }
        }
        if self.operational_roots.len() > 1 {
            let roots = self
                .operational_roots
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            self.flag(view, "bootstrap_fork", format!("independent roots: {roots}"));
            self.operational_roots.clear(); // flag once per new root set
        }
    }
}

/// Ground-truth census: membership from the most advanced committed log,
/// faulty = halted members, isolated = live members that cannot reach a
/// half-quorum of members over currently synchronous links.
pub fn compute_census(view: &StepView<'_>, bootstrap: ProcessId) -> Option<ClusterCensus> {
    let authoritative = view
        .states
        .values()
        .filter(|s| s.has_secret())
        .max_by_key(|s| (s.log().commit_index(), s.id()))?;
    let members = fold_membership(bootstrap, authoritative.log());
    let n = members.len();
    if n == 0 {
        return None;
    }
    let alive = |p: ProcessId| -> bool {
        view.states
            .get(&p)
            .map_or(false, |s| s.role() != Role::Halted)
    };
    let f = members.iter().filter(|p| !alive(*p)).count();
    let half_quorum = n / 2;
    let i = members
        .iter()
        .filter(|p| alive(*p))
        .filter(|p| {
            let reachable = members
                .iter()
                .filter(|q| *q != *p && alive(*q) && view.link_synchronous(*p, *q))
                .count();
            reachable < half_quorum
        })
        .count();
    Some(ClusterCensus { n, f, i })
}

/// Tracks when the application sits in anarchy, as judged by the census.
pub struct CensusTracker {
    bootstrap: ProcessId,
    anarchy_since: Option<VirtualTime>,
    pub intervals: Vec<(VirtualTime, VirtualTime)>,
    pub last: Option<ClusterCensus>,
}

impl CensusTracker {
    pub fn new(bootstrap: ProcessId) -> Self {
        CensusTracker {
            bootstrap,
            anarchy_since: None,
            intervals: Vec::new(),
            last: None,
        }
    }

    /// Close any open interval at the end of a run.
    pub fn finish(&mut self, now: VirtualTime) {
        if let Some(since) = self.anarchy_since.take() {
            self.intervals.push((since, now));
        }
    }

    pub fn in_anarchy(&self) -> bool {
        self.anarchy_since.is_some()
    }
}

impl Observer for CensusTracker {
    fn on_step(&mut self, view: &StepView<'_>) {
        let Some(census) = compute_census(view, self.bootstrap) else {
            return;
        };
        self.last = Some(census);
        let anarchy = is_anarchy(census).unwrap_or(false);
        match (anarchy, self.anarchy_since) {
            (true, None) => self.anarchy_since = Some(view.at),
            (false, Some(since)) => {
                self.intervals.push((since, view.at));
                self.anarchy_since = None;
            }
            _ => {}
        }
    }
}

/// Convergence verdict at quiescence: all operational processes agree on
/// membership and commit progress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvergenceVerdict {
    pub converged: bool,
    pub divergent: Option<(ProcessId, ProcessId, String)>,
}

pub fn check_convergence<'a>(
    states: impl Iterator<Item = &'a ProcessState>,
) -> ConvergenceVerdict {
    let ops: Vec<&ProcessState> = states.filter(|s| s.is_operational()).collect();
    for pair in ops.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.peer_list() != b.peer_list() {
            return ConvergenceVerdict {
                converged: false,
                divergent: Some((
                    a.id(),
                    b.id(),
                    format!("peerList {} vs {}", a.peer_list(), b.peer_list()),
                )),
            };
        }
        if a.log().commit_index() != b.log().commit_index() {
            return ConvergenceVerdict {
                converged: false,
                divergent: Some((
                    a.id(),
                    b.id(),
                    format!(
                        "commitIndex {} vs {}",
                        a.log().commit_index(),
                        b.log().commit_index()
                    ),
                )),
            };
        }
    }
    ConvergenceVerdict {
        converged: true,
        divergent: None,
    }
}
