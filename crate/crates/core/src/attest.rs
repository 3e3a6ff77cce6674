//! Mock trusted-execution attestation: quotes, reports, a latency-charging
//! IAS stub, secure channels, and per-host attestation delegates that
//! amortize the IAS round trip across hosts.
//!
//! Nothing here is real cryptography. "Signatures" and "MACs" are keyed
//! digests over canonical serializations; the keys live on the simulation's
//! trusted side and the adversary API can only corrupt bytes in flight, never
//! read or forge them. A real backend could be slotted in behind the same
//! functions.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{mix64, HostId, ProcessId, VirtualTime};

/// Content hash of an enclave's initial code identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    /// Measures a codebase: equal bytes give equal digests, any change gives
    /// a different digest.
    pub fn of_code(code: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(code);
        Measurement(h.finalize().into())
    }
}

fn keyed_digest(key: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(key.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out: [u8; 32] = h.finalize().into();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Remotely verifiable attestation evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    /// Echo of the verifier's challenge nonce; binds the quote to one
    /// attestation session.
    pub challenge_response: u64,
    /// Ephemeral key material under which secrets can be provisioned back.
    pub ephemeral_pubkey: u64,
    pub signature: u64,
}

/// Locally verifiable attestation evidence, keyed to a target enclave on the
/// same host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report {
    pub measurement: Measurement,
    pub mac: u64,
}

/// An authenticated channel that exists only downstream of an accepted
/// attestation flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecureChannel {
    pub endpoints: (ProcessId, ProcessId),
    pub session_key: u64,
    pub established_at: VirtualTime,
}

/// Virtual-time cost of each attestation ingredient, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyModel {
    pub sign_us: u64,
    pub verify_us: u64,
    pub symmetric_us: u64,
    pub context_switch_us: u64,
    pub ias_roundtrip_us: u64,
    /// Optional deterministic jitter applied to the IAS round trip; zero by
    /// default so runs stay bit-reproducible without opting in.
    pub ias_jitter_us: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            sign_us: 450,
            verify_us: 844,
            symmetric_us: 5,
            context_switch_us: 5,
            ias_roundtrip_us: 250_000,
            ias_jitter_us: 0,
        }
    }
}

impl LatencyModel {
    /// Time an attesting enclave spends producing its evidence.
    pub fn evidence_cost_us(&self, delegated: bool) -> u64 {
        if delegated {
            // Local-attestation report: one symmetric MAC plus the enclave
            // boundary crossing.
            self.symmetric_us + self.context_switch_us
        } else {
            self.sign_us
        }
    }

    /// Time the verifying side spends before it learns the outcome.
    pub fn verdict_cost_us(&self, delegated: bool) -> u64 {
        if delegated {
            // Two local attestations bridge the pre-established delegate
            // channel; the conveyance piggybacks on messages already in
            // flight.
            2 * (self.symmetric_us + self.context_switch_us)
        } else {
            self.verify_us + self.ias_roundtrip_us
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    StaleChallenge,
    WrongMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttestOutcome {
    Accept,
    Reject(RejectReason),
}

impl AttestOutcome {
    pub fn accepted(self) -> bool {
        self == AttestOutcome::Accept
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("local attestation requires both enclaves on one host ({prover} vs {target})")]
    CrossHost { prover: ProcessId, target: ProcessId },
    #[error("hosts {0} and {1} have no delegate channel; pair them first")]
    UnpairedHosts(HostId, HostId),
    #[error("unknown enclave {0}")]
    UnknownEnclave(ProcessId),
    #[error("unknown host {0}")]
    UnknownHost(HostId),
}

fn host_pair(a: HostId, b: HostId) -> (HostId, HostId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Trusted-side registry of enclave identities, delegate channels, and IAS
/// traffic. One per simulation.
#[derive(Debug, Clone)]
pub struct Registry {
    cpu_key: u64,
    expected: Measurement,
    enclaves: BTreeMap<ProcessId, Measurement>,
    /// Enclaves whose attestation evidence the adversary corrupts in flight.
    tampered: BTreeSet<ProcessId>,
    hosts: BTreeSet<HostId>,
    compromised_hads: BTreeSet<HostId>,
    had_channels: BTreeSet<(HostId, HostId)>,
    channels: Vec<SecureChannel>,
    /// Processes whose attestation was accepted at least once; ground truth
    /// for the secret-confinement observer.
    accepted: BTreeSet<ProcessId>,
    ias_calls: u64,
    seed: u64,
}

impl Registry {
    pub fn new(seed: u64, expected: Measurement) -> Self {
        Registry {
            cpu_key: mix64(seed ^ 0xc0de_c0de),
            expected,
            enclaves: BTreeMap::new(),
            tampered: BTreeSet::new(),
            hosts: BTreeSet::new(),
            compromised_hads: BTreeSet::new(),
            had_channels: BTreeSet::new(),
            channels: Vec::new(),
            accepted: BTreeSet::new(),
            ias_calls: 0,
            seed,
        }
    }

    pub fn expected_measurement(&self) -> Measurement {
        self.expected
    }

    /// Declares a host; each host gets exactly one attestation delegate
    /// enclave.
    pub fn declare_host(&mut self, h: HostId) {
        self.hosts.insert(h);
    }

    pub fn register_enclave(&mut self, p: ProcessId, m: Measurement) {
        self.hosts.insert(p.host);
        self.enclaves.insert(p, m);
    }

    /// Marks a process whose outgoing attestation evidence gets corrupted.
    pub fn set_tampered(&mut self, p: ProcessId) {
        self.tampered.insert(p);
    }

    pub fn compromise_had(&mut self, h: HostId) {
        self.compromised_hads.insert(h);
    }

    /// Force-records an acceptance, used when clusters are assembled directly
    /// in a known-good state rather than bootstrapped through the protocol.
    pub fn record_accepted(&mut self, p: ProcessId) {
        self.accepted.insert(p);
    }

    pub fn was_accepted(&self, p: ProcessId) -> bool {
        self.accepted.contains(&p)
    }

    pub fn ias_call_count(&self) -> u64 {
        self.ias_calls
    }

    pub fn channels(&self) -> &[SecureChannel] {
        &self.channels
    }

    /// Ephemeral key a process generates for one commissioning; deterministic
    /// so both the trusted side and the enclave derive the same value.
    pub fn ephemeral_key(&self, p: ProcessId) -> u64 {
        mix64(self.seed ^ u64::from(p.id).wrapping_mul(0xe9_1d37))
    }

    fn quote_signature(&self, m: &Measurement, challenge: u64, eph: u64) -> u64 {
        keyed_digest(
            self.cpu_key,
            &[&m.0, &challenge.to_le_bytes(), &eph.to_le_bytes()],
        )
    }

    /// Produces attestation evidence for `enclave` bound to `challenge`.
    /// Tampered enclaves yield evidence whose signature will not verify.
    pub fn generate_quote(&self, enclave: ProcessId, challenge: u64) -> Result<Quote, AttestError> {
        let m = self
            .enclaves
            .get(&enclave)
            .copied()
            .ok_or(AttestError::UnknownEnclave(enclave))?;
        let eph = self.ephemeral_key(enclave);
        let mut signature = self.quote_signature(&m, challenge, eph);
        if self.tampered.contains(&enclave) {
            signature ^= 1;
        }
        Ok(Quote {
            measurement: m,
            challenge_response: challenge,
            ephemeral_pubkey: eph,
            signature,
        })
    }

    /// Verifies a quote the way the remote attestation service would:
    /// signature first, then challenge freshness, then the measurement.
    /// Counts one IAS round trip.
    pub fn ias_verify(
        &mut self,
        quote: &Quote,
        expected: &Measurement,
        outstanding_challenge: u64,
    ) -> AttestOutcome {
        self.ias_calls += 1;
        let want = self.quote_signature(
            &quote.measurement,
            quote.challenge_response,
            quote.ephemeral_pubkey,
        );
        if quote.signature != want {
            return AttestOutcome::Reject(RejectReason::BadSignature);
        }
        if quote.challenge_response != outstanding_challenge {
            return AttestOutcome::Reject(RejectReason::StaleChallenge);
        }
        if quote.measurement != *expected {
            return AttestOutcome::Reject(RejectReason::WrongMeasurement);
        }
        AttestOutcome::Accept
    }

    fn report_for(&self, prover: ProcessId, target_key: u64) -> Result<Report, AttestError> {
        let m = self
            .enclaves
            .get(&prover)
            .copied()
            .ok_or(AttestError::UnknownEnclave(prover))?;
        let mut mac = keyed_digest(target_key, &[&m.0]);
        if self.tampered.contains(&prover) {
            mac ^= 1;
        }
        Ok(Report { measurement: m, mac })
    }

    fn delegate_key(&self, host: HostId) -> u64 {
        mix64(self.cpu_key ^ u64::from(host.0))
    }

    /// Same-host attestation of `prover` towards `target`: a MAC the target
    /// can check without any attestation-service traffic.
    pub fn local_attest(
        &mut self,
        prover: ProcessId,
        target: ProcessId,
    ) -> Result<AttestOutcome, AttestError> {
        if prover.host != target.host {
            return Err(AttestError::CrossHost { prover, target });
        }
        let key = mix64(self.cpu_key ^ u64::from(target.id).wrapping_mul(0x7a_11));
        let report = self.report_for(prover, key)?;
        if report.mac != keyed_digest(key, &[&report.measurement.0]) {
            return Ok(AttestOutcome::Reject(RejectReason::BadSignature));
        }
        if report.measurement != self.expected {
            return Ok(AttestOutcome::Reject(RejectReason::WrongMeasurement));
        }
        Ok(AttestOutcome::Accept)
    }

    pub fn had_paired(&self, h1: HostId, h2: HostId) -> bool {
        self.had_channels.contains(&host_pair(h1, h2))
    }

    /// Establishes (or reuses) the delegate-to-delegate channel between two
    /// hosts. First pairing costs one IAS verification per direction; repeat
    /// calls reuse the channel for free.
    pub fn had_pair(&mut self, h1: HostId, h2: HostId) -> Result<u64, AttestError> {
        for h in [h1, h2] {
            if !self.hosts.contains(&h) {
                return Err(AttestError::UnknownHost(h));
            }
        }
        let pair = host_pair(h1, h2);
        if self.had_channels.contains(&pair) {
            return Ok(0);
        }
        // One IAS verification per direction; a compromised delegate fails
        // its verification and no channel comes into existence, but the IAS
        // round trips were still spent.
        let mut ok = true;
        for prover in [h1, h2] {
            self.ias_calls += 1;
            if self.compromised_hads.contains(&prover) {
                ok = false;
            }
        }
        if ok {
            self.had_channels.insert(pair);
        }
        Ok(2)
    }

    /// Cross-host attestation routed through the hosts' delegate enclaves:
    /// prover locally attests to its delegate, the result crosses the
    /// delegate channel, and the remote delegate locally vouches for it.
    /// Never touches the IAS.
    pub fn delegated_attest(
        &mut self,
        prover: ProcessId,
        verifier: ProcessId,
        _challenge: u64,
        now: VirtualTime,
    ) -> Result<AttestOutcome, AttestError> {
        if prover.host == verifier.host {
            return Err(AttestError::CrossHost {
                prover,
                target: verifier,
            });
        }
        if !self.had_paired(prover.host, verifier.host) {
            return Err(AttestError::UnpairedHosts(prover.host, verifier.host));
        }
        let ias_before = self.ias_calls;
        let outcome = (|| {
            let key = self.delegate_key(prover.host);
            let report = self.report_for(prover, key)?;
            if report.mac != keyed_digest(key, &[&report.measurement.0]) {
                return Ok(AttestOutcome::Reject(RejectReason::BadSignature));
            }
            if report.measurement != self.expected {
                return Ok(AttestOutcome::Reject(RejectReason::WrongMeasurement));
            }
            Ok(AttestOutcome::Accept)
        })();
        debug_assert_eq!(self.ias_calls, ias_before, "delegated flow must not touch IAS");
        let outcome = outcome?;
        if outcome.accepted() {
            self.accepted.insert(prover);
            self.channels.push(SecureChannel {
                endpoints: (prover, verifier),
                session_key: mix64(self.ephemeral_key(prover) ^ u64::from(verifier.id)),
                established_at: now,
            });
        }
        Ok(outcome)
    }

    /// Conventional remote attestation: challenge, quote, IAS verification.
    /// Serves as the independent oracle the delegated path is checked
    /// against.
    pub fn direct_remote_attest(
        &mut self,
        prover: ProcessId,
        verifier: ProcessId,
        challenge: u64,
        now: VirtualTime,
    ) -> Result<AttestOutcome, AttestError> {
        let quote = self.generate_quote(prover, challenge)?;
        let expected = self.expected;
        let outcome = self.ias_verify(&quote, &expected, challenge);
        if outcome.accepted() {
            self.accepted.insert(prover);
            self.channels.push(SecureChannel {
                endpoints: (prover, verifier),
                session_key: mix64(quote.ephemeral_pubkey ^ u64::from(verifier.id)),
                established_at: now,
            });
        }
        Ok(outcome)
    }

    /// Verifies evidence arriving at a commissioning leader, picking the
    /// delegated route when the hosts are paired. Returns the outcome and the
    /// virtual time the verdict costs. This is the single entry point the
    /// simulator uses.
    pub fn evaluate_commission(
        &mut self,
        quote: &Quote,
        joiner: ProcessId,
        verifier: ProcessId,
        outstanding_challenge: u64,
        model: &LatencyModel,
        had_enabled: bool,
        now: VirtualTime,
    ) -> (AttestOutcome, u64, bool) {
        let delegated = had_enabled
            && joiner.host != verifier.host
            && self.had_paired(joiner.host, verifier.host);
        let outcome = if delegated {
            // The wire evidence stands in for the local report; corruption of
            // either shows up the same way.
            let chain = self
                .delegated_attest(joiner, verifier, outstanding_challenge, now)
                .unwrap_or(AttestOutcome::Reject(RejectReason::BadSignature));
            match chain {
                AttestOutcome::Accept => {
                    let want = self.quote_signature(
                        &quote.measurement,
                        quote.challenge_response,
                        quote.ephemeral_pubkey,
                    );
                    if quote.signature != want {
                        AttestOutcome::Reject(RejectReason::BadSignature)
                    } else if quote.challenge_response != outstanding_challenge {
                        AttestOutcome::Reject(RejectReason::StaleChallenge)
                    } else {
                        AttestOutcome::Accept
                    }
                }
                reject => reject,
            }
        } else {
            let expected = self.expected;
            let out = self.ias_verify(quote, &expected, outstanding_challenge);
            if out.accepted() {
                self.accepted.insert(joiner);
                self.channels.push(SecureChannel {
                    endpoints: (joiner, verifier),
                    session_key: mix64(quote.ephemeral_pubkey ^ u64::from(verifier.id)),
                    established_at: now,
                });
            }
            out
        };
        if delegated && outcome.accepted() {
            self.accepted.insert(joiner);
        }
        (outcome, model.verdict_cost_us(delegated), !delegated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Registry, Measurement, ProcessId, ProcessId) {
        let good = Measurement::of_code(b"prog-v1");
        let mut reg = Registry::new(7, good);
        let p1 = ProcessId::new(1, HostId(1));
        let p2 = ProcessId::new(2, HostId(2));
        reg.register_enclave(p1, good);
        reg.register_enclave(p2, good);
        (reg, good, p1, p2)
    }

    #[test]
    fn quote_round_trip_verifies() {
        let (mut reg, good, p1, _) = setup();
        let q = reg.generate_quote(p1, 99).unwrap();
        assert_eq!(reg.ias_verify(&q, &good, 99), AttestOutcome::Accept);
    }

    #[test]
    fn two_challenges_differ_only_in_response() {
        let (reg, _, p1, _) = setup();
        let a = reg.generate_quote(p1, 1).unwrap();
        let b = reg.generate_quote(p1, 2).unwrap();
        assert_eq!(a.measurement, b.measurement);
        assert_ne!(a.challenge_response, b.challenge_response);
        assert_ne!(a.signature, b.signature);
    }

    #[test]
    fn reject_reasons_are_distinguishable() {
        let (mut reg, good, p1, _) = setup();
        let q = reg.generate_quote(p1, 5).unwrap();

        let mut flipped = q;
        flipped.signature ^= 1 << 17;
        assert_eq!(
            reg.ias_verify(&flipped, &good, 5),
            AttestOutcome::Reject(RejectReason::BadSignature)
        );

        // Replay with an old nonce.
        assert_eq!(
            reg.ias_verify(&q, &good, 6),
            AttestOutcome::Reject(RejectReason::StaleChallenge)
        );

        let other = Measurement::of_code(b"prog-v2");
        assert_eq!(
            reg.ias_verify(&q, &other, 5),
            AttestOutcome::Reject(RejectReason::WrongMeasurement)
        );
    }

    #[test]
    fn local_attestation_is_cheap_and_same_host_only() {
        let (mut reg, good, p1, p2) = setup();
        let p1b = ProcessId::new(3, HostId(1));
        reg.register_enclave(p1b, good);
        let before = reg.ias_call_count();
        assert_eq!(reg.local_attest(p1b, p1).unwrap(), AttestOutcome::Accept);
        assert_eq!(reg.ias_call_count(), before);
        assert!(matches!(
            reg.local_attest(p1, p2),
            Err(AttestError::CrossHost { .. })
        ));
    }

    #[test]
    fn had_pairing_counts_two_ias_calls_once() {
        let (mut reg, _, p1, p2) = setup();
        assert_eq!(reg.had_pair(p1.host, p2.host).unwrap(), 2);
        assert!(reg.had_paired(p2.host, p1.host));
        assert_eq!(reg.had_pair(p2.host, p1.host).unwrap(), 0);
        assert_eq!(reg.ias_call_count(), 2);
    }

    #[test]
    fn compromised_delegate_never_pairs() {
        let (mut reg, _, p1, p2) = setup();
        reg.compromise_had(p1.host);
        reg.had_pair(p1.host, p2.host).unwrap();
        assert!(!reg.had_paired(p1.host, p2.host));
    }

    #[test]
    fn delegated_requires_pairing_and_skips_ias() {
        let (mut reg, _, p1, p2) = setup();
        assert!(matches!(
            reg.delegated_attest(p1, p2, 4, 0),
            Err(AttestError::UnpairedHosts(..))
        ));
        reg.had_pair(p1.host, p2.host).unwrap();
        let before = reg.ias_call_count();
        assert_eq!(reg.delegated_attest(p1, p2, 4, 0).unwrap(), AttestOutcome::Accept);
        assert_eq!(reg.ias_call_count(), before);
        assert_eq!(reg.channels().len(), 1);
    }

    #[test]
    fn delegation_matches_direct_verdict_for_all_prover_conditions() {
        // {honest, tampered, wrong-measurement} for the attesting side must
        // yield identical accept/reject decisions on both routes.
        let good = Measurement::of_code(b"prog-v1");
        for condition in 0..3 {
            let mut reg = Registry::new(11, good);
            let prover = ProcessId::new(1, HostId(1));
            let verifier = ProcessId::new(2, HostId(2));
            let m = if condition == 2 {
                Measurement::of_code(b"prog-evil")
            } else {
                good
            };
            reg.register_enclave(prover, m);
            reg.register_enclave(verifier, good);
            if condition == 1 {
                reg.set_tampered(prover);
            }
            reg.had_pair(prover.host, verifier.host).unwrap();
            let direct = reg.direct_remote_attest(prover, verifier, 8, 0).unwrap();
            let delegated = reg.delegated_attest(prover, verifier, 8, 0).unwrap();
            assert_eq!(direct.accepted(), delegated.accepted(), "condition {condition}");
        }
    }

    #[test]
    fn verdict_costs_follow_the_latency_model() {
        let m = LatencyModel::default();
        assert_eq!(m.verdict_cost_us(false), 844 + 250_000);
        assert_eq!(m.verdict_cost_us(true), 2 * (5 + 5));
        assert_eq!(m.evidence_cost_us(false), 450);
        assert_eq!(m.evidence_cost_us(true), 10);
    }
}
