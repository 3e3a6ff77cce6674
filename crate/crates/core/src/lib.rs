//! Deterministic desk-scale simulator for an autonomous membership service
//! for enclave applications.
//!
//! A cluster of enclave processes administers its own membership: one leader
//! monitors followers through heartbeats, commissions new processes after
//! attesting them, expels processes it suspects of having halted, and an
//! unjustly expelled process destroys itself once it can no longer prove its
//! membership. Everything runs on a virtual clock so that safety properties
//! and latency experiments are reproducible from a seed.
//!
//! Layout:
//! * [`types`] — core domain types and membership arithmetic
//! * [`engine`] — the per-process protocol state machine (pure, no I/O)
//! * [`attest`] — mock quotes, IAS stub, and host attestation delegates
//! * [`simnet`] — discrete-event network with adversarial fault injection
//! * [`harness`] — scenarios, observers, metrics, and experiment drivers

pub mod attest;
pub mod engine;
pub mod harness;
pub mod simnet;
pub mod types;
