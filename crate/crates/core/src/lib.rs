//! anonpads: a distributed time-stepped simulation middleware whose
//! inter-process traffic can be anonymized.
//!
//! Logical Processes (LPs) bootstrap through a central coordinator (the SIMA),
//! build a full mesh keyed by pseudonym identifiers, and run a time-stepped
//! wireless benchmark model with optional self-clustering entity migration.
//! Every channel speaks one length-prefixed binary frame protocol over a
//! pluggable transport: direct TCP, SOCKS5 (Tor-compatible), or an in-process
//! emulated anonymizing overlay with moment-matched latency.

pub mod balancer;
pub mod bench;
pub mod config;
pub mod coordinator;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod transport;
pub mod wire;
