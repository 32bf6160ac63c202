//! The SIMA: a bootstrap-only coordinator.
//!
//! LPs register their self-reported endpoints; the SIMA assigns dense
//! pseudonym identifiers in arrival order and, once everyone expected has
//! registered, broadcasts one roster to all of them and exits. It plays no
//! role during the simulation.
//!
//! The SIMA only ever sees what an LP chooses to advertise. It does not
//! verify the endpoint (a spoofed address is the registrant's own problem),
//! and it never records transport-layer peer addresses, so compromising the
//! SIMA does not reveal where any LP actually runs.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::transport::{Acceptor, ClockMs, RecvOutcome, TransportCtx, TransportError, TxHalf};
use crate::wire::{encode_frame, DecodeOutcome, Endpoint, LpIdentity, Message, WireError};

#[derive(Debug, Error)]
pub enum SimaError {
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("timed out after {0:?} waiting for registrations")]
    Timeout(Duration),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimaPhase {
    Collecting,
    BroadcastDone,
}

/// Registration state machine, transport-free for testability.
#[derive(Debug)]
pub struct SimaState {
    expected_lps: u32,
    registered: BTreeMap<u32, LpIdentity>,
    phase: SimaPhase,
}

/// What `handle_register` wants the caller to transmit.
#[derive(Debug, PartialEq)]
pub enum RegisterEffect {
    /// Ack this registrant; not everyone has arrived yet.
    Ack { lp_id: u32, total_lps: u32 },
    /// Ack this registrant and broadcast the roster to every LP.
    AckAndBroadcast { lp_id: u32, total_lps: u32, roster: Vec<LpIdentity> },
}

impl SimaState {
    pub fn new(expected_lps: u32) -> Self {
        assert!(expected_lps >= 1, "a run needs at least one LP");
        Self { expected_lps, registered: BTreeMap::new(), phase: SimaPhase::Collecting }
    }

    pub fn phase(&self) -> SimaPhase {
        self.phase
    }

    pub fn roster(&self) -> Vec<LpIdentity> {
        self.registered.values().cloned().collect()
    }

    /// Admit one registration: assign the next dense id. Rejects anything
    /// after the roster went out and any endpoint already registered (an LP
    /// re-registering).
    pub fn handle_register(
        &mut self,
        listen_endpoint: Endpoint,
    ) -> Result<RegisterEffect, SimaError> {
        if self.phase != SimaPhase::Collecting {
            return Err(SimaError::Rejected("roster already broadcast".into()));
        }
        if self.registered.values().any(|lp| lp.endpoint == listen_endpoint) {
            return Err(SimaError::Rejected(format!(
                "endpoint {listen_endpoint} already registered"
            )));
        }
        let lp_id = self.registered.len() as u32;
        self.registered.insert(lp_id, LpIdentity { lp_id, endpoint: listen_endpoint });
        if self.registered.len() as u32 == self.expected_lps {
            self.phase = SimaPhase::BroadcastDone;
            Ok(RegisterEffect::AckAndBroadcast {
                lp_id,
                total_lps: self.expected_lps,
                roster: self.roster(),
            })
        } else {
            Ok(RegisterEffect::Ack { lp_id, total_lps: self.expected_lps })
        }
    }
}

/// Summary returned when the SIMA exits: pseudonyms and the opaque endpoints
/// the LPs self-reported — nothing else.
#[derive(Clone, Debug)]
pub struct SimaReport {
    pub assigned: Vec<LpIdentity>,
    pub roster_bytes: Vec<u8>,
}

impl std::fmt::Display for SimaReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "registered {} LPs:", self.assigned.len())?;
        for lp in &self.assigned {
            writeln!(f, "  lp {} -> {}", lp.lp_id, lp.endpoint)?;
        }
        Ok(())
    }
}

pub struct SimaOptions {
    pub timeout: Duration,
}

impl Default for SimaOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(300) }
    }
}

/// Serve registrations on an already-bound listener until the roster goes
/// out, then return. One acceptor loop serializes all handling.
pub fn run_sima(
    acceptor: &mut dyn Acceptor,
    expected_lps: u32,
    opts: &SimaOptions,
) -> Result<SimaReport, SimaError> {
    let mut state = SimaState::new(expected_lps);
    // Registrants stay connected until the roster is pushed back to them.
    let mut conns: Vec<(u32, TxHalf)> = Vec::new();
    let deadline = Instant::now() + opts.timeout;
    // The SIMA's own clock for stamping sends: max of registration arrival
    // stamps (virtual on the emulated overlay, wall time otherwise).
    let mut clock: ClockMs = 0.0;

    while state.phase() == SimaPhase::Collecting {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(SimaError::Timeout(opts.timeout));
        }
        let Some((mut tx, mut rx)) = acceptor.accept(remaining.min(Duration::from_millis(100)))?
        else {
            continue;
        };
        // One registration frame per connection.
        let (emission, stamp) = match rx.recv(Duration::from_secs(10))? {
            RecvOutcome::Emission(bytes, stamp) => (bytes, stamp),
            _ => continue, // dialer went away; not a registration
        };
        clock = clock.max(stamp);
        let listen_endpoint = match decode_emission(&emission)? {
            Message::Register { listen_endpoint } => listen_endpoint,
            _ => continue, // not a registration; drop the connection
        };
        match state.handle_register(listen_endpoint) {
            Ok(RegisterEffect::Ack { lp_id, total_lps }) => {
                let ack = encode_frame(&Message::RegisterAck { lp_id, total_lps })?;
                tx.send(&ack, clock)?;
                conns.push((lp_id, tx));
            }
            Ok(RegisterEffect::AckAndBroadcast { lp_id, total_lps, roster }) => {
                let ack = encode_frame(&Message::RegisterAck { lp_id, total_lps })?;
                tx.send(&ack, clock)?;
                conns.push((lp_id, tx));
                // One encoding, sent verbatim to every LP: byte-identical
                // rosters by construction.
                let roster_frame = encode_frame(&Message::Roster { entries: roster })?;
                for (_, conn) in conns.iter_mut() {
                    conn.send(&roster_frame, clock)?;
                }
                return Ok(SimaReport { assigned: state.roster(), roster_bytes: roster_frame });
            }
            Err(SimaError::Rejected(_)) => {
                // Refused registrants just see their connection close.
                continue;
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop exits via broadcast or timeout");
}

/// Bind and serve in one call; the CLI entry point.
pub fn run_sima_on(
    transport: &TransportCtx,
    listen: &Endpoint,
    expected_lps: u32,
    opts: &SimaOptions,
) -> Result<SimaReport, SimaError> {
    let mut acceptor = transport.listen(listen)?;
    run_sima(acceptor.as_mut(), expected_lps, opts)
}

fn decode_emission(bytes: &[u8]) -> Result<Message, SimaError> {
    match crate::wire::decode_frame(bytes)? {
        DecodeOutcome::Complete { message, .. } => Ok(message),
        DecodeOutcome::NeedMoreBytes => Err(SimaError::Wire(WireError::MalformedBody {
            msg: "Register",
            detail: "truncated frame emission".into(),
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Scheme;

    fn ep(host: &str) -> Endpoint {
        Endpoint::new(Scheme::Emu, host, 1).unwrap()
    }

    #[test]
    fn three_registrations_get_dense_ids_and_roster() {
        let mut state = SimaState::new(3);
        assert_eq!(
            state.handle_register(ep("anon:a")).unwrap(),
            RegisterEffect::Ack { lp_id: 0, total_lps: 3 }
        );
        assert_eq!(
            state.handle_register(ep("anon:b")).unwrap(),
            RegisterEffect::Ack { lp_id: 1, total_lps: 3 }
        );
        match state.handle_register(ep("anon:c")).unwrap() {
            RegisterEffect::AckAndBroadcast { lp_id, total_lps, roster } => {
                assert_eq!(lp_id, 2);
                assert_eq!(total_lps, 3);
                assert_eq!(roster.len(), 3);
                let ids: Vec<u32> = roster.iter().map(|l| l.lp_id).collect();
                assert_eq!(ids, vec![0, 1, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state.phase(), SimaPhase::BroadcastDone);
    }

    #[test]
    fn single_lp_run_broadcasts_immediately() {
        let mut state = SimaState::new(1);
        match state.handle_register(ep("anon:solo")).unwrap() {
            RegisterEffect::AckAndBroadcast { lp_id: 0, roster, .. } => {
                assert_eq!(roster.len(), 1)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflow_registration_is_rejected() {
        let mut state = SimaState::new(3);
        for host in ["anon:a", "anon:b", "anon:c"] {
            state.handle_register(ep(host)).unwrap();
        }
        assert!(matches!(state.handle_register(ep("anon:d")), Err(SimaError::Rejected(_))));
    }

    #[test]
    fn duplicate_endpoint_is_rejected() {
        let mut state = SimaState::new(3);
        state.handle_register(ep("anon:a")).unwrap();
        assert!(matches!(state.handle_register(ep("anon:a")), Err(SimaError::Rejected(_))));
        // The slot was not consumed.
        state.handle_register(ep("anon:b")).unwrap();
        match state.handle_register(ep("anon:c")).unwrap() {
            RegisterEffect::AckAndBroadcast { .. } => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
