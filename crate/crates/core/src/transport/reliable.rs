//! Application-layer exactly-once delivery over a lossy channel.
//!
//! A sliding window of unacknowledged frames with cumulative acks and
//! timer-driven retransmission. The wire carries two kinds of emission:
//!
//! ```text
//! data:  0xD5 ‖ seq (u32 BE) ‖ frame bytes
//! ack:   a protocol Ack frame carrying the receiver's next expected seq
//! ```
//!
//! The state machine is single-owner and time is passed in explicitly, so
//! tests drive retransmission without real clocks. Delivery to the
//! application is gap-free and duplicate-free, in per-sender order, under
//! any schedule of drops, duplicates, bounded reorders and resets.

use std::collections::{BTreeMap, VecDeque};

use crate::wire::{decode_frame, encode_frame, DecodeOutcome, Message};

use super::{ClockMs, TransportError, TxHalf};

/// Marker byte for data emissions; distinct from the frame magic.
pub const DATA_MARKER: u8 = 0xD5;

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityConfig {
    /// Maximum unacknowledged frames in flight.
    pub window: usize,
    /// Retransmit timeout = max(rto_min_ms, rto_factor × smoothed RTT).
    pub rto_min_ms: f64,
    pub rto_factor: f64,
    /// Retransmissions per frame before the channel is declared failed.
    pub max_retries: u32,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self { window: 64, rto_min_ms: 200.0, rto_factor: 4.0, max_retries: 20 }
    }
}

#[derive(Clone, Debug)]
struct Unacked {
    seq: u32,
    frame: Vec<u8>,
    first_sent_at: ClockMs,
    last_sent_at: ClockMs,
    retries: u32,
}

/// Sender and receiver state for one direction-pair of a channel.
#[derive(Clone, Debug)]
pub struct ReliabilityState {
    cfg: ReliabilityConfig,
    next_send_seq: u32,
    unacked: VecDeque<Unacked>,
    recv_next_expected: u32,
    reorder: BTreeMap<u32, Vec<u8>>,
    srtt_ms: Option<f64>,
    /// A duplicate or out-of-order arrival wants an ack, deferred to the next
    /// tick. Acking every duplicate immediately can phase-lock with periodic
    /// loss patterns and starve the cumulative ack.
    ack_pending: bool,
}

impl ReliabilityState {
    pub fn new(cfg: ReliabilityConfig) -> Self {
        Self {
            cfg,
            next_send_seq: 0,
            unacked: VecDeque::new(),
            recv_next_expected: 0,
            reorder: BTreeMap::new(),
            srtt_ms: None,
            ack_pending: false,
        }
    }

    pub fn can_send(&self) -> bool {
        self.unacked.len() < self.cfg.window
    }

    pub fn unacked_len(&self) -> usize {
        self.unacked.len()
    }

    pub fn rto_ms(&self) -> f64 {
        match self.srtt_ms {
            Some(srtt) => (self.cfg.rto_factor * srtt).max(self.cfg.rto_min_ms),
            None => self.cfg.rto_min_ms,
        }
    }

    fn data_emission(seq: u32, frame: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + frame.len());
        out.push(DATA_MARKER);
        out.extend_from_slice(&seq.to_be_bytes());
        out.extend_from_slice(frame);
        out
    }

    fn ack_emission(&self) -> Vec<u8> {
        encode_frame(&Message::Ack { cumulative_seq: self.recv_next_expected })
            .expect("ack frame always encodes")
    }

    /// Queue one application frame. Returns the wire emissions to transmit.
    /// Errors with `WindowFull` when the window is exhausted; the caller
    /// must drain inbound acks first.
    pub fn send_reliable(
        &mut self,
        frame: &[u8],
        now: ClockMs,
    ) -> Result<Vec<Vec<u8>>, TransportError> {
        if !self.can_send() {
            return Err(TransportError::WindowFull);
        }
        let seq = self.next_send_seq;
        self.next_send_seq = self.next_send_seq.wrapping_add(1);
        self.unacked.push_back(Unacked {
            seq,
            frame: frame.to_vec(),
            first_sent_at: now,
            last_sent_at: now,
            retries: 0,
        });
        Ok(vec![Self::data_emission(seq, frame)])
    }

    /// Process one wire emission. Returns frames now deliverable to the
    /// application (in order, exactly once) and emissions to transmit back.
    pub fn on_receive(
        &mut self,
        emission: &[u8],
        now: ClockMs,
    ) -> Result<(Vec<Vec<u8>>, Vec<Vec<u8>>), TransportError> {
        if emission.first() == Some(&DATA_MARKER) {
            if emission.len() < 5 {
                return Err(TransportError::MalformedEmission("short data envelope".into()));
            }
            let seq = u32::from_be_bytes(emission[1..5].try_into().unwrap());
            let frame = &emission[5..];
            let before = self.recv_next_expected;
            let delivered = self.accept_data(seq, frame);
            let replies = if self.recv_next_expected != before {
                vec![self.ack_emission()]
            } else {
                self.ack_pending = true;
                Vec::new()
            };
            return Ok((delivered, replies));
        }
        // Anything else must be a bare Ack frame.
        match decode_frame(emission)? {
            DecodeOutcome::Complete { message: Message::Ack { cumulative_seq }, .. } => {
                self.accept_ack(cumulative_seq, now);
                Ok((Vec::new(), Vec::new()))
            }
            DecodeOutcome::Complete { message, .. } => Err(TransportError::MalformedEmission(
                format!("bare {} frame on a reliable channel", message.name()),
            )),
            DecodeOutcome::NeedMoreBytes => {
                Err(TransportError::MalformedEmission("truncated emission".into()))
            }
        }
    }

    fn accept_data(&mut self, seq: u32, frame: &[u8]) -> Vec<Vec<u8>> {
        let expected = self.recv_next_expected;
        // Sequence space comparison via wrapping distance.
        let ahead = seq.wrapping_sub(expected);
        if ahead >= u32::MAX / 2 {
            // Behind the cumulative point: duplicate of something delivered.
            return Vec::new();
        }
        if ahead as usize >= self.cfg.window * 2 {
            // Far ahead of anything a window-respecting sender could emit.
            return Vec::new();
        }
        if ahead > 0 {
            self.reorder.entry(seq).or_insert_with(|| frame.to_vec());
            return Vec::new();
        }
        let mut delivered = vec![frame.to_vec()];
        self.recv_next_expected = self.recv_next_expected.wrapping_add(1);
        while let Some(frame) = self.reorder.remove(&self.recv_next_expected) {
            delivered.push(frame);
            self.recv_next_expected = self.recv_next_expected.wrapping_add(1);
        }
        delivered
    }

    fn accept_ack(&mut self, cumulative: u32, now: ClockMs) {
        while let Some(front) = self.unacked.front() {
            // front.seq < cumulative in wrapping arithmetic.
            if cumulative.wrapping_sub(front.seq).wrapping_sub(1) >= u32::MAX / 2 {
                break;
            }
            let acked = self.unacked.pop_front().unwrap();
            if acked.retries == 0 {
                // Karn's rule: only unambiguous samples feed the estimate.
                let sample = now - acked.first_sent_at;
                self.srtt_ms = Some(match self.srtt_ms {
                    Some(srtt) => srtt * 0.875 + sample * 0.125,
                    None => sample,
                });
            }
        }
    }

    /// Drive retransmission timers and flush a deferred ack. Returns
    /// emissions to transmit, or `ChannelFailed` once a frame exhausts its
    /// retries.
    pub fn on_tick(&mut self, now: ClockMs) -> Result<Vec<Vec<u8>>, TransportError> {
        let rto = self.rto_ms();
        let mut out = Vec::new();
        if self.ack_pending {
            self.ack_pending = false;
            out.push(self.ack_emission());
        }
        for entry in self.unacked.iter_mut() {
            if now - entry.last_sent_at >= rto {
                entry.retries += 1;
                if entry.retries > self.cfg.max_retries {
                    return Err(TransportError::ChannelFailed {
                        seq: entry.seq,
                        retries: entry.retries,
                    });
                }
                entry.last_sent_at = now;
                out.push(Self::data_emission(entry.seq, &entry.frame));
            }
        }
        Ok(out)
    }
}

/// A reliability state machine bound to a send half: the engine-facing
/// channel object. Single-owner; inbound emissions are fed by the owner.
pub struct ReliableChannel {
    pub peer_id: u32,
    tx: TxHalf,
    state: ReliabilityState,
}

impl ReliableChannel {
    pub fn new(peer_id: u32, tx: TxHalf, cfg: ReliabilityConfig) -> Self {
        Self { peer_id, tx, state: ReliabilityState::new(cfg) }
    }

    pub fn can_send(&self) -> bool {
        self.state.can_send()
    }

    pub fn is_drained(&self) -> bool {
        self.state.unacked_len() == 0
    }

    pub fn send_frame(&mut self, frame: &[u8], now: ClockMs) -> Result<(), TransportError> {
        for emission in self.state.send_reliable(frame, now)? {
            self.tx.send(&emission, now)?;
        }
        Ok(())
    }

    /// Feed one inbound emission; returns application frames now deliverable.
    pub fn on_emission(
        &mut self,
        emission: &[u8],
        now: ClockMs,
    ) -> Result<Vec<Vec<u8>>, TransportError> {
        let (delivered, outbound) = self.state.on_receive(emission, now)?;
        for emission in outbound {
            self.tx.send(&emission, now)?;
        }
        Ok(delivered)
    }

    pub fn tick(&mut self, now: ClockMs) -> Result<(), TransportError> {
        for emission in self.state.on_tick(now)? {
            self.tx.send(&emission, now)?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for ReliableChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReliableChannel")
            .field("peer_id", &self.peer_id)
            .field("unacked", &self.state.unacked_len())
            .finish()
    }
}
