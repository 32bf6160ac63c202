//! Direct TCP transport.
//!
//! The byte stream carries protocol frames and reliability data envelopes
//! back to back with no extra delimiters — both are self-describing, so the
//! receive half splits the stream structurally.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use crate::wire::{self, Endpoint, Scheme};

use super::reliable::DATA_MARKER;
use super::{real_ms, ClockMs, EmissionRx, EmissionTx, RecvOutcome, TransportError};

fn io_err(endpoint: &Endpoint, source: std::io::Error) -> TransportError {
    TransportError::Io { endpoint: endpoint.to_string(), source }
}

/// Plain TCP connection to a direct endpoint.
pub fn connect_direct(ep: &Endpoint) -> Result<TcpStream, TransportError> {
    let stream = TcpStream::connect((ep.host.as_str(), ep.port)).map_err(|e| io_err(ep, e))?;
    stream.set_nodelay(true).map_err(|e| io_err(ep, e))?;
    Ok(stream)
}

/// Split a connected stream into channel halves. Works for direct sockets
/// and for streams already tunneled through a SOCKS proxy.
pub fn stream_links(stream: TcpStream, peer: &Endpoint) -> Result<(TcpTx, TcpRx), TransportError> {
    let clone = stream.try_clone().map_err(|e| io_err(peer, e))?;
    Ok((
        TcpTx { stream, peer: peer.clone() },
        TcpRx { stream: clone, peer: peer.clone(), buf: Vec::new() },
    ))
}

pub struct TcpTx {
    stream: TcpStream,
    peer: Endpoint,
}

impl EmissionTx for TcpTx {
    fn send(&mut self, bytes: &[u8], _now_ms: ClockMs) -> Result<(), TransportError> {
        self.stream.write_all(bytes).map_err(|e| io_err(&self.peer, e))
    }
}

pub struct TcpRx {
    stream: TcpStream,
    peer: Endpoint,
    buf: Vec<u8>,
}

impl EmissionRx for TcpRx {
    fn recv(&mut self, timeout: Duration) -> Result<RecvOutcome, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(len) = split_emission(&self.buf)? {
                let emission = self.buf.drain(..len).collect();
                return Ok(RecvOutcome::Emission(emission, real_ms()));
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(RecvOutcome::TimedOut);
            }
            self.stream
                .set_read_timeout(Some(remaining))
                .map_err(|e| io_err(&self.peer, e))?;
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    if self.buf.is_empty() {
                        return Ok(RecvOutcome::Closed);
                    }
                    return Err(TransportError::MalformedEmission(
                        "stream closed inside an emission".into(),
                    ));
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                    return Ok(RecvOutcome::TimedOut);
                }
                Err(e) if e.kind() == ErrorKind::ConnectionReset => {
                    return Ok(RecvOutcome::Closed);
                }
                Err(e) => return Err(io_err(&self.peer, e)),
            }
        }
    }
}

/// Length of the complete emission at the front of `buf`, if one is there.
/// An emission is either a bare frame (leads with the frame magic) or a data
/// envelope: marker ‖ seq u32 ‖ frame.
pub fn split_emission(buf: &[u8]) -> Result<Option<usize>, TransportError> {
    if buf.is_empty() {
        return Ok(None);
    }
    match buf[0] {
        b if b == wire::MAGIC[0] => frame_len_at(buf, 0),
        DATA_MARKER => {
            const ENVELOPE: usize = 5;
            if buf.len() < ENVELOPE {
                return Ok(None);
            }
            Ok(frame_len_at(buf, ENVELOPE)?.map(|n| ENVELOPE + n))
        }
        other => Err(TransportError::MalformedEmission(format!(
            "unexpected leading byte {other:#04x}"
        ))),
    }
}

fn frame_len_at(buf: &[u8], offset: usize) -> Result<Option<usize>, TransportError> {
    let frame = &buf[offset..];
    if frame.len() < wire::HEADER_LEN {
        return Ok(None);
    }
    if frame[0..2] != wire::MAGIC {
        return Err(TransportError::MalformedEmission("bad frame magic".into()));
    }
    let body_len = u32::from_be_bytes(frame[4..8].try_into().unwrap());
    if body_len > wire::MAX_BODY_LEN {
        return Err(TransportError::MalformedEmission(format!(
            "frame body of {body_len} bytes exceeds cap"
        )));
    }
    let total = wire::HEADER_LEN + body_len as usize;
    if frame.len() < total {
        return Ok(None);
    }
    Ok(Some(total))
}

/// TCP listener producing channel halves.
pub struct DirectAcceptor {
    listener: TcpListener,
    endpoint: Endpoint,
}

pub fn listen_direct(bind: &Endpoint) -> Result<DirectAcceptor, TransportError> {
    let listener =
        TcpListener::bind((bind.host.as_str(), bind.port)).map_err(|e| io_err(bind, e))?;
    let actual = listener.local_addr().map_err(|e| io_err(bind, e))?;
    listener.set_nonblocking(true).map_err(|e| io_err(bind, e))?;
    let endpoint = Endpoint::new(Scheme::Direct, bind.host.clone(), actual.port())
        .map_err(TransportError::Wire)?;
    Ok(DirectAcceptor { listener, endpoint })
}

impl super::Acceptor for DirectAcceptor {
    fn accept(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<(super::TxHalf, super::RxHalf)>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, addr)) => {
                    stream.set_nodelay(true).ok();
                    let peer = Endpoint::new(Scheme::Direct, addr.ip().to_string(), addr.port().max(1))
                        .map_err(TransportError::Wire)?;
                    let (tx, rx) = stream_links(stream, &peer)?;
                    return Ok(Some((Box::new(tx), Box::new(rx))));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(io_err(&self.endpoint, e)),
            }
        }
    }

    fn local_endpoint(&self) -> Endpoint {
        self.endpoint.clone()
    }
}
