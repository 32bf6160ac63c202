//! Pluggable channel layer.
//!
//! Three interchangeable transports sit behind one emission-oriented
//! contract: direct TCP, SOCKS5 tunneling (Tor-compatible), and an in-process
//! emulated anonymizing overlay. An emission is one unit the reliability
//! layer hands to the wire: either a bare protocol frame or a sequence-tagged
//! data envelope (see [`reliable`]).
//!
//! A channel is a (tx, rx) half pair. Each half is owned by exactly one
//! context at a time; halves may move between threads but are never shared.

pub mod direct;
pub mod emu;
pub mod reliable;
pub mod socks;
pub mod testproxy;

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::wire::{Endpoint, Scheme};

pub use emu::{CircuitState, EmuConfig, EmuNet, LatencyParams};
pub use reliable::{ReliabilityConfig, ReliabilityState, ReliableChannel};
pub use socks::SocksConfig;

/// Milliseconds on whichever clock the transport runs: wall time since the
/// process epoch, or the virtual ledger clock.
pub type ClockMs = f64;

/// Whether emulated delays are really slept (wall-clock realism) or only
/// accounted on a virtual clock (deterministic tests).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Sleep,
    Ledger,
}

static EPOCH: std::sync::OnceLock<Instant> = std::sync::OnceLock::new();

/// Wall-clock milliseconds since the first call in this process.
pub fn real_ms() -> ClockMs {
    EPOCH.get_or_init(Instant::now).elapsed().as_secs_f64() * 1000.0
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o on {endpoint}: {source}")]
    Io {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("connect to {endpoint} failed after {attempts} attempts: {detail}")]
    ConnectFailed { endpoint: String, attempts: u32, detail: String },
    #[error("SOCKS handshake: {0}")]
    Handshake(String),
    #[error("no emulated listener for '{0}'")]
    NoSuchListener(String),
    #[error("emulated listener token '{0}' already bound")]
    ListenerTaken(String),
    #[error("channel closed by peer")]
    ChannelClosed,
    #[error("circuit down, rebuild required")]
    CircuitDown,
    #[error("channel failed: frame seq {seq} unacknowledged after {retries} retries")]
    ChannelFailed { seq: u32, retries: u32 },
    #[error("reliability window full")]
    WindowFull,
    #[error("malformed emission: {0}")]
    MalformedEmission(String),
    #[error("moment matching needs mean > 0, got {0}")]
    NonPositiveMean(f64),
    #[error("wire: {0}")]
    Wire(#[from] crate::wire::WireError),
}

/// Outcome of waiting on the receive half.
#[derive(Debug)]
pub enum RecvOutcome {
    /// An emission and its arrival stamp (virtual ms in ledger mode, wall ms
    /// otherwise).
    Emission(Vec<u8>, ClockMs),
    TimedOut,
    Closed,
}

/// Send half of a channel.
pub trait EmissionTx: Send {
    /// Queue one emission. `now_ms` is the sender's clock; real-time
    /// transports ignore it.
    fn send(&mut self, bytes: &[u8], now_ms: ClockMs) -> Result<(), TransportError>;
}

/// Receive half of a channel.
pub trait EmissionRx: Send {
    /// Block up to `timeout` (real time) for the next emission.
    fn recv(&mut self, timeout: Duration) -> Result<RecvOutcome, TransportError>;
}

pub type TxHalf = Box<dyn EmissionTx>;
pub type RxHalf = Box<dyn EmissionRx>;

/// Listening side of a transport.
pub trait Acceptor: Send {
    /// Accept one inbound channel, waiting up to `timeout`.
    fn accept(&mut self, timeout: Duration) -> Result<Option<(TxHalf, RxHalf)>, TransportError>;
    /// The endpoint peers should dial to reach this listener.
    fn local_endpoint(&self) -> Endpoint;
}

/// A dialing/listening context for one of the three transports.
#[derive(Clone)]
pub enum TransportCtx {
    Direct,
    Socks(SocksConfig),
    Emu(EmuNet),
}

impl TransportCtx {
    pub fn scheme(&self) -> Scheme {
        match self {
            TransportCtx::Direct => Scheme::Direct,
            TransportCtx::Socks(_) => Scheme::Socks,
            TransportCtx::Emu(_) => Scheme::Emu,
        }
    }

    pub fn clock_mode(&self) -> ClockMode {
        match self {
            TransportCtx::Emu(net) => net.clock_mode(),
            _ => ClockMode::Sleep,
        }
    }

    /// Current transport clock: the emulated virtual clock is caller-owned,
    /// so this only distinguishes wall time.
    pub fn dial(
        &self,
        dest: &Endpoint,
        from_label: &str,
        now_ms: ClockMs,
    ) -> Result<(TxHalf, RxHalf), TransportError> {
        match self {
            TransportCtx::Direct => {
                let stream = direct::connect_direct(dest)?;
                let (tx, rx) = direct::stream_links(stream, dest)?;
                Ok((Box::new(tx), Box::new(rx)))
            }
            TransportCtx::Socks(cfg) => {
                let conn = socks::socks_connect(cfg, dest)?;
                let (tx, rx) = direct::stream_links(conn.stream, dest)?;
                Ok((Box::new(tx), Box::new(rx)))
            }
            TransportCtx::Emu(net) => {
                let (tx, rx) = net.dial(from_label, dest, now_ms)?;
                Ok((Box::new(tx), Box::new(rx)))
            }
        }
    }

    /// Bind a listener. For direct and SOCKS transports `bind` names a local
    /// socket address (port 0 picks an ephemeral port); what peers should
    /// dial may differ (a .onion name) and is the caller's business.
    pub fn listen(&self, bind: &Endpoint) -> Result<Box<dyn Acceptor>, TransportError> {
        match self {
            TransportCtx::Direct | TransportCtx::Socks(_) => {
                Ok(Box::new(direct::listen_direct(bind)?))
            }
            TransportCtx::Emu(net) => Ok(Box::new(net.listen(&bind.host)?)),
        }
    }
}
