//! SOCKS5 client (RFC 1928), the Tor-compatible dialing path.
//!
//! Only the no-authentication method is offered and CONNECT always addresses
//! the destination by domain name, which is how .onion services are reached.
//! The anonymity overlay may refuse the first attempts while it builds a
//! circuit, so connects retry with exponential backoff.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use crate::wire::Endpoint;

use super::TransportError;

/// Environment variable overriding the proxy address as host:port.
pub const SOCKS_PROXY_ENV: &str = "ANONPADS_SOCKS_PROXY";

#[derive(Clone, Debug, PartialEq)]
pub struct SocksConfig {
    pub proxy_host: String,
    pub proxy_port: u16,
    pub connect_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Per-attempt socket timeout.
    pub io_timeout: Duration,
}

impl Default for SocksConfig {
    fn default() -> Self {
        Self {
            proxy_host: "127.0.0.1".into(),
            proxy_port: 9050,
            connect_retries: 10,
            initial_backoff_ms: 2000,
            max_backoff_ms: 30_000,
            io_timeout: Duration::from_secs(30),
        }
    }
}

impl SocksConfig {
    /// Apply the `ANONPADS_SOCKS_PROXY` override, if set.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(v) = std::env::var(SOCKS_PROXY_ENV) {
            if let Some((host, port)) = v.rsplit_once(':') {
                if let Ok(port) = port.parse::<u16>() {
                    self.proxy_host = host.to_string();
                    self.proxy_port = port;
                }
            }
        }
        self
    }
}

/// A stream tunneled through the proxy, plus how many attempts it took.
#[derive(Debug)]
pub struct SocksStream {
    pub stream: TcpStream,
    pub attempts: u32,
}

/// RFC 1928 reply codes worth naming.
const REP_SUCCESS: u8 = 0x00;

fn reply_text(rep: u8) -> &'static str {
    match rep {
        0x00 => "succeeded",
        0x01 => "general SOCKS server failure",
        0x02 => "connection not allowed by ruleset",
        0x03 => "network unreachable",
        0x04 => "host unreachable",
        0x05 => "connection refused",
        0x06 => "TTL expired",
        0x07 => "command not supported",
        0x08 => "address type not supported",
        _ => "unassigned reply code",
    }
}

/// The exact greeting this client sends: version 5, one method, no-auth.
pub fn greeting_bytes() -> [u8; 3] {
    [0x05, 0x01, 0x00]
}

/// The exact CONNECT request for a domain target.
pub fn connect_request_bytes(dest: &Endpoint) -> Vec<u8> {
    let mut req = Vec::with_capacity(7 + dest.host.len());
    req.extend_from_slice(&[0x05, 0x01, 0x00, 0x03, dest.host.len() as u8]);
    req.extend_from_slice(dest.host.as_bytes());
    req.extend_from_slice(&dest.port.to_be_bytes());
    req
}

/// Tunnel a TCP stream to `dest` through the configured SOCKS5 proxy,
/// retrying with exponential backoff on refusals and proxy outages.
pub fn socks_connect(cfg: &SocksConfig, dest: &Endpoint) -> Result<SocksStream, TransportError> {
    if dest.host.len() > 255 {
        return Err(TransportError::Handshake("destination host exceeds 255 bytes".into()));
    }
    let mut backoff = cfg.initial_backoff_ms;
    let mut last_error = String::from("no attempts made");
    for attempt in 1..=cfg.connect_retries.max(1) {
        match attempt_once(cfg, dest) {
            Ok(stream) => return Ok(SocksStream { stream, attempts: attempt }),
            Err(e) => last_error = e.to_string(),
        }
        if attempt < cfg.connect_retries.max(1) {
            std::thread::sleep(Duration::from_millis(backoff));
            backoff = (backoff * 2).min(cfg.max_backoff_ms);
        }
    }
    Err(TransportError::ConnectFailed {
        endpoint: dest.to_string(),
        attempts: cfg.connect_retries.max(1),
        detail: last_error,
    })
}

fn attempt_once(cfg: &SocksConfig, dest: &Endpoint) -> Result<TcpStream, TransportError> {
    let proxy = format!("{}:{}", cfg.proxy_host, cfg.proxy_port);
    let mut stream = TcpStream::connect(&proxy).map_err(|e| TransportError::Io {
        endpoint: proxy.clone(),
        source: e,
    })?;
    stream.set_read_timeout(Some(cfg.io_timeout)).ok();
    stream.set_write_timeout(Some(cfg.io_timeout)).ok();
    stream.set_nodelay(true).ok();

    let io = |e: std::io::Error| TransportError::Io { endpoint: proxy.clone(), source: e };

    stream.write_all(&greeting_bytes()).map_err(io)?;
    let mut method = [0u8; 2];
    stream.read_exact(&mut method).map_err(io)?;
    if method != [0x05, 0x00] {
        return Err(TransportError::Handshake(format!(
            "method selection {:02x?} (need no-auth)",
            method
        )));
    }

    stream.write_all(&connect_request_bytes(dest)).map_err(io)?;
    let mut head = [0u8; 4];
    stream.read_exact(&mut head).map_err(io)?;
    if head[0] != 0x05 {
        return Err(TransportError::Handshake(format!("reply version {:#04x}", head[0])));
    }
    if head[1] != REP_SUCCESS {
        return Err(TransportError::Handshake(format!(
            "reply {:#04x}: {}",
            head[1],
            reply_text(head[1])
        )));
    }
    // Consume BND.ADDR + BND.PORT.
    let addr_len = match head[3] {
        0x01 => 4,
        0x04 => 16,
        0x03 => {
            let mut len = [0u8; 1];
            stream.read_exact(&mut len).map_err(io)?;
            len[0] as usize
        }
        other => {
            return Err(TransportError::Handshake(format!("bind address type {other:#04x}")))
        }
    };
    let mut bind = vec![0u8; addr_len + 2];
    stream.read_exact(&mut bind).map_err(io)?;
    stream.set_read_timeout(None).ok();
    stream.set_write_timeout(None).ok();
    Ok(stream)
}
