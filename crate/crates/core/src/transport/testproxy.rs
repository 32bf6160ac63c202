//! A scripted in-process SOCKS5 proxy.
//!
//! Resolves domain targets through a caller-supplied routing table and can be
//! scripted to refuse CONNECTs, which is how the client's retry/backoff path
//! and byte-exact handshake transcripts are exercised without a live Tor
//! daemon. Accepted CONNECTs are tunneled to the routed TCP address.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

/// What the proxy does with the next CONNECT request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnectScript {
    Accept,
    /// Reply with this RFC 1928 code (e.g. 0x05 = connection refused) and close.
    Refuse(u8),
}

#[derive(Default)]
struct ProxyShared {
    routes: Mutex<HashMap<String, SocketAddr>>,
    script: Mutex<VecDeque<ConnectScript>>,
    /// Handshake bytes received per client connection (greeting ‖ request).
    transcripts: Mutex<Vec<Vec<u8>>>,
}

pub struct FakeSocksProxy {
    addr: SocketAddr,
    shared: Arc<ProxyShared>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl FakeSocksProxy {
    pub fn start() -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(ProxyShared::default());
        let stop = Arc::new(AtomicBool::new(false));

        let shared2 = shared.clone();
        let stop2 = stop.clone();
        let accept_thread = std::thread::spawn(move || {
            while !stop2.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let shared = shared2.clone();
                        std::thread::spawn(move || {
                            let _ = serve_client(stream, &shared);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(1));
                    }
                    Err(_) => break,
                }
            }
        });

        Ok(Self { addr, shared, stop, accept_thread: Some(accept_thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn host(&self) -> String {
        self.addr.ip().to_string()
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Map a domain name to the TCP address it tunnels to.
    pub fn route(&self, domain: &str, target: SocketAddr) {
        self.shared.routes.lock().unwrap().insert(domain.to_string(), target);
    }

    /// Queue directives consumed one per CONNECT; when empty, accept.
    pub fn push_script(&self, directives: &[ConnectScript]) {
        self.shared.script.lock().unwrap().extend(directives.iter().copied());
    }

    /// Handshake bytes (greeting ‖ CONNECT request) per client connection,
    /// in accept order.
    pub fn transcripts(&self) -> Vec<Vec<u8>> {
        self.shared.transcripts.lock().unwrap().clone()
    }
}

impl Drop for FakeSocksProxy {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Nudge the acceptor awake.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_client(mut stream: TcpStream, shared: &ProxyShared) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    stream.set_nodelay(true).ok();
    let mut transcript = Vec::new();

    // Greeting: VER NMETHODS METHODS…
    let mut head = [0u8; 2];
    stream.read_exact(&mut head)?;
    transcript.extend_from_slice(&head);
    let mut methods = vec![0u8; head[1] as usize];
    stream.read_exact(&mut methods)?;
    transcript.extend_from_slice(&methods);
    if head[0] != 0x05 || !methods.contains(&0x00) {
        stream.write_all(&[0x05, 0xFF])?;
        return Ok(());
    }
    stream.write_all(&[0x05, 0x00])?;

    // Request: VER CMD RSV ATYP …
    let mut req = [0u8; 4];
    stream.read_exact(&mut req)?;
    transcript.extend_from_slice(&req);
    let domain = match req[3] {
        0x03 => {
            let mut len = [0u8; 1];
            stream.read_exact(&mut len)?;
            transcript.extend_from_slice(&len);
            let mut name = vec![0u8; len[0] as usize];
            stream.read_exact(&mut name)?;
            transcript.extend_from_slice(&name);
            String::from_utf8_lossy(&name).to_string()
        }
        0x01 => {
            let mut ip = [0u8; 4];
            stream.read_exact(&mut ip)?;
            transcript.extend_from_slice(&ip);
            format!("{}.{}.{}.{}", ip[0], ip[1], ip[2], ip[3])
        }
        _ => {
            stream.write_all(&[0x05, 0x08, 0x00, 0x01, 0, 0, 0, 0, 0, 0])?;
            return Ok(());
        }
    };
    let mut port_bytes = [0u8; 2];
    stream.read_exact(&mut port_bytes)?;
    transcript.extend_from_slice(&port_bytes);
    let port = u16::from_be_bytes(port_bytes);

    shared.transcripts.lock().unwrap().push(transcript);

    let directive =
        shared.script.lock().unwrap().pop_front().unwrap_or(ConnectScript::Accept);
    match directive {
        ConnectScript::Refuse(code) => {
            stream.write_all(&[0x05, code, 0x00, 0x01, 0, 0, 0, 0, 0, 0])?;
            Ok(())
        }
        ConnectScript::Accept => {
            let target = {
                let routes = shared.routes.lock().unwrap();
                match routes.get(&domain) {
                    Some(addr) => *addr,
                    // Unrouted dotted hosts fall through to the literal address.
                    None => match format!("{domain}:{port}").parse() {
                        Ok(addr) => addr,
                        Err(_) => {
                            stream.write_all(&[0x05, 0x04, 0x00, 0x01, 0, 0, 0, 0, 0, 0])?;
                            return Ok(());
                        }
                    },
                }
            };
            match TcpStream::connect(target) {
                Ok(upstream) => {
                    stream.write_all(&[0x05, 0x00, 0x00, 0x01, 0, 0, 0, 0, 0, 0])?;
                    stream.set_read_timeout(None)?;
                    upstream.set_nodelay(true).ok();
                    pump_both_ways(stream, upstream);
                    Ok(())
                }
                Err(_) => {
                    stream.write_all(&[0x05, 0x05, 0x00, 0x01, 0, 0, 0, 0, 0, 0])?;
                    Ok(())
                }
            }
        }
    }
}

fn pump_both_ways(a: TcpStream, b: TcpStream) {
    let pump = |mut from: TcpStream, mut to: TcpStream| {
        std::thread::spawn(move || {
            let mut buf = [0u8; 8192];
            loop {
                match from.read(&mut buf) {
                    Ok(0) | Err(_) => {
                        let _ = to.shutdown(std::net::Shutdown::Write);
                        break;
                    }
                    Ok(n) => {
                        if to.write_all(&buf[..n]).is_err() {
                            break;
                        }
                    }
                }
            }
        })
    };
    let t1 = pump(a.try_clone().unwrap(), b.try_clone().unwrap());
    let t2 = pump(b, a);
    let _ = t1.join();
    let _ = t2.join();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::socks::{socks_connect, SocksConfig};
    use crate::wire::{Endpoint, Scheme};

    fn proxied_cfg(proxy: &FakeSocksProxy, retries: u32) -> SocksConfig {
        SocksConfig {
            proxy_host: proxy.host(),
            proxy_port: proxy.port(),
            connect_retries: retries,
            initial_backoff_ms: 5,
            max_backoff_ms: 20,
            io_timeout: Duration::from_secs(5),
        }
    }

    #[test]
    fn refusal_then_accept_succeeds_on_second_attempt() {
        let proxy = FakeSocksProxy::start().unwrap();
        let echo = TcpListener::bind("127.0.0.1:0").unwrap();
        let echo_addr = echo.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut s, _)) = echo.accept() {
                let mut buf = [0u8; 4];
                if s.read_exact(&mut buf).is_ok() {
                    let _ = s.write_all(&buf);
                }
            }
        });
        proxy.route("abcdefghijklmnop.onion", echo_addr);
        proxy.push_script(&[ConnectScript::Refuse(0x05), ConnectScript::Accept]);

        let dest = Endpoint::new(Scheme::Socks, "abcdefghijklmnop.onion", 9001).unwrap();
        let conn = socks_connect(&proxied_cfg(&proxy, 5), &dest).unwrap();
        assert_eq!(conn.attempts, 2);

        // The tunnel really reaches the routed listener.
        let mut stream = conn.stream;
        stream.write_all(b"ping").unwrap();
        let mut reply = [0u8; 4];
        stream.read_exact(&mut reply).unwrap();
        assert_eq!(&reply, b"ping");

        // Both attempts left byte-identical handshakes.
        let transcripts = proxy.transcripts();
        assert_eq!(transcripts.len(), 2);
        assert_eq!(transcripts[0], transcripts[1]);
    }

    #[test]
    fn all_refusals_exhaust_retries() {
        let proxy = FakeSocksProxy::start().unwrap();
        proxy.push_script(&[ConnectScript::Refuse(0x05); 3]);
        let dest = Endpoint::new(Scheme::Socks, "gone.onion", 1).unwrap();
        match socks_connect(&proxied_cfg(&proxy, 3), &dest) {
            Err(crate::transport::TransportError::ConnectFailed { attempts, detail, .. }) => {
                assert_eq!(attempts, 3);
                assert!(detail.contains("connection refused"), "detail: {detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
