//! In-process emulated anonymizing overlay.
//!
//! Endpoints are opaque "anon:<token>" names in a process-local registry.
//! Each directed link owns an emulated onion circuit: one-way delays are
//! drawn from a lognormal moment-matched to a configured RTT mean/σ, circuits
//! expire and are rebuilt after a bounded lifetime, and a rebuild can inject
//! a transient failure that drops everything in flight. Emissions also pay a
//! serialization cost (bytes / bandwidth + fixed overhead) so message volume,
//! not just message count, shows up in wall-clock time.
//!
//! Two clock modes: `Sleep` really delays delivery (wall-clock realism);
//! `Ledger` only stamps deliveries on a virtual clock so tests run instantly
//! and deterministically.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::rng::{mix_key, SimRng};
use crate::wire::{Endpoint, Scheme};

use super::{ClockMode, ClockMs, EmissionRx, EmissionTx, RecvOutcome, TransportError};

/// Lognormal parameters for one-path RTT, derived by moment matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyParams {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl LatencyParams {
    pub fn from_moments(mean_ms: f64, std_ms: f64) -> Result<Self, TransportError> {
        let (mu, sigma) = moment_match(mean_ms, std_ms)?;
        Ok(Self { mean_ms, std_ms, mu, sigma })
    }
}

/// Lognormal log-space parameters with the given mean and standard deviation:
/// sigma² = ln(1 + (std/mean)²), mu = ln(mean) − sigma²/2.
pub fn moment_match(mean_ms: f64, std_ms: f64) -> Result<(f64, f64), TransportError> {
    if !(mean_ms > 0.0) {
        return Err(TransportError::NonPositiveMean(mean_ms));
    }
    let ratio = std_ms / mean_ms;
    let sigma_sq = (1.0 + ratio * ratio).ln();
    let mu = mean_ms.ln() - sigma_sq / 2.0;
    Ok((mu, sigma_sq.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmuConfig {
    /// Target one-path RTT mean/σ for every circuit (ms).
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Circuit lifetime drawn uniformly from this range (virtual ms).
    pub lifetime_min_ms: f64,
    pub lifetime_max_ms: f64,
    /// Probability that a circuit rebuild injects a transient failure.
    pub p_reset: f64,
    /// Per-circuit additive latency drawn from [0, this] on each rebuild.
    pub base_offset_max_ms: f64,
    /// Serialization: an emission occupies the link for
    /// overhead_ms + bytes / bandwidth.
    pub bandwidth_bytes_per_s: f64,
    pub overhead_ms: f64,
    pub seed: u64,
}

impl Default for EmuConfig {
    fn default() -> Self {
        Self {
            mean_ms: 326.42,
            std_ms: 278.52,
            lifetime_min_ms: 60_000.0,
            lifetime_max_ms: 600_000.0,
            p_reset: 0.05,
            base_offset_max_ms: 0.0,
            bandwidth_bytes_per_s: 200_000.0,
            overhead_ms: 1.0,
            seed: 0,
        }
    }
}

/// An emulated onion circuit: moment-matched latency, bounded lifetime,
/// additive per-circuit offset resampled on rebuild.
#[derive(Clone, Debug)]
pub struct CircuitState {
    pub established_at: ClockMs,
    pub lifetime_ms: f64,
    pub params: LatencyParams,
    pub base_offset_ms: f64,
    pub alive: bool,
}

impl CircuitState {
    pub fn build(now: ClockMs, cfg: &EmuConfig, rng: &mut SimRng) -> Result<Self, TransportError> {
        let params = LatencyParams::from_moments(cfg.mean_ms, cfg.std_ms)?;
        Ok(Self {
            established_at: now,
            lifetime_ms: rng.range_f64(cfg.lifetime_min_ms, cfg.lifetime_max_ms),
            params,
            base_offset_ms: rng.range_f64(0.0, cfg.base_offset_max_ms),
            alive: true,
        })
    }

    /// One-way delay: base offset plus half an RTT sample. Strictly positive.
    pub fn sample_one_way(&self, rng: &mut SimRng) -> Result<f64, TransportError> {
        if !self.alive {
            return Err(TransportError::CircuitDown);
        }
        Ok(self.base_offset_ms + self.sample_lognormal(rng) / 2.0)
    }

    /// A full connect round trip rides one circuit, so both directions are
    /// correlated: one RTT draw, not two independent halves.
    pub fn sample_rtt(&self, rng: &mut SimRng) -> Result<f64, TransportError> {
        if !self.alive {
            return Err(TransportError::CircuitDown);
        }
        Ok(2.0 * self.base_offset_ms + self.sample_lognormal(rng))
    }

    fn sample_lognormal(&self, rng: &mut SimRng) -> f64 {
        (self.params.mu + self.params.sigma * rng.next_normal()).exp()
    }

    /// Rebuild the circuit if its lifetime has elapsed. Returns true when the
    /// rebuild injects a transient failure (callers drop in-flight traffic).
    pub fn advance(&mut self, now: ClockMs, cfg: &EmuConfig, rng: &mut SimRng) -> bool {
        if now - self.established_at <= self.lifetime_ms {
            return false;
        }
        self.established_at = now;
        self.lifetime_ms = rng.range_f64(cfg.lifetime_min_ms, cfg.lifetime_max_ms);
        self.base_offset_ms = rng.range_f64(0.0, cfg.base_offset_max_ms);
        self.alive = true;
        rng.chance(cfg.p_reset)
    }
}

// -- link plumbing -----------------------------------------------------------

#[derive(Debug)]
struct InFlight {
    deliver_at: ClockMs,
    seq: u64,
    bytes: Vec<u8>,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.deliver_at == other.deliver_at && self.seq == other.seq
    }
}
impl Eq for InFlight {}
impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.deliver_at.total_cmp(&other.deliver_at).then(self.seq.cmp(&other.seq))
    }
}

struct LinkState {
    queue: BinaryHeap<Reverse<InFlight>>,
    next_seq: u64,
    tx_closed: bool,
    rx_gone: bool,
    circuit: CircuitState,
    rng: SimRng,
    /// Serialization horizon: the link is busy until this stamp.
    free_at: ClockMs,
    resets: u64,
}

struct Link {
    state: Mutex<LinkState>,
    cv: Condvar,
}

/// Send half of one directed emulated link.
pub struct EmuTx {
    link: Arc<Link>,
    net: EmuNet,
}

/// Receive half of one directed emulated link.
pub struct EmuRx {
    link: Arc<Link>,
    net: EmuNet,
}

impl EmissionTx for EmuTx {
    fn send(&mut self, bytes: &[u8], now_ms: ClockMs) -> Result<(), TransportError> {
        let now = match self.net.clock_mode() {
            ClockMode::Ledger => now_ms,
            ClockMode::Sleep => self.net.wall_ms(),
        };
        let cfg = &self.net.inner.cfg;
        let mut st = self.link.state.lock().unwrap();
        if st.rx_gone {
            return Err(TransportError::ChannelClosed);
        }
        // Borrow the rng and circuit together without fighting the borrow
        // checker: take the rng out, put it back.
        let mut rng = std::mem::replace(&mut st.rng, SimRng::new(0));
        if st.circuit.advance(now, cfg, &mut rng) {
            // Transient failure: everything in flight on this link is lost.
            st.queue.clear();
            st.resets += 1;
            st.free_at = now;
        }
        let delay = st.circuit.sample_one_way(&mut rng);
        st.rng = rng;
        let delay = delay?;
        let service = cfg.overhead_ms + bytes.len() as f64 * 1000.0 / cfg.bandwidth_bytes_per_s;
        st.free_at = st.free_at.max(now) + service;
        let deliver_at = st.free_at + delay;
        let seq = st.next_seq;
        st.next_seq += 1;
        st.queue.push(Reverse(InFlight { deliver_at, seq, bytes: bytes.to_vec() }));
        self.link.cv.notify_one();
        Ok(())
    }
}

impl Drop for EmuTx {
    fn drop(&mut self) {
        let mut st = self.link.state.lock().unwrap();
        st.tx_closed = true;
        self.link.cv.notify_all();
    }
}

impl EmissionRx for EmuRx {
    fn recv(&mut self, timeout: Duration) -> Result<RecvOutcome, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.link.state.lock().unwrap();
        loop {
            let head_deliver = st.queue.peek().map(|Reverse(m)| m.deliver_at);
            match head_deliver {
                Some(at) => match self.net.clock_mode() {
                    ClockMode::Ledger => {
                        let Reverse(m) = st.queue.pop().unwrap();
                        return Ok(RecvOutcome::Emission(m.bytes, m.deliver_at));
                    }
                    ClockMode::Sleep => {
                        let now = self.net.wall_ms();
                        if now >= at {
                            let Reverse(m) = st.queue.pop().unwrap();
                            return Ok(RecvOutcome::Emission(m.bytes, m.deliver_at));
                        }
                        let wait_for = Duration::from_secs_f64(((at - now) / 1000.0).max(0.0));
                        let until_deadline = deadline.saturating_duration_since(Instant::now());
                        if until_deadline.is_zero() {
                            return Ok(RecvOutcome::TimedOut);
                        }
                        let (guard, _) = self
                            .link
                            .cv
                            .wait_timeout(st, wait_for.min(until_deadline))
                            .unwrap();
                        st = guard;
                    }
                },
                None => {
                    if st.tx_closed {
                        return Ok(RecvOutcome::Closed);
                    }
                    let until_deadline = deadline.saturating_duration_since(Instant::now());
                    if until_deadline.is_zero() {
                        return Ok(RecvOutcome::TimedOut);
                    }
                    let (guard, _) = self.link.cv.wait_timeout(st, until_deadline).unwrap();
                    st = guard;
                }
            }
        }
    }
}

impl Drop for EmuRx {
    fn drop(&mut self) {
        let mut st = self.link.state.lock().unwrap();
        st.rx_gone = true;
        self.link.cv.notify_all();
    }
}

// -- registry ----------------------------------------------------------------

struct PendingConn {
    tx: EmuTx,
    rx: EmuRx,
}

struct ListenerQueue {
    pending: VecDeque<PendingConn>,
    open: bool,
}

type ListenerHandle = Arc<(Mutex<ListenerQueue>, Condvar)>;

struct EmuState {
    listeners: HashMap<String, ListenerHandle>,
    dial_counts: HashMap<(String, String), u64>,
}

pub(crate) struct EmuInner {
    cfg: EmuConfig,
    mode: ClockMode,
    epoch: Instant,
    state: Mutex<EmuState>,
}

/// Handle to one emulated overlay. Clones share the registry.
#[derive(Clone)]
pub struct EmuNet {
    inner: Arc<EmuInner>,
}

impl EmuNet {
    pub fn new(cfg: EmuConfig, mode: ClockMode) -> Self {
        Self {
            inner: Arc::new(EmuInner {
                cfg,
                mode,
                epoch: Instant::now(),
                state: Mutex::new(EmuState {
                    listeners: HashMap::new(),
                    dial_counts: HashMap::new(),
                }),
            }),
        }
    }

    pub fn config(&self) -> &EmuConfig {
        &self.inner.cfg
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.inner.mode
    }

    fn wall_ms(&self) -> ClockMs {
        self.inner.epoch.elapsed().as_secs_f64() * 1000.0
    }

    /// Register an overlay name, e.g. "anon:lp3".
    pub fn listen(&self, token: &str) -> Result<EmuListener, TransportError> {
        let mut st = self.inner.state.lock().unwrap();
        if st.listeners.contains_key(token) {
            return Err(TransportError::ListenerTaken(token.to_string()));
        }
        let handle: ListenerHandle =
            Arc::new((Mutex::new(ListenerQueue { pending: VecDeque::new(), open: true }), Condvar::new()));
        st.listeners.insert(token.to_string(), handle.clone());
        Ok(EmuListener { net: self.clone(), token: token.to_string(), handle })
    }

    /// Dial an overlay name. Builds one circuit per direction, each with its
    /// own deterministic RNG stream keyed by (net seed, endpoints, direction,
    /// dial count), so delay sequences do not depend on thread interleaving.
    pub fn dial(
        &self,
        from_label: &str,
        dest: &Endpoint,
        now_ms: ClockMs,
    ) -> Result<(EmuTx, EmuRx), TransportError> {
        let now = match self.inner.mode {
            ClockMode::Ledger => now_ms,
            ClockMode::Sleep => self.wall_ms(),
        };
        let dialer_side = {
            let mut st = self.inner.state.lock().unwrap();
            let count = st
                .dial_counts
                .entry((from_label.to_string(), dest.host.clone()))
                .and_modify(|c| *c += 1)
                .or_insert(0);
            let count = *count;
            let listener = st
                .listeners
                .get(&dest.host)
                .cloned()
                .ok_or_else(|| TransportError::NoSuchListener(dest.host.clone()))?;
            drop(st);

            let forward = self.new_link(from_label, &dest.host, 0, count, now)?;
            let backward = self.new_link(&dest.host, from_label, 1, count, now)?;
            let dialer_side = PendingConn {
                tx: EmuTx { link: forward.clone(), net: self.clone() },
                rx: EmuRx { link: backward.clone(), net: self.clone() },
            };
            let listener_side = PendingConn {
                tx: EmuTx { link: backward, net: self.clone() },
                rx: EmuRx { link: forward, net: self.clone() },
            };
            let (queue, cv) = &*listener;
            let mut q = queue.lock().unwrap();
            if !q.open {
                return Err(TransportError::NoSuchListener(dest.host.clone()));
            }
            q.pending.push_back(listener_side);
            cv.notify_one();
            dialer_side
        };
        Ok((dialer_side.tx, dialer_side.rx))
    }

    fn new_link(
        &self,
        src: &str,
        dst: &str,
        direction: u64,
        dial_count: u64,
        now: ClockMs,
    ) -> Result<Arc<Link>, TransportError> {
        let key = mix_key(&[
            self.inner.cfg.seed,
            hash_str(src),
            hash_str(dst),
            direction,
            dial_count,
        ]);
        let mut rng = SimRng::new(key);
        let circuit = CircuitState::build(now, &self.inner.cfg, &mut rng)?;
        Ok(Arc::new(Link {
            state: Mutex::new(LinkState {
                queue: BinaryHeap::new(),
                next_seq: 0,
                tx_closed: false,
                rx_gone: false,
                circuit,
                rng,
                free_at: now,
                resets: 0,
            }),
            cv: Condvar::new(),
        }))
    }
}

fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Accepting side of an overlay name.
pub struct EmuListener {
    net: EmuNet,
    token: String,
    handle: ListenerHandle,
}

impl EmuListener {
    pub fn accept_conn(&self, timeout: Duration) -> Result<Option<(EmuTx, EmuRx)>, TransportError> {
        let (queue, cv) = &*self.handle;
        let deadline = Instant::now() + timeout;
        let mut q = queue.lock().unwrap();
        loop {
            if let Some(conn) = q.pending.pop_front() {
                return Ok(Some((conn.tx, conn.rx)));
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(None);
            }
            let (guard, _) = cv.wait_timeout(q, remaining).unwrap();
            q = guard;
        }
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::new(Scheme::Emu, self.token.clone(), 1).expect("token endpoint")
    }
}

impl Drop for EmuListener {
    fn drop(&mut self) {
        let (queue, _) = &*self.handle;
        queue.lock().unwrap().open = false;
        let mut st = self.net.inner.state.lock().unwrap();
        st.listeners.remove(&self.token);
    }
}

impl super::Acceptor for EmuListener {
    fn accept(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<(super::TxHalf, super::RxHalf)>, TransportError> {
        Ok(self
            .accept_conn(timeout)?
            .map(|(tx, rx)| (Box::new(tx) as super::TxHalf, Box::new(rx) as super::RxHalf)))
    }

    fn local_endpoint(&self) -> Endpoint {
        self.endpoint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_match_reproduces_table_row() {
        // One-path RTT 326.42 ms mean, 278.52 ms σ.
        let (mu, sigma) = moment_match(326.42, 278.52).unwrap();
        assert!((sigma * sigma - 0.5470).abs() < 5e-4, "sigma² = {}", sigma * sigma);
        assert!((mu - 5.5148).abs() < 5e-4, "mu = {mu}");
    }

    #[test]
    fn moment_match_zero_variance_degenerates() {
        let (mu, sigma) = moment_match(100.0, 0.0).unwrap();
        assert_eq!(sigma, 0.0);
        assert!((mu - 100.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn moment_match_rejects_non_positive_mean() {
        assert!(moment_match(0.0, 1.0).is_err());
        assert!(moment_match(-3.0, 1.0).is_err());
    }

    #[test]
    fn moment_match_identity_is_analytic() {
        // Reconstructed mean/σ from (mu, sigma) must equal the inputs.
        for &(m, s) in &[(326.42, 278.52), (282.74, 104.83), (540.74, 54.5), (10.0, 0.0)] {
            let (mu, sigma) = moment_match(m, s).unwrap();
            let mean_back = (mu + sigma * sigma / 2.0).exp();
            let var_back = ((sigma * sigma).exp_m1()) * (2.0 * mu + sigma * sigma).exp();
            assert!((mean_back - m).abs() / m < 1e-9, "mean {mean_back} vs {m}");
            if s > 0.0 {
                assert!((var_back.sqrt() - s).abs() / s < 1e-9, "std {} vs {s}", var_back.sqrt());
            }
        }
    }

    #[test]
    fn moment_match_monte_carlo_round_trip() {
        let (mu, sigma) = moment_match(326.42, 278.52).unwrap();
        let mut rng = SimRng::new(7);
        let n = 1_000_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let x = (mu + sigma * rng.next_normal()).exp();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).sqrt();
        assert!((mean - 326.42).abs() / 326.42 < 0.01, "mean {mean}");
        assert!((std - 278.52).abs() / 278.52 < 0.01, "std {std}");
    }

    fn test_cfg() -> EmuConfig {
        EmuConfig { seed: 11, ..EmuConfig::default() }
    }

    #[test]
    fn degenerate_circuit_is_deterministic_delay() {
        let cfg = EmuConfig { mean_ms: 100.0, std_ms: 0.0, base_offset_max_ms: 0.0, ..test_cfg() };
        let mut rng = SimRng::new(3);
        let circuit = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
        for _ in 0..50 {
            let d = circuit.sample_one_way(&mut rng).unwrap();
            assert!((d - 50.0).abs() < 1e-9, "one-way = half RTT, got {d}");
        }
    }

    #[test]
    fn one_way_mean_is_half_rtt_table_row() {
        // RTT (540.74, 54.5): one-way mean over 10^5 samples ≈ 270.4 ± 2%.
        let cfg = EmuConfig { mean_ms: 540.74, std_ms: 54.5, ..test_cfg() };
        let mut rng = SimRng::new(5);
        let circuit = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = circuit.sample_one_way(&mut rng).unwrap();
            assert!(d > 0.0);
            sum += d;
        }
        let mean = sum / n as f64;
        assert!((mean - 270.37).abs() / 270.37 < 0.02, "mean {mean}");
    }

    #[test]
    fn same_seed_same_delay_sequence() {
        let cfg = test_cfg();
        let sample = |seed: u64| -> Vec<f64> {
            let mut rng = SimRng::new(seed);
            let c = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
            (0..20).map(|_| c.sample_one_way(&mut rng).unwrap()).collect()
        };
        assert_eq!(sample(9), sample(9));
        assert_ne!(sample(9), sample(10));
    }

    #[test]
    fn dead_circuit_signals_down() {
        let cfg = test_cfg();
        let mut rng = SimRng::new(1);
        let mut c = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
        c.alive = false;
        assert!(matches!(c.sample_one_way(&mut rng), Err(TransportError::CircuitDown)));
    }

    #[test]
    fn advance_within_lifetime_is_noop() {
        let cfg = test_cfg();
        let mut rng = SimRng::new(2);
        let mut c = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
        let before = (c.established_at, c.lifetime_ms, c.base_offset_ms);
        assert!(!c.advance(c.lifetime_ms * 0.5, &cfg, &mut rng));
        assert_eq!(before, (c.established_at, c.lifetime_ms, c.base_offset_ms));
    }

    #[test]
    fn advance_past_lifetime_rebuilds_without_failure_when_p_zero() {
        let cfg = EmuConfig { p_reset: 0.0, ..test_cfg() };
        let mut rng = SimRng::new(2);
        let mut c = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
        let old_life = c.lifetime_ms;
        let reset = c.advance(old_life + 1.0, &cfg, &mut rng);
        assert!(!reset);
        assert_eq!(c.established_at, old_life + 1.0);
        assert!(c.alive);
    }

    #[test]
    fn reset_fraction_matches_p_reset() {
        let cfg = EmuConfig { p_reset: 0.05, ..test_cfg() };
        let mut rng = SimRng::new(31);
        let mut c = CircuitState::build(0.0, &cfg, &mut rng).unwrap();
        let mut now = 0.0;
        let mut resets = 0;
        let rebuilds = 10_000;
        for _ in 0..rebuilds {
            now += c.lifetime_ms + 1.0;
            if c.advance(now, &cfg, &mut rng) {
                resets += 1;
            }
        }
        let frac = resets as f64 / rebuilds as f64;
        assert!((frac - 0.05).abs() < 0.01, "reset fraction {frac}");
    }

    #[test]
    fn ledger_dial_send_recv_round_trip() {
        let net = EmuNet::new(EmuConfig { p_reset: 0.0, ..test_cfg() }, ClockMode::Ledger);
        let listener = net.listen("anon:svc").unwrap();
        let dest = listener.endpoint();
        let (mut tx, _rx) = net.dial("anon:cli", &dest, 0.0).unwrap();
        let (mut srv_tx, mut srv_rx) = {
            let conn = listener.accept_conn(Duration::from_secs(1)).unwrap().unwrap();
            (conn.0, conn.1)
        };
        tx.send(b"hello", 0.0).unwrap();
        match srv_rx.recv(Duration::from_secs(1)).unwrap() {
            RecvOutcome::Emission(bytes, stamp) => {
                assert_eq!(bytes, b"hello");
                assert!(stamp > 0.0, "delay strictly positive, got {stamp}");
            }
            other => panic!("unexpected {other:?}"),
        }
        // No wall-clock sleeping happened; reply path works too.
        srv_tx.send(b"world", 10_000.0).unwrap();
        drop(srv_tx);
    }

    #[test]
    fn ledger_stamps_are_reproducible_for_fixed_seed() {
        let run = || -> Vec<u64> {
            let net = EmuNet::new(EmuConfig { p_reset: 0.0, ..test_cfg() }, ClockMode::Ledger);
            let listener = net.listen("anon:svc").unwrap();
            let (mut tx, _rx) = net.dial("anon:cli", &listener.endpoint(), 0.0).unwrap();
            let (_stx, mut srx) = listener.accept_conn(Duration::from_secs(1)).unwrap().unwrap();
            let mut stamps = Vec::new();
            for i in 0..32u64 {
                tx.send(&i.to_be_bytes(), (i * 7) as f64).unwrap();
            }
            for _ in 0..32 {
                match srx.recv(Duration::from_secs(1)).unwrap() {
                    RecvOutcome::Emission(_, stamp) => stamps.push(stamp.to_bits()),
                    other => panic!("unexpected {other:?}"),
                }
            }
            stamps
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sleep_mode_really_delays() {
        let cfg = EmuConfig {
            mean_ms: 40.0,
            std_ms: 0.0,
            p_reset: 0.0,
            overhead_ms: 0.0,
            ..test_cfg()
        };
        let net = EmuNet::new(cfg, ClockMode::Sleep);
        let listener = net.listen("anon:svc").unwrap();
        let (mut tx, _rx) = net.dial("anon:cli", &listener.endpoint(), 0.0).unwrap();
        let (_stx, mut srx) = listener.accept_conn(Duration::from_secs(1)).unwrap().unwrap();
        let start = Instant::now();
        tx.send(b"x", 0.0).unwrap();
        match srx.recv(Duration::from_secs(2)).unwrap() {
            RecvOutcome::Emission(_, _) => {}
            other => panic!("unexpected {other:?}"),
        }
        // One-way delay is 20 ms for a degenerate 40 ms RTT circuit.
        assert!(start.elapsed() >= Duration::from_millis(15), "took {:?}", start.elapsed());
    }

    #[test]
    fn dial_unknown_listener_fails() {
        let net = EmuNet::new(test_cfg(), ClockMode::Ledger);
        let dest = Endpoint::new(Scheme::Emu, "anon:ghost", 1).unwrap();
        assert!(matches!(
            net.dial("anon:cli", &dest, 0.0),
            Err(TransportError::NoSuchListener(_))
        ));
    }

    #[test]
    fn closed_tx_drains_then_reports_closed() {
        let net = EmuNet::new(EmuConfig { p_reset: 0.0, ..test_cfg() }, ClockMode::Ledger);
        let listener = net.listen("anon:svc").unwrap();
        let (mut tx, _rx) = net.dial("anon:cli", &listener.endpoint(), 0.0).unwrap();
        let (_stx, mut srx) = listener.accept_conn(Duration::from_secs(1)).unwrap().unwrap();
        tx.send(b"last", 0.0).unwrap();
        drop(tx);
        assert!(matches!(
            srx.recv(Duration::from_secs(1)).unwrap(),
            RecvOutcome::Emission(b, _) if b == b"last"
        ));
        assert!(matches!(srx.recv(Duration::from_millis(50)).unwrap(), RecvOutcome::Closed));
    }
}
