//! The Logical Process runtime.
//!
//! Lifecycle: register with the coordinator, receive the roster, build the
//! peer mesh (an LP dials only peers with lower identifiers), then run the
//! time-stepped cycle:
//!
//! * Phase A — broadcast a digest of local entity positions for this step.
//! * Phase B — once every digest for the step has arrived, compute pings on
//!   the digested snapshot (remote pings become PingBatch frames to the
//!   hosting LP) and move local entities.
//! * Phase C — apply the balancer plan: Migrate to the destination, notify
//!   everyone else.
//! * Phase D — send StepEnd with a per-destination frame count; advance once
//!   every peer's StepEnd has arrived and all counted frames are in.
//!
//! Migrations commit only at the step boundary, and all model randomness is
//! keyed by (seed, entity, step), so a run's per-step ping totals and final
//! positions are identical whether it executes on one LP or many — that
//! property is what the test suite leans on hardest.

pub mod cluster;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::balancer::{plan_migrations, BalancerConfig, InteractionWindow, WindowSet};
use crate::metrics::{RunMetrics, StepMetrics};
use crate::model::{rwp_step, ModelConfig, ModelError, PositionGrid, SmhEntity};
use crate::rng::mix64;
use crate::transport::{
    real_ms, Acceptor, ClockMode, ClockMs, RecvOutcome, ReliabilityConfig, ReliableChannel,
    RxHalf, TransportCtx, TransportError,
};
use crate::wire::{
    decode_frame, encode_frame, DecodeOutcome, Endpoint, LpIdentity, Message, WireError,
    MAX_LIST_LEN,
};

const PUMP_TIMEOUT: Duration = Duration::from_millis(2);
/// Consecutive empty pumps before a ledger-mode LP assumes in-flight loss and
/// advances its virtual clock to drive retransmission timers.
const LEDGER_STALL_PUMPS: u32 = 15;
const LEDGER_STALL_BUMP_MS: f64 = 50.0;
/// Real time allowed after the last step for final acks to drain.
const LINGER: Duration = Duration::from_secs(2);
/// Digest and ping lists are chunked below the wire list cap.
const CHUNK: usize = MAX_LIST_LEN - 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("roster wait timed out")]
    RosterTimeout,
    #[error("step {step}: barrier wait timed out")]
    StepTimeout { step: u64 },
    #[error("step {step}: peer {peer} vanished")]
    PeerLost { peer: u32, step: u64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

/// How entities are assigned to LPs at step 0. Both variants are computable
/// by every LP independently, which keeps the initial directory consistent
/// without any extra wire traffic.
#[derive(Clone, Debug, PartialEq)]
pub enum Placement {
    /// entity_id mod n_lps.
    RoundRobin,
    /// Explicit map from entity_id (index) to lp_id.
    Explicit(Vec<u32>),
}

impl Placement {
    fn lp_for(&self, entity_id: u32, n_lps: u32) -> u32 {
        match self {
            Placement::RoundRobin => entity_id % n_lps,
            Placement::Explicit(map) => map[entity_id as usize],
        }
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub seed: u64,
    pub n_steps: u64,
    pub model: ModelConfig,
    pub balancer: BalancerConfig,
    pub reliability: ReliabilityConfig,
    pub placement: Placement,
    pub bootstrap_timeout: Duration,
    pub step_timeout: Duration,
    /// Entities handed to this LP directly instead of drawing fresh ones
    /// from the seed; fixtures use this for controlled initial states.
    pub preset_entities: Option<Vec<SmhEntity>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_steps: 200,
            model: ModelConfig::default(),
            balancer: BalancerConfig::default(),
            reliability: ReliabilityConfig::default(),
            placement: Placement::RoundRobin,
            bootstrap_timeout: Duration::from_secs(60),
            step_timeout: Duration::from_secs(30),
            preset_entities: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshEdge {
    pub peer: u32,
    pub initiated_by_me: bool,
}

/// Everything one LP can report about a finished run.
#[derive(Debug)]
pub struct LpRunOutput {
    pub me: LpIdentity,
    pub roster: Vec<LpIdentity>,
    pub roster_bytes: Vec<u8>,
    pub mesh_edges: Vec<MeshEdge>,
    pub metrics: RunMetrics,
    pub final_entities: Vec<SmhEntity>,
    /// Local entity count at each step boundary (conservation checks).
    pub entity_counts: Vec<u64>,
    /// Hash of the (entity -> lp) directory at each step boundary
    /// (agreement checks).
    pub directory_hashes: Vec<u64>,
}

/// Serializes coordinator registrations so in-process runs assign pseudonyms
/// in a chosen order; the spec leaves arrival order to the environment.
pub struct RegistrationGate {
    state: std::sync::Mutex<usize>,
    cv: std::sync::Condvar,
}

impl RegistrationGate {
    pub fn new() -> Arc<Self> {
        Arc::new(Self { state: std::sync::Mutex::new(0), cv: std::sync::Condvar::new() })
    }

    pub fn wait_turn(&self, turn: usize) {
        let mut n = self.state.lock().unwrap();
        while *n != turn {
            n = self.cv.wait(n).unwrap();
        }
    }

    pub fn done(&self) {
        *self.state.lock().unwrap() += 1;
        self.cv.notify_all();
    }
}

/// Inputs `run_lp` needs beyond the engine config.
pub struct LpSetup {
    pub transport: TransportCtx,
    pub sima: Endpoint,
    pub acceptor: Box<dyn Acceptor>,
    /// What other LPs are told to dial; defaults to the acceptor's endpoint.
    pub advertise: Option<Endpoint>,
    pub gate: Option<(Arc<RegistrationGate>, usize)>,
}

enum Inbound {
    Emission { peer: u32, bytes: Vec<u8>, stamp: ClockMs },
    Closed { peer: u32 },
    Failed { peer: u32, detail: String },
}

#[derive(Default)]
struct StepInbox {
    digest_entries: Vec<(u32, f64, f64)>,
    step_ends: BTreeMap<u32, u32>,
    received_counts: BTreeMap<u32, u32>,
    migrate_ins: Vec<Vec<u8>>,
    notices: Vec<(u32, u32)>,
}

struct LpCore {
    me: LpIdentity,
    cfg: EngineConfig,
    mode: ClockMode,
    /// Virtual clock (ledger mode); tracks max arrival stamp.
    virtual_ms: f64,
    channels: BTreeMap<u32, ReliableChannel>,
    inbound: mpsc::Receiver<Inbound>,
    inbox: BTreeMap<u64, StepInbox>,
    local: BTreeMap<u32, SmhEntity>,
    directory: BTreeMap<u32, u32>,
    windows: WindowSet,
    step: u64,
    empty_pumps: u32,
    lingering: bool,
    dead_peers: BTreeSet<u32>,
}

impl LpCore {
    fn now(&self) -> ClockMs {
        match self.mode {
            ClockMode::Ledger => self.virtual_ms,
            ClockMode::Sleep => real_ms(),
        }
    }

    fn observe(&mut self, stamp: ClockMs) {
        if self.mode == ClockMode::Ledger {
            self.virtual_ms = self.virtual_ms.max(stamp);
        }
    }

    /// Drain one inbound event (if any) into the per-step inbox. Returns
    /// whether anything happened.
    fn pump(&mut self) -> Result<bool, EngineError> {
        match self.inbound.recv_timeout(PUMP_TIMEOUT) {
            Ok(Inbound::Emission { peer, bytes, stamp }) => {
                self.empty_pumps = 0;
                self.observe(stamp);
                let now = self.now();
                let delivered = match self.channels.get_mut(&peer) {
                    Some(ch) => ch.on_emission(&bytes, now)?,
                    None => Vec::new(),
                };
                for frame in delivered {
                    let message = match decode_frame(&frame)? {
                        DecodeOutcome::Complete { message, .. } => message,
                        DecodeOutcome::NeedMoreBytes => {
                            return Err(EngineError::Protocol("truncated delivered frame".into()))
                        }
                    };
                    self.route(peer, message)?;
                }
                Ok(true)
            }
            Ok(Inbound::Closed { peer }) => {
                self.empty_pumps = 0;
                self.dead_peers.insert(peer);
                if self.lingering {
                    Ok(true)
                } else {
                    Err(EngineError::PeerLost { peer, step: self.step })
                }
            }
            Ok(Inbound::Failed { peer, detail }) => {
                self.empty_pumps = 0;
                if self.lingering {
                    self.dead_peers.insert(peer);
                    Ok(true)
                } else {
                    Err(EngineError::Protocol(format!(
                        "peer {peer} channel failed at step {}: {detail}",
                        self.step
                    )))
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.empty_pumps += 1;
                match self.mode {
                    ClockMode::Sleep => self.tick_channels()?,
                    ClockMode::Ledger => {
                        // Nothing arriving: either the peer is computing, or
                        // traffic was lost to a circuit reset. Advance the
                        // virtual clock so retransmission timers can fire.
                        if self.empty_pumps >= LEDGER_STALL_PUMPS {
                            self.empty_pumps = 0;
                            self.virtual_ms += LEDGER_STALL_BUMP_MS;
                            self.tick_channels()?;
                        }
                    }
                }
                Ok(false)
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(EngineError::Protocol("inbound queue closed".into()))
            }
        }
    }

    fn tick_channels(&mut self) -> Result<(), EngineError> {
        let now = self.now();
        for ch in self.channels.values_mut() {
            match ch.tick(now) {
                Ok(()) => {}
                Err(e) if self.lingering => {
                    let _ = e;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Sort a delivered message into the right step's inbox.
    fn route(&mut self, peer: u32, message: Message) -> Result<(), EngineError> {
        let (step, counted) = match &message {
            Message::PositionDigest { step, .. } => (*step, true),
            Message::PingBatch { step, .. } => (*step, true),
            Message::Migrate { step, .. } => (*step, true),
            Message::MigrateNotice { step, .. } => (*step, false),
            Message::StepEnd { step, .. } => (*step, false),
            other => {
                return Err(EngineError::Protocol(format!(
                    "unexpected {} during simulation",
                    other.name()
                )))
            }
        };
        if step < self.step && !self.lingering {
            // The barrier admitted this step already; a frame for it can no
            // longer exist.
            return Err(EngineError::Protocol(format!(
                "step-{step} frame from peer {peer} arrived during step {}",
                self.step
            )));
        }
        let inbox = self.inbox.entry(step).or_default();
        if counted {
            *inbox.received_counts.entry(peer).or_insert(0) += 1;
        }
        match message {
            Message::PositionDigest { entries, .. } => inbox.digest_entries.extend(entries),
            Message::PingBatch { .. } => {
                // Ping payloads are empty by design; the count is the
                // observable and the sender already counted it.
            }
            Message::Migrate { entity_blob, .. } => inbox.migrate_ins.push(entity_blob),
            Message::MigrateNotice { entity_id, new_lp, .. } => {
                inbox.notices.push((entity_id, new_lp))
            }
            Message::StepEnd { lp_id, sent_count, .. } => {
                inbox.step_ends.insert(lp_id, sent_count);
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Send one frame on a peer channel, pumping inbound until the
    /// reliability window has room.
    fn send_to(&mut self, peer: u32, message: &Message) -> Result<(), EngineError> {
        let frame = encode_frame(message)?;
        let deadline = Instant::now() + self.cfg.step_timeout;
        loop {
            let can = self
                .channels
                .get(&peer)
                .map(|ch| ch.can_send())
                .ok_or_else(|| EngineError::Protocol(format!("no channel to peer {peer}")))?;
            if can {
                break;
            }
            self.pump()?;
            if Instant::now() >= deadline {
                return Err(EngineError::StepTimeout { step: self.step });
            }
        }
        let now = self.now();
        self.channels.get_mut(&peer).unwrap().send_frame(&frame, now)?;
        Ok(())
    }

    fn peer_ids(&self) -> Vec<u32> {
        self.channels.keys().copied().collect()
    }

    fn directory_hash(&self) -> u64 {
        let mut h = 0xED10_C045_1857_11EBu64;
        for (&entity, &lp) in &self.directory {
            h = mix64(h ^ entity as u64);
            h = mix64(h ^ lp as u64);
        }
        h
    }
}

/// Bootstrap, mesh, simulate; the whole LP lifecycle.
pub fn run_lp(mut setup: LpSetup, cfg: &EngineConfig) -> Result<LpRunOutput, EngineError> {
    let mode = setup.transport.clock_mode();
    let advertise = setup.advertise.take().unwrap_or_else(|| setup.acceptor.local_endpoint());
    let run_start_virtual = 0.0f64;
    let run_start_real = real_ms();

    // -- bootstrap: register, learn the roster --------------------------------
    let gate = setup.gate.take();
    if let Some((gate, turn)) = &gate {
        gate.wait_turn(*turn);
    }
    let (me, roster, roster_bytes, boot_clock) =
        bootstrap(&setup.transport, &setup.sima, &advertise, cfg.bootstrap_timeout, &gate)?;
    let n_lps = roster.len() as u32;

    // -- mesh: dial lower ids, accept higher ids ------------------------------
    let (channels, rx_halves, mesh_edges, mesh_clock) = establish_mesh(
        &setup.transport,
        setup.acceptor.as_mut(),
        &me,
        &roster,
        &cfg.reliability,
        cfg.bootstrap_timeout,
        boot_clock,
    )?;
    drop(setup.acceptor);

    // -- spawn per-peer readers feeding one inbound queue ---------------------
    let (inbound_tx, inbound_rx) = mpsc::channel();
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut readers: Vec<JoinHandle<()>> = Vec::new();
    for (peer, rx) in rx_halves {
        readers.push(spawn_reader(peer, rx, inbound_tx.clone(), shutdown.clone()));
    }
    drop(inbound_tx);

    // -- load entities ---------------------------------------------------------
    let mut core = LpCore {
        me: me.clone(),
        cfg: cfg.clone(),
        mode,
        virtual_ms: mesh_clock,
        channels,
        inbound: inbound_rx,
        inbox: BTreeMap::new(),
        local: BTreeMap::new(),
        directory: BTreeMap::new(),
        windows: WindowSet::new(),
        step: 0,
        empty_pumps: 0,
        lingering: false,
        dead_peers: BTreeSet::new(),
    };
    load_entities(&mut core, n_lps)?;

    // -- simulate ---------------------------------------------------------------
    let sim_start_virtual = core.virtual_ms;
    let sim_start_real = real_ms();
    let mut metrics = RunMetrics::default();
    metrics.init_s = match mode {
        ClockMode::Ledger => (sim_start_virtual - run_start_virtual) / 1000.0,
        ClockMode::Sleep => (sim_start_real - run_start_real) / 1000.0,
    };

    let mut entity_counts = Vec::with_capacity(cfg.n_steps as usize);
    let mut directory_hashes = Vec::with_capacity(cfg.n_steps as usize);
    let result = (|| -> Result<(), EngineError> {
        for step in 0..cfg.n_steps {
            core.step = step;
            let sm = step_cycle(&mut core)?;
            metrics.record_step(sm);
            entity_counts.push(core.local.len() as u64);
            directory_hashes.push(core.directory_hash());
            core.inbox.remove(&step);
        }
        Ok(())
    })();

    metrics.wct_s = match mode {
        ClockMode::Ledger => (core.virtual_ms - sim_start_virtual) / 1000.0,
        ClockMode::Sleep => (real_ms() - sim_start_real) / 1000.0,
    };

    // -- linger so final acks drain, then shut readers down --------------------
    core.lingering = true;
    if result.is_ok() {
        let deadline = Instant::now() + LINGER;
        while Instant::now() < deadline {
            let drained = core.channels.values().all(|ch| ch.is_drained());
            let all_dead = core.channels.keys().all(|p| core.dead_peers.contains(p));
            if drained || all_dead {
                break;
            }
            let _ = core.pump();
        }
    }
    shutdown.store(true, Ordering::Relaxed);
    drop(core.channels);
    for reader in readers {
        let _ = reader.join();
    }
    result?;

    let final_entities: Vec<SmhEntity> = core.local.into_values().collect();
    Ok(LpRunOutput {
        me,
        roster,
        roster_bytes,
        mesh_edges,
        metrics,
        final_entities,
        entity_counts,
        directory_hashes,
    })
}

fn bootstrap(
    transport: &TransportCtx,
    sima: &Endpoint,
    advertise: &Endpoint,
    timeout: Duration,
    gate: &Option<(Arc<RegistrationGate>, usize)>,
) -> Result<(LpIdentity, Vec<LpIdentity>, Vec<u8>, f64), EngineError> {
    let mut clock = 0.0f64;
    let (mut tx, mut rx) = dial_with_retry(transport, sima, &advertise.host, clock)?;
    tx.send(&encode_frame(&Message::Register { listen_endpoint: advertise.clone() })?, clock)?;

    let ack = recv_frame(rx.as_mut(), timeout, &mut clock)?
        .ok_or_else(|| EngineError::Bootstrap("coordinator rejected the registration".into()))?;
    let (lp_id, total_lps) = match ack {
        Message::RegisterAck { lp_id, total_lps } => (lp_id, total_lps),
        other => {
            return Err(EngineError::Bootstrap(format!("expected RegisterAck, got {}", other.name())))
        }
    };
    if let Some((gate, _)) = gate {
        gate.done();
    }

    let roster_msg =
        recv_frame(rx.as_mut(), timeout, &mut clock)?.ok_or(EngineError::RosterTimeout)?;
    let entries = match roster_msg {
        Message::Roster { entries } => entries,
        other => {
            return Err(EngineError::Bootstrap(format!("expected Roster, got {}", other.name())))
        }
    };
    if entries.len() as u32 != total_lps {
        return Err(EngineError::Bootstrap(format!(
            "roster has {} entries, coordinator promised {total_lps}",
            entries.len()
        )));
    }
    let me = entries
        .iter()
        .find(|lp| lp.lp_id == lp_id)
        .cloned()
        .ok_or_else(|| EngineError::Bootstrap(format!("own id {lp_id} missing from roster")))?;
    let roster_bytes = encode_frame(&Message::Roster { entries: entries.clone() })?;
    Ok((me, entries, roster_bytes, clock))
}

fn dial_with_retry(
    transport: &TransportCtx,
    dest: &Endpoint,
    from_label: &str,
    now: f64,
) -> Result<(crate::transport::TxHalf, RxHalf), EngineError> {
    let mut last = None;
    for attempt in 0..10 {
        match transport.dial(dest, from_label, now) {
            Ok(pair) => return Ok(pair),
            Err(e) => {
                last = Some(e);
                if attempt < 9 {
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }
    Err(EngineError::Transport(last.unwrap()))
}

fn recv_frame(
    rx: &mut dyn crate::transport::EmissionRx,
    timeout: Duration,
    clock: &mut f64,
) -> Result<Option<Message>, EngineError> {
    match rx.recv(timeout)? {
        RecvOutcome::Emission(bytes, stamp) => {
            *clock = clock.max(stamp);
            match decode_frame(&bytes)? {
                DecodeOutcome::Complete { message, .. } => Ok(Some(message)),
                DecodeOutcome::NeedMoreBytes => {
                    Err(EngineError::Protocol("truncated bootstrap frame".into()))
                }
            }
        }
        RecvOutcome::Closed => Ok(None),
        RecvOutcome::TimedOut => Err(EngineError::RosterTimeout),
    }
}

type MeshResult = (
    BTreeMap<u32, ReliableChannel>,
    Vec<(u32, RxHalf)>,
    Vec<MeshEdge>,
    f64,
);

/// LP i dials every j < i and accepts a Hello from every j > i, ending with
/// exactly one channel per peer pair across the whole run.
fn establish_mesh(
    transport: &TransportCtx,
    acceptor: &mut dyn Acceptor,
    me: &LpIdentity,
    roster: &[LpIdentity],
    reliability: &ReliabilityConfig,
    timeout: Duration,
    mut clock: f64,
) -> Result<MeshResult, EngineError> {
    let mut channels = BTreeMap::new();
    let mut rx_halves = Vec::new();
    let mut edges = Vec::new();
    let known: BTreeMap<u32, &LpIdentity> = roster.iter().map(|lp| (lp.lp_id, lp)).collect();

    // Dial lower identifiers, lowest first.
    for peer in roster.iter().filter(|lp| lp.lp_id < me.lp_id) {
        let (mut tx, rx) =
            dial_with_retry(transport, &peer.endpoint, &me.endpoint.host, clock)?;
        tx.send(&encode_frame(&Message::Hello { lp_id: me.lp_id })?, clock)?;
        channels.insert(peer.lp_id, ReliableChannel::new(peer.lp_id, tx, reliability.clone()));
        rx_halves.push((peer.lp_id, rx));
        edges.push(MeshEdge { peer: peer.lp_id, initiated_by_me: true });
    }

    // Accept higher identifiers, in whatever order they dial in.
    let expected_higher = roster.iter().filter(|lp| lp.lp_id > me.lp_id).count();
    let deadline = Instant::now() + timeout;
    while edges.len() < roster.len() - 1 {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(EngineError::Bootstrap(format!(
                "mesh wait timed out with {}/{} peers connected",
                edges.len(),
                roster.len() - 1
            )));
        }
        let Some((tx, mut rx)) = acceptor.accept(remaining.min(Duration::from_millis(100)))?
        else {
            continue;
        };
        let hello = match recv_frame(rx.as_mut(), timeout, &mut clock)? {
            Some(Message::Hello { lp_id }) => lp_id,
            Some(other) => {
                return Err(EngineError::Protocol(format!(
                    "expected Hello on inbound mesh connection, got {}",
                    other.name()
                )))
            }
            None => continue, // dialer went away
        };
        if !known.contains_key(&hello) {
            return Err(EngineError::Protocol(format!("Hello from unknown lp {hello}")));
        }
        if hello <= me.lp_id {
            return Err(EngineError::Protocol(format!(
                "lp {hello} dialed lp {}; the lower identifier must be the acceptor",
                me.lp_id
            )));
        }
        if channels.contains_key(&hello) {
            return Err(EngineError::Protocol(format!("duplicate channel from lp {hello}")));
        }
        channels.insert(hello, ReliableChannel::new(hello, tx, reliability.clone()));
        rx_halves.push((hello, rx));
        edges.push(MeshEdge { peer: hello, initiated_by_me: false });
    }
    debug_assert_eq!(
        edges.iter().filter(|e| !e.initiated_by_me).count(),
        expected_higher
    );
    Ok((channels, rx_halves, edges, clock))
}

fn spawn_reader(
    peer: u32,
    mut rx: RxHalf,
    out: mpsc::Sender<Inbound>,
    shutdown: Arc<AtomicBool>,
) -> JoinHandle<()> {
    std::thread::spawn(move || loop {
        if shutdown.load(Ordering::Relaxed) {
            return;
        }
        match rx.recv(Duration::from_millis(100)) {
            Ok(RecvOutcome::Emission(bytes, stamp)) => {
                if out.send(Inbound::Emission { peer, bytes, stamp }).is_err() {
                    return;
                }
            }
            Ok(RecvOutcome::TimedOut) => continue,
            Ok(RecvOutcome::Closed) => {
                let _ = out.send(Inbound::Closed { peer });
                return;
            }
            Err(e) => {
                let _ = out.send(Inbound::Failed { peer, detail: e.to_string() });
                return;
            }
        }
    })
}

fn load_entities(core: &mut LpCore, n_lps: u32) -> Result<(), EngineError> {
    core.cfg.model.validate()?;
    let my_id = core.me.lp_id;
    if let Some(preset) = core.cfg.preset_entities.clone() {
        let Placement::Explicit(map) = &core.cfg.placement else {
            return Err(EngineError::Protocol(
                "preset entities require an explicit placement".into(),
            ));
        };
        for e in preset {
            let host = map[e.entity_id as usize];
            core.directory.insert(e.entity_id, host);
            if host == my_id {
                core.windows.insert(e.entity_id, InteractionWindow::new());
                core.local.insert(e.entity_id, e);
            }
        }
        return Ok(());
    }
    for entity_id in 0..core.cfg.model.n_entities {
        let host = core.cfg.placement.lp_for(entity_id, n_lps);
        core.directory.insert(entity_id, host);
        if host == my_id {
            let e = SmhEntity::init(entity_id, core.cfg.seed, &core.cfg.model);
            core.windows.insert(entity_id, InteractionWindow::new());
            core.local.insert(entity_id, e);
        }
    }
    Ok(())
}

/// One full step: Phases A–D plus the boundary commit.
fn step_cycle(core: &mut LpCore) -> Result<StepMetrics, EngineError> {
    let step = core.step;
    let me = core.me.lp_id;
    let mut sm = StepMetrics::default();
    let mut sent_to: BTreeMap<u32, u32> = core.peer_ids().iter().map(|&p| (p, 0)).collect();

    // Phase A: broadcast local positions.
    let own_digest: Vec<(u32, f64, f64)> =
        core.local.values().map(|e| (e.entity_id, e.pos.0, e.pos.1)).collect();
    for peer in core.peer_ids() {
        for chunk in chunks_or_empty(&own_digest) {
            core.send_to(peer, &Message::PositionDigest { step, entries: chunk.to_vec() })?;
            *sent_to.get_mut(&peer).unwrap() += 1;
            sm.digest_frames += 1;
        }
    }

    // Phase B: assemble the global snapshot for this step.
    let total = core.cfg.model.n_entities as usize;
    let deadline = Instant::now() + core.cfg.step_timeout;
    loop {
        let have = own_digest.len()
            + core.inbox.get(&step).map_or(0, |ib| ib.digest_entries.len());
        if have >= total {
            break;
        }
        core.pump()?;
        if Instant::now() >= deadline {
            return Err(EngineError::StepTimeout { step });
        }
    }
    let mut positions = own_digest;
    if let Some(ib) = core.inbox.get(&step) {
        positions.extend(ib.digest_entries.iter().copied());
    }
    if positions.len() != total {
        return Err(EngineError::Protocol(format!(
            "step {step}: {} digest entries for {total} entities",
            positions.len()
        )));
    }

    // Pings on the digested snapshot: each LP emits the pings whose source
    // it hosts; the union over LPs is exactly compute_pings(positions).
    let grid = PositionGrid::build(&positions, &core.cfg.model)?;
    let mut batches: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
    for (&src, entity) in core.local.iter() {
        let mut dests = Vec::new();
        grid.neighbors_within_radius(src, entity.pos, |dst| dests.push(dst));
        dests.sort_unstable();
        for dst in dests {
            let dest_lp = *core.directory.get(&dst).ok_or_else(|| {
                EngineError::Protocol(format!("entity {dst} missing from directory"))
            })?;
            core.windows.get_mut(&src).expect("local entity has a window").record(dest_lp, 1);
            sm.pings_total += 1;
            if dest_lp != me {
                sm.pings_remote += 1;
                batches.entry(dest_lp).or_default().push((src, dst));
            }
        }
    }
    for (peer, pairs) in batches {
        for chunk in pairs.chunks(CHUNK) {
            core.send_to(peer, &Message::PingBatch { step, pairs: chunk.to_vec() })?;
            *sent_to.get_mut(&peer).unwrap() += 1;
            sm.ping_frames += 1;
        }
    }

    // Model update after the snapshot: move local entities.
    let seed = core.cfg.seed;
    let model = core.cfg.model.clone();
    for entity in core.local.values_mut() {
        rwp_step(entity, seed, step, &model);
    }
    let window_len = core.cfg.balancer.window;
    for window in core.windows.values_mut() {
        window.roll_step(window_len);
    }

    // Phase C: plan and emit migrations.
    let mut planned: Vec<(u32, u32)> = Vec::new();
    if core.cfg.balancer.enabled
        && step > 0
        && step % core.cfg.balancer.eval_period == 0
        && !core.channels.is_empty()
    {
        planned = plan_migrations(&core.windows, &core.cfg.balancer, step, me);
        for &(entity_id, dest) in &planned {
            let entity = core.local.remove(&entity_id).ok_or_else(|| {
                EngineError::Protocol(format!("planned migration of unknown entity {entity_id}"))
            })?;
            core.windows.remove(&entity_id);
            core.send_to(dest, &Message::Migrate { step, entity_blob: entity.to_blob() })?;
            *sent_to.get_mut(&dest).unwrap() += 1;
            sm.migrate_frames += 1;
            sm.migrations += 1;
            for peer in core.peer_ids() {
                if peer != dest {
                    core.send_to(
                        peer,
                        &Message::MigrateNotice { step, entity_id, new_lp: dest },
                    )?;
                }
            }
        }
    }

    // Phase D: per-destination frame counts, then the barrier.
    for peer in core.peer_ids() {
        let sent_count = sent_to[&peer];
        core.send_to(peer, &Message::StepEnd { step, lp_id: me, sent_count })?;
    }
    let peers = core.peer_ids();
    let deadline = Instant::now() + core.cfg.step_timeout;
    loop {
        let open = {
            let ib = core.inbox.entry(step).or_default();
            peers.iter().all(|p| {
                ib.step_ends.get(p).is_some_and(|expected| {
                    ib.received_counts.get(p).copied().unwrap_or(0) >= *expected
                })
            })
        };
        if open {
            break;
        }
        core.pump()?;
        if Instant::now() >= deadline {
            return Err(EngineError::StepTimeout { step });
        }
    }

    // Boundary commit: directory updates and entity arrivals become visible
    // to step + 1 everywhere at once.
    let inbox = core.inbox.remove(&step).unwrap_or_default();
    for (entity_id, new_lp) in inbox.notices {
        core.directory.insert(entity_id, new_lp);
    }
    for (entity_id, dest) in planned {
        core.directory.insert(entity_id, dest);
    }
    for blob in inbox.migrate_ins {
        let entity = SmhEntity::from_blob(&blob)?;
        if core.local.contains_key(&entity.entity_id) {
            return Err(EngineError::Protocol(format!(
                "inbound duplicate entity {}",
                entity.entity_id
            )));
        }
        core.directory.insert(entity.entity_id, me);
        let mut window = InteractionWindow::new();
        window.migrated_at = Some(step);
        core.windows.insert(entity.entity_id, window);
        core.local.insert(entity.entity_id, entity);
    }
    Ok(sm)
}

fn chunks_or_empty(entries: &[(u32, f64, f64)]) -> Vec<&[(u32, f64, f64)]> {
    if entries.is_empty() {
        vec![&[]]
    } else {
        entries.chunks(CHUNK).collect()
    }
}
