//! In-process cluster runner: one coordinator plus N LPs on threads, over any
//! of the three transports. The benchmark harness and the test suite both
//! drive whole runs through this.

use std::time::Duration;

use thiserror::Error;

use crate::coordinator::{run_sima, SimaError, SimaOptions, SimaReport};
use crate::metrics::RunMetrics;
use crate::model::SmhEntity;
use crate::transport::testproxy::FakeSocksProxy;
use crate::transport::{
    direct::listen_direct, ClockMode, EmuConfig, EmuNet, SocksConfig, TransportCtx,
};
use crate::wire::{Endpoint, Scheme};

use super::{EngineConfig, EngineError, LpRunOutput, LpSetup, Placement, RegistrationGate};

#[derive(Clone, Debug)]
pub enum ClusterTransport {
    Direct,
    /// SOCKS5 against an in-process scripted proxy; LPs advertise .onion
    /// names routed by the proxy.
    Socks,
    Emu { config: EmuConfig, mode: ClockMode },
}

#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub n_lps: u32,
    pub transport: ClusterTransport,
    pub engine: EngineConfig,
    pub sima_timeout: Duration,
    /// Arrival turn per LP index; identity order when absent. Tests permute
    /// this to randomize registration order while keeping runs reproducible.
    pub registration_order: Option<Vec<u32>>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            n_lps: 3,
            transport: ClusterTransport::Direct,
            engine: EngineConfig::default(),
            sima_timeout: Duration::from_secs(60),
            registration_order: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("coordinator: {0}")]
    Sima(#[from] SimaError),
    #[error("lp {index}: {source}")]
    Lp {
        index: u32,
        #[source]
        source: EngineError,
    },
    #[error("a run thread panicked")]
    Panicked,
    #[error("bad cluster spec: {0}")]
    BadSpec(String),
    #[error("transport: {0}")]
    Transport(#[from] crate::transport::TransportError),
}

#[derive(Debug)]
pub struct ClusterOutput {
    pub sima: SimaReport,
    /// Per-LP outputs, ordered by runner index (not necessarily lp_id).
    pub lps: Vec<LpRunOutput>,
    pub merged: RunMetrics,
    /// All entities after the final step, sorted by id.
    pub final_entities: Vec<SmhEntity>,
}

pub fn run_cluster(spec: &ClusterSpec) -> Result<ClusterOutput, ClusterError> {
    if spec.n_lps == 0 {
        return Err(ClusterError::BadSpec("n_lps must be at least 1".into()));
    }
    if let Placement::Explicit(map) = &spec.engine.placement {
        if map.len() != spec.engine.model.n_entities as usize {
            return Err(ClusterError::BadSpec(format!(
                "placement covers {} entities, model has {}",
                map.len(),
                spec.engine.model.n_entities
            )));
        }
        if map.iter().any(|&lp| lp >= spec.n_lps) {
            return Err(ClusterError::BadSpec("placement names an lp outside the run".into()));
        }
    }
    if let Some(order) = &spec.registration_order {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..spec.n_lps).collect::<Vec<_>>() {
            return Err(ClusterError::BadSpec(
                "registration_order must be a permutation of 0..n_lps".into(),
            ));
        }
    }

    // Per-transport resources. Everything is bound before any thread starts,
    // so no dial can race a missing listener.
    let proxy; // keep the fake proxy alive for the whole run
    let (sima_ctx, mut sima_acceptor, sima_ep, lp_setups): (
        TransportCtx,
        Box<dyn crate::transport::Acceptor>,
        Endpoint,
        Vec<(TransportCtx, Box<dyn crate::transport::Acceptor>, Option<Endpoint>)>,
    ) = match &spec.transport {
        ClusterTransport::Direct => {
            let bind = Endpoint::new(Scheme::Direct, "127.0.0.1", 1).unwrap();
            let sima_acc = listen_direct(&bind)?;
            let sima_ep = {
                use crate::transport::Acceptor;
                sima_acc.local_endpoint()
            };
            let mut setups = Vec::new();
            for _ in 0..spec.n_lps {
                let acc = listen_direct(&bind)?;
                setups.push((TransportCtx::Direct, Box::new(acc) as Box<_>, None));
            }
            (TransportCtx::Direct, Box::new(sima_acc), sima_ep, setups)
        }
        ClusterTransport::Emu { config, mode } => {
            let net = EmuNet::new(config.clone(), *mode);
            let ctx = TransportCtx::Emu(net.clone());
            let sima_acc = net.listen("anon:sima")?;
            let sima_ep = sima_acc.endpoint();
            let mut setups = Vec::new();
            for k in 0..spec.n_lps {
                let acc = net.listen(&format!("anon:lp{k}"))?;
                setups.push((ctx.clone(), Box::new(acc) as Box<_>, None));
            }
            (ctx, Box::new(sima_acc), sima_ep, setups)
        }
        ClusterTransport::Socks => {
            proxy = FakeSocksProxy::start().map_err(|e| {
                ClusterError::Transport(crate::transport::TransportError::Io {
                    endpoint: "fake proxy".into(),
                    source: e,
                })
            })?;
            let cfg = SocksConfig {
                proxy_host: proxy.host(),
                proxy_port: proxy.port(),
                connect_retries: 10,
                initial_backoff_ms: 20,
                max_backoff_ms: 200,
                io_timeout: Duration::from_secs(10),
            };
            let ctx = TransportCtx::Socks(cfg);
            let bind = Endpoint::new(Scheme::Direct, "127.0.0.1", 1).unwrap();

            let sima_acc = listen_direct(&bind)?;
            let sima_real = {
                use crate::transport::Acceptor;
                sima_acc.local_endpoint()
            };
            let sima_domain = "simaaaaaaaaaaaaa.onion";
            proxy.route(sima_domain, format!("127.0.0.1:{}", sima_real.port).parse().unwrap());
            let sima_ep = Endpoint::new(Scheme::Socks, sima_domain, sima_real.port).unwrap();

            let mut setups = Vec::new();
            for k in 0..spec.n_lps {
                let acc = listen_direct(&bind)?;
                let real = {
                    use crate::transport::Acceptor;
                    acc.local_endpoint()
                };
                let domain = format!("lp{k:03}aaaaaaaaaaaaa.onion");
                proxy.route(&domain, format!("127.0.0.1:{}", real.port).parse().unwrap());
                let advertise = Endpoint::new(Scheme::Socks, domain, real.port).unwrap();
                setups.push((ctx.clone(), Box::new(acc) as Box<_>, Some(advertise)));
            }
            (ctx, Box::new(sima_acc), sima_ep, setups)
        }
    };
    let _ = &sima_ctx;

    let gate = RegistrationGate::new();
    let n_lps = spec.n_lps;
    let sima_opts = SimaOptions { timeout: spec.sima_timeout };
    let sima_thread = std::thread::spawn(move || run_sima(sima_acceptor.as_mut(), n_lps, &sima_opts));

    let mut lp_threads = Vec::new();
    for (k, (ctx, acceptor, advertise)) in lp_setups.into_iter().enumerate() {
        let turn = spec
            .registration_order
            .as_ref()
            .map(|order| order[k] as usize)
            .unwrap_or(k);
        let setup = LpSetup {
            transport: ctx,
            sima: sima_ep.clone(),
            acceptor,
            advertise,
            gate: Some((gate.clone(), turn)),
        };
        let cfg = spec.engine.clone();
        lp_threads.push(std::thread::spawn(move || super::run_lp(setup, &cfg)));
    }

    let sima = sima_thread.join().map_err(|_| ClusterError::Panicked)??;
    let mut lps = Vec::new();
    let mut first_failure: Option<ClusterError> = None;
    for (k, t) in lp_threads.into_iter().enumerate() {
        match t.join().map_err(|_| ClusterError::Panicked)? {
            Ok(out) => lps.push(out),
            Err(e) => {
                if first_failure.is_none() {
                    first_failure = Some(ClusterError::Lp { index: k as u32, source: e });
                }
            }
        }
    }
    if let Some(err) = first_failure {
        return Err(err);
    }

    let merged = RunMetrics::merge(&lps.iter().map(|l| l.metrics.clone()).collect::<Vec<_>>());
    let mut final_entities: Vec<SmhEntity> =
        lps.iter().flat_map(|l| l.final_entities.iter().cloned()).collect();
    final_entities.sort_by_key(|e| e.entity_id);
    Ok(ClusterOutput { sima, lps, merged, final_entities })
}

/// Reference single-LP run over an in-process loopback channel with a virtual
/// clock: the sequential oracle for any distributed configuration.
pub fn run_sequential(engine: &EngineConfig) -> Result<LpRunOutput, ClusterError> {
    let spec = ClusterSpec {
        n_lps: 1,
        transport: ClusterTransport::Emu {
            config: EmuConfig { p_reset: 0.0, ..EmuConfig::default() },
            mode: ClockMode::Ledger,
        },
        engine: engine.clone(),
        ..ClusterSpec::default()
    };
    run_cluster(&spec).map(|mut out| out.lps.remove(0))
}
