//! Flat key=value configuration files, shared by the LP config and the
//! benchmark scenario format. Lines starting with '#' are comments.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::balancer::BalancerConfig;
use crate::model::ModelConfig;
use crate::transport::emu::EmuConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected key=value, got '{1}'")]
    BadLine(usize, String),
    #[error("key '{0}': {1}")]
    BadValue(String, String),
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// An ordered key=value map with typed getters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(idx + 1, line.to_string()))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Overlay `other` on top of self (other wins).
    pub fn merged_with(&self, other: &KvMap) -> KvMap {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.clone());
        KvMap { entries }
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                ConfigError::BadValue(key.to_string(), format!("cannot parse '{raw}'"))
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse_as(key, default)
    }

    pub fn get_u32(&self, key: &str, default: u32) -> Result<u32, ConfigError> {
        self.parse_as(key, default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_as(key, default)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_as(key, default)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(other) => {
                Err(ConfigError::BadValue(key.to_string(), format!("not a boolean: '{other}'")))
            }
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let d = ModelConfig::default();
        Ok(ModelConfig {
            n_entities: self.get_u32("n_entities", d.n_entities)?,
            space_l: self.get_f64("space_l", d.space_l)?,
            radius: self.get_f64("radius", d.radius)?,
            v_min: self.get_f64("v_min", d.v_min)?,
            v_max: self.get_f64("v_max", d.v_max)?,
            pause_max: self.get_u32("pause_max", d.pause_max)?,
        })
    }

    pub fn balancer_config(&self) -> Result<BalancerConfig, ConfigError> {
        let d = BalancerConfig::default();
        Ok(BalancerConfig {
            enabled: self.get_bool("balancer.enabled", d.enabled)?,
            window: self.get_usize("balancer.window", d.window)?,
            eval_period: self.get_u64("balancer.eval_period", d.eval_period)?,
            migration_factor: self.get_f64("balancer.factor", d.migration_factor)?,
            max_migrations_frac: self.get_f64("balancer.max_frac", d.max_migrations_frac)?,
            cooldown: self.get_u64("balancer.cooldown", d.cooldown)?,
        })
    }

    pub fn emu_config(&self) -> Result<EmuConfig, ConfigError> {
        let d = EmuConfig::default();
        Ok(EmuConfig {
            mean_ms: self.get_f64("emu.mean_ms", d.mean_ms)?,
            std_ms: self.get_f64("emu.std_ms", d.std_ms)?,
            lifetime_min_ms: self.get_f64("emu.lifetime_min_ms", d.lifetime_min_ms)?,
            lifetime_max_ms: self.get_f64("emu.lifetime_max_ms", d.lifetime_max_ms)?,
            p_reset: self.get_f64("emu.p_reset", d.p_reset)?,
            base_offset_max_ms: self.get_f64("emu.base_offset_max_ms", d.base_offset_max_ms)?,
            bandwidth_bytes_per_s: self
                .get_f64("emu.bandwidth_bytes_per_s", d.bandwidth_bytes_per_s)?,
            overhead_ms: self.get_f64("emu.overhead_ms", d.overhead_ms)?,
            seed: self.get_u64("emu.seed", d.seed)?,
        })
    }
}
