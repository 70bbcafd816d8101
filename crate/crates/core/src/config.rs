//! Flat `key = value` run configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::cpu::{CoreConfig, MachineConfig};
use crate::mem::CacheConfig;
use crate::os::SchedulerConfig;
use crate::predictor::RsbVariant;
use crate::sidechannel::NoiseModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    U64,
    F64,
    Bool,
    Variant,
    Text,
}

const SCHEMA: &[(&str, Kind, &str)] = &[
    ("btb.size", Kind::U64, "256"),
    ("cache.l1_sets", Kind::U64, "64"),
    ("cache.l1_ways", Kind::U64, "8"),
    ("cache.lat_l1", Kind::U64, "4"),
    ("cache.lat_llc", Kind::U64, "40"),
    ("cache.lat_mem", Kind::U64, "200"),
    ("cache.line_size", Kind::U64, "64"),
    ("cache.llc_sets", Kind::U64, "2048"),
    ("cache.llc_ways", Kind::U64, "16"),
    ("core.fence_drains", Kind::Bool, "true"),
    ("core.max_spec_depth", Kind::U64, "8"),
    ("core.max_spec_instructions", Kind::U64, "64"),
    ("core.min_spec_on_hit", Kind::U64, "2"),
    ("cross_process.sentences", Kind::U64, "1"),
    ("harden.fence_after_call", Kind::Bool, "false"),
    ("harden.retpoline", Kind::Bool, "false"),
    ("in_process.bytes", Kind::U64, "1024"),
    ("in_process.indirect", Kind::Bool, "false"),
    ("in_process.n_a", Kind::U64, "64"),
    ("input.cadence_ms", Kind::U64, "50"),
    ("input.events", Kind::Text, ""),
    ("input.text", Kind::Text, "The quick brown fox jumps over the lazy dog"),
    ("noise.flip_prob", Kind::F64, "0"),
    ("noise.spurious_fill", Kind::F64, "0"),
    ("rsb.size", Kind::U64, "16"),
    ("rsb.variant", Kind::Variant, "cyclic"),
    ("scenario.name", Kind::Text, ""),
    ("scenario.seed", Kind::U64, "0"),
    ("scenario.trials", Kind::U64, "100"),
    ("sched.flush_rsb_on_switch", Kind::Bool, "false"),
    ("sched.jitter", Kind::F64, "0"),
    ("sched.kernel_call_depth", Kind::U64, "3"),
    ("sched.quantum", Kind::U64, "100000"),
    ("time.cycles_per_ms", Kind::U64, "10000"),
    ("victim.flush_stack", Kind::Bool, "true"),
];

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for '{key}': {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {0}: expected 'key = value'")]
    Syntax(usize),
}

/// Every schema key with its current value. Unknown keys are rejected on entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: SCHEMA.iter().map(|(k, _, v)| (k.to_string(), v.to_string())).collect() }
    }
}

fn check(kind: Kind, value: &str) -> Result<(), String> {
    match kind {
        Kind::U64 => parse_u64(value).map(drop),
        Kind::F64 => match value.parse::<f64>() {
            Ok(f) if (0.0..=1.0).contains(&f) => Ok(()),
            Ok(_) => Err("expected a probability in [0, 1]".into()),
            Err(e) => Err(e.to_string()),
        },
        Kind::Bool => parse_bool(value).map(drop),
        Kind::Variant => value.parse::<RsbVariant>().map(drop),
        Kind::Text => Ok(()),
    }
}

fn parse_u64(v: &str) -> Result<u64, String> {
    let v = v.replace('_', "");
    match v.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => v.parse::<u64>(),
    }
    .map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err("expected true/false".into()),
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        SCHEMA.iter().map(|(k, _, _)| *k)
    }

    pub fn is_known(key: &str) -> bool {
        SCHEMA.iter().any(|(k, _, _)| *k == key)
    }

    /// Boolean keys, which the CLI exposes as switches.
    pub fn is_switch(key: &str) -> bool {
        SCHEMA.iter().any(|(k, kind, _)| *k == key && *kind == Kind::Bool)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (_, kind, _) = SCHEMA.iter().find(|(k, _, _)| *k == key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let value = value.trim();
        check(*kind, value).map_err(|reason| ConfigError::InvalidValue { key: key.into(), value: value.into(), reason })?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn with(mut self, key: &str, value: &str) -> Result<Self, ConfigError> {
        self.set(key, value)?;
        Ok(self)
    }

    /// Applies a config file body: `key = value` lines, `#` comments, blank lines.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn u64(&self, key: &str) -> u64 {
        parse_u64(self.get(key)).expect("validated on entry")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.u64(key) as usize
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on entry")
    }

    pub fn bool(&self, key: &str) -> bool {
        parse_bool(self.get(key)).expect("validated on entry")
    }

    pub fn seed(&self) -> u64 {
        self.u64("scenario.seed")
    }

    pub fn variant(&self) -> RsbVariant {
        self.get("rsb.variant").parse().expect("validated on entry")
    }

    pub fn cache(&self) -> CacheConfig {
        CacheConfig {
            line_size: self.u64("cache.line_size"),
            l1_sets: self.usize("cache.l1_sets"),
            l1_ways: self.usize("cache.l1_ways"),
            llc_sets: self.usize("cache.llc_sets"),
            llc_ways: self.usize("cache.llc_ways"),
            lat_l1: self.u64("cache.lat_l1"),
            lat_llc: self.u64("cache.lat_llc"),
            lat_mem: self.u64("cache.lat_mem"),
        }
    }

    /// Cross-field validation that single-key checks cannot do.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| ConfigError::InvalidValue { key: key.into(), value: self.get(key).into(), reason };
        self.cache().validate().map_err(|e| bad("cache.line_size", e.to_string()))?;
        if self.u64("rsb.size") == 0 {
            return Err(bad("rsb.size", "must be positive".into()));
        }
        if !self.u64("btb.size").is_power_of_two() {
            return Err(bad("btb.size", "must be a power of two".into()));
        }
        for key in ["core.max_spec_depth", "core.max_spec_instructions", "sched.quantum", "time.cycles_per_ms"] {
            if self.u64(key) == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn machine(&self) -> MachineConfig {
        MachineConfig {
            core: CoreConfig {
                max_spec_depth: self.usize("core.max_spec_depth"),
                max_spec_instructions: self.u64("core.max_spec_instructions"),
                min_spec_on_hit: self.u64("core.min_spec_on_hit"),
                fence_drains: self.bool("core.fence_drains"),
            },
            cache: self.cache(),
            rsb_size: self.usize("rsb.size"),
            rsb_variant: self.variant(),
            btb_size: self.usize("btb.size"),
            ..MachineConfig::default()
        }
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            quantum: self.u64("sched.quantum"),
            kernel_call_depth: self.usize("sched.kernel_call_depth"),
            flush_rsb_on_switch: self.bool("sched.flush_rsb_on_switch"),
            jitter: self.f64("sched.jitter"),
            ..SchedulerConfig::default()
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel { flip_prob: self.f64("noise.flip_prob"), spurious_fill: self.f64("noise.spurious_fill") }
    }

    /// Every key and value, sorted by key.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
