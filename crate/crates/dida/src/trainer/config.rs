//! Training configuration with a flat, dotted-key JSON representation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::AugmentConfig;
use crate::degrade::{BlurSettings, DegradationMode};
use crate::error::{bail, Error, Result};
use crate::model::ArchConfig;
use crate::objectives::{DEFAULT_LAMBDA_D, DEFAULT_LAMBDA_R, DEFAULT_PSEUDO_THRESHOLD, DEFAULT_SNR_CAP};
use crate::schedule::ScheduleKind;

/// Default cowmask filter width.
pub const DEFAULT_MASK_STD: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory containing `manifest.json`.
    pub data_root: PathBuf,
    /// Receives checkpoints, the metrics log and the resolved configuration.
    pub output_dir: PathBuf,
    pub iterations: u64,
    /// Images per domain per step.
    pub batch_size: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub mode: DegradationMode,
    /// When false the degradation branch is skipped entirely (plain mean-teacher self-training).
    pub dida: bool,
    pub lambda_d: f64,
    pub lambda_r: f64,
    pub snr_cap: f64,
    pub ema_beta: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub seed: u64,
    pub pseudo_threshold: f64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub dtype: String,
    pub mask_std: f64,
    pub blur: BlurSettings,
    pub augment: AugmentConfig,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            iterations: 4000,
            batch_size: 4,
            timesteps: 100,
            schedule: ScheduleKind::Sigmoid,
            mode: DegradationMode::Noise,
            dida: true,
            lambda_d: DEFAULT_LAMBDA_D,
            lambda_r: DEFAULT_LAMBDA_R,
            snr_cap: DEFAULT_SNR_CAP,
            ema_beta: 0.999,
            lr_encoder: 6e-5,
            lr_decoder: 6e-4,
            weight_decay: 0.01,
            warmup_iters: 150,
            seed: 0,
            pseudo_threshold: DEFAULT_PSEUDO_THRESHOLD,
            checkpoint_every: 1000,
            dtype: "f32".into(),
            mask_std: DEFAULT_MASK_STD,
            blur: BlurSettings::default(),
            augment: AugmentConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(last.to_string(), value.clone());
    }
    Value::Object(root)
}

/// Interprets a command-line value: JSON if it parses, a comma-separated list where the
/// key holds an array, a bare string otherwise.
fn parse_override(raw: &str, current: &Value) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if !(current.is_array() && !v.is_array()) {
            return v;
        }
    }
    if current.is_array() {
        let items = raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| serde_json::from_str(s.trim()).unwrap_or_else(|_| Value::String(s.trim().to_string())))
            .collect();
        return Value::Array(items);
    }
    Value::String(raw.to_string())
}

impl TrainConfig {
    /// Every leaf field under its dotted key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Dotted keys accepted by [`TrainConfig::from_flat`] and [`TrainConfig::apply_override`].
    pub fn keys() -> Vec<String> {
        Self::default().to_flat().into_keys().collect()
    }

    fn from_flat_map(flat: &BTreeMap<String, Value>) -> Result<Self> {
        serde_json::from_value(unflatten(flat)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Builds a config from defaults overlaid with `values`; unknown keys are rejected.
    pub fn from_flat(values: &Map<String, Value>) -> Result<Self> {
        let config = Self::overlay(values)?;
        config.validate()?;
        Ok(config)
    }

    /// Like [`TrainConfig::from_flat`] but without range validation, for callers that apply
    /// further overrides first.
    pub fn overlay(values: &Map<String, Value>) -> Result<Self> {
        let mut flat = Self::default().to_flat();
        for (key, value) in values {
            let slot = flat.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            *slot = value.clone();
        }
        Self::from_flat_map(&flat)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        Self::from_flat(&map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets one dotted key from its command-line spelling.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut flat = self.to_flat();
        let slot = flat.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = parse_override(raw, slot);
        let updated = Self::from_flat_map(&flat).map_err(|e| Error::Config(format!("--{key} {raw}: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn param_dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("dtype must be f32 or f64, got `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.iterations < 1 {
            return fail("iterations must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if self.timesteps < 1 {
            return fail("timesteps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return fail(format!("ema_beta must lie in [0, 1), got {}", self.ema_beta));
        }
        if self.warmup_iters > self.iterations {
            return fail(format!("warmup_iters {} exceeds iterations {}", self.warmup_iters, self.iterations));
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_decoder", self.lr_decoder)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold) {
            return fail(format!("pseudo_threshold must lie in [0, 1], got {}", self.pseudo_threshold));
        }
        for (name, v) in [("lambda_d", self.lambda_d), ("lambda_r", self.lambda_r), ("snr_cap", self.snr_cap)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        self.param_dtype()?;
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.augment.flip_prob < 0.0 || self.augment.flip_prob > 1.0 || self.augment.jitter < 0.0 {
            bail!("augmentation parameters out of range");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let c = TrainConfig { lambda_d: 0.25, ..Default::default() };
        let text = c.to_flat_json();
        assert!(text.contains("\"arch.widths\""));
        assert_eq!(TrainConfig::from_json_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_overlays_defaults() {
        let c = TrainConfig::from_json_str(r#"{"iterations": 10, "warmup_iters": 2, "arch.widths": [8, 16, 16, 16]}"#).unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.arch.widths, vec![8, 16, 16, 16]);
        assert_eq!(c.lambda_r, 5.0);
        assert!(TrainConfig::from_json_str(r#"{"lamda_d": 1}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"ema_beta": 1.0}"#).is_err());
        assert!(TrainConfig::from_json_str("[1]").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::default();
        c.apply_override("lambda_d", "0").unwrap();
        c.apply_override("schedule", "cosine").unwrap();
        c.apply_override("arch.widths", "8,16,16,16").unwrap();
        c.apply_override("output_dir", "out/x").unwrap();
        c.apply_override("dida", "false").unwrap();
        assert_eq!(c.lambda_d, 0.0);
        assert_eq!(c.schedule, ScheduleKind::Cosine);
        assert_eq!(c.arch.widths, vec![8, 16, 16, 16]);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert!(!c.dida);
        assert!(c.apply_override("schedule", "quadratic").is_err());
        assert!(c.apply_override("nope", "1").is_err());
    }

    #[test]
    fn every_key_is_listed() {
        let keys = TrainConfig::keys();
        for k in ["iterations", "lambda_r", "blur.kernel_size", "augment.jitter", "arch.time_dim", "seed"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
