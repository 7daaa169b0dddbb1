//! Safetensors checkpoints carrying model weights, auxiliary state tensors and JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{architecture_hash, ArchConfig, ModelBundle};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::schedule::ScheduleKind;

const META_KEY: &str = "dida";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub dtype: String,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub iteration: u64,
    /// Resolved training configuration.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Trainer-defined state (random streams and the like).
    #[serde(default)]
    pub state: serde_json::Value,
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype `{other}`"))),
    }
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(&Sha256::digest(config.to_string().as_bytes())[..12])
}

/// Model parameters plus any extra named tensors (optimizer moments).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(
        model: &ModelBundle,
        schedule: ScheduleKind,
        steps: usize,
        iteration: u64,
        config: serde_json::Value,
    ) -> Self {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            arch: model.arch().clone(),
            arch_hash: model.arch_hash(),
            dtype: model.dtype().as_str().to_string(),
            schedule,
            steps,
            iteration,
            config_hash: config_hash(&config),
            config,
            state: serde_json::Value::Null,
        };
        Self { meta, tensors: model.to_tensors().into_iter().collect() }
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.meta.dtype)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize(self.tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let dtype = parse_dtype(&meta.dtype)?;
        meta.arch.validate().map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
        if architecture_hash(&meta.arch, dtype) != meta.arch_hash {
            return Err(Error::Checkpoint("architecture hash does not match the stored architecture".into()));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses checkpoints whose architecture differs from `expected`.
    pub fn check_arch(&self, expected: &str) -> Result<()> {
        if self.meta.arch_hash != expected {
            return Err(Error::Checkpoint(format!(
                "architecture hash mismatch: checkpoint has {}, expected {expected}",
                self.meta.arch_hash
            )));
        }
        Ok(())
    }

    /// Rebuilds the four sub-networks and the teacher from the stored weights.
    pub fn to_model(&self) -> Result<ModelBundle> {
        let mut model = ModelBundle::new(self.meta.arch.clone(), 0, self.dtype()?)?;
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            num_classes: 2,
            in_channels: 3,
            widths: vec![4, 4],
            norm_groups: 2,
            decoder_width: 4,
            recon_width: 4,
            time_dim: 4,
            time_hidden: 4,
        }
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = ModelBundle::new(tiny(), 3, DType::F32).unwrap();
        let ckpt = Checkpoint::from_model(&model, ScheduleKind::Sigmoid, 100, 7, serde_json::json!({"a": 1}));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        let restored = back.to_model().unwrap();
        for ((na, a), (nb, b)) in model.to_tensors().iter().zip(restored.to_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let model = ModelBundle::new(tiny(), 3, DType::F32).unwrap();
        let ckpt = Checkpoint::from_model(&model, ScheduleKind::Linear, 10, 0, serde_json::Value::Null);
        let other = ArchConfig { widths: vec![4, 8], ..tiny() };
        let err = ckpt.check_arch(&architecture_hash(&other, DType::F32)).unwrap_err();
        assert!(err.to_string().contains("architecture hash mismatch"));
        assert!(ckpt.check_arch(&model.arch_hash()).is_ok());
    }

    #[test]
    fn tampered_metadata_is_refused() {
        let model = ModelBundle::new(tiny(), 3, DType::F32).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, ScheduleKind::Linear, 10, 0, serde_json::Value::Null);
        ckpt.meta.arch.widths = vec![4, 8];
        assert!(Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn missing_tensor_is_refused() {
        let model = ModelBundle::new(tiny(), 3, DType::F32).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, ScheduleKind::Linear, 10, 0, serde_json::Value::Null);
        ckpt.tensors.remove("student/h.cls.w");
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert!(back.to_model().is_err());
    }
}
