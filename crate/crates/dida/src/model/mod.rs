//! Student, EMA teacher, time-conditioned diffusion encoder and reconstruction head.

mod checkpoint;
mod embed;
mod layers;
mod network;
mod params;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta};
pub use embed::{modulate, time_embed, DEFAULT_EMBED_BASE};
pub use layers::resize_bilinear;
pub use network::{
    argmax_classes, decode, encode, fuse, modulation_terms, reconstruct, ArchConfig, DIFFUSION_ENCODER,
    RECONSTRUCTION_HEAD, RECON_DILATIONS, STUDENT_DECODER, STUDENT_ENCODER,
};
pub use params::{Params, TensorStore, VarStore};

use crate::error::{Error, Result};

/// Parameter-name prefixes of the segmentation network `h ∘ g`.
pub const SEGMENTER_PREFIXES: [&str; 2] = ["g.", "h."];

fn has_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

pub fn architecture_hash(arch: &ArchConfig, dtype: DType) -> String {
    let canonical = serde_json::to_string(arch).expect("arch config serializes");
    let digest = Sha256::digest(format!("{canonical}|{dtype:?}").as_bytes());
    hex::encode(&digest[..12])
}

/// `teacher <- beta * teacher + (1 - beta) * student` for every teacher parameter.
pub fn ema_update(teacher: &mut TensorStore, student: &VarStore, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("EMA coefficient must lie in [0, 1), got {beta}")));
    }
    let student_count = student.names().filter(|n| has_prefix(n, &SEGMENTER_PREFIXES)).count();
    if student_count != teacher.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher holds {} parameters, student segmenter {student_count}",
            teacher.len()
        )));
    }
    let mut updated = TensorStore::default();
    for (name, old) in teacher.iter() {
        let new = student.tensor(name)?;
        if new.dims() != old.dims() {
            return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", old.dims(), new.dims())));
        }
        let blended = if beta == 0.0 {
            new.copy()?
        } else {
            (old.affine(beta, 0.0)? + new.affine(1.0 - beta, 0.0)?)?
        };
        updated.insert(name.clone(), blended.detach());
    }
    *teacher = updated;
    Ok(())
}

/// All four sub-networks. Only the student side (`g`, `h`, `g'`, `h'`) is trainable.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    arch: ArchConfig,
    dtype: DType,
    device: Device,
    student: VarStore,
    teacher: TensorStore,
}

impl ModelBundle {
    /// Seeded initialization; the teacher starts as a copy of the student segmenter.
    pub fn new(arch: ArchConfig, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut student = VarStore::default();
        let mut init = params::Init { rng: &mut rng, dtype, device: &device };
        network::init_params(&arch, &mut init, &mut student)?;
        let teacher = student.snapshot(&SEGMENTER_PREFIXES)?;
        Ok(Self { arch, dtype, device, student, teacher })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn arch_hash(&self) -> String {
        architecture_hash(&self.arch, self.dtype)
    }

    pub fn student(&self) -> &VarStore {
        &self.student
    }

    pub fn teacher(&self) -> &TensorStore {
        &self.teacher
    }

    pub fn teacher_mut(&mut self) -> &mut TensorStore {
        &mut self.teacher
    }

    /// Deep copy with fresh variables, so training one copy leaves the other untouched.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut student = VarStore::default();
        for (name, var) in self.student.iter() {
            student.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(Self { student, ..self.clone() })
    }

    /// Sets every diffusion-encoder parameter to zero, making `g'` output zeros at every stage.
    pub fn zero_diffusion_encoder(&self) -> Result<()> {
        for (name, var) in self.student.iter() {
            if name.starts_with("gp.") {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    pub fn ema_update(&mut self, beta: f64) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, beta)
    }

    pub fn image_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.to_dtype(self.dtype)?)
    }

    fn check_step(t: usize) -> Result<()> {
        if t < 1 {
            return Err(Error::TimestepOutOfRange { t, min: 1, max: usize::MAX });
        }
        Ok(())
    }

    pub fn student_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        network::check_input(&self.arch, x)?;
        encode(&self.student, STUDENT_ENCODER, &self.arch, x, None)
    }

    /// Features of `g'` conditioned on `t`.
    pub fn diffusion_features(&self, x: &Tensor, t: usize) -> Result<Vec<Tensor>> {
        Self::check_step(t)?;
        network::check_input(&self.arch, x)?;
        let terms = modulation_terms(&self.student, &self.arch, t)?;
        encode(&self.student, DIFFUSION_ENCODER, &self.arch, x, Some(&terms))
    }

    /// `g(x) + g'(x, t)` stage by stage.
    pub fn bridged_features(&self, x: &Tensor, t: usize) -> Result<Vec<Tensor>> {
        fuse(&self.student_features(x)?, &self.diffusion_features(x, t)?)
    }

    /// `h(g(x))` at input resolution.
    pub fn forward_student(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        decode(&self.student, &self.student_features(x)?, h, w)
    }

    /// `h(g(x) + g'(x, t))`.
    pub fn forward_bridged(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        decode(&self.student, &self.bridged_features(x, t)?, h, w)
    }

    /// `h'(g(x) + g'(x, t))` at quarter resolution.
    pub fn forward_reconstruction(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        reconstruct(&self.student, &self.bridged_features(x, t)?)
    }

    /// Segmentation logits and reconstruction from one shared bridged encoding.
    pub fn forward_bridged_both(&self, x: &Tensor, t: usize) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let feats = self.bridged_features(x, t)?;
        Ok((decode(&self.student, &feats, h, w)?, reconstruct(&self.student, &feats)?))
    }

    /// Teacher logits, detached from every graph.
    pub fn forward_teacher(&self, x: &Tensor) -> Result<Tensor> {
        network::check_input(&self.arch, x)?;
        let (_, _, h, w) = x.dims4()?;
        let feats = encode(&self.teacher, STUDENT_ENCODER, &self.arch, &x.detach(), None)?;
        Ok(decode(&self.teacher, &feats, h, w)?.detach())
    }

    /// Checkpoint tensors: `student/<name>` and `teacher/<name>`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.student.iter().map(|(n, v)| (format!("student/{n}"), v.as_tensor().clone())).collect();
        out.extend(self.teacher.iter().map(|(n, t)| (format!("teacher/{n}"), t.clone())));
        out
    }

    /// Restores parameter values from checkpoint tensors produced by [`ModelBundle::to_tensors`].
    pub fn load_tensors(&mut self, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.student.len() + self.teacher.len();
        let found = tensors.keys().filter(|k| k.starts_with("student/") || k.starts_with("teacher/")).count();
        if found != expected {
            return Err(Error::Checkpoint(format!("expected {expected} model tensors, found {found}")));
        }
        let lookup = |key: String| {
            tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))
        };
        for name in self.student.names().cloned().collect::<Vec<_>>() {
            let value = lookup(format!("student/{name}"))?;
            if value.dtype() != self.dtype {
                return Err(Error::Checkpoint(format!("{name} stored as {:?}", value.dtype())));
            }
            self.student.set(&name, value)?;
        }
        let mut teacher = TensorStore::default();
        for (name, old) in self.teacher.iter() {
            let value = lookup(format!("teacher/{name}"))?;
            if value.dims() != old.dims() || value.dtype() != self.dtype {
                return Err(Error::Checkpoint(format!("teacher tensor {name} has the wrong shape or dtype")));
            }
            teacher.insert(name.clone(), value.copy()?);
        }
        self.teacher = teacher;
        Ok(())
    }
}
