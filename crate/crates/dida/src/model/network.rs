//! Encoder, segmentation decoder and reconstruction head.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::{modulate, projector, time_trunk};
use super::layers::{conv2d, group_norm, to_resolution};
use super::params::{Init, Params, VarStore};
use crate::error::{bail, Error, Result};

pub const STUDENT_ENCODER: &str = "g";
pub const STUDENT_DECODER: &str = "h";
pub const DIFFUSION_ENCODER: &str = "gp";
pub const RECONSTRUCTION_HEAD: &str = "hp";

/// Dilation rates of the reconstruction head branches.
pub const RECON_DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channel width of each encoder stage; stage `i` runs at `1 / 2^(i+1)` resolution.
    pub widths: Vec<usize>,
    pub norm_groups: usize,
    pub decoder_width: usize,
    pub recon_width: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            in_channels: 3,
            widths: vec![32, 64, 128, 128],
            norm_groups: 8,
            decoder_width: 64,
            recon_width: 32,
            time_dim: 128,
            time_hidden: 128,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!("need at least 2 classes");
        }
        if self.widths.len() < 2 {
            bail!("encoder needs at least two stages");
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % self.norm_groups != 0) {
            bail!("stage width {w} is not a positive multiple of {} norm groups", self.norm_groups);
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            bail!("time embedding dimension must be even, got {}", self.time_dim);
        }
        if self.decoder_width == 0 || self.recon_width == 0 || self.time_hidden == 0 || self.in_channels == 0 {
            bail!("layer widths must be positive");
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }
}

pub(crate) fn init_params<R: Rng>(arch: &ArchConfig, init: &mut Init<'_, R>, store: &mut VarStore) -> Result<()> {
    let conv = |store: &mut VarStore, init: &mut Init<'_, R>, name: String, out: usize, inp: usize, k: usize, gain: f64| -> Result<()> {
        let fan_in = (inp * k * k) as f64;
        store.insert(format!("{name}.w"), init.normal(&[out, inp, k, k], gain / fan_in.sqrt())?)?;
        store.insert(format!("{name}.b"), init.constant(&[out], 0.0)?)?;
        Ok(())
    };
    let relu_gain = 2f64.sqrt();
    for prefix in [STUDENT_ENCODER, DIFFUSION_ENCODER] {
        let mut c_in = arch.in_channels;
        for (i, &w) in arch.widths.iter().enumerate() {
            conv(store, init, format!("{prefix}.s{i}.conv"), w, c_in, 3, relu_gain)?;
            store.insert(format!("{prefix}.s{i}.norm.gamma"), init.constant(&[w], 1.0)?)?;
            store.insert(format!("{prefix}.s{i}.norm.beta"), init.constant(&[w], 0.0)?)?;
            c_in = w;
        }
    }
    for (i, &w) in arch.widths.iter().enumerate() {
        conv(store, init, format!("{STUDENT_DECODER}.lat{i}"), arch.decoder_width, w, 1, relu_gain)?;
        conv(store, init, format!("{RECONSTRUCTION_HEAD}.lat{i}"), arch.recon_width, w, 1, relu_gain)?;
    }
    conv(store, init, format!("{STUDENT_DECODER}.cls"), arch.num_classes, arch.decoder_width, 1, 1.0)?;
    for d in RECON_DILATIONS {
        conv(store, init, format!("{RECONSTRUCTION_HEAD}.branch{d}"), arch.recon_width, arch.recon_width, 3, relu_gain)?;
    }
    conv(store, init, format!("{RECONSTRUCTION_HEAD}.proj"), 3, arch.recon_width * RECON_DILATIONS.len(), 1, 1.0)?;

    let linear = |store: &mut VarStore, init: &mut Init<'_, R>, name: String, out: usize, inp: usize| -> Result<()> {
        let bound = 1.0 / (inp as f64).sqrt();
        store.insert(format!("{name}.w"), init.uniform(&[out, inp], bound)?)?;
        store.insert(format!("{name}.b"), init.uniform(&[out], bound)?)?;
        Ok(())
    };
    linear(store, init, format!("{DIFFUSION_ENCODER}.time.fc1"), arch.time_hidden, arch.time_dim)?;
    linear(store, init, format!("{DIFFUSION_ENCODER}.time.fc2"), arch.time_hidden, arch.time_hidden)?;
    for (i, &w) in arch.widths.iter().enumerate() {
        for kind in ["shift", "bias"] {
            let p = format!("{DIFFUSION_ENCODER}.mod{i}.{kind}");
            linear(store, init, format!("{p}.fc1"), arch.time_hidden, arch.time_hidden)?;
            linear(store, init, format!("{p}.fc2"), w, arch.time_hidden)?;
        }
    }
    Ok(())
}

pub(crate) fn check_input(arch: &ArchConfig, x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    let m = arch.size_multiple();
    if c != arch.in_channels || h % m != 0 || w % m != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input {c}x{h}x{w}: expected {} channels and sides divisible by {m}",
            arch.in_channels
        )));
    }
    let total = x.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::NonFinite("network input".into()));
    }
    Ok(())
}

/// Per-stage `(shift, bias)` pairs for timestep `t`.
pub fn modulation_terms<P: Params + ?Sized>(params: &P, arch: &ArchConfig, t: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let trunk = time_trunk(params, &format!("{DIFFUSION_ENCODER}.time"), t, arch.time_dim)?;
    (0..arch.stages())
        .map(|i| {
            let shift = projector(params, &format!("{DIFFUSION_ENCODER}.mod{i}.shift"), &trunk)?;
            let bias = projector(params, &format!("{DIFFUSION_ENCODER}.mod{i}.bias"), &trunk)?;
            Ok((shift, bias))
        })
        .collect()
}

/// Hierarchical features; when `modulation` is given each stage is modulated after its nonlinearity.
pub fn encode<P: Params + ?Sized>(
    params: &P,
    prefix: &str,
    arch: &ArchConfig,
    x: &Tensor,
    modulation: Option<&[(Tensor, Tensor)]>,
) -> Result<Vec<Tensor>> {
    let mut h = x.clone();
    let mut stages = Vec::with_capacity(arch.stages());
    for i in 0..arch.stages() {
        h = conv2d(params, &format!("{prefix}.s{i}.conv"), &h, 1, 1)?;
        h = group_norm(params, &format!("{prefix}.s{i}.norm"), &h, arch.norm_groups)?.relu()?;
        if let Some(terms) = modulation {
            let (shift, bias) = &terms[i];
            h = modulate(&h, shift, bias)?;
        }
        h = h.avg_pool2d(2)?;
        stages.push(h.clone());
    }
    Ok(stages)
}

/// Stage-wise residual fusion of two feature hierarchies.
pub fn fuse(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Tensor>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} stages", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.dims() != y.dims() {
                return Err(Error::ShapeMismatch(format!("stage {:?} vs {:?}", x.dims(), y.dims())));
            }
            Ok((x + y)?)
        })
        .collect()
}

fn lateral_sum<P: Params + ?Sized>(params: &P, prefix: &str, feats: &[Tensor]) -> Result<Tensor> {
    let (_, _, qh, qw) = feats[1].dims4()?;
    let mut acc: Option<Tensor> = None;
    for (i, f) in feats.iter().enumerate() {
        let l = to_resolution(&conv2d(params, &format!("{prefix}.lat{i}"), f, 0, 1)?, qh, qw)?;
        acc = Some(match acc {
            None => l,
            Some(a) => (a + l)?,
        });
    }
    Ok(acc.expect("at least two stages").relu()?)
}

/// Segmentation logits at `out_h×out_w` from encoder features.
pub fn decode<P: Params + ?Sized>(params: &P, feats: &[Tensor], out_h: usize, out_w: usize) -> Result<Tensor> {
    let fused = lateral_sum(params, STUDENT_DECODER, feats)?;
    let logits = conv2d(params, &format!("{STUDENT_DECODER}.cls"), &fused, 0, 1)?;
    super::layers::resize_bilinear(&logits, out_h, out_w)
}

/// Three-channel reconstruction at quarter input resolution.
pub fn reconstruct<P: Params + ?Sized>(params: &P, feats: &[Tensor]) -> Result<Tensor> {
    let fused = lateral_sum(params, RECONSTRUCTION_HEAD, feats)?;
    let branches = RECON_DILATIONS
        .iter()
        .map(|&d| Ok(conv2d(params, &format!("{RECONSTRUCTION_HEAD}.branch{d}"), &fused, d, d)?.relu()?))
        .collect::<Result<Vec<_>>>()?;
    let cat = Tensor::cat(&branches, 1)?;
    conv2d(params, &format!("{RECONSTRUCTION_HEAD}.proj"), &cat, 0, 1)
}

/// Per-pixel argmax over classes, lowest index on ties.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (n, k, h, w) = logits.dims4()?;
    let flat: Vec<f64> = logits.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if flat[(b * k + c) * plane + p] > flat[(b * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

