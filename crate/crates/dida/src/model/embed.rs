//! Sinusoidal timestep embedding and per-block feature modulation.

use candle_core::{Device, DType, Tensor};

use super::layers::linear;
use super::params::Params;
use crate::error::{bail, Error, Result};

pub const DEFAULT_EMBED_BASE: f64 = 10_000.0;

/// `v[2i] = sin(t / base^(2i/dim))`, `v[2i+1] = cos(t / base^(2i/dim))`.
pub fn time_embed(t: f64, dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        bail!("time embedding dimension must be even and positive, got {dim}");
    }
    if t < 0.0 {
        bail!("timestep must be non-negative, got {t}");
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let arg = t / base.powf(2.0 * i as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// `z * (shift + 1) + bias` with `shift` and `bias` of shape `(1, C)` broadcast over batch and space.
pub fn modulate(z: &Tensor, shift: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = z.dim(1)?;
    if shift.elem_count() != c || bias.elem_count() != c {
        return Err(Error::ShapeMismatch(format!(
            "feature has {c} channels but projector produced {} / {}",
            shift.elem_count(),
            bias.elem_count()
        )));
    }
    let shift = shift.reshape((1, c, 1, 1))?;
    let bias = bias.reshape((1, c, 1, 1))?;
    Ok(z.broadcast_mul(&(shift + 1.0)?)?.broadcast_add(&bias)?)
}

fn embedding_tensor(t: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v = time_embed(t as f64, dim, DEFAULT_EMBED_BASE)?;
    Ok(Tensor::from_vec(v, (1, dim), device)?.to_dtype(dtype)?)
}

/// Shared trunk: sinusoid -> linear -> SiLU -> linear.
pub(crate) fn time_trunk<P: Params + ?Sized>(params: &P, prefix: &str, t: usize, dim: usize) -> Result<Tensor> {
    let fc1 = params.tensor(&format!("{prefix}.fc1.w"))?;
    let emb = embedding_tensor(t, dim, fc1.dtype(), fc1.device())?;
    let hidden = linear(params, &format!("{prefix}.fc1"), &emb)?.silu()?;
    linear(params, &format!("{prefix}.fc2"), &hidden)
}

/// Two-layer projector from the trunk embedding to one block's channel count.
pub(crate) fn projector<P: Params + ?Sized>(params: &P, prefix: &str, trunk: &Tensor) -> Result<Tensor> {
    let hidden = linear(params, &format!("{prefix}.fc1"), &trunk.silu()?)?.silu()?;
    linear(params, &format!("{prefix}.fc2"), &hidden)
}
