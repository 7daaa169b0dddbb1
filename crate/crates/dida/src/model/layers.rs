//! Differentiable building blocks expressed with tensor primitives.

use candle_core::{DType, Device, Tensor, D};

use super::params::Params;
use crate::error::Result;

pub(crate) fn conv2d<P: Params + ?Sized>(
    params: &P,
    prefix: &str,
    x: &Tensor,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let w = params.tensor(&format!("{prefix}.w"))?;
    let b = params.tensor(&format!("{prefix}.b"))?;
    let y = conv2d_matmul(x, w, padding, dilation)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

/// Stride-1 "same"-style convolution as one matrix product over shifted views of the padded
/// input. The backward pass only involves matmul, pad and narrow, which is much faster on CPU
/// than the transposed convolution the built-in conv2d backward relies on.
pub(crate) fn conv2d_matmul(x: &Tensor, w: &Tensor, padding: usize, dilation: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c {
        return Err(crate::Error::ShapeMismatch(format!("conv weight expects {ci} channels, input has {c}")));
    }
    let oh = (h + 2 * padding).checked_sub(dilation * (kh - 1)).filter(|v| *v > 0);
    let ow = (wd + 2 * padding).checked_sub(dilation * (kw - 1)).filter(|v| *v > 0);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(crate::Error::ShapeMismatch(format!("{h}x{wd} input too small for a {kh}x{kw} kernel")));
    };
    let cols = if kh == 1 && kw == 1 && padding == 0 {
        x.reshape((n, c, h * wd))?
    } else {
        let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
        let mut views = Vec::with_capacity(kh * kw);
        for i in 0..kh {
            for j in 0..kw {
                views.push(xp.narrow(2, i * dilation, oh)?.narrow(3, j * dilation, ow)?);
            }
        }
        // (n, c, kh*kw, oh, ow) matches the (co, c, kh, kw) weight layout.
        Tensor::stack(&views, 2)?.reshape((n, c * kh * kw, oh * ow))?
    };
    let wm = w.reshape((co, c * kh * kw))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((n, co, oh, ow))?)
}

pub(crate) fn linear<P: Params + ?Sized>(params: &P, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.tensor(&format!("{prefix}.w"))?;
    let b = params.tensor(&format!("{prefix}.b"))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

pub(crate) fn group_norm<P: Params + ?Sized>(params: &P, prefix: &str, x: &Tensor, groups: usize) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (n, c, h, w) = x.dims4()?;
    let grouped = x.reshape((n, groups, (c / groups) * h * w))?;
    let mean = grouped.mean_keepdim(D::Minus1)?;
    let centered = grouped.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + EPS)?.sqrt()?)?.reshape((n, c, h, w))?;
    let gamma = params.tensor(&format!("{prefix}.gamma"))?.reshape((1, c, 1, 1))?;
    let beta = params.tensor(&format!("{prefix}.beta"))?.reshape((1, c, 1, 1))?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// Interpolation matrix (`out × inp`) for half-pixel-centred linear resampling.
fn interpolation_matrix(inp: usize, out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    Ok(Tensor::from_vec(m, (out, inp), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of an `N×C×H×W` tensor, differentiable through two matrix products.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let (dtype, device) = (x.dtype(), x.device());
    let along_w = interpolation_matrix(w, width, dtype, device)?.t()?;
    let along_h = interpolation_matrix(h, height, dtype, device)?.t()?;
    let y = x.broadcast_matmul(&along_w)?;
    let y = y.transpose(2, 3)?.contiguous()?.broadcast_matmul(&along_h)?;
    Ok(y.transpose(2, 3)?.contiguous()?)
}

/// Brings a feature map to `height×width` by average pooling (downscale) or bilinear upsampling.
pub(crate) fn to_resolution(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        Ok(x.clone())
    } else if h > height {
        let k = h / height;
        Ok(x.avg_pool2d(k)?)
    } else {
        resize_bilinear(x, height, width)
    }
}
