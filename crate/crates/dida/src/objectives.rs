//! Loss terms: supervised and pseudo-label cross-entropy, degraded image consistency,
//! reconstruction, and their weighted sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::degrade::DegradationMode;
use crate::error::{bail, Error, Result};
use crate::model::ModelBundle;
use crate::schedule::NoiseSchedule;

/// Confidence threshold on the teacher's max softmax probability.
pub const DEFAULT_PSEUDO_THRESHOLD: f64 = 0.968;
pub const DEFAULT_LAMBDA_D: f64 = 0.5;
pub const DEFAULT_LAMBDA_R: f64 = 5.0;
pub const DEFAULT_SNR_CAP: f64 = 5.0;

/// Hard teacher labels for one image, with an image-level confidence weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub p: Vec<u8>,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_r: f64,
    /// Reconstruction weight per timestep for the clean-image regression modes.
    pub lambda_t: Vec<f64>,
}

impl LossWeights {
    pub fn new(lambda_d: f64, lambda_r: f64, schedule: &NoiseSchedule, snr_cap: f64) -> Result<Self> {
        if !(lambda_d >= 0.0 && lambda_r >= 0.0 && lambda_d.is_finite() && lambda_r.is_finite()) {
            bail!("loss weights must be finite and non-negative, got lambda_d={lambda_d}, lambda_r={lambda_r}");
        }
        if !(snr_cap > 0.0 && snr_cap.is_finite()) {
            bail!("SNR cap must be positive, got {snr_cap}");
        }
        Ok(Self { lambda_d, lambda_r, lambda_t: schedule.truncated_snr(snr_cap) })
    }

    /// Weight applied to the reconstruction error at step `t` in `mode`.
    pub fn reconstruction_weight(&self, mode: DegradationMode, t: usize) -> Result<f64> {
        if mode.predicts_noise() {
            return Ok(1.0);
        }
        self.lambda_t
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, min: 1, max: self.lambda_t.len().saturating_sub(1) })
    }
}

/// Numerically stable log-softmax over the class axis.
fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Per-sample `q`-weighted pixel cross-entropy averaged over non-ignored pixels, then over the batch.
///
/// `labels[n]` is a flattened `H×W` map; samples with no valid pixel contribute 0.
pub fn weighted_ce(logits: &Tensor, labels: &[&[u8]], q: &[f64]) -> Result<Tensor> {
    let (n, k, h, w) = logits.dims4()?;
    if labels.len() != n || q.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} logit maps, {} label maps, {} weights",
            labels.len(),
            q.len()
        )));
    }
    let plane = h * w;
    let mut mask = vec![0f64; n * k * plane];
    for (b, (label, &qb)) in labels.iter().zip(q).enumerate() {
        if label.len() != plane {
            return Err(Error::ShapeMismatch(format!("label of {} pixels for {h}x{w} logits", label.len())));
        }
        if let Some(&bad) = label.iter().find(|&&v| v != IGNORE_LABEL && usize::from(v) >= k) {
            bail!("label value {bad} outside 0..{k}");
        }
        if !(0.0..=1.0).contains(&qb) {
            bail!("confidence weight {qb} outside [0, 1]");
        }
        let valid = label.iter().filter(|&&v| v != IGNORE_LABEL).count();
        if valid == 0 {
            continue;
        }
        let weight = qb / (valid as f64 * n as f64);
        for (p, &v) in label.iter().enumerate() {
            if v != IGNORE_LABEL {
                mask[(b * k + usize::from(v)) * plane + p] = weight;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (n, k, h, w), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_softmax(logits)? * mask)?.sum_all()?.affine(-1.0, 0.0)?)
}

/// Pseudo-labels from teacher logits: argmax (lowest class on ties) and the fraction of
/// pixels whose max softmax probability exceeds `threshold`.
pub fn make_pseudo_label(teacher_logits: &Tensor, threshold: f64) -> Result<Vec<PseudoLabel>> {
    let (n, k, h, w) = teacher_logits.dims4()?;
    let flat: Vec<f64> = teacher_logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut p = Vec::with_capacity(plane);
        let mut confident = 0usize;
        for px in 0..plane {
            let at = |c: usize| flat[(b * k + c) * plane + px];
            let mut best = 0;
            for c in 1..k {
                if at(c) > at(best) {
                    best = c;
                }
            }
            let top = at(best);
            let denom: f64 = (0..k).map(|c| (at(c) - top).exp()).sum();
            if 1.0 / denom > threshold {
                confident += 1;
            }
            p.push(best as u8);
        }
        out.push(PseudoLabel { p, q: confident as f64 / plane as f64 });
    }
    Ok(out)
}

fn pseudo_parts(pseudo: &[PseudoLabel]) -> (Vec<&[u8]>, Vec<f64>) {
    (pseudo.iter().map(|p| p.p.as_slice()).collect(), pseudo.iter().map(|p| p.q).collect())
}

/// `L^S` on a labeled source batch.
pub fn supervised_loss(model: &ModelBundle, x_source: &Tensor, labels: &[&[u8]]) -> Result<Tensor> {
    weighted_ce(&model.forward_student(x_source)?, labels, &vec![1.0; labels.len()])
}

/// Teacher pseudo-labels on clean target images; the teacher never enters a gradient graph.
pub fn teacher_pseudo_labels(model: &ModelBundle, x_target: &Tensor, threshold: f64) -> Result<Vec<PseudoLabel>> {
    make_pseudo_label(&model.forward_teacher(x_target)?, threshold)
}

/// `L^T` given pseudo-labels computed on the same clean target images.
pub fn adaptation_loss(model: &ModelBundle, x_target: &Tensor, pseudo: &[PseudoLabel]) -> Result<Tensor> {
    let (labels, q) = pseudo_parts(pseudo);
    weighted_ce(&model.forward_student(x_target)?, &labels, &q)
}

/// `L^D`: cross-entropy of the bridged network on degraded images against clean-image labels.
pub fn dic_loss(
    model: &ModelBundle,
    x_source_t: &Tensor,
    source_labels: &[&[u8]],
    x_target_t: &Tensor,
    pseudo: &[PseudoLabel],
    t: usize,
) -> Result<Tensor> {
    let source = weighted_ce(&model.forward_bridged(x_source_t, t)?, source_labels, &vec![1.0; source_labels.len()])?;
    let (labels, q) = pseudo_parts(pseudo);
    let target = weighted_ce(&model.forward_bridged(x_target_t, t)?, &labels, &q)?;
    Ok((source + target)?)
}

/// Mean squared error between a head prediction and its target, scaled by `weight`.
pub fn reconstruction_error(prediction: &Tensor, target: &Tensor, weight: f64) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            prediction.dims(),
            target.dims()
        )));
    }
    let target = target.to_dtype(prediction.dtype())?.detach();
    Ok(((prediction - target)?.sqr()?.mean_all()? * weight)?)
}

/// `L^R`: `target` is the injected noise (noise mode) or the clean image, already at head resolution.
pub fn reconstruction_loss(
    model: &ModelBundle,
    x_t: &Tensor,
    t: usize,
    target: &Tensor,
    mode: DegradationMode,
    weights: &LossWeights,
) -> Result<Tensor> {
    let prediction = model.forward_reconstruction(x_t, t)?;
    reconstruction_error(&prediction, target, weights.reconstruction_weight(mode, t)?)
}

/// `L^D` and `L^R` from a single bridged encoding of the source and target degraded batches.
///
/// `reconstruction_target` stacks the source targets followed by the target-domain ones.
#[allow(clippy::too_many_arguments)]
pub fn degraded_losses(
    model: &ModelBundle,
    x_source_t: &Tensor,
    source_labels: &[&[u8]],
    x_target_t: &Tensor,
    pseudo: &[PseudoLabel],
    t: usize,
    reconstruction_target: &Tensor,
    mode: DegradationMode,
    weights: &LossWeights,
) -> Result<(Tensor, Tensor)> {
    let ns = x_source_t.dim(0)?;
    let nt = x_target_t.dim(0)?;
    let x = Tensor::cat(&[x_source_t, x_target_t], 0)?;
    let (logits, reconstruction) = model.forward_bridged_both(&x, t)?;
    let source = weighted_ce(&logits.narrow(0, 0, ns)?, source_labels, &vec![1.0; ns])?;
    let (labels, q) = pseudo_parts(pseudo);
    let target = weighted_ce(&logits.narrow(0, ns, nt)?, &labels, &q)?;
    let dic = (source + target)?;
    let rec = reconstruction_error(&reconstruction, reconstruction_target, weights.reconstruction_weight(mode, t)?)?;
    Ok((dic, rec))
}

/// The four scalar loss tensors of one step.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub supervised: Tensor,
    pub adaptation: Tensor,
    pub dic: Tensor,
    pub reconstruction: Tensor,
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossComponents {
    pub fn values(&self) -> Result<[f64; 4]> {
        Ok([
            scalar(&self.supervised)?,
            scalar(&self.adaptation)?,
            scalar(&self.dic)?,
            scalar(&self.reconstruction)?,
        ])
    }
}

/// `L^S + L^T + lambda_D L^D + lambda_R L^R`, refusing non-finite components.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<Tensor> {
    let names = ["loss_S", "loss_T", "loss_D", "loss_R"];
    for (name, v) in names.iter().zip(components.values()?) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let base = (&components.supervised + &components.adaptation)?;
    let with_d = (base + (&components.dic * weights.lambda_d)?)?;
    let total = (with_d + (&components.reconstruction * weights.lambda_r)?)?;
    let v = scalar(&total)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss_total = {v}")));
    }
    Ok(total)
}
