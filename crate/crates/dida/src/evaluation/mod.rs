//! Inference modes, mIoU evaluation, degradation sweeps and domain-discrepancy curves.

mod csvio;
mod metrics;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use csvio::{read_metrics_csv, read_mmd_csv, read_sweep_csv};
pub use metrics::{compute_miou, compute_mmd, Bandwidth, ConfusionMatrix, MiouResult, MmdResult};

use crate::data::SegSample;
use crate::degrade::{reconstruct_from_noise, DegradationMode, Degrader};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{argmax_classes, resize_bilinear, ModelBundle};
use crate::schedule::NoiseSchedule;
use crate::trainer::derived_rng;

const STREAM_SWEEP: u64 = 16;
const STREAM_MMD_SOURCE: u64 = 17;
const STREAM_MMD_TARGET: u64 = 18;

/// Side of the area-averaged images used as pixel-space MMD features.
pub const MMD_PIXEL_SIDE: usize = 16;

fn batch(images: &[&Image], model: &ModelBundle) -> Result<Tensor> {
    Image::batch_tensor(images, model.dtype(), model.device())
}

/// `argmax f_theta(x)`.
pub fn regular_inference(model: &ModelBundle, images: &[&Image]) -> Result<Vec<Vec<u8>>> {
    argmax_classes(&model.forward_student(&batch(images, model)?)?)
}

/// `argmax f_bar(x_t, t)`; `t = 0` routes to the plain student without the diffusion encoder.
pub fn implicit_inference(model: &ModelBundle, images: &[&Image], t: usize, steps: usize) -> Result<Vec<Vec<u8>>> {
    if t > steps {
        return Err(Error::TimestepOutOfRange { t, min: 0, max: steps });
    }
    if t == 0 {
        return regular_inference(model, images);
    }
    argmax_classes(&model.forward_bridged(&batch(images, model)?, t)?)
}

/// Head output upsampled bilinearly to input resolution, one image per input.
pub fn predict_reconstruction(model: &ModelBundle, images: &[&Image], t: usize) -> Result<Vec<Image>> {
    let (h, w) = (images[0].height(), images[0].width());
    let out = model.forward_reconstruction(&batch(images, model)?, t)?;
    Image::unbatch(&resize_bilinear(&out, h, w)?)
}

/// Inverts the noising step with the given noise estimates, clamps to `[-1, 1]` and segments.
pub fn explicit_from_noise(
    model: &ModelBundle,
    images: &[&Image],
    noise: &[Image],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<u8>>> {
    if noise.len() != images.len() {
        return Err(Error::ShapeMismatch(format!("{} noise maps for {} images", noise.len(), images.len())));
    }
    let clean: Vec<Image> = images
        .iter()
        .zip(noise)
        .map(|(x, e)| Ok(reconstruct_from_noise(x, e, t, schedule)?.clamp(-1.0, 1.0)))
        .collect::<Result<_>>()?;
    regular_inference(model, &clean.iter().collect::<Vec<_>>())
}

/// Explicit denoising inference: reconstruct `x0` from the predicted noise, then segment it.
pub fn explicit_inference(
    model: &ModelBundle,
    images: &[&Image],
    t: usize,
    schedule: &NoiseSchedule,
    mode: DegradationMode,
) -> Result<Vec<Vec<u8>>> {
    schedule.check_step(t)?;
    if !mode.predicts_noise() {
        return Err(Error::InvalidArgument(format!(
            "noise inversion needs a noise-mode model, got {mode}; use explicit_clean_inference"
        )));
    }
    let eps = predict_reconstruction(model, images, t)?;
    explicit_from_noise(model, images, &eps, t, schedule)
}

/// Blur/mask counterpart: segment the head's direct clean-image prediction.
pub fn explicit_clean_inference(model: &ModelBundle, images: &[&Image], t: usize) -> Result<Vec<Vec<u8>>> {
    let clean: Vec<Image> = predict_reconstruction(model, images, t)?.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    regular_inference(model, &clean.iter().collect::<Vec<_>>())
}

/// mIoU of predictions against each sample's evaluation labels.
pub fn score(samples: &[&SegSample], predictions: &[Vec<u8>], k: usize) -> Result<MiouResult> {
    let preds: Vec<&[u8]> = predictions.iter().map(|p| p.as_slice()).collect();
    let gts: Vec<&[u8]> = samples.iter().map(|s| s.evaluation_label().data()).collect();
    compute_miou(&preds, &gts, k)
}

fn in_chunks(
    images: &[&Image],
    chunk: usize,
    mut f: impl FnMut(&[&Image]) -> Result<Vec<Vec<u8>>>,
) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for c in images.chunks(chunk.max(1)) {
        out.extend(f(c)?);
    }
    Ok(out)
}

/// Standard evaluation: regular inference on clean images.
pub fn evaluate(model: &ModelBundle, samples: &[&SegSample], chunk: usize) -> Result<MiouResult> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = in_chunks(&images, chunk, |c| regular_inference(model, c))?;
    score(samples, &preds, model.arch().num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Bridged network told the true degradation level.
    Implicit,
    /// Reconstruct then segment with the plain student.
    Explicit,
    /// Plain student on degraded input.
    BaselineWeak,
}

impl SweepMode {
    pub const ALL: [SweepMode; 3] = [SweepMode::Implicit, SweepMode::Explicit, SweepMode::BaselineWeak];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::Implicit => "implicit",
            SweepMode::Explicit => "explicit",
            SweepMode::BaselineWeak => "baseline_weak",
        }
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(SweepMode::Implicit),
            "explicit" => Ok(SweepMode::Explicit),
            "baseline_weak" => Ok(SweepMode::BaselineWeak),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep mode `{other}` (expected implicit, explicit or baseline_weak)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t_degrade: usize,
    pub t_input: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub mode: SweepMode,
    pub points: Vec<SweepPoint>,
}

/// Degrades every image at level `t` (identity at `t = 0`) with a per-level stream.
pub fn degrade_set(degrader: &Degrader, images: &[&Image], t: usize, seed: u64, stream: u64) -> Result<Vec<Image>> {
    if t == 0 {
        return Ok(images.iter().map(|&i| i.clone()).collect());
    }
    let mut rng = derived_rng(seed, stream, t as u64);
    images.iter().map(|x| Ok(degrader.degrade(x, t, &mut rng)?.x_t)).collect()
}

/// mIoU on `samples` for every degradation level in `t_grid` and every requested mode.
///
/// Implicit and explicit modes use `t_input = t_degrade`; the weak baseline uses `t_input = 0`.
pub fn degradation_sweep(
    model: &ModelBundle,
    samples: &[&SegSample],
    degrader: &Degrader,
    t_grid: &[usize],
    modes: &[SweepMode],
    seed: u64,
    chunk: usize,
) -> Result<Vec<SweepCurve>> {
    let steps = degrader.steps();
    if let Some(&t) = t_grid.iter().find(|&&t| t > steps) {
        return Err(Error::TimestepOutOfRange { t, min: 0, max: steps });
    }
    let clean: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let k = model.arch().num_classes;
    let mut curves: Vec<SweepCurve> = modes.iter().map(|&mode| SweepCurve { mode, points: Vec::new() }).collect();
    for &t in t_grid {
        let degraded = degrade_set(degrader, &clean, t, seed, STREAM_SWEEP)?;
        let refs: Vec<&Image> = degraded.iter().collect();
        for curve in &mut curves {
            let (t_input, preds) = match curve.mode {
                SweepMode::BaselineWeak => (0, in_chunks(&refs, chunk, |c| regular_inference(model, c))?),
                SweepMode::Implicit => (t, in_chunks(&refs, chunk, |c| implicit_inference(model, c, t, steps))?),
                SweepMode::Explicit if t == 0 => (0, in_chunks(&refs, chunk, |c| regular_inference(model, c))?),
                SweepMode::Explicit => {
                    let preds = in_chunks(&refs, chunk, |c| match degrader.mode() {
                        DegradationMode::Noise => explicit_inference(model, c, t, degrader.schedule(), DegradationMode::Noise),
                        _ => explicit_clean_inference(model, c, t),
                    })?;
                    (t, preds)
                }
            };
            let miou = score(samples, &preds, k)?.miou;
            curve.points.push(SweepPoint { t_degrade: t, t_input, miou });
        }
    }
    Ok(curves)
}

pub const SWEEP_HEADER: &str = "mode,t_degrade,t_input,miou";

pub fn write_sweep_csv<W: Write>(curves: &[SweepCurve], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for c in curves {
        for p in &c.points {
            writeln!(out, "{},{},{},{}", c.mode, p.t_degrade, p.t_input, p.miou)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Images area-averaged to 16x16 and flattened.
    Pixels,
    /// Last encoder stage of the student, averaged over space.
    Encoder,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixels" => Ok(FeatureKind::Pixels),
            "encoder" => Ok(FeatureKind::Encoder),
            other => Err(Error::InvalidArgument(format!("unknown feature kind `{other}` (expected pixels or encoder)"))),
        }
    }
}

/// Flattened 16x16 area average of each image.
pub fn pixel_features(images: &[Image]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|x| {
            if x.height() % MMD_PIXEL_SIDE != 0 || x.height() != x.width() {
                return Err(Error::ShapeMismatch(format!(
                    "pixel features need square images with side divisible by {MMD_PIXEL_SIDE}"
                )));
            }
            Ok(x.area_downsample(x.height() / MMD_PIXEL_SIDE)?.into_data())
        })
        .collect()
}

/// Spatially averaged last-stage student encoder features.
pub fn encoder_features(model: &ModelBundle, images: &[Image], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for c in images.chunks(chunk.max(1)) {
        let refs: Vec<&Image> = c.iter().collect();
        let feats = model.student_features(&batch(&refs, model)?)?;
        let last = feats.last().expect("at least one stage").mean((2, 3))?;
        let rows: Vec<Vec<f64>> = last.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        out.extend(rows);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdPoint {
    pub t: usize,
    pub mmd: f64,
    pub bandwidth: f64,
}

/// MMD between the degraded versions of two image sets at every level of `t_grid`.
///
/// Each set is degraded with its own stream so that two copies of one set still receive
/// independent noise.
pub fn mmd_vs_degradation(
    set_a: &[&Image],
    set_b: &[&Image],
    degrader: &Degrader,
    t_grid: &[usize],
    feature: FeatureKind,
    model: Option<&ModelBundle>,
    seed: u64,
) -> Result<Vec<MmdPoint>> {
    let steps = degrader.steps();
    if let Some(&t) = t_grid.iter().find(|&&t| t > steps) {
        return Err(Error::TimestepOutOfRange { t, min: 0, max: steps });
    }
    let features = |images: Vec<Image>| match feature {
        FeatureKind::Pixels => pixel_features(&images),
        FeatureKind::Encoder => {
            let model = model.ok_or_else(|| Error::InvalidArgument("encoder features need a model".into()))?;
            encoder_features(model, &images, 32)
        }
    };
    t_grid
        .iter()
        .map(|&t| {
            let a = features(degrade_set(degrader, set_a, t, seed, STREAM_MMD_SOURCE)?)?;
            let b = features(degrade_set(degrader, set_b, t, seed, STREAM_MMD_TARGET)?)?;
            let r = compute_mmd(&a, &b, Bandwidth::Median)?;
            Ok(MmdPoint { t, mmd: r.value, bandwidth: r.bandwidth })
        })
        .collect()
}

pub const MMD_HEADER: &str = "t,mmd,bandwidth";

pub fn write_mmd_csv<W: Write>(points: &[MmdPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{MMD_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{}", p.t, p.mmd, p.bandwidth)?;
    }
    Ok(())
}
