//! Forward degradation processes: additive Gaussian noise, iterated blur and cowmask.

mod blur;
mod cowmask;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use blur::{convolve_image, convolve_plane, discrete_gaussian, gaussian_filter, BlurKernelChain};
pub use cowmask::{generate_cowmask, CowMask};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMode {
    Noise,
    Blur,
    Mask,
}

impl DegradationMode {
    pub const ALL: [DegradationMode; 3] = [DegradationMode::Noise, DegradationMode::Blur, DegradationMode::Mask];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationMode::Noise => "noise",
            DegradationMode::Blur => "blur",
            DegradationMode::Mask => "mask",
        }
    }

    /// Noise mode regresses the injected noise, the others regress the clean image.
    pub fn predicts_noise(self) -> bool {
        self == DegradationMode::Noise
    }
}

impl fmt::Display for DegradationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(DegradationMode::Noise),
            "blur" => Ok(DegradationMode::Blur),
            "mask" => Ok(DegradationMode::Mask),
            other => Err(Error::InvalidArgument(format!(
                "unknown degradation mode `{other}` (expected noise, blur or mask)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationResult {
    pub x_t: Image,
    /// The injected noise in noise mode, the clean image otherwise.
    pub target: Image,
    pub t: usize,
    pub mode: DegradationMode,
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` with `eps ~ N(0, I)`.
pub fn degrade_noise<R: Rng + ?Sized>(
    x0: &Image,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DegradationResult> {
    schedule.check_step(t)?;
    let (c, h, w) = x0.shape();
    let eps: Vec<f64> = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Image::new(c, h, w, eps)?;
    let x_t = add_noise(x0, &eps, schedule.alpha_bar(t));
    Ok(DegradationResult { x_t, target: eps, t, mode: DegradationMode::Noise })
}

pub(crate) fn add_noise(x0: &Image, eps: &Image, alpha_bar: f64) -> Image {
    let (signal, noise) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (c, h, w) = x0.shape();
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| signal * x + noise * e).collect();
    Image::new(c, h, w, data).expect("shapes match")
}

/// Inverts the noising step given a noise estimate. No clamping is applied.
pub fn reconstruct_from_noise(
    x_t: &Image,
    eps_hat: &Image,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    schedule.check_step(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "x_t {:?} vs noise estimate {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    let alpha_bar = schedule.alpha_bar(t);
    let (signal, noise) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (c, h, w) = x_t.shape();
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - noise * e) / signal).collect();
    Image::new(c, h, w, data)
}

/// `x_t = G_t * ... * G_1 * x0`, evaluated as one equivalent Gaussian.
pub fn degrade_blur(x0: &Image, t: usize, chain: &BlurKernelChain) -> Result<DegradationResult> {
    if t < 1 || t > chain.steps() {
        return Err(Error::TimestepOutOfRange { t, min: 1, max: chain.steps() });
    }
    let x_t = convolve_image(x0, &chain.equivalent_kernel(t));
    Ok(DegradationResult { x_t, target: x0.clone(), t, mode: DegradationMode::Blur })
}

pub fn apply_mask(x0: &Image, mask: &CowMask) -> Result<Image> {
    let (c, h, w) = x0.shape();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(Image::from_fn(c, h, w, |ch, y, x| if mask.is_retained(y, x) { x0.get(ch, y, x) } else { 0.0 }))
}

/// `x_t = M_t ⊙ x0` with a cowmask thresholded at `alpha_bar_t`, shared across channels.
pub fn degrade_mask<R: Rng + ?Sized>(
    x0: &Image,
    t: usize,
    schedule: &NoiseSchedule,
    std: f64,
    rng: &mut R,
) -> Result<DegradationResult> {
    schedule.check_step(t)?;
    let mask = generate_cowmask(x0.height(), x0.width(), schedule.alpha_bar(t), std, rng)?;
    let x_t = apply_mask(x0, &mask)?;
    Ok(DegradationResult { x_t, target: x0.clone(), t, mode: DegradationMode::Mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSettings {
    pub kernel_size: usize,
    pub base_std: f64,
    pub growth_rate: f64,
}

impl Default for BlurSettings {
    fn default() -> Self {
        Self { kernel_size: 31, base_std: 0.5, growth_rate: 0.02 }
    }
}

/// One degradation process bound to its schedule, ready to be sampled during training.
#[derive(Debug, Clone)]
pub struct Degrader {
    mode: DegradationMode,
    schedule: NoiseSchedule,
    blur: Option<BlurKernelChain>,
    mask_std: f64,
}

impl Degrader {
    pub fn new(
        mode: DegradationMode,
        schedule: NoiseSchedule,
        blur: BlurSettings,
        mask_std: f64,
    ) -> Result<Self> {
        let blur = match mode {
            DegradationMode::Blur => Some(BlurKernelChain::new(
                schedule.steps(),
                blur.kernel_size,
                blur.base_std,
                blur.growth_rate,
            )?),
            _ => None,
        };
        if mode == DegradationMode::Mask && !(mask_std > 0.0) {
            return Err(Error::InvalidArgument(format!("mask std must be positive, got {mask_std}")));
        }
        Ok(Self { mode, schedule, blur, mask_std })
    }

    pub fn mode(&self) -> DegradationMode {
        self.mode
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn degrade<R: Rng + ?Sized>(&self, x0: &Image, t: usize, rng: &mut R) -> Result<DegradationResult> {
        match self.mode {
            DegradationMode::Noise => degrade_noise(x0, t, &self.schedule, rng),
            DegradationMode::Blur => degrade_blur(x0, t, self.blur.as_ref().expect("blur chain")),
            DegradationMode::Mask => degrade_mask(x0, t, &self.schedule, self.mask_std, rng),
        }
    }
}
