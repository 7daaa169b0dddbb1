use rand::Rng;
use rand_distr::StandardNormal;

use super::blur::gaussian_filter;
use crate::error::{bail, Result};

/// Binary `height×width` mask; `true` marks a retained pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CowMask {
    height: usize,
    width: usize,
    retained: Vec<bool>,
}

impl CowMask {
    pub fn constant(height: usize, width: usize, retained: bool) -> Self {
        Self { height, width, retained: vec![retained; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_retained(&self, y: usize, x: usize) -> bool {
        self.retained[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.retained
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.retained.is_empty() {
            return 0.0;
        }
        self.retained.iter().filter(|&&r| r).count() as f64 / self.retained.len() as f64
    }
}

/// Thresholds Gaussian-filtered white noise so that roughly a fraction `tau` of pixels is retained.
pub fn generate_cowmask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    tau: f64,
    std: f64,
    rng: &mut R,
) -> Result<CowMask> {
    if !(0.0..=1.0).contains(&tau) {
        bail!("cowmask threshold must lie in [0, 1], got {tau}");
    }
    if !(std > 0.0 && std.is_finite()) {
        bail!("cowmask filter std must be positive, got {std}");
    }
    // erf^-1(±1) is infinite: the threshold sits at ±inf.
    if tau == 0.0 || tau == 1.0 {
        return Ok(CowMask::constant(height, width, tau == 1.0));
    }
    let noise: Vec<f64> = (0..height * width).map(|_| rng.sample(StandardNormal)).collect();
    let filtered = gaussian_filter(&noise, height, width, std);
    let n = filtered.len() as f64;
    let mean = filtered.iter().sum::<f64>() / n;
    let std_dev = (filtered.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mean + std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * tau - 1.0) * std_dev;
    let retained = filtered.iter().map(|&v| v < threshold).collect();
    Ok(CowMask { height, width, retained })
}
