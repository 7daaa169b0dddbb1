//! Gaussian blur chain built from discrete Gaussian kernels.
//!
//! Kernels are sampled from the discrete Gaussian `e^{-v} I_n(v)` (modified Bessel
//! functions of integer order, `v` = variance), which composes exactly under
//! convolution: blurring with variances `a` then `b` equals one blur with `a + b`
//! up to truncation of the tails. Borders use half-sample symmetric reflection,
//! which symmetric kernels preserve, so repeated blurs and one equivalent blur agree
//! at the borders as well.

use crate::error::{bail, Result};
use crate::image::Image;

/// Truncation radius in standard deviations for derived kernels.
const TAIL_SIGMAS: f64 = 4.0;

/// Discrete Gaussian of the given variance on `-radius..=radius`, normalized to sum 1.
pub fn discrete_gaussian(variance: f64, radius: usize) -> Vec<f64> {
    if variance <= 0.0 {
        let mut k = vec![0.0; 2 * radius + 1];
        k[radius] = 1.0;
        return k;
    }
    // Miller's backward recurrence for I_n(v): I_{n-1} = I_{n+1} + (2n / v) I_n,
    // normalized with sum_{n in Z} e^{-v} I_n(v) = 1.
    let start = radius + 64 + (12.0 * variance.sqrt()).ceil() as usize;
    let mut values = vec![0.0f64; start + 2];
    values[start] = 1e-30;
    for n in (1..=start).rev() {
        values[n - 1] = values[n + 1] + (2.0 * n as f64 / variance) * values[n];
        if values[n - 1] > 1e250 {
            for v in values.iter_mut().skip(n - 1) {
                *v *= 1e-250;
            }
        }
    }
    let total: f64 = values[0] + 2.0 * values[1..].iter().sum::<f64>();
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| values[i.abs_diff(radius)] / total)
        .collect();
    let mass: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= mass);
    kernel
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable convolution of an `height×width` plane with a symmetric odd-length kernel.
pub fn convolve_plane(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    debug_assert_eq!(plane.len(), height * width);
    debug_assert!(kernel.len() % 2 == 1);
    let radius = (kernel.len() / 2) as isize;
    let mut rows = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * row[reflect(x as isize + k as isize - radius, width)];
            }
            rows[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for (k, w) in kernel.iter().enumerate() {
            let src = reflect(y as isize + k as isize - radius, height) * width;
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst.iter_mut().zip(&rows[src..src + width]) {
                *d += w * s;
            }
        }
    }
    out
}

pub fn convolve_image(image: &Image, kernel: &[f64]) -> Image {
    let (c, h, w) = image.shape();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let blurred = convolve_plane(image.plane(ch), h, w, kernel);
        out.plane_mut(ch).copy_from_slice(&blurred);
    }
    out
}

/// Isotropic Gaussian filter with standard deviation `std` (pixels).
pub fn gaussian_filter(plane: &[f64], height: usize, width: usize, std: f64) -> Vec<f64> {
    let radius = (TAIL_SIGMAS * std).ceil() as usize;
    convolve_plane(plane, height, width, &discrete_gaussian(std * std, radius))
}

/// Per-step kernels `G_1..G_T` whose standard deviation grows as `base_std * exp(growth_rate * s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernelChain {
    steps: usize,
    kernel_size: usize,
    base_std: f64,
    growth_rate: f64,
    per_step_std: Vec<f64>,
    cumulative_variance: Vec<f64>,
}

impl BlurKernelChain {
    pub fn new(steps: usize, kernel_size: usize, base_std: f64, growth_rate: f64) -> Result<Self> {
        if steps < 1 {
            bail!("blur chain needs at least one step");
        }
        if kernel_size.is_multiple_of(2) {
            bail!("blur kernel size must be odd, got {kernel_size}");
        }
        if !(base_std > 0.0 && base_std.is_finite()) {
            bail!("blur base std must be positive, got {base_std}");
        }
        if !(growth_rate > 0.0 && growth_rate.is_finite()) {
            bail!("blur growth rate must be positive, got {growth_rate}");
        }
        let per_step_std: Vec<f64> =
            (0..=steps).map(|s| base_std * (growth_rate * s as f64).exp()).collect();
        let mut cumulative_variance = vec![0.0; steps + 1];
        for s in 1..=steps {
            cumulative_variance[s] = cumulative_variance[s - 1] + per_step_std[s].powi(2);
        }
        Ok(Self { steps, kernel_size, base_std, growth_rate, per_step_std, cumulative_variance })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn base_std(&self) -> f64 {
        self.base_std
    }

    pub fn growth_rate(&self) -> f64 {
        self.growth_rate
    }

    /// `per_step_std[s]`; kernel `G_s` uses entry `s` for `s >= 1`, entry 0 is the base std.
    pub fn per_step_std(&self) -> &[f64] {
        &self.per_step_std
    }

    /// 1-D factor of `G_s` at the chain's kernel size.
    pub fn step_kernel(&self, s: usize) -> Vec<f64> {
        discrete_gaussian(self.per_step_std[s].powi(2), self.kernel_size / 2)
    }

    /// Standard deviation of `G_t * ... * G_1`.
    pub fn equivalent_std(&self, t: usize) -> f64 {
        self.cumulative_variance[t].sqrt()
    }

    /// 1-D factor of the single kernel equivalent to the first `t` steps.
    pub fn equivalent_kernel(&self, t: usize) -> Vec<f64> {
        let radius = (self.kernel_size / 2).max((TAIL_SIGMAS * self.equivalent_std(t)).ceil() as usize);
        discrete_gaussian(self.cumulative_variance[t], radius)
    }
}
