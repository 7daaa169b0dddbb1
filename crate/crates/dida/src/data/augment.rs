use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::SegSample;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Maximum relative change for brightness, contrast and saturation.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, jitter: 0.2 }
    }
}

fn hflip(image: &Image) -> Image {
    let (c, h, w) = image.shape();
    Image::from_fn(c, h, w, |ch, y, x| image.get(ch, y, w - 1 - x))
}

fn jitter_colors(image: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let (c, h, w) = image.shape();
    // Work in [0, 1].
    let mut unit = image.map(|v| (v + 1.0) * 0.5 * brightness);
    let mean = unit.data().iter().sum::<f64>() / unit.data().len() as f64;
    unit.data_mut().iter_mut().for_each(|v| *v = mean + contrast * (*v - mean));
    if c == 3 {
        for y in 0..h {
            for x in 0..w {
                let gray = 0.299 * unit.get(0, y, x) + 0.587 * unit.get(1, y, x) + 0.114 * unit.get(2, y, x);
                for ch in 0..3 {
                    let v = unit.get(ch, y, x);
                    unit.set(ch, y, x, gray + saturation * (v - gray));
                }
            }
        }
    }
    unit.map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0))
}

/// Random horizontal flip (image and label together) and color jitter (image only).
pub fn augment<R: Rng + ?Sized>(sample: &SegSample, config: &AugmentConfig, rng: &mut R) -> SegSample {
    let mut out = sample.clone();
    if rng.random_bool(config.flip_prob.clamp(0.0, 1.0)) {
        out.image = hflip(&out.image);
        let label = out.label_mut();
        let w = label.width();
        for y in 0..label.height() {
            for x in 0..w / 2 {
                let (a, b) = (label.get(y, x), label.get(y, w - 1 - x));
                label.set(y, x, b);
                label.set(y, w - 1 - x, a);
            }
        }
    }
    if config.jitter > 0.0 {
        let j = config.jitter;
        let mut draw = || rng.random_range(1.0 - j..=1.0 + j);
        let (b, c, s) = (draw(), draw(), draw());
        out.image = jitter_colors(&out.image, b, c, s);
    }
    out
}
