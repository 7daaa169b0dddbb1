//! Procedural appearance model for the two-domain shapes benchmark.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sample::LabelMap;
use crate::error::{bail, Result};
use crate::image::Image;

/// Shape classes after the background class 0.
pub const SHAPE_CLASSES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Stripes,
    Checker,
    Speckle,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Class index of this shape (background is 0).
    pub fn class(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// A shape instance in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radius: f64,
    pub angle: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= self.radius * self.radius,
            ShapeKind::Square | ShapeKind::Triangle => {
                // Rotate the query point into the shape frame.
                let (s, c) = self.angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if self.kind == ShapeKind::Square {
                    let half = self.radius / std::f64::consts::SQRT_2;
                    u.abs() <= half && v.abs() <= half
                } else {
                    // Equilateral triangle inscribed in the circle of `radius`.
                    let r = self.radius;
                    let inside = |ax: f64, ay: f64, bx: f64, by: f64| (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0;
                    let h = 3f64.sqrt() / 2.0 * r;
                    let (p0, p1, p2) = ((0.0, -r), (-h, r / 2.0), (h, r / 2.0));
                    let a = inside(p0.0, p0.1, p1.0, p1.1);
                    let b = inside(p1.0, p1.1, p2.0, p2.1);
                    let d = inside(p2.0, p2.1, p0.0, p0.1);
                    (a && b && d) || (!a && !b && !d)
                }
            }
        }
    }
}

/// Appearance parameters of one domain. Colors are RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub palette: Vec<[f64; 3]>,
    pub texture: Vec<Texture>,
    pub texture_scale: f64,
    pub noise_level: f64,
    pub hue_shift: f64,
    pub illumination_gradient: f64,
}

const NEUTRAL_PALETTE: [[f64; 3]; 4] = [
    [0.55, 0.55, 0.50],
    [0.80, 0.30, 0.25],
    [0.25, 0.60, 0.30],
    [0.30, 0.35, 0.80],
];

impl DomainSpec {
    /// Striped textures on a neutral palette.
    pub fn default_source() -> Self {
        Self {
            palette: NEUTRAL_PALETTE.to_vec(),
            texture: vec![Texture::Stripes; 4],
            texture_scale: 4.0,
            noise_level: 0.0,
            hue_shift: 0.0,
            illumination_gradient: 0.0,
        }
    }

    /// Checker textures, rotated hue, speckle noise and a lighting ramp.
    pub fn default_target() -> Self {
        Self {
            palette: NEUTRAL_PALETTE.to_vec(),
            texture: vec![Texture::Checker; 4],
            texture_scale: 3.0,
            noise_level: 0.05,
            hue_shift: 40.0,
            illumination_gradient: 0.35,
        }
    }

    /// Number of fields in which two specs differ.
    pub fn differing_fields(&self, other: &DomainSpec) -> usize {
        usize::from(self.palette != other.palette)
            + usize::from(self.texture != other.texture)
            + usize::from(self.texture_scale != other.texture_scale)
            + usize::from(self.noise_level != other.noise_level)
            + usize::from(self.hue_shift != other.hue_shift)
            + usize::from(self.illumination_gradient != other.illumination_gradient)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.palette.len() < num_classes || self.texture.len() < num_classes {
            bail!(
                "domain spec defines {} colors and {} textures for {num_classes} classes",
                self.palette.len(),
                self.texture.len()
            );
        }
        if !(self.texture_scale > 0.0) {
            bail!("texture scale must be positive");
        }
        if !(self.noise_level >= 0.0) || !(self.illumination_gradient >= 0.0) {
            bail!("noise level and illumination gradient must be non-negative");
        }
        Ok(())
    }
}

fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    if degrees == 0.0 {
        return rgb;
    }
    // Rotation about the gray axis.
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3.0;
    let sq = (1.0f64 / 3.0).sqrt();
    let m = [
        [c + (1.0 - c) * k, k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s],
        [k * (1.0 - c) + sq * s, c + k * (1.0 - c), k * (1.0 - c) - sq * s],
        [k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s, c + k * (1.0 - c)],
    ];
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(&m) {
        *o = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

fn texture_factor(texture: Texture, scale: f64, phase: (f64, f64), angle: f64, y: f64, x: f64, speckle: f64) -> f64 {
    const AMPLITUDE: f64 = 0.25;
    match texture {
        Texture::Plain => 1.0,
        Texture::Stripes => {
            let (s, c) = angle.sin_cos();
            let proj = (c * (x + phase.1) + s * (y + phase.0)) / scale;
            if proj.rem_euclid(2.0) < 1.0 { 1.0 + AMPLITUDE } else { 1.0 - AMPLITUDE }
        }
        Texture::Checker => {
            let cell = ((x + phase.1) / scale).floor() as i64 + ((y + phase.0) / scale).floor() as i64;
            if cell.rem_euclid(2) == 0 { 1.0 + AMPLITUDE } else { 1.0 - AMPLITUDE }
        }
        Texture::Speckle => 1.0 + AMPLITUDE * speckle,
    }
}

/// Random placement of 1 to 4 shapes of the foreground classes available for `num_classes`.
pub fn random_shapes<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, num_classes: usize) -> Vec<Shape> {
    let scale = height.min(width) as f64 / 64.0;
    let count = rng.random_range(1..=4);
    (0..count)
        .map(|_| {
            let kind = SHAPE_CLASSES[rng.random_range(0..num_classes - 1)];
            let radius = rng.random_range(7.0..14.0) * scale;
            let center = (
                rng.random_range(radius * 0.5..height as f64 - radius * 0.5),
                rng.random_range(radius * 0.5..width as f64 - radius * 0.5),
            );
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Shape { kind, center, radius, angle }
        })
        .collect()
}

/// Paints `shapes` (later shapes occlude earlier ones) and returns the image in `[0, 1]`
/// together with its exact label map.
pub fn render<R: Rng + ?Sized>(
    spec: &DomainSpec,
    shapes: &[Shape],
    height: usize,
    width: usize,
    rng: &mut R,
) -> (Image, LabelMap) {
    let mut label = LabelMap::filled(height, width, 0);
    for y in 0..height {
        for x in 0..width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(shape) = shapes.iter().rev().find(|s| s.contains(py, px)) {
                label.set(y, x, shape.kind.class());
            }
        }
    }

    let phase = (rng.random_range(0.0..spec.texture_scale * 2.0), rng.random_range(0.0..spec.texture_scale * 2.0));
    let stripe_angle = rng.random_range(0.0..std::f64::consts::PI);
    let light_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (ls, lc) = light_dir.sin_cos();
    let colors: Vec<[f64; 3]> = spec.palette.iter().map(|&c| rotate_hue(c, spec.hue_shift)).collect();

    let mut image = Image::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let class = usize::from(label.get(y, x));
            let speckle: f64 = rng.sample(StandardNormal);
            let tex = texture_factor(spec.texture[class], spec.texture_scale, phase, stripe_angle, y as f64, x as f64, speckle);
            let ramp = (x as f64 / width as f64 - 0.5) * lc + (y as f64 / height as f64 - 0.5) * ls;
            let light = 1.0 + spec.illumination_gradient * ramp;
            for (ch, &base) in colors[class].iter().enumerate() {
                let noise = if spec.noise_level > 0.0 {
                    spec.noise_level * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                image.set(ch, y, x, (base * tex * light + noise).clamp(0.0, 1.0));
            }
        }
    }
    (image, label)
}
