//! Confusion matrices, IoU and kernel MMD.

use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::error::{bail, Error, Result};

/// `counts[i * k + j]` = pixels with ground truth `i` predicted as `j`; ignore pixels are skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// `None` for classes absent from both ground truth and predictions.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, predicted: &[u8], truth: &[u8]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted pixels vs {} ground-truth pixels",
                predicted.len(),
                truth.len()
            )));
        }
        for (&p, &g) in predicted.iter().zip(truth) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= self.k || g >= self.k {
                bail!("class index out of range for {} classes (predicted {p}, truth {g})", self.k);
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::ShapeMismatch(format!("{} vs {} classes", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn result(&self) -> MiouResult {
        let per_class: Vec<Option<f64>> = (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
                let fp: u64 = (0..self.k).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        MiouResult { per_class, miou }
    }
}

/// Per-class IoU and mIoU over matched prediction / ground-truth maps.
pub fn compute_miou(predictions: &[&[u8]], ground_truths: &[&[u8]], k: usize) -> Result<MiouResult> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (p, g) in predictions.iter().zip(ground_truths) {
        cm.add(p, g)?;
    }
    Ok(cm.result())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled sample.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth: f64,
    pub n: usize,
    pub m: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Order-independent sum of values in `[0, 1]` using 2^-64 fixed point, so that swapping the two
/// sample sets reproduces the statistic bit for bit.
#[derive(Default)]
struct FixedSum(u128);

impl FixedSum {
    const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

    fn add(&mut self, v: f64) {
        self.0 += (v.clamp(0.0, 1.0) * Self::SCALE).round() as u128;
    }

    fn mean(&self, count: usize) -> f64 {
        (self.0 as f64 / Self::SCALE) / count as f64
    }
}

/// Biased squared-MMD with an RBF kernel `exp(-|x-y|^2 / 2 sigma^2)`, reported as its square root.
pub fn compute_mmd(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<MmdResult> {
    if a.is_empty() || b.is_empty() {
        bail!("MMD needs two non-empty sample sets");
    }
    let dim = a[0].len();
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch(format!("vector of dimension {} among dimension {dim}", v.len())));
    }
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|v| v.as_slice()).collect();
    let total = pooled.len();
    // Upper-triangular squared distances over the pooled sample.
    let mut dist = vec![0f64; total * total];
    for i in 0..total {
        for j in i + 1..total {
            let d = squared_distance(pooled[i], pooled[j]);
            dist[i * total + j] = d;
            dist[j * total + i] = d;
        }
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => {
            if !(s > 0.0 && s.is_finite()) {
                bail!("bandwidth must be positive, got {s}");
            }
            s
        }
        Bandwidth::Median => {
            let mut d: Vec<f64> = (0..total).flat_map(|i| (i + 1..total).map(move |j| (i, j))).map(|(i, j)| dist[i * total + j]).collect();
            let s = if d.is_empty() {
                1.0
            } else {
                let mid = d.len() / 2;
                let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
                m.sqrt()
            };
            if s > 0.0 { s } else { 1.0 }
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |i: usize, j: usize| (-dist[i * total + j] * gamma).exp();
    let n = a.len();
    let (mut xx, mut yy, mut xy) = (FixedSum::default(), FixedSum::default(), FixedSum::default());
    for i in 0..total {
        for j in 0..total {
            let v = k(i, j);
            match (i < n, j < n) {
                (true, true) => xx.add(v),
                (false, false) => yy.add(v),
                _ => xy.add(v),
            }
        }
    }
    let m = b.len();
    let mmd2 = xx.mean(n * n) + yy.mean(m * m) - xy.mean(2 * n * m) * 2.0;
    Ok(MmdResult { value: mmd2.max(0.0).sqrt(), bandwidth: sigma, n, m })
}
