//! Cumulative signal-retention schedules `alpha_bar[t]`, `t = 0..=T`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;
const SIGMOID_START: f64 = -3.0;
const SIGMOID_END: f64 = 3.0;
const SIGMOID_TAU: f64 = 1.0;
const SIGMOID_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Sigmoid,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::Sigmoid];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sigmoid" => Ok(ScheduleKind::Sigmoid),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule kind `{other}` (expected linear, cosine or sigmoid)"
            ))),
        }
    }
}

/// `alpha_bar[0] == 1` is the undegraded level; degradation steps are `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cumulative_product(betas: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut acc = 1.0;
    for beta in betas {
        acc *= 1.0 - beta;
        out.push(acc);
    }
    out
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            bail!("schedule needs at least one timestep, got T={steps}");
        }
        let t_max = steps as f64;
        let mut alpha_bar = match kind {
            ScheduleKind::Linear => {
                let betas = (0..steps).map(|i| {
                    if steps == 1 {
                        LINEAR_BETA_START
                    } else {
                        LINEAR_BETA_START
                            + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                    }
                });
                cumulative_product(betas)
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let arg = (t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    arg.cos().powi(2)
                };
                let betas = (1..=steps).map(|t| {
                    let beta = 1.0 - f(t as f64) / f((t - 1) as f64);
                    beta.min(COSINE_MAX_BETA)
                });
                cumulative_product(betas)
            }
            ScheduleKind::Sigmoid => {
                let lo = sigmoid(-SIGMOID_END / SIGMOID_TAU);
                let hi = sigmoid(-SIGMOID_START / SIGMOID_TAU);
                (0..=steps)
                    .map(|t| {
                        let v = SIGMOID_START + (SIGMOID_END - SIGMOID_START) * t as f64 / t_max;
                        ((sigmoid(-v / SIGMOID_TAU) - lo) / (hi - lo)).clamp(SIGMOID_FLOOR, 1.0)
                    })
                    .collect()
            }
        };
        alpha_bar[0] = 1.0;

        if let Some(t) = (0..steps).find(|&t| alpha_bar[t + 1] >= alpha_bar[t]) {
            bail!("{kind} schedule with T={steps} is not strictly decreasing at t={t}");
        }
        Ok(Self { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of degradation steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step betas recovered from the cumulative product, `beta[0]` is unused and set to 0.
    pub fn betas(&self) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(self.alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]))
            .collect()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, min: 1, max: self.steps() });
        }
        Ok(())
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)` truncated at `cap`; index 0 maps to `cap`.
    pub fn truncated_snr(&self, cap: f64) -> Vec<f64> {
        self.alpha_bar
            .iter()
            .map(|&a| if a >= 1.0 { cap } else { (a / (1.0 - a)).min(cap) })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,alpha_bar")?;
        for (t, a) in self.alpha_bar.iter().enumerate() {
            writeln!(out, "{t},{a:.12e}")?;
        }
        Ok(())
    }
}

/// Uniform draw from `{1, ..., steps}`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> Result<usize> {
    if steps < 1 {
        bail!("cannot sample a timestep with T={steps}");
    }
    Ok(rng.random_range(1..=steps))
}
