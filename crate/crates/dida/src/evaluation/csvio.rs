//! Readers for the CSV files written by sweeps, MMD curves and training.

use serde::Deserialize;

use super::{MmdPoint, SweepCurve, SweepMode, SweepPoint, MMD_HEADER, SWEEP_HEADER};
use crate::error::{Error, Result};
use crate::trainer::{StepRecord, METRICS_HEADER};

fn rows<T: for<'de> Deserialize<'de>>(text: &str, header: &str, what: &str) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| Error::Data { path: what.into(), message: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != header {
        return Err(Error::Data { path: what.into(), message: format!("expected header `{header}`, found `{found}`") });
    }
    let out = reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Data { path: what.into(), message: e.to_string() })?;
    if out.is_empty() {
        return Err(Error::Data { path: what.into(), message: "no data rows".into() });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SweepRow {
    mode: String,
    t_degrade: usize,
    t_input: usize,
    miou: f64,
}

/// Curves in first-appearance order of their mode.
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepCurve>> {
    let mut curves: Vec<SweepCurve> = Vec::new();
    for row in rows::<SweepRow>(text, SWEEP_HEADER, "sweep csv")? {
        let mode: SweepMode = row.mode.parse()?;
        let point = SweepPoint { t_degrade: row.t_degrade, t_input: row.t_input, miou: row.miou };
        match curves.iter_mut().find(|c| c.mode == mode) {
            Some(c) => c.points.push(point),
            None => curves.push(SweepCurve { mode, points: vec![point] }),
        }
    }
    Ok(curves)
}

pub fn read_mmd_csv(text: &str) -> Result<Vec<MmdPoint>> {
    rows(text, MMD_HEADER, "mmd csv")
}

#[derive(Deserialize)]
struct MetricsRow {
    iteration: u64,
    t: usize,
    #[serde(rename = "loss_S")]
    loss_s: f64,
    #[serde(rename = "loss_T")]
    loss_t: f64,
    #[serde(rename = "loss_D")]
    loss_d: f64,
    #[serde(rename = "loss_R")]
    loss_r: f64,
    loss_total: f64,
    q_mean: f64,
    lr: f64,
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<StepRecord>> {
    Ok(rows::<MetricsRow>(text, METRICS_HEADER, "metrics csv")?
        .into_iter()
        .map(|r| StepRecord {
            iteration: r.iteration,
            t: r.t,
            loss_s: r.loss_s,
            loss_t: r.loss_t,
            loss_d: r.loss_d,
            loss_r: r.loss_r,
            loss_total: r.loss_total,
            q_mean: r.q_mean,
            lr: r.lr,
        })
        .collect())
}
