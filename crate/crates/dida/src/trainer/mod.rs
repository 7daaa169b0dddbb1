//! The training loop: batch assembly, degradation, losses, optimization, EMA, checkpoints and metrics.

mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{TrainConfig, DEFAULT_MASK_STD};
pub use optim::{is_encoder_param, AdamW};

use crate::data::{augment, load_dataset, write_atomic, LabelMap, SegSample, Split, MANIFEST_FILE};
use crate::degrade::Degrader;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Checkpoint, ModelBundle};
use crate::objectives::{self, LossComponents, LossWeights};
use crate::schedule::{sample_timestep, NoiseSchedule};

pub const METRICS_HEADER: &str = "iteration,t,loss_S,loss_T,loss_D,loss_R,loss_total,q_mean,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const STREAM_SOURCE_ORDER: u64 = 1;
const STREAM_TARGET_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DEGRADE: u64 = 4;

/// Random stream for one purpose and index, a pure function of the run seed.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Learning-rate multiplier at 1-based `iteration`: linear warmup, then constant.
pub fn warmup_factor(iteration: u64, warmup_iters: u64) -> f64 {
    if warmup_iters == 0 || iteration >= warmup_iters {
        1.0
    } else {
        iteration as f64 / warmup_iters as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    /// Sampled degradation level, 0 when the degradation branch is disabled.
    pub t: usize,
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_d: f64,
    pub loss_r: f64,
    pub loss_total: f64,
    pub q_mean: f64,
    /// Encoder-group learning rate; the decoder group scales identically.
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration, self.t, self.loss_s, self.loss_t, self.loss_d, self.loss_r, self.loss_total, self.q_mean, self.lr
        )
    }
}

/// One step's inputs: augmented labeled source images and unlabeled target images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source_images: Vec<Image>,
    pub source_labels: Vec<LabelMap>,
    pub target_images: Vec<Image>,
}

/// Callback invoked with every assembled batch before the step runs.
pub type StepHook<'a> = dyn FnMut(&mut Batch, u64) + 'a;

/// Everything a step needs besides the model, optimizer and batch.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub degrader: Degrader,
    pub weights: LossWeights,
    pub pseudo_threshold: f64,
    pub ema_beta: f64,
    pub dida: bool,
}

impl StepContext {
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let schedule = NoiseSchedule::build(config.schedule, config.timesteps)?;
        let weights = LossWeights::new(config.lambda_d, config.lambda_r, &schedule, config.snr_cap)?;
        let degrader = Degrader::new(config.mode, schedule, config.blur, config.mask_std)?;
        Ok(Self {
            degrader,
            weights,
            pseudo_threshold: config.pseudo_threshold,
            ema_beta: config.ema_beta,
            dida: config.dida,
        })
    }
}

fn image_batch(images: &[Image], model: &ModelBundle) -> Result<Tensor> {
    let refs: Vec<&Image> = images.iter().collect();
    Image::batch_tensor(&refs, model.dtype(), model.device())
}

/// Losses of one step without touching any parameter.
pub fn step_losses(
    model: &ModelBundle,
    batch: &Batch,
    ctx: &StepContext,
    rng: &mut ChaCha8Rng,
) -> Result<(LossComponents, usize, f64)> {
    if batch.source_images.is_empty() || batch.target_images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let xs = image_batch(&batch.source_images, model)?;
    let xt = image_batch(&batch.target_images, model)?;
    let ys: Vec<&[u8]> = batch.source_labels.iter().map(|l| l.data()).collect();

    let supervised = objectives::supervised_loss(model, &xs, &ys)?;
    let pseudo = objectives::teacher_pseudo_labels(model, &xt, ctx.pseudo_threshold)?;
    let adaptation = objectives::adaptation_loss(model, &xt, &pseudo)?;
    let q_mean = pseudo.iter().map(|p| p.q).sum::<f64>() / pseudo.len() as f64;

    let zero = || Tensor::zeros((), model.dtype(), model.device());
    let (t, dic, reconstruction) = if ctx.dida {
        let t = sample_timestep(rng, ctx.degrader.steps())?;
        let mut degraded_s = Vec::with_capacity(batch.source_images.len());
        let mut degraded_t = Vec::with_capacity(batch.target_images.len());
        let mut targets = Vec::with_capacity(batch.source_images.len() + batch.target_images.len());
        for img in &batch.source_images {
            let d = ctx.degrader.degrade(img, t, rng)?;
            targets.push(d.target.area_downsample(4)?);
            degraded_s.push(d.x_t);
        }
        for img in &batch.target_images {
            let d = ctx.degrader.degrade(img, t, rng)?;
            targets.push(d.target.area_downsample(4)?);
            degraded_t.push(d.x_t);
        }
        let xs_t = image_batch(&degraded_s, model)?;
        let xt_t = image_batch(&degraded_t, model)?;
        let target = image_batch(&targets, model)?;
        let (dic, rec) = objectives::degraded_losses(
            model,
            &xs_t,
            &ys,
            &xt_t,
            &pseudo,
            t,
            &target,
            ctx.degrader.mode(),
            &ctx.weights,
        )?;
        (t, dic, rec)
    } else {
        (0, zero()?, zero()?)
    };
    Ok((LossComponents { supervised, adaptation, dic, reconstruction }, t, q_mean))
}

/// One optimization step followed by the EMA teacher update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ModelBundle,
    optimizer: &mut AdamW,
    batch: &Batch,
    ctx: &StepContext,
    iteration: u64,
    lr_encoder: f64,
    lr_decoder: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let (components, t, q_mean) = step_losses(model, batch, ctx, rng)?;
    let total = objectives::total_loss(&components, &ctx.weights)?;
    let grads = total.backward()?;
    optimizer.step(model.student(), &grads, lr_encoder, lr_decoder)?;
    model.ema_update(ctx.ema_beta)?;
    let [loss_s, loss_t, loss_d, loss_r] = components.values()?;
    Ok(StepRecord {
        iteration,
        t,
        loss_s,
        loss_t,
        loss_d,
        loss_r,
        loss_total: objectives::scalar(&total)?,
        q_mean,
        lr: lr_encoder,
    })
}

/// Stateful driver; all randomness derives from `(seed, iteration)`.
pub struct Trainer {
    config: TrainConfig,
    ctx: StepContext,
    model: ModelBundle,
    optimizer: AdamW,
    iteration: u64,
    source: Vec<SegSample>,
    target: Vec<SegSample>,
    order: Option<(u64, Vec<usize>, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, source: Vec<SegSample>, target: Vec<SegSample>) -> Result<Self> {
        config.validate()?;
        let model = ModelBundle::new(config.arch.clone(), config.seed, config.param_dtype()?)?;
        let optimizer = AdamW::new(config.weight_decay);
        Self::assemble(config, model, optimizer, 0, source, target)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, checkpoint: &Checkpoint, source: Vec<SegSample>, target: Vec<SegSample>) -> Result<Self> {
        config.validate()?;
        let expected = crate::model::architecture_hash(&config.arch, config.param_dtype()?);
        checkpoint.check_arch(&expected)?;
        let model = checkpoint.to_model()?;
        let steps: BTreeMap<String, u64> = serde_json::from_value(
            checkpoint.meta.state.get("optimizer_steps").cloned().unwrap_or_default(),
        )
        .map_err(|e| Error::Checkpoint(format!("bad optimizer state: {e}")))?;
        let optimizer = AdamW::import(config.weight_decay, model.student(), &checkpoint.tensors, &steps)?;
        let iteration = checkpoint.meta.iteration;
        Self::assemble(config, model, optimizer, iteration, source, target)
    }

    fn assemble(
        config: TrainConfig,
        model: ModelBundle,
        optimizer: AdamW,
        iteration: u64,
        source: Vec<SegSample>,
        target: Vec<SegSample>,
    ) -> Result<Self> {
        if source.iter().any(|s| s.training_label().is_none()) {
            return Err(Error::InvalidArgument("source samples must carry labels".into()));
        }
        let per_epoch = source.len().min(target.len()) / config.batch_size;
        if per_epoch == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} source and {} target samples cannot fill a batch of {}",
                source.len(),
                target.len(),
                config.batch_size
            )));
        }
        let ctx = StepContext::from_config(&config)?;
        Ok(Self { config, ctx, model, optimizer, iteration, source, target, order: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelBundle {
        &self.model
    }

    pub fn into_model(self) -> ModelBundle {
        self.model
    }

    /// Number of completed steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn batches_per_epoch(&self) -> usize {
        self.source.len().min(self.target.len()) / self.config.batch_size
    }

    /// Source and target sample indices for the 0-based step `index`.
    fn batch_indices(&mut self, index: u64) -> (Vec<usize>, Vec<usize>) {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = index / per_epoch;
        let slot = (index % per_epoch) as usize;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let seed = self.config.seed;
            let mut s: Vec<usize> = (0..self.source.len()).collect();
            let mut t: Vec<usize> = (0..self.target.len()).collect();
            s.shuffle(&mut derived_rng(seed, STREAM_SOURCE_ORDER, epoch));
            t.shuffle(&mut derived_rng(seed, STREAM_TARGET_ORDER, epoch));
            self.order = Some((epoch, s, t));
        }
        let (_, s, t) = self.order.as_ref().expect("order cached");
        let b = self.config.batch_size;
        (s[slot * b..(slot + 1) * b].to_vec(), t[slot * b..(slot + 1) * b].to_vec())
    }

    /// Augmented batch for the 0-based step `index`.
    pub fn batch(&mut self, index: u64) -> Batch {
        let (si, ti) = self.batch_indices(index);
        let b = self.config.batch_size as u64;
        let mut source_images = Vec::with_capacity(si.len());
        let mut source_labels = Vec::with_capacity(si.len());
        for (slot, &i) in si.iter().enumerate() {
            let mut rng = derived_rng(self.config.seed, STREAM_AUGMENT, index * 2 * b + slot as u64);
            let s = augment(&self.source[i], &self.config.augment, &mut rng);
            source_labels.push(s.training_label().expect("source label").clone());
            source_images.push(s.image);
        }
        let target_images = ti
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = derived_rng(self.config.seed, STREAM_AUGMENT, index * 2 * b + b + slot as u64);
                augment(&self.target[i], &self.config.augment, &mut rng).image
            })
            .collect();
        Batch { source_images, source_labels, target_images }
    }

    pub fn learning_rates(&self, iteration: u64) -> (f64, f64) {
        let f = warmup_factor(iteration, self.config.warmup_iters);
        (self.config.lr_encoder * f, self.config.lr_decoder * f)
    }

    pub fn step(&mut self, hook: Option<&mut StepHook<'_>>) -> Result<StepRecord> {
        let index = self.iteration;
        let mut batch = self.batch(index);
        if let Some(h) = hook {
            h(&mut batch, index + 1);
        }
        let iteration = index + 1;
        let (lr_e, lr_d) = self.learning_rates(iteration);
        let mut rng = derived_rng(self.config.seed, STREAM_DEGRADE, index);
        let record = train_step(&mut self.model, &mut self.optimizer, &batch, &self.ctx, iteration, lr_e, lr_d, &mut rng)?;
        self.iteration = iteration;
        Ok(record)
    }

    /// Full training state: weights, teacher, optimizer moments and the iteration counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(self.config.to_flat()).expect("config serializes");
        let mut ckpt = Checkpoint::from_model(&self.model, self.config.schedule, self.config.timesteps, self.iteration, config);
        let (tensors, steps) = self.optimizer.export();
        ckpt.tensors.extend(tensors);
        ckpt.meta.state = serde_json::json!({ "optimizer_steps": steps });
        ckpt
    }
}

/// Result of a [`train`] run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn checkpoint_path(output_dir: &Path, iteration: u64) -> PathBuf {
    output_dir.join(CHECKPOINT_DIR).join(format!("step_{iteration:06}.safetensors"))
}

/// Loads the source-train and target-train splits named by `config.data_root`.
pub fn load_training_data(config: &TrainConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let ds = load_dataset(&config.data_root.join(MANIFEST_FILE))?;
    if ds.num_classes() != config.arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes(),
            config.arch.num_classes
        )));
    }
    Ok((ds.split_owned(Split::SourceTrain), ds.split_owned(Split::TargetTrain)))
}

fn write_resolved_config(config: &TrainConfig) -> Result<()> {
    let mut flat = config.to_flat();
    flat.insert("version".into(), serde_json::Value::String(crate::VERSION.into()));
    let text = serde_json::to_string_pretty(&flat)?;
    write_atomic(&config.output_dir.join(CONFIG_FILE), text.as_bytes())
}

/// Keeps the header and the rows up to `iteration` of an existing metrics log.
fn truncate_metrics(path: &Path, iteration: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let it: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
            if it <= iteration {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Runs (or, with `resume_from`, continues) training and writes checkpoints, metrics and config.
pub fn train_with(
    config: TrainConfig,
    source: Vec<SegSample>,
    target: Vec<SegSample>,
    resume_from: Option<&Checkpoint>,
    mut hook: Option<&mut StepHook<'_>>,
) -> Result<TrainOutcome> {
    let out_dir = config.output_dir.clone();
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&out_dir, e))?;
    write_resolved_config(&config)?;
    let mut trainer = match resume_from {
        Some(ckpt) => Trainer::resume(config, ckpt, source, target)?,
        None => Trainer::new(config, source, target)?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let existing = if resume_from.is_some() {
        truncate_metrics(&metrics_path, trainer.iteration())?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    write_atomic(&metrics_path, existing.as_bytes())?;
    let mut log = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let total = trainer.config().iterations;
    let every = trainer.config().checkpoint_every;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.iteration() < total {
        let record = trainer.step(hook.as_deref_mut())?;
        writeln!(log, "{}", record.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        let it = record.iteration;
        if it % 100 == 0 || it == total {
            log::info!("iter {it}/{total} loss {:.4} q {:.3}", record.loss_total, record.q_mean);
        }
        records.push(record);
        if (every > 0 && it % every == 0) || it == total {
            let path = checkpoint_path(&out_dir, it);
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = checkpoint_path(&out_dir, total);
    Ok(TrainOutcome { records, checkpoints, final_checkpoint, metrics: metrics_path })
}

/// Trains on the dataset at `config.data_root`.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let (source, target) = load_training_data(&config)?;
    train_with(config, source, target, None, None)
}

/// Continues training from a checkpoint file.
pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (source, target) = load_training_data(&config)?;
    train_with(config, source, target, Some(&ckpt), None)
}
