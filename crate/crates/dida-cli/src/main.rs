use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dida::data::{generate_benchmark, load_dataset, write_atomic, BenchmarkConfig, Split, SplitSizes, MANIFEST_FILE};
use dida::degrade::{BlurSettings, Degrader};
use dida::evaluation::{self, FeatureKind, SweepMode};
use dida::model::Checkpoint;
use dida::schedule::{NoiseSchedule, ScheduleKind};
use dida::trainer::{self, TrainConfig, DEFAULT_MASK_STD};

mod plot;

const DATA_ROOT_ENV: &str = "DIDA_DATA_ROOT";
const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "dida", version, about = "Degradation-based domain bridging for segmentation UDA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain segmentation benchmark.
    GenData(GenDataArgs),
    /// Train a student; every config key is also a flag (`--lambda-d 0`, `--arch.widths 16,32,64,64`).
    Train(TrainArgs),
    /// mIoU of a checkpoint on a split.
    Eval(EvalArgs),
    /// mIoU across degradation levels for several inference modes.
    Sweep(SweepArgs),
    /// Source/target discrepancy across degradation levels.
    Mmd(MmdArgs),
    /// Render a sweep or MMD CSV to PNG.
    Plot(PlotArgs),
    /// Write degraded inputs and head reconstructions as PNGs.
    ReconstructDump(DumpArgs),
}

fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory; defaults to $DIDA_DATA_ROOT, then ./data.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, default_value_t = 1000)]
    source_train: usize,
    #[arg(long, default_value_t = 1000)]
    target_train: usize,
    #[arg(long, default_value_t = 200)]
    target_val: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// `--<key> <value>` pairs for any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelDataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to $DIDA_DATA_ROOT, then ./data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for CSV/JSON results.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "target_val")]
    split: String,
    /// Images per forward pass.
    #[arg(long, default_value_t = 32)]
    chunk: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: ModelDataArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: ModelDataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,25,50,75,100")]
    t_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "implicit,explicit,baseline_weak")]
    modes: Vec<String>,
    /// Seed of the per-level degradation streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct MmdArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,25,50,75,100")]
    t_grid: Vec<usize>,
    #[arg(long, default_value = "pixels")]
    feature: String,
    /// Required for encoder features.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "sigmoid")]
    schedule: String,
    #[arg(long, default_value_t = 100)]
    timesteps: usize,
    #[arg(long, default_value = "noise")]
    mode: String,
    /// Compare two disjoint halves of the source split instead of source vs target.
    #[arg(long)]
    control: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// `sweep` or `mmd`.
    #[arg(long)]
    kind: String,
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[command(flatten)]
    common: ModelDataArgs,
    #[arg(long)]
    t: usize,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "source_train" => Split::SourceTrain,
        "target_train" => Split::TargetTrain,
        "target_val" => Split::TargetVal,
        other => bail!("unknown split `{other}` (expected source_train, target_train or target_val)"),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Records the command, its resolved arguments and the tool version next to the outputs.
fn write_run_record(out: &Path, command: &str, args: serde_json::Value) -> Result<()> {
    let record = serde_json::json!({ "command": command, "version": dida::VERSION, "args": args });
    write_atomic(&out.join(RUN_FILE), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(default_data_root);
    let config = BenchmarkConfig {
        seed: a.seed,
        height: a.size,
        width: a.size,
        num_classes: a.num_classes,
        sizes: SplitSizes { source_train: a.source_train, target_train: a.target_train, target_val: a.target_val },
        ..BenchmarkConfig::default()
    };
    create_dir(&out)?;
    let manifest = generate_benchmark(&out, &config)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

/// Turns `--some-key value` / `--some-key=value` pairs into config overrides.
fn apply_overrides(config: &mut TrainConfig, raw: &[String]) -> Result<()> {
    let keys = TrainConfig::keys();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let Some(body) = flag.strip_prefix("--") else {
            bail!("unexpected argument `{flag}`; overrides take the form --<key> <value>");
        };
        let (name, value) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("flag --{body} needs a value"))?;
                (body.to_string(), v.clone())
            }
        };
        let key = name.replace('-', "_");
        if !keys.contains(&key) {
            bail!("unknown flag --{name}; config keys are: {}", keys.join(", "));
        }
        config.apply_override(&key, &value)?;
    }
    Ok(())
}

/// `--config` and `--resume` may also appear among the trailing overrides.
fn split_train_args(mut a: TrainArgs) -> Result<TrainArgs> {
    let mut rest = Vec::new();
    let mut it = std::mem::take(&mut a.overrides).into_iter();
    while let Some(arg) = it.next() {
        let (flag, inline) = match arg.split_once('=') {
            Some((f, v)) => (f.to_string(), Some(v.to_string())),
            None => (arg.clone(), None),
        };
        let slot = match flag.as_str() {
            "--config" => &mut a.config,
            "--resume" => &mut a.resume,
            _ => {
                rest.push(arg);
                continue;
            }
        };
        let value = inline.or_else(|| it.next()).ok_or_else(|| anyhow!("flag {flag} needs a value"))?;
        *slot = Some(PathBuf::from(value));
    }
    a.overrides = rest;
    Ok(a)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut value: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if !value.contains_key("data_root") {
                value.insert("data_root".into(), default_data_root().to_string_lossy().into());
            }
            TrainConfig::overlay(&value).with_context(|| format!("in {}", path.display()))?
        }
        None => TrainConfig { data_root: default_data_root(), ..TrainConfig::default() },
    };
    apply_overrides(&mut config, &a.overrides)?;
    config.validate()?;
    Ok(config)
}

fn train(a: TrainArgs) -> Result<()> {
    let a = split_train_args(a)?;
    let config = resolve_train_config(&a)?;
    let outcome = match &a.resume {
        Some(ckpt) => trainer::resume(config, ckpt)?,
        None => trainer::train(config)?,
    };
    let last = outcome.records.last();
    println!(
        "trained {} steps; final checkpoint {}; metrics {}{}",
        outcome.records.len(),
        outcome.final_checkpoint.display(),
        outcome.metrics.display(),
        last.map(|r| format!("; last loss_total {:.4}", r.loss_total)).unwrap_or_default()
    );
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    model: dida::model::ModelBundle,
    dataset: dida::data::Dataset,
    split: Split,
}

fn load_common(c: &ModelDataArgs) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&c.checkpoint)?;
    let model = checkpoint.to_model()?;
    let root = c.data.clone().unwrap_or_else(default_data_root);
    let dataset = load_dataset(&root.join(MANIFEST_FILE))?;
    if dataset.num_classes() != model.arch().num_classes {
        bail!("dataset has {} classes, checkpoint {}", dataset.num_classes(), model.arch().num_classes);
    }
    create_dir(&c.out)?;
    Ok(Loaded { checkpoint, model, dataset, split: parse_split(&c.split)? })
}

/// Degradation process the checkpoint was trained with.
fn checkpoint_degrader(ckpt: &Checkpoint) -> Result<Degrader> {
    let flat = ckpt.meta.config.as_object().ok_or_else(|| anyhow!("checkpoint config is not an object"))?;
    let cfg = TrainConfig::from_flat(flat).context("checkpoint config")?;
    let schedule = NoiseSchedule::build(ckpt.meta.schedule, ckpt.meta.steps)?;
    Ok(Degrader::new(cfg.mode, schedule, cfg.blur, cfg.mask_std)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = load_common(&a.common)?;
    let samples = l.dataset.split(l.split);
    let result = evaluation::evaluate(&l.model, &samples, a.common.chunk)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "split": a.common.split,
        "iteration": l.checkpoint.meta.iteration,
        "miou": result.miou,
        "per_class_iou": result.per_class,
    }))?;
    write_atomic(&a.common.out.join("eval.json"), json.as_bytes())?;
    write_run_record(&a.common.out, "eval", serde_json::json!({
        "checkpoint": a.common.checkpoint, "split": a.common.split, "config_hash": l.checkpoint.meta.config_hash,
    }))?;
    println!("mIoU {:.4}", result.miou);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let l = load_common(&a.common)?;
    let modes: Vec<SweepMode> = a.modes.iter().map(|m| m.parse()).collect::<dida::Result<_>>()?;
    let degrader = checkpoint_degrader(&l.checkpoint)?;
    let samples = l.dataset.split(l.split);
    let curves = evaluation::degradation_sweep(&l.model, &samples, &degrader, &a.t_grid, &modes, a.seed, a.common.chunk)?;
    let mut csv = Vec::new();
    evaluation::write_sweep_csv(&curves, &mut csv)?;
    write_atomic(&a.common.out.join("sweep.csv"), &csv)?;
    write_atomic(&a.common.out.join("sweep.json"), serde_json::to_string_pretty(&curves)?.as_bytes())?;
    write_run_record(&a.common.out, "sweep", serde_json::json!({
        "checkpoint": a.common.checkpoint, "split": a.common.split, "t_grid": a.t_grid,
        "modes": a.modes, "seed": a.seed, "mode": degrader.mode(),
    }))?;
    println!("wrote {} rows to {}", curves.iter().map(|c| c.points.len()).sum::<usize>(), a.common.out.join("sweep.csv").display());
    Ok(())
}

fn mmd(a: MmdArgs) -> Result<()> {
    let root = a.data.clone().unwrap_or_else(default_data_root);
    let dataset = load_dataset(&root.join(MANIFEST_FILE))?;
    let feature: FeatureKind = a.feature.parse()?;
    let schedule = NoiseSchedule::build(a.schedule.parse::<ScheduleKind>()?, a.timesteps)?;
    let degrader = Degrader::new(a.mode.parse()?, schedule, BlurSettings::default(), DEFAULT_MASK_STD)?;
    let model = match (&a.checkpoint, feature) {
        (Some(p), _) => Some(Checkpoint::load(p)?.to_model()?),
        (None, FeatureKind::Encoder) => bail!("--feature encoder needs --checkpoint"),
        (None, FeatureKind::Pixels) => None,
    };
    let source: Vec<&dida::Image> = dataset.split(Split::SourceTrain).iter().map(|s| &s.image).collect();
    let target: Vec<&dida::Image> = dataset.split(Split::TargetTrain).iter().map(|s| &s.image).collect();
    let (set_a, set_b) = if a.control {
        let half = source.len() / 2;
        (source[..half].to_vec(), source[half..2 * half].to_vec())
    } else {
        (source, target)
    };
    let points = evaluation::mmd_vs_degradation(&set_a, &set_b, &degrader, &a.t_grid, feature, model.as_ref(), a.seed)?;
    create_dir(&a.out)?;
    let mut csv = Vec::new();
    evaluation::write_mmd_csv(&points, &mut csv)?;
    write_atomic(&a.out.join("mmd.csv"), &csv)?;
    write_run_record(&a.out, "mmd", serde_json::json!({
        "data": root, "t_grid": a.t_grid, "feature": a.feature, "schedule": a.schedule,
        "timesteps": a.timesteps, "mode": a.mode, "control": a.control, "seed": a.seed, "checkpoint": a.checkpoint,
    }))?;
    for p in &points {
        println!("t={:>4} mmd={:.5}", p.t, p.mmd);
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let texts = a
        .input
        .iter()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a.input.iter().map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()).collect();
    match a.kind.as_str() {
        "sweep" => {
            let mut series = Vec::new();
            for (text, path) in texts.iter().zip(&a.input) {
                let curves = evaluation::read_sweep_csv(text).with_context(|| format!("in {}", path.display()))?;
                for c in curves {
                    let label = if a.input.len() > 1 { format!("{} ({})", c.mode, path.display()) } else { c.mode.to_string() };
                    series.push(plot::Series { label, points: c.points.iter().map(|p| (p.t_degrade as f64, p.miou)).collect() });
                }
            }
            plot::render(&a.out, "mIoU vs degradation level", "mIoU", &series)?;
        }
        "mmd" => {
            let mut series = Vec::new();
            for ((text, path), name) in texts.iter().zip(&a.input).zip(&names) {
                let pts = evaluation::read_mmd_csv(text).with_context(|| format!("in {}", path.display()))?;
                series.push(plot::Series { label: name.clone(), points: pts.iter().map(|p| (p.t as f64, p.mmd)).collect() });
            }
            plot::render(&a.out, "MMD vs degradation level", "MMD", &series)?;
        }
        other => bail!("unknown plot kind `{other}` (expected sweep or mmd)"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn reconstruct_dump(a: DumpArgs) -> Result<()> {
    let l = load_common(&a.common)?;
    let degrader = checkpoint_degrader(&l.checkpoint)?;
    degrader.schedule().check_step(a.t)?;
    let samples = l.dataset.split(l.split);
    let clean: Vec<&dida::Image> = samples.iter().take(a.count).map(|s| &s.image).collect();
    if clean.is_empty() {
        bail!("split {} is empty", a.common.split);
    }
    let degraded = evaluation::degrade_set(&degrader, &clean, a.t, a.seed, 0)?;
    let refs: Vec<&dida::Image> = degraded.iter().collect();
    let predicted = evaluation::predict_reconstruction(&l.model, &refs, a.t)?;
    for (i, ((x0, xt), p)) in clean.iter().zip(&degraded).zip(&predicted).enumerate() {
        let recon = if degrader.mode().predicts_noise() {
            dida::degrade::reconstruct_from_noise(xt, p, a.t, degrader.schedule())?
        } else {
            p.clone()
        }
        .clamp(-1.0, 1.0);
        for (name, img) in [("clean", *x0), ("degraded", &xt.clamp(-1.0, 1.0)), ("reconstruction", &recon)] {
            let path = a.common.out.join(format!("{i:03}_{name}.png"));
            write_atomic(&path, &dida::data::encode_rgb_png(img)?)?;
        }
    }
    write_run_record(&a.common.out, "reconstruct-dump", serde_json::json!({
        "checkpoint": a.common.checkpoint, "t": a.t, "count": a.count, "seed": a.seed,
    }))?;
    println!("wrote {} triplets to {}", clean.len(), a.common.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Mmd(a) => mmd(a),
        Command::Plot(a) => plot_cmd(a),
        Command::ReconstructDump(a) => reconstruct_dump(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
