//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use dida::data::{BenchmarkConfig, SegSample, Split, SplitSizes};
use dida::model::ArchConfig;
use dida::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_arch(num_classes: usize) -> ArchConfig {
    ArchConfig {
        num_classes,
        in_channels: 3,
        widths: vec![4, 8],
        norm_groups: 2,
        decoder_width: 4,
        recon_width: 4,
        time_dim: 8,
        time_hidden: 8,
    }
}

/// `(n, 3, h, w)` f64 tensor with entries uniform in [-1, 1].
pub fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (n, 3, h, w), &Device::Cpu).unwrap()
}

pub fn small_benchmark(side: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        height: side,
        width: side,
        sizes: SplitSizes { source_train: 16, target_train: 16, target_val: 8 },
        ..BenchmarkConfig::default()
    }
}

pub fn samples(bench: &BenchmarkConfig, split: Split) -> Vec<SegSample> {
    let n = match split {
        Split::SourceTrain => bench.sizes.source_train,
        Split::TargetTrain => bench.sizes.target_train,
        Split::TargetVal => bench.sizes.target_val,
    };
    (0..n).map(|i| bench.sample(split, i)).collect()
}

/// A config that trains in well under a second per step on 16x16 inputs.
pub fn tiny_config(out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        output_dir: out.to_path_buf(),
        iterations: 10,
        batch_size: 2,
        timesteps: 10,
        warmup_iters: 3,
        checkpoint_every: 0,
        arch: ArchConfig { num_classes: 4, ..tiny_arch(4) },
        ..TrainConfig::default()
    }
}

pub fn tiny_data() -> (Vec<SegSample>, Vec<SegSample>) {
    let bench = small_benchmark(16);
    (samples(&bench, Split::SourceTrain), samples(&bench, Split::TargetTrain))
}
