use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::domain::{random_shapes, render, DomainSpec, SHAPE_CLASSES};
use super::io::{encode_label_png, encode_rgb_png, sha256_hex, write_atomic};
use super::manifest::{DatasetManifest, SampleRecord, MANIFEST_FILE, MANIFEST_VERSION};
use super::sample::{SegSample, Split};
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { source_train: 1000, target_train: 1000, target_val: 200 }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::TargetVal => self.target_val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub sizes: SplitSizes,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            sizes: SplitSizes::default(),
            height: 64,
            width: 64,
            num_classes: 4,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!("need at least 2 classes, got {}", self.num_classes);
        }
        if self.num_classes > SHAPE_CLASSES.len() + 1 {
            bail!(
                "{} classes requested but only {} shape classes plus background exist",
                self.num_classes,
                SHAPE_CLASSES.len()
            );
        }
        if Split::ALL.iter().any(|&s| self.sizes.get(s) == 0) {
            bail!("every split needs at least one sample");
        }
        if self.height < 16 || self.width < 16 {
            bail!("images must be at least 16x16, got {}x{}", self.height, self.width);
        }
        self.source.validate(self.num_classes)?;
        self.target.validate(self.num_classes)?;
        Ok(())
    }

    /// Renders one sample in memory. A pure function of the config, split and index.
    pub fn sample(&self, split: Split, index: usize) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((split.stream() << 32) | index as u64);
        let spec = match split.domain() {
            super::Domain::Source => &self.source,
            super::Domain::Target => &self.target,
        };
        let shapes = random_shapes(&mut rng, self.height, self.width, self.num_classes);
        let (unit, label) = render(spec, &shapes, self.height, self.width, &mut rng);
        let image = unit.map(|v| v * 2.0 - 1.0);
        SegSample::new(sample_id(split, index), split.domain(), image, label).expect("rendered shapes agree")
    }
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{split}_{index:05}")
}

/// Renders every split to `root` and writes the manifest last.
pub fn generate_benchmark(root: &Path, config: &BenchmarkConfig) -> Result<DatasetManifest> {
    config.validate()?;
    for dir in ["images", "labels"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut samples = Vec::new();
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let count = config.sizes.get(split);
        splits.insert(split, count);
        for index in 0..count {
            let sample = config.sample(split, index);
            let image_rel = format!("images/{}.png", sample.id);
            let label_rel = format!("labels/{}.png", sample.id);
            let image_bytes = encode_rgb_png(&sample.image)?;
            let label_bytes = encode_label_png(sample.evaluation_label())?;
            write_atomic(&root.join(&image_rel), &image_bytes)?;
            write_atomic(&root.join(&label_rel), &label_bytes)?;
            samples.push(SampleRecord {
                id: sample.id,
                split,
                domain: split.domain(),
                image: image_rel,
                label: label_rel,
                image_sha256: sha256_hex(&image_bytes),
                label_sha256: sha256_hex(&label_bytes),
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        seed: config.seed,
        num_classes: config.num_classes,
        height: config.height,
        width: config.width,
        splits,
        source_spec: config.source.clone(),
        target_spec: config.target.clone(),
        samples,
    };
    write_atomic(&root.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}
