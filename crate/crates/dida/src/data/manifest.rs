use std::collections::{BTreeMap, HashSet};
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::domain::DomainSpec;
use super::sample::{Domain, Split};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub domain: Domain,
    /// Relative to the dataset root.
    pub image: String,
    pub label: String,
    pub image_sha256: String,
    pub label_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub splits: BTreeMap<Split, usize>,
    pub source_spec: DomainSpec,
    pub target_spec: DomainSpec,
    pub samples: Vec<SampleRecord>,
}

fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let clean = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if !clean {
        return Err(Error::data(path, "manifest paths must be relative and stay inside the dataset root"));
    }
    Ok(())
}

impl DatasetManifest {
    /// Parses and structurally validates a manifest without touching the files it references.
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let here = Path::new(MANIFEST_FILE);
        if self.version != MANIFEST_VERSION {
            return Err(Error::data(here, format!("unsupported manifest version `{}`", self.version)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::data(here, format!("class count {} outside 2..=255", self.num_classes)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::data(here, "image size must be positive"));
        }
        let mut ids = HashSet::new();
        let mut per_split: BTreeMap<Split, usize> = BTreeMap::new();
        for record in &self.samples {
            if !ids.insert(record.id.as_str()) {
                return Err(Error::data(here, format!("duplicate sample id `{}`", record.id)));
            }
            if record.domain != record.split.domain() {
                return Err(Error::data(here, format!("sample `{}` has domain {} but split {}", record.id, record.domain, record.split)));
            }
            check_relative(&record.image)?;
            check_relative(&record.label)?;
            *per_split.entry(record.split).or_default() += 1;
        }
        for (split, &count) in &self.splits {
            let found = per_split.get(split).copied().unwrap_or(0);
            if found != count {
                return Err(Error::data(here, format!("split {split} declares {count} samples but lists {found}")));
            }
        }
        if let Some(split) = per_split.keys().find(|s| !self.splits.contains_key(s)) {
            return Err(Error::data(here, format!("split {split} is not declared")));
        }
        Ok(())
    }
}
