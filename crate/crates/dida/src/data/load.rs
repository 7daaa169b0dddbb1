use std::fs;
use std::path::{Path, PathBuf};

use super::io::{decode_label_png, decode_rgb_png, sha256_hex};
use super::manifest::DatasetManifest;
use super::sample::{SegSample, Split};
use crate::error::{Error, Result};

/// A loaded benchmark, samples kept in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    samples: Vec<(Split, SegSample)>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SegSample> {
        self.samples.iter().map(|(_, s)| s)
    }

    pub fn split(&self, split: Split) -> Vec<&SegSample> {
        self.samples.iter().filter(|(s, _)| *s == split).map(|(_, s)| s).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<SegSample> {
        self.split(split).into_iter().cloned().collect()
    }
}

impl IntoIterator for Dataset {
    type Item = SegSample;
    type IntoIter = std::iter::Map<std::vec::IntoIter<(Split, SegSample)>, fn((Split, SegSample)) -> SegSample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.into_iter().map(|(_, s)| s)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a manifest and every file it references, checking checksums, sizes and label values.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = DatasetManifest::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::data(manifest_path, j.to_string()),
        other => other,
    })?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let image_path = root.join(&record.image);
        let label_path = root.join(&record.label);
        let image_bytes = read(&image_path)?;
        let label_bytes = read(&label_path)?;
        if sha256_hex(&image_bytes) != record.image_sha256 {
            return Err(Error::data(&image_path, "checksum mismatch"));
        }
        if sha256_hex(&label_bytes) != record.label_sha256 {
            return Err(Error::data(&label_path, "checksum mismatch"));
        }
        let image = decode_rgb_png(&image_bytes, &image_path)?;
        let label = decode_label_png(&label_bytes, &label_path)?;
        if (image.height(), image.width()) != (manifest.height, manifest.width)
            || (label.height(), label.width()) != (manifest.height, manifest.width)
        {
            return Err(Error::data(
                &image_path,
                format!("expected {}x{} image and label", manifest.height, manifest.width),
            ));
        }
        if let Some(bad) = label.invalid_value(manifest.num_classes) {
            return Err(Error::data(
                &label_path,
                format!("label value {bad} outside 0..{} and not the ignore value", manifest.num_classes),
            ));
        }
        samples.push((record.split, SegSample::new(record.id.clone(), record.domain, image, label)?));
    }
    Ok(Dataset { root, manifest, samples })
}
