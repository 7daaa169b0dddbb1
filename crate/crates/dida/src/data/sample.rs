use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetVal];

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain => Domain::Source,
            Split::TargetTrain | Split::TargetVal => Domain::Target,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
        }
    }

    pub(crate) fn stream(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::TargetTrain => 2,
            Split::TargetVal => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Per-pixel class indices, `IGNORE_LABEL` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// First value that is neither a class in `0..num_classes` nor the ignore label.
    pub fn invalid_value(&self, num_classes: usize) -> Option<u8> {
        self.data
            .iter()
            .copied()
            .find(|&v| v != IGNORE_LABEL && usize::from(v) >= num_classes)
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &v in &self.data {
            if let Some(c) = counts.get_mut(usize::from(v)) {
                *c += 1;
            }
        }
        counts
    }
}

/// One image with its ground truth. Target-domain ground truth is only reachable through
/// [`SegSample::evaluation_label`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub domain: Domain,
    pub image: Image,
    label: LabelMap,
}

impl SegSample {
    pub fn new(id: impl Into<String>, domain: Domain, image: Image, label: LabelMap) -> Result<Self> {
        if (image.height(), image.width()) != (label.height(), label.width()) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs label {}x{}",
                image.height(),
                image.width(),
                label.height(),
                label.width()
            )));
        }
        Ok(Self { id: id.into(), domain, image, label })
    }

    /// Labels usable as training supervision: present for source samples only.
    pub fn training_label(&self) -> Option<&LabelMap> {
        match self.domain {
            Domain::Source => Some(&self.label),
            Domain::Target => None,
        }
    }

    /// Ground truth for metric computation, available for both domains.
    pub fn evaluation_label(&self) -> &LabelMap {
        &self.label
    }

    pub(crate) fn label_mut(&mut self) -> &mut LabelMap {
        &mut self.label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_labels_hidden_from_training() {
        let img = Image::zeros(3, 2, 2);
        let label = LabelMap::filled(2, 2, 1);
        let s = SegSample::new("a", Domain::Source, img.clone(), label.clone()).unwrap();
        let t = SegSample::new("b", Domain::Target, img, label.clone()).unwrap();
        assert_eq!(s.training_label(), Some(&label));
        assert_eq!(t.training_label(), None);
        assert_eq!(t.evaluation_label(), &label);
    }

    #[test]
    fn invalid_label_detection() {
        let l = LabelMap::new(1, 3, vec![0, 255, 250]).unwrap();
        assert_eq!(l.invalid_value(4), Some(250));
        let l = LabelMap::new(1, 3, vec![0, 255, 3]).unwrap();
        assert_eq!(l.invalid_value(4), None);
        assert_eq!(l.histogram(4), vec![1, 0, 0, 1]);
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
    }
}
