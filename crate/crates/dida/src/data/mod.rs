//! Procedural two-domain shapes benchmark with on-disk persistence.

mod augment;
mod domain;
mod generate;
mod io;
mod load;
mod manifest;
mod sample;

pub use augment::{augment, AugmentConfig};
pub use domain::{random_shapes, render, DomainSpec, Shape, ShapeKind, Texture, SHAPE_CLASSES};
pub use generate::{generate_benchmark, sample_id, BenchmarkConfig, SplitSizes};
pub use io::{decode_label_png, decode_rgb_png, encode_label_png, encode_rgb_png, sha256_hex, write_atomic};
pub use load::{load_dataset, Dataset};
pub use manifest::{DatasetManifest, SampleRecord, MANIFEST_FILE, MANIFEST_VERSION};
pub use sample::{Domain, LabelMap, SegSample, Split, IGNORE_LABEL};
