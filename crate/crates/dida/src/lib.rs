pub mod data;
pub mod degrade;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod model;
pub mod objectives;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;

/// Crate version, echoed next to every output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
