//! Few-shot semantic segmentation with reflection invariance, built on a
//! small reverse-mode tensor library.

pub mod checkpoint;
pub mod cli;
pub mod episodes;
pub mod experiments;
pub mod error;
pub mod invariance;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
