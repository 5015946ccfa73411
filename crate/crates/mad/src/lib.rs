//! MAD benchmark toolkit: attacked-dataset generation, meta-adversarial
//! training, a plain adversarial-training baseline, and defense scoring
//! (CA / DSR / OT / EDSR).

pub mod attacks;
pub mod baseline_at;
pub mod cli;
pub mod data;
pub mod error;
pub mod mad_dataset;
pub mod meta_at;
pub mod metrics;
pub mod model;

pub use error::{MadError, Result};
