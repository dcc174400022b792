//! Joint prediction of redundant object-count maps and object-size
//! histograms, with synthetic data, losses, metrics, training, and a staged
//! score pipeline.

pub mod cellularity;
pub mod check;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod seed;
pub mod svg;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelOutput};
