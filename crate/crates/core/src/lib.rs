//! Planning, post-processing and evaluation toolkit for 3D medical object
//! detection pipelines.

pub mod boxcluster;
pub mod dataio;
pub mod empirical;
pub mod error;
pub mod fingerprint;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod seg2det;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
