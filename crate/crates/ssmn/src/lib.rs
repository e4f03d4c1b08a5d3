//! Set-to-set part matching with neural factor scoring, beam-search training,
//! classic baselines, and a synthetic point-annotated diagram benchmark.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod factors;
pub mod gradcheck;
pub mod imaging;
pub mod inference;
pub mod model;
pub mod nets;
pub mod pipeline;
pub mod params;
pub mod pgm;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Result, SsmnError};
