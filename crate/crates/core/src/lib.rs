//! Multi-scale patch forecaster built around an adaptive frequency-gated
//! state-space scan, with its own reverse-mode tape, trainer and data
//! pipeline.
//!
//! Module map:
//! - [`numerics`]: tensors, broadcasting rules, the recording tape.
//! - [`patch_encoder`]: interaction convolution and multiscale patch embedding.
//! - [`afgssm`]: frequency adaptation and the gated time-frequency scan.
//! - [`model`]: full forecaster, variants, checkpoints.
//! - [`data_io`]: CSV ingestion, splits, windows, metrics.
//! - [`trainer`]: Adam training loop and gradient checks.
//! - [`oracles`]: independent reference code used by tests.
//! - [`bench_harness`]: scan timing used by the benchmarks.

pub mod afgssm;
pub mod bench_harness;
pub mod data_io;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracles;
pub mod parallel;
pub mod params;
pub mod patch_encoder;
pub mod trainer;

pub use error::{Error, Result};
