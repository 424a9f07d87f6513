//! Training and evaluation toolkit for calibrated image segmentation.
//!
//! The crate trains a small U-Net with pixel-wise cross-entropy plus a
//! logit-consistency penalty between two stochastically transformed views of
//! each image, optionally weighted per pixel by the distance to the nearest
//! ground-truth boundary. Everything needed for that lives here: a dense
//! tensor engine with reverse-mode differentiation, augmentation transforms,
//! distance transforms, losses, calibration metrics, a synthetic dataset
//! generator and the training loop.

// validation uses `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distlambda;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use labels::{LabelMap, SoftLabelMap};
pub use tensor::{Tape, Tensor, Var};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "CALIBSEG_THREADS";

/// Sizes the global worker pool from `CALIBSEG_THREADS` when set. Returns the
/// number of workers in use. Only the first call in a process has an effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        // a pool built earlier in the process stays in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
