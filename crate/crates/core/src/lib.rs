//! MobileUNETR: a hybrid CNN-transformer network for lesion segmentation,
//! built on a small reverse-mode autodiff engine.
//!
//! The crate covers the full loop: [`model::ModelConfig`] describes the
//! network, [`model::build_model`] assembles it, [`analyzer`] accounts its
//! parameters and multiply-accumulates, [`data`] produces synthetic lesions
//! and metrics, and [`train`] runs AdamW with a warmup + cosine schedule.

pub mod analyzer;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Caps the worker threads used by internal parallel loops.
///
/// Must be called before any parallel work starts; later calls fail.
#[cfg(feature = "parallel")]
pub fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument {
            op: "set_threads",
            detail: e.to_string(),
        })
}
