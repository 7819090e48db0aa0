//! Synthetic data, image I/O, the training loss and segmentation metrics.

mod dataset;
mod loss;
mod metrics;
pub mod pnm;
mod synth;

pub use dataset::{gen_synthetic, Dataset, DatasetMeta, SampleBatch};
pub use loss::{segmentation_loss, DICE_EPS};
pub use metrics::{compute_metrics, threshold_logits, Confusion, MetricsReport};
pub use pnm::{load_image, load_mask, save_image, save_mask};
pub use synth::{gen_sample, Sample, MAX_LESION_FRACTION, MIN_LESION_FRACTION};
