//! Network assembly from a declarative config, plus checkpoints.

mod checkpoint;
mod config;
mod graph;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, LoadOptions};
pub use config::{EncoderStageSpec, HeadSpec, ModelConfig};
pub use graph::{build_model, EncoderStage, Head, MobileUnetr, SkipEdge};
