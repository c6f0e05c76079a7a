//! Datasets, training, checkpoints, the embed/extract/verify operations,
//! evaluation and reports.

mod checkpoint;
mod dataset;
mod evaluate;
mod ops;
mod report;
mod train;

pub use checkpoint::{
    file_digest, from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use dataset::{Dataset, Sample, Split, LANDMARKS_FILE};
pub use evaluate::*;
pub use ops::*;
pub use report::*;
pub use train::*;
