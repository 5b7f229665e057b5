//! Synthetic two-domain data, binary file formats, and seeded batching.
//!
//! Both binary formats are little-endian throughout.
//!
//! `BCDS` (dataset): magic `BCDS`, `u32` version (1), `u32` n, `u32` H,
//! `u32` W, `u32` C, `u8` has_labels, then `n*H*W*C` `f32` pixels in
//! `[n, H, W, C]` row-major order, then `n` `u32` labels if present.
//!
//! `BCKP` (checkpoint): magic `BCKP`, `u32` version (1), `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32`
//! dims, and the `f64` payload.

mod batching;
mod checkpoint;
mod dataset;
mod io;
mod synth;

pub use batching::{fisher_yates, make_batches, paired_order};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointContents, ReadAudit, BANK_FEATURES,
    BANK_PROBS, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, REF_SOURCE,
};
pub use dataset::{load_dataset, save_dataset, Dataset, DATASET_HEADER_LEN, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{class_mask, gen_shifted_shapes, ShiftParams, IMAGE_SIZE, N_CLASSES};
