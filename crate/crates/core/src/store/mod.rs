//! Checkpoint storage: typed tensor records, sharded file I/O, key remapping
//! and three-way alignment.

mod align;
mod checkpoint;
mod io;
mod record;
mod remap;

pub use align::{
    align_triple, AlignPolicy, AlignedTriple, AlignmentReport, HighRankPolicy, PassThrough,
    PassThroughReason, ShapeMismatchEntry, ShapePolicy,
};
pub use checkpoint::{Checkpoint, Role};
pub use io::{
    load_checkpoint, plan_shards, read_tensor_file, save_checkpoint, SavedLayout, INDEX_FILE_NAME,
    SINGLE_FILE_NAME,
};
pub use record::{DType, TensorRecord};
pub use remap::{remap_keys, RemapPreset, RemapRule};
