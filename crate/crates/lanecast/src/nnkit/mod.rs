//! Minimal training kit: dense f32 tensors, a define-by-run autodiff tape,
//! AdamW, low-rank adapters, named parameter stores, and checkpoint I/O.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod layers;
mod lora;
mod optim;
mod store;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, RunMeta};
pub use gradcheck::{
    check_params, check_scalar_fn, primitive_suite, CoordPlan, GradCheck, GradReport,
};
pub use graph::{Graph, NodeId};
pub use lora::{lora_linear, merge_lora, LowRankAdapter};
pub use optim::{AdamState, AdamW};
pub use store::{Gradients, ParamNodes, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter {0:?}")]
    MissingParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint has no entry for parameter {0:?}")]
    MissingEntry(String),
    #[error("checkpoint entry {0:?} does not exist in the store")]
    UnexpectedEntry(String),
    #[error("parameter {name:?}: checkpoint shape {found:?} does not match store shape {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("graph misuse: {0}")]
    Graph(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}
