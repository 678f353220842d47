//! Dense `f64` arrays, named parameter sets, a reverse-mode tape and AdamW.

mod adamw;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use params::{ParamEntry, ParamSet};
pub use tape::{forward_backward, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op} at tape position {position}")]
    NonFinite { op: &'static str, position: usize },
    #[error("unknown parameter '{0}'")]
    MissingParam(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("parameter sets have different layouts")]
    LayoutMismatch,
    #[error("not a parameter checkpoint (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
