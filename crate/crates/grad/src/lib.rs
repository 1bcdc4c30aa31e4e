//! Minimal reverse-mode differentiable arrays, an AdamW optimizer and a
//! binary checkpoint format.
//!
//! Arithmetic is `f64` throughout. Models bind parameters from a
//! [`ParamStore`] onto a [`Tape`], build a scalar loss, call
//! [`Tape::backward`] and hand the result to [`OptState::step`].

pub mod array;
pub mod check;
pub mod checkpoint;
mod gemm;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use array::Array;
pub use checkpoint::{Checkpoint, CheckpointError};
pub use optim::{AdamWConfig, OptState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, OlaPlan, Tape, UnaryOp, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GradError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
}
