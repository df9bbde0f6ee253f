//! Dense arrays, slice kernels and the reverse-mode tape.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
mod tensor;

pub use attention::{AttentionMask, SpanBias};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckOptions};
pub use graph::{cross_entropy, matmul, softmax_rows, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("index {index} out of bounds ({bound})")]
    Index { index: usize, bound: usize },
    #[error("row {row} has no finite entry; distribution undefined")]
    EmptyRow { row: usize },
    #[error("loss mask selects no position")]
    EmptyMask,
    #[error("attention bias must be non-positive; entry {index} is {value}")]
    PositiveBias { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("finite-difference step {0} outside (1e-6, 1e-2)")]
    BadStep(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
