//! FltLM: a decoder-only language model that scores every input document
//! with a mid-network context filter and soft-masks low-relevance documents
//! in its upper layers, all within one forward pass.

pub mod datagen;
pub mod diagnostics;
pub mod evaluator;
pub mod experiment;
pub mod filter;
pub mod forward;
pub mod input;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod softmask;
pub mod trainer;
pub mod vocab;

pub use numerics::{Graph, NumericsError, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Params64 = model::ModelParams<f64>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Filter(#[from] filter::FilterError),
    #[error(transparent)]
    Input(#[from] input::InputError),
    #[error(transparent)]
    Vocab(#[from] vocab::VocabError),
    #[error(transparent)]
    Gen(#[from] datagen::GenError),
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Whether the error reports a NaN or infinity met during a pass.
    pub fn is_non_finite(&self) -> bool {
        let numerics = |e: &NumericsError| matches!(e, NumericsError::NonFinite(_));
        match self {
            Error::Numerics(e) | Error::Model(model::ModelError::Numerics(e)) => numerics(e),
            Error::Filter(filter::FilterError::Numerics(e))
            | Error::Filter(filter::FilterError::Model(model::ModelError::Numerics(e))) => numerics(e),
            _ => false,
        }
    }
}
