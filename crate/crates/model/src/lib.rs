//! Tiny encoder-decoder instruction model whose projections carry adapters.
//!
//! A sample's synthetic visual vectors form the first encoder positions,
//! followed by the embedded instruction and text. The base transformer is
//! randomly initialized and frozen; only adapters (and, by default, the
//! token embedding and output head) train.

pub mod config;
pub mod encode;
pub mod model;

pub use config::{parse_projections, AdapterKind, AdapterSpec, ModelConfig, Projection};
pub use encode::{encode_all, EncodedSample};
pub use model::{GroupOutput, Segments, Seq2Seq};

pub type Seq2Seq64 = Seq2Seq<f64>;
pub type Seq2Seq32 = Seq2Seq<f32>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] clorae_core::CoreError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample `{id}`: {part} of {len} tokens exceeds the limit of {max}")]
    Truncation {
        id: String,
        part: &'static str,
        len: usize,
        max: usize,
    },
    #[error("forward group mixes task {first} with task {other} (sample `{id}`)")]
    MixedTasks { first: usize, other: usize, id: String },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}
