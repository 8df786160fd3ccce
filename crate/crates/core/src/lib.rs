//! Code-completion language modeling lab.
//!
//! Lexing and corpus construction for a PHP-like language, whole-token and
//! BPE vocabularies, a modified Kneser-Ney n-gram model, a from-scratch
//! decoder-only Transformer, offline top-k evaluation, drift analyses, a
//! candidate ranking service and A/B statistics.

pub mod abtest;
pub mod analysis;
pub mod autograd;
pub mod bpe;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod lexer;
pub mod model;
pub mod ngram;
pub mod num;
pub mod pipeline;
pub mod ranker;
pub mod tensor;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
/// Single-precision parameters used for training and inference.
pub type Transformer32 = transformer::TransformerParams<f32>;
/// Double-precision parameters used for gradient checks.
pub type Transformer64 = transformer::TransformerParams<f64>;
