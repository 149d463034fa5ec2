//! The reasoner: pooled text, per-group adaptive image encoder, QF layer,
//! composite fusion and the two decoder heads.

mod config;
mod decode;
mod params;
mod reasoner;

use thiserror::Error;

use crate::tensor::TensorError;

pub use config::{ActivationSites, CompositeMask, ModelConfig, TrainConfig, Warmup, DIGITS};
pub use decode::{gru_cell, gru_decode, map_sequence_to_option, GruOutput};
pub use params::{layout, param_count, GradStore, Init, ParamId, ParamSpec, ParamStore};
pub use reasoner::{
    argmax, compose, encode_image_adaptive, encode_text, forward, mlp_decode, multi_head_attention, predict, qf_layer,
    qv_fusion, represent, ForwardOutput, Representation, Session,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("puzzle group {group} out of range for {groups} groups")]
    GroupOutOfRange { group: usize, groups: usize },
    #[error("valid_len {valid_len} outside 1..={max}")]
    ValidLen { valid_len: usize, max: usize },
    #[error("{what}: expected extent {expected}, got shape {got:?}")]
    Dimension { what: &'static str, expected: usize, got: Vec<usize> },
    #[error("every token position is masked")]
    FullyMasked,
    #[error("composite constituent {0} is enabled but was not computed")]
    MissingConstituent(&'static str),
    #[error("decoder needs at least one step")]
    ZeroDecodeSteps,
    #[error("sequence of {len} steps exceeds the decode limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("record field '{0}' is inconsistent with the configuration")]
    InvalidRecord(&'static str),
}
