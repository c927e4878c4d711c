//! Modality-specific dense encoder/decoder networks.
//!
//! [`config`] describes a variant declaratively, [`graph`] turns it into a
//! static computation graph with forward evaluation, reverse-mode gradients,
//! parameter counting and He-normal initialisation.

pub mod config;
pub mod graph;

use thiserror::Error;

use crate::volume::Target;

pub use config::{
    DecoderSpec, DecoderTarget, DenseBlockSpec, EncoderSpec, ModelConfig, SkipFusion, UpsampleMode, TABLE_VARIANTS,
};
pub use graph::{Gradients, ModelGraph, ModelOutput, NodeId, NodeTag, Op, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown variant name {0:?}")]
    UnknownVariant(String),
    #[error("decoder target {0} has no encoder supplying that modality")]
    MissingEncoderFor(Target),
    #[error("expected {expected} input tensors, got {found}")]
    InputCount { expected: usize, found: usize },
    #[error("input {slot} has {found} channels, expected {expected}")]
    InputChannels { slot: usize, expected: usize, found: usize },
    #[error("inputs disagree on spatial extent")]
    InputShape,
    #[error("extent {extent} on axis {axis} is not divisible by cumulative pooling factor {factor}")]
    NotDivisible { axis: char, extent: usize, factor: usize },
    #[error("weight vector of {found} values does not match {expected} parameters")]
    WeightCount { expected: usize, found: usize },
}
