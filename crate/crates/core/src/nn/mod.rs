//! A compact computation-graph framework for convolutional networks.
//!
//! Models are static directed acyclic graphs of named nodes over `f32`
//! tensors in NCHW layout. The graph supports a training forward pass
//! (batch statistics, dropout masks, running-stat updates), an inference
//! forward pass, and reverse-mode differentiation seeded at any node,
//! returning parameter gradients and gradients with respect to requested
//! intermediate activations.
//!
//! Parameter tensors keep the host framework's conventional layouts
//! (convolution kernels as `[kh, kw, in, out]`, dense kernels as
//! `[in, units]`) so exported pretrained weights map one-to-one.

mod conv;
mod graph;
mod init;
mod loss;
mod ops;
mod optim;
mod weights;

pub use graph::{
    Activations, BackwardSpec, Gradients, Graph, GraphBuilder, NodeId, Param, ParamId,
};
pub use init::Initializer;
pub use loss::{accuracy_from_probs, cross_entropy, softmax_ce_grad_logits};
pub use ops::{
    Activation, BnCfg, Conv2dCfg, DwConv2dCfg, Op, PadSpec, Padding, PoolCfg,
};
pub use optim::{Adam, AdamConfig};
pub use weights::{load_weight_file, save_weight_file, WeightEntry};

use thiserror::Error;

/// Errors raised while building or executing a graph.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("node {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("weight file {path}: {detail}")]
    WeightFormat { path: String, detail: String },
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing weights for parameters: {0:?}")]
    MissingWeights(Vec<String>),
    #[error("weight file holds unknown parameters: {0:?}")]
    UnknownWeights(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
