//! Toy decoder-only GLU transformer with activation probes.
//!
//! Pre-norm residual blocks with RMS normalisation and learned absolute
//! positions. Attention heads are column blocks of width `d_head` inside
//! `W_Q`, `W_K`, `W_V` and row blocks inside `W_O`.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{
    evaluate_loss, ffn_forward, forward_batch, forward_graph, forward_logits, mha_forward,
    perplexity, ForwardTrace, GraphOutputs, Overlay,
};
pub use params::{LayerParams, LayerVars, MatrixKind, ModelParams, ParamVars};
