//! The transformer: configuration, named parameter blocks, positional
//! encodings, and the hand-derived forward/backward passes.

pub mod backward;
pub mod config;
pub mod forward;
pub mod params;
pub mod pe;

pub use backward::backward_pass;
pub use config::{InputKind, MaskScheme, ModelConfig, PeVariant};
pub use forward::{
    attention_forward, forward_classify, forward_classify_batch, forward_reconstruct,
    forward_reconstruct_batch, AttnCache, BatchCache, HeadKind, LayerCache, Mode,
};
pub use params::{alibi_slopes, block_registry, BlockInit, BlockSpec, Gradients, ModelParams};
pub use pe::positional_encoding;
