//! The BCAT network: patch embedding, quadruple transformer blocks whose four
//! branches share one parameter set, mean pooling into augmented
//! representations, and a two-layer classifier.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, LN_EPS};
pub use forward::{
    attention, attn_cross, attn_self, attn_weights, backbone_forward, backbone_states, classify,
    embed_patches, mlp, patch_partition, pool_and_augment, quadruple_block_forward,
    self_branch_forward, self_branch_states, AttentionParts, BranchState,
};
pub use params::{BlockParams, ModelParams, BLOCK_TENSOR_NAMES};
