//! Differentiable building blocks shared by every trainable stage.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod tape;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, Probe};
pub use layers::{
    dropout, layer_normalize, linear, multihead_cross_attention, normal_init, uniform_init,
    AttentionParams, BatchNorm, LayerNorm, Linear, MultiHeadAttention,
};
pub use params::{AdamConfig, ParamStore};
pub use tape::{matmul, sigmoid, Gradients, Mat, Tape, Var};
