pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{
    linear, EncoderLayer, EncoderShape, ForwardCtx, LayerNorm, LearnedVector, Linear,
    MultiHeadSelfAttention, PositionalTable, TransformerEncoder,
};
pub use optim::{adam_step, clip_global_norm, AdamConfig};
pub use params::{AdamState, BoundParams, Gradients, ParameterStore};
