//! Network components: feature extractor σ, goal-discriminator d, instruction
//! embedding with gated attention, LSTM / linear core, goal-discriminative
//! attention and the actor-critic heads.
//!
//! All layers act on row batches (`[B, features]`); observations enter as
//! `[B, C, H, W]`.

mod layers;
mod model;

pub use layers::{conv_out, Conv2d, Linear, LstmCell, Mlp};
pub use model::{
    ActionSpace, AttentionVars, CoreKind, CoreState, EncoderKind, Features, GdanConcat, GoalModel, LayerIds,
    ModelConfig, QueryGrad, RecurrentState, Variant,
};
