//! Autodiff core and the residual encoder–decoder built on it.

pub mod model;
pub mod tape;
pub mod tensor;

pub use model::{
    derain, encode_latent, is_encoder_param, Activation, BoundModel, DerainPass, EncoderPass,
    ModelConfig, ParamSet,
};
pub use tape::{NodeId, Tape};
pub use tensor::{Shape, Tensor};
