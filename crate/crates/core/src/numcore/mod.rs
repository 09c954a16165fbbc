//! Dense tensors, reverse-mode differentiation and the neural layers the
//! model is built from.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, grad_check_params};
pub use nn::{dropout, layer_norm, multi_head_attention, prelu, AttentionParams, AttentionShape, LayerNormParams};
pub use params::{rng_stream, DropoutSpec, Forward, Mode, ParamId, ParamStore, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
pub(crate) mod tests;
