//! Neural building blocks with hand-derived backward passes.
//!
//! There is no autodiff tape here: the architecture set is small and fixed,
//! so every layer carries its own `forward` (returning whatever the backward
//! pass needs) and `backward` (accumulating parameter gradients into the
//! [`ParamSet`] and returning the input gradient). Every backward pass is
//! validated against central finite differences in the test suite.

mod adamw;
mod attention;
mod embed;
mod gradcheck;
mod layers;
mod mat;
mod params;

pub use adamw::AdamW;
pub use attention::{AttentionSaved, CrossAttention};
pub use embed::time_embedding;
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub(crate) use layers::conv3d_input_grad;
pub use layers::{
    silu, silu_backward, silu_forward, silu_vec_backward, silu_vec_forward, tanh_backward,
    tanh_forward, Conv3dLayer, ConvSaved, GroupNorm, GroupNormSaved, LeakyRelu, LeakyReluSaved,
    Linear, LinearSaved, ResBlock, ResBlockSaved, SiluSaved, TanhSaved, UpsampleLayer,
    UpsampleSaved,
};
pub use mat::Mat;
pub use params::{Init, Param, ParamId, ParamSet};
