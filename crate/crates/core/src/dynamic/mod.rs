//! Dynamic convolution: kernels built as attention-weighted combinations of
//! `K` basis kernels.

mod attention;
mod bank;
mod baselines;
mod combine;
mod fdy;

pub use attention::{
    default_hidden, AttentionBranch, AttentionCache, AttentionGrads, AttentionInit, DEFAULT_TEMPERATURE,
};
pub use bank::BasisKernelBank;
pub use baselines::{
    dy_attention_weights, dy_forward, dy_forward_with_pi, tdy_attention_weights, tdy_forward, tdy_forward_with_pi,
    DyConvLayer, TdyConvLayer,
};
pub use combine::{weighted_sum, weighted_sum_backward, Adapt};
pub use fdy::{
    attention_weights, fdy_backward, fdy_forward_efficient, fdy_forward_naive, fdy_forward_naive_with_pi,
    fdy_forward_train, fdy_forward_with_pi, DynamicSpec, FdyCache, FdyConvLayer, FdyGrads,
};
