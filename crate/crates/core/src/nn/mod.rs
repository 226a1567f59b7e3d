//! Static building blocks: convolutions, batch norm, activations, pooling,
//! fully connected layers and a forward-only GRU.

mod activation;
mod conv;
mod gru;
mod linear;
mod norm;
mod pool;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax_temperature, softmax_temperature_backward,
};
pub use conv::{
    conv1d_freq, conv1d_freq_backward, conv2d, conv2d_backward, Conv1dGrads, Conv1dParams, Conv2dGrads, Conv2dParams,
    ConvGeometry, PaddingMode,
};
pub use gru::{gru_forward, GruDirection, GruParams};
pub use linear::{linear, linear_backward, LinearGrads, LinearParams};
pub use norm::{batchnorm, batchnorm_backward, batchnorm_forward, BatchNormParams, BnCache, BnGrads, BnMode};
pub use pool::{avgpool2d, avgpool2d_backward};
