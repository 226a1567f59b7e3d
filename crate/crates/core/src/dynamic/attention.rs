//! Attention over basis kernels.
//!
//! The branch maps a pooled input `[B, C_in, L]` to weights `[B, K, L]`:
//! conv1d -> batch norm -> ReLU -> conv1d -> softmax(· / τ) over `K`.
//! `L` is frequency for FDY, time for TDY and a single position for DY.

use crate::error::{Error, Result};
use crate::init::{self, SeededRng};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv1d_freq, conv1d_freq_backward, relu, relu_backward, softmax_temperature,
    softmax_temperature_backward, BatchNormParams, BnCache, Conv1dParams,
};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 31.0;

/// How the second projection starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionInit {
    /// Zero weights and bias: attention is exactly uniform before training.
    #[default]
    UniformStart,
    /// Kaiming-uniform like the first projection.
    Random,
}

#[derive(Debug, Clone)]
pub struct AttentionBranch<T> {
    /// `C_in -> C_hidden`, no bias (it would be cancelled by the batch norm).
    pub conv_a: Conv1dParams<T>,
    pub bn: BatchNormParams<T>,
    /// `C_hidden -> K`
    pub conv_b: Conv1dParams<T>,
    pub temperature: T,
}

/// `max(C_in / 4, K)`
pub fn default_hidden(c_in: usize, basis: usize) -> usize {
    (c_in / 4).max(basis)
}

impl<T: Real> AttentionBranch<T> {
    pub fn random(
        c_in: usize,
        basis: usize,
        hidden: usize,
        kernel: usize,
        temperature: f64,
        init_mode: AttentionInit,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("attention kernel size must be odd, got {kernel}")));
        }
        let conv_a = Conv1dParams::new(init::kaiming_uniform([hidden, c_in, kernel], c_in * kernel, rng)?, None)?;
        let conv_b = match init_mode {
            AttentionInit::UniformStart => {
                Conv1dParams::new(Tensor::zeros([basis, hidden, kernel])?, Some(Tensor::zeros([basis])?))?
            }
            AttentionInit::Random => Conv1dParams::new(
                init::kaiming_uniform([basis, hidden, kernel], hidden * kernel, rng)?,
                Some(init::bias_uniform(basis, hidden * kernel, rng)?),
            )?,
        };
        let branch = Self { conv_a, bn: BatchNormParams::new(hidden)?, conv_b, temperature: T::lit(temperature) };
        branch.validate()?;
        Ok(branch)
    }

    pub fn validate(&self) -> Result<()> {
        let (hidden, _, _) = self.conv_a.dims()?;
        let (_, hb, _) = self.conv_b.dims()?;
        if hb != hidden || self.bn.channels() != hidden {
            return Err(Error::Config(format!(
                "attention widths disagree: conv_a emits {hidden}, bn has {}, conv_b takes {hb}",
                self.bn.channels()
            )));
        }
        if !(self.temperature > T::zero()) {
            return Err(Error::Config("attention temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn c_in(&self) -> usize {
        self.conv_a.weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.conv_a.weight.shape()[0]
    }

    pub fn basis(&self) -> usize {
        self.conv_b.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.weight.len()
            + self.bn.gamma.len() * 2
            + self.conv_b.weight.len()
            + self.conv_b.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Pre-softmax scores and the intermediates behind them.
    pub fn logits(&self, pooled: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let [_, c, _] = pooled.dims::<3>("attention input")?;
        if c != self.c_in() {
            return Err(Error::Shape(format!("attention expects {} channels, got {c}", self.c_in())));
        }
        let hidden_pre = conv1d_freq(pooled, &self.conv_a)?;
        let (normed, bn) = batchnorm_forward(&hidden_pre, &self.bn)?;
        let hidden = relu(&normed);
        let logits = conv1d_freq(&hidden, &self.conv_b)?;
        let cache = AttentionCache { pooled: pooled.clone(), normed, bn, hidden, weights: None };
        Ok((logits, cache))
    }

    /// `pooled: [B, C_in, L] -> [B, K, L]`, each column on the probability simplex.
    pub fn forward(&self, pooled: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (logits, mut cache) = self.logits(pooled)?;
        let weights = softmax_temperature(&logits, 1, self.temperature)?;
        cache.weights = Some(weights.clone());
        Ok((weights, cache))
    }

    /// Gradient with respect to the pooled input and every branch parameter.
    pub fn backward(&self, cache: &AttentionCache<T>, d_weights: &Tensor<T>) -> Result<(Tensor<T>, AttentionGrads<T>)> {
        let weights =
            cache.weights.as_ref().ok_or_else(|| Error::Contract("attention cache holds no softmax output".into()))?;
        if weights.shape() != d_weights.shape() {
            return Err(Error::Contract(format!(
                "attention gradient {:?} does not match cached weights {:?}",
                d_weights.shape(),
                weights.shape()
            )));
        }
        let d_logits = softmax_temperature_backward(weights, d_weights, 1, self.temperature)?;
        let gb = conv1d_freq_backward(&cache.hidden, &self.conv_b, &d_logits)?;
        let d_normed = relu_backward(&cache.normed, &gb.d_x)?;
        let gbn = batchnorm_backward(&self.bn, &cache.bn, &d_normed)?;
        let ga = conv1d_freq_backward(&cache.pooled, &self.conv_a, &gbn.d_x)?;
        let grads = AttentionGrads {
            conv_a_weight: ga.d_weight,
            bn_gamma: gbn.d_gamma,
            bn_beta: gbn.d_beta,
            conv_b_weight: gb.d_weight,
            conv_b_bias: gb.d_bias.ok_or_else(|| Error::Contract("conv_b has no bias".into()))?,
        };
        Ok((ga.d_x, grads))
    }
}

/// Forward intermediates of the attention branch.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub pooled: Tensor<T>,
    /// Batch-norm output, before the ReLU.
    pub normed: Tensor<T>,
    pub bn: BnCache<T>,
    pub hidden: Tensor<T>,
    pub weights: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub conv_a_weight: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub conv_b_weight: Tensor<T>,
    pub conv_b_bias: Tensor<T>,
}
