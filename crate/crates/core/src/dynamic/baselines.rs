//! Comparison layers: input-adaptive (DY) and time-adaptive (TDY) dynamic convolution.
//!
//! Both reuse the FDY attention branch with the pooling axes swapped: DY pools
//! over frequency and time and uses 1-tap projections (equivalent to fully
//! connected layers), TDY pools over frequency and convolves along time.

use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::nn::{conv2d, Conv2dParams, PaddingMode};
use crate::tensor::{Real, Tensor};

use super::attention::AttentionBranch;
use super::bank::BasisKernelBank;
use super::combine::{weighted_sum, Adapt};
use super::fdy::DynamicSpec;

#[derive(Debug, Clone)]
pub struct DyConvLayer<T> {
    pub bank: BasisKernelBank<T>,
    /// Operates on a length-1 axis; kernel size 1.
    pub attn: AttentionBranch<T>,
    pub stride: (usize, usize),
    pub padding_mode: PaddingMode,
}

#[derive(Debug, Clone)]
pub struct TdyConvLayer<T> {
    pub bank: BasisKernelBank<T>,
    /// Convolves along time.
    pub attn: AttentionBranch<T>,
    pub padding_mode: PaddingMode,
}

fn same_padding<T: Real>(bank: &BasisKernelBank<T>) -> (usize, usize) {
    let (kf, kt) = bank.kernel_size();
    ((kf - 1) / 2, (kt - 1) / 2)
}

fn check<T: Real>(x: &Tensor<T>, bank: &BasisKernelBank<T>, attn: &AttentionBranch<T>) -> Result<()> {
    let (k, _, cin, _, _) = bank.dims()?;
    attn.validate()?;
    if attn.basis() != k || attn.c_in() != cin {
        return Err(Error::Config("attention branch does not match the basis kernel bank".into()));
    }
    let [_, c, _, _] = x.dims::<4>("dynamic conv input")?;
    if c != cin {
        return Err(Error::Shape(format!("layer expects {cin} input channels, input has {c}")));
    }
    Ok(())
}

impl<T: Real> DyConvLayer<T> {
    pub fn random(spec: &DynamicSpec, rng: &mut SeededRng) -> Result<Self> {
        let bank = BasisKernelBank::random(spec.basis, spec.c_out, spec.c_in, spec.kernel, rng)?;
        let attn = AttentionBranch::random(
            spec.c_in,
            spec.basis,
            spec.hidden_width(),
            1,
            spec.temperature,
            spec.attention_init,
            rng,
        )?;
        Ok(Self { bank, attn, stride: (1, spec.time_stride), padding_mode: spec.padding_mode })
    }

    pub fn param_count(&self) -> usize {
        self.bank.param_count() + self.attn.param_count()
    }
}

impl<T: Real> TdyConvLayer<T> {
    pub fn random(spec: &DynamicSpec, rng: &mut SeededRng) -> Result<Self> {
        if spec.time_stride != 1 {
            return Err(Error::Config("time-adaptive convolution requires time stride 1".into()));
        }
        let bank = BasisKernelBank::random(spec.basis, spec.c_out, spec.c_in, spec.kernel, rng)?;
        let attn = AttentionBranch::random(
            spec.c_in,
            spec.basis,
            spec.hidden_width(),
            spec.attention_kernel,
            spec.temperature,
            spec.attention_init,
            rng,
        )?;
        Ok(Self { bank, attn, padding_mode: spec.padding_mode })
    }

    pub fn param_count(&self) -> usize {
        self.bank.param_count() + self.attn.param_count()
    }
}

/// Per-sample attention `π: [B, K, 1]` from the global average over (F, T).
pub fn dy_attention_weights<T: Real>(x: &Tensor<T>, attn: &AttentionBranch<T>) -> Result<Tensor<T>> {
    let [b, c, _, _] = x.dims::<4>("dynamic conv input")?;
    let pooled = x.reduce_mean(3)?.reduce_mean(2)?.reshape([b, c, 1])?;
    Ok(attn.forward(&pooled)?.0)
}

/// Per-frame attention `π: [B, K, T]` from the average over frequency.
pub fn tdy_attention_weights<T: Real>(x: &Tensor<T>, attn: &AttentionBranch<T>) -> Result<Tensor<T>> {
    Ok(attn.forward(&x.reduce_mean(2)?)?.0)
}

pub fn dy_forward<T: Real>(x: &Tensor<T>, layer: &DyConvLayer<T>) -> Result<Tensor<T>> {
    check(x, &layer.bank, &layer.attn)?;
    let pi = dy_attention_weights(x, &layer.attn)?;
    dy_forward_with_pi(x, layer, &pi)
}

pub fn dy_forward_with_pi<T: Real>(x: &Tensor<T>, layer: &DyConvLayer<T>, pi: &Tensor<T>) -> Result<Tensor<T>> {
    let stacked = layer.bank.stacked(layer.stride, same_padding(&layer.bank), layer.padding_mode)?;
    weighted_sum(&conv2d(x, &stacked)?, pi, layer.bank.basis(), Adapt::Sample)
}

pub fn tdy_forward<T: Real>(x: &Tensor<T>, layer: &TdyConvLayer<T>) -> Result<Tensor<T>> {
    check(x, &layer.bank, &layer.attn)?;
    let pi = tdy_attention_weights(x, &layer.attn)?;
    tdy_forward_with_pi(x, layer, &pi)
}

pub fn tdy_forward_with_pi<T: Real>(x: &Tensor<T>, layer: &TdyConvLayer<T>, pi: &Tensor<T>) -> Result<Tensor<T>> {
    let stacked: Conv2dParams<T> = layer.bank.stacked((1, 1), same_padding(&layer.bank), layer.padding_mode)?;
    let y_all = conv2d(x, &stacked)?;
    if y_all.shape()[3] != x.shape()[3] {
        return Err(Error::Config("time-adaptive convolution requires same padding along time".into()));
    }
    weighted_sum(&y_all, pi, layer.bank.basis(), Adapt::Time)
}
