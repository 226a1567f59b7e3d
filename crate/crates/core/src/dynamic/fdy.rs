//! Frequency dynamic convolution.
//!
//! Attention weights `π[b, i, f]` come from the time-averaged input, so every
//! output frequency row gets its own convex combination of the basis kernels
//! while the layer stays shift-equivariant along time.
//!
//! Two execution paths produce the same output:
//!
//! * [`fdy_forward_efficient`] runs all `K` basis convolutions as one stacked
//!   convolution and mixes the outputs with `π`.
//! * [`fdy_forward_naive`] assembles the kernel `Σ_i π_i(b, f) W_i` for every
//!   `(b, f)` and evaluates that row by direct summation. It is the reference
//!   definition and is not meant to be fast.
//!
//! Frequency stride is fixed at 1 with "same" padding so `π`'s frequency axis
//! lines up with the output rows.

use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::nn::{conv2d, conv2d_backward, Conv2dParams, ConvGeometry, PaddingMode};
use crate::tensor::{Real, Tensor};

use super::attention::{
    default_hidden, AttentionBranch, AttentionCache, AttentionGrads, AttentionInit, DEFAULT_TEMPERATURE,
};
use super::bank::BasisKernelBank;
use super::combine::{weighted_sum, weighted_sum_backward, Adapt};

/// Hyperparameters shared by the dynamic layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub basis: usize,
    pub kernel: (usize, usize),
    pub temperature: f64,
    /// Odd kernel size of the attention 1D convolutions.
    pub attention_kernel: usize,
    /// `None` means `max(C_in / 4, K)`.
    pub hidden: Option<usize>,
    pub time_stride: usize,
    pub padding_mode: PaddingMode,
    pub attention_init: AttentionInit,
}

impl DynamicSpec {
    pub fn new(c_in: usize, c_out: usize, basis: usize) -> Self {
        Self {
            c_in,
            c_out,
            basis,
            kernel: (3, 3),
            temperature: DEFAULT_TEMPERATURE,
            attention_kernel: 3,
            hidden: None,
            time_stride: 1,
            padding_mode: PaddingMode::Zeros,
            attention_init: AttentionInit::UniformStart,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or_else(|| default_hidden(self.c_in, self.basis))
    }
}

#[derive(Debug, Clone)]
pub struct FdyConvLayer<T> {
    pub bank: BasisKernelBank<T>,
    pub attn: AttentionBranch<T>,
    pub time_stride: usize,
    pub padding_mode: PaddingMode,
}

/// Forward intermediates retained for [`fdy_backward`].
#[derive(Debug, Clone)]
pub struct FdyCache<T> {
    pub x: Tensor<T>,
    pub pi: Tensor<T>,
    /// Per-basis outputs stacked basis-major: `[B, K * C_out, F, T']`.
    pub y_all: Tensor<T>,
    /// `None` when `π` was supplied from outside (attention detached).
    pub attn: Option<AttentionCache<T>>,
}

#[derive(Debug, Clone)]
pub struct FdyGrads<T> {
    pub d_x: Tensor<T>,
    /// `[K, C_out, C_in, k_f, k_t]`
    pub d_weights: Tensor<T>,
    /// `[K, C_out]`
    pub d_biases: Tensor<T>,
    pub d_attn: Option<AttentionGrads<T>>,
}

impl<T: Real> FdyConvLayer<T> {
    pub fn random(spec: &DynamicSpec, rng: &mut SeededRng) -> Result<Self> {
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
        let layer = Self { bank, attn, time_stride: spec.time_stride, padding_mode: spec.padding_mode };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, _, cin, kf, _) = self.bank.dims()?;
        self.attn.validate()?;
        if self.attn.basis() != k || self.attn.c_in() != cin {
            return Err(Error::Config(format!(
                "attention maps {} channels to {} weights, bank expects {cin} channels and K={k}",
                self.attn.c_in(),
                self.attn.basis()
            )));
        }
        if kf % 2 == 0 {
            return Err(Error::Config(format!("frequency kernel extent must be odd, got {kf}")));
        }
        if self.time_stride == 0 {
            return Err(Error::Config("time stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> (usize, usize) {
        (1, self.time_stride)
    }

    pub fn padding(&self) -> (usize, usize) {
        let (kf, kt) = self.bank.kernel_size();
        ((kf - 1) / 2, (kt - 1) / 2)
    }

    pub fn kernel(&self, i: usize) -> Result<Conv2dParams<T>> {
        self.bank.kernel(i, self.stride(), self.padding(), self.padding_mode)
    }

    fn stacked(&self) -> Result<Conv2dParams<T>> {
        self.bank.stacked(self.stride(), self.padding(), self.padding_mode)
    }

    pub fn param_count(&self) -> usize {
        self.bank.param_count() + self.attn.param_count()
    }
}

fn check_input<T: Real>(x: &Tensor<T>, c_in: usize) -> Result<()> {
    let [_, c, _, _] = x.dims::<4>("dynamic conv input")?;
    if c != c_in {
        return Err(Error::Shape(format!("layer expects {c_in} input channels, input has {c}")));
    }
    Ok(())
}

/// Frequency-adaptive attention `π: [B, K, F]` for `x: [B, C_in, F, T]`.
pub fn attention_weights<T: Real>(x: &Tensor<T>, attn: &AttentionBranch<T>) -> Result<Tensor<T>> {
    check_input(x, attn.c_in())?;
    Ok(attn.forward(&x.reduce_mean(3)?)?.0)
}

/// Forward pass retaining everything [`fdy_backward`] needs.
pub fn fdy_forward_train<T: Real>(x: &Tensor<T>, layer: &FdyConvLayer<T>) -> Result<(Tensor<T>, FdyCache<T>)> {
    check_input(x, layer.bank.c_in())?;
    let (pi, attn_cache) = layer.attn.forward(&x.reduce_mean(3)?)?;
    let (y, mut cache) = fdy_forward_with_pi(x, layer, &pi)?;
    cache.attn = Some(attn_cache);
    Ok((y, cache))
}

/// Efficient path with externally supplied attention weights `pi: [B, K, F]`.
pub fn fdy_forward_with_pi<T: Real>(
    x: &Tensor<T>,
    layer: &FdyConvLayer<T>,
    pi: &Tensor<T>,
) -> Result<(Tensor<T>, FdyCache<T>)> {
    check_input(x, layer.bank.c_in())?;
    let y_all = conv2d(x, &layer.stacked()?)?;
    debug_assert_eq!(y_all.shape()[2], x.shape()[2], "frequency rows must align with π");
    let y = weighted_sum(&y_all, pi, layer.bank.basis(), Adapt::Frequency)?;
    Ok((y, FdyCache { x: x.clone(), pi: pi.clone(), y_all, attn: None }))
}

/// `y = Σ_i π_i(b, f) · (W_i * x + b_i)`.
pub fn fdy_forward_efficient<T: Real>(x: &Tensor<T>, layer: &FdyConvLayer<T>) -> Result<Tensor<T>> {
    Ok(fdy_forward_train(x, layer)?.0)
}

/// Reference path: per `(b, f)` kernel assembly, then direct summation for that output row.
pub fn fdy_forward_naive<T: Real>(x: &Tensor<T>, layer: &FdyConvLayer<T>) -> Result<Tensor<T>> {
    let pi = attention_weights(x, &layer.attn)?;
    fdy_forward_naive_with_pi(x, layer, &pi)
}

pub fn fdy_forward_naive_with_pi<T: Real>(x: &Tensor<T>, layer: &FdyConvLayer<T>, pi: &Tensor<T>) -> Result<Tensor<T>> {
    let (basis, cout, cin, kf, kt) = layer.bank.dims()?;
    let g = ConvGeometry::new(x.shape(), &[cout, cin, kf, kt], layer.stride(), layer.padding(), layer.padding_mode)?;
    if pi.shape() != [g.batch, basis, g.f_out] {
        return Err(Error::Contract(format!(
            "attention weights {:?} do not align with [{}, {basis}, {}]",
            pi.shape(),
            g.batch,
            g.f_out
        )));
    }
    let w_all = layer.bank.weights.data();
    let b_all = layer.bank.biases.data();
    let kernel_len = cout * cin * kf * kt;
    let xd = x.data();
    let mut kernel = vec![T::zero(); kernel_len];
    let mut bias = vec![T::zero(); cout];
    let mut out = vec![T::zero(); g.batch * cout * g.f_out * g.t_out];
    // input frame read by each (time tap, output frame), None where padding is zero
    let t_sources: Vec<Vec<Option<usize>>> = (0..kt)
        .map(|dj| {
            (0..g.t_out).map(|to| ConvGeometry::source(to, dj, g.stride.1, g.padding.1, g.t_in, g.mode)).collect()
        })
        .collect();
    for b in 0..g.batch {
        for fo in 0..g.f_out {
            kernel.fill(T::zero());
            bias.fill(T::zero());
            for i in 0..basis {
                let w = pi.data()[(b * basis + i) * g.f_out + fo];
                for (k, &v) in kernel.iter_mut().zip(&w_all[i * kernel_len..(i + 1) * kernel_len]) {
                    *k = *k + w * v;
                }
                for (bv, &v) in bias.iter_mut().zip(&b_all[i * cout..(i + 1) * cout]) {
                    *bv = *bv + w * v;
                }
            }
            for co in 0..cout {
                let row_at = ((b * cout + co) * g.f_out + fo) * g.t_out;
                let row = &mut out[row_at..row_at + g.t_out];
                row.fill(bias[co]);
                for ci in 0..cin {
                    for di in 0..kf {
                        let Some(f) = ConvGeometry::source(fo, di, 1, g.padding.0, g.f_in, g.mode) else {
                            continue;
                        };
                        let x_at = ((b * cin + ci) * g.f_in + f) * g.t_in;
                        let x_row = &xd[x_at..x_at + g.t_in];
                        for (dj, sources) in t_sources.iter().enumerate() {
                            let w = kernel[((co * cin + ci) * kf + di) * kt + dj];
                            for (y, src) in row.iter_mut().zip(sources) {
                                if let Some(t) = *src {
                                    *y = *y + w * x_row[t];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, cout, g.f_out, g.t_out], out)
}

/// Exact gradients of `sum(upstream * y)` for the efficient path.
///
/// With a detached cache (from [`fdy_forward_with_pi`]) the attention branch
/// receives no gradient and `d_x` only carries the convolution term.
pub fn fdy_backward<T: Real>(
    layer: &FdyConvLayer<T>,
    cache: &FdyCache<T>,
    upstream: &Tensor<T>,
) -> Result<FdyGrads<T>> {
    let (basis, cout, cin, kf, kt) = layer.bank.dims()?;
    let [b, xc, f, t] = cache.x.dims::<4>("cached input")?;
    if xc != cin || cache.pi.shape() != [b, basis, f] || cache.y_all.shape()[..3] != [b, basis * cout, f] {
        return Err(Error::Contract("forward cache does not belong to this layer".into()));
    }
    let (d_all, d_pi) = weighted_sum_backward(&cache.y_all, &cache.pi, basis, Adapt::Frequency, upstream)?;
    let conv = conv2d_backward(&cache.x, &layer.stacked()?, &d_all)?;
    let mut d_x = conv.d_x;
    let d_attn = match &cache.attn {
        None => None,
        Some(attn_cache) => {
            let (d_pooled, grads) = layer.attn.backward(attn_cache, &d_pi)?;
            // mean over time spreads uniformly
            let scale = T::one() / T::from_usize(t).unwrap();
            let dp = d_pooled.data();
            for (row, chunk) in d_x.data_mut().chunks_mut(t).enumerate() {
                let add = dp[row] * scale;
                for v in chunk {
                    *v = *v + add;
                }
            }
            Some(grads)
        }
    };
    Ok(FdyGrads {
        d_x,
        d_weights: conv.d_weight.reshape([basis, cout, cin, kf, kt])?,
        d_biases: conv.d_bias.reshape([basis, cout])?,
        d_attn,
    })
}
