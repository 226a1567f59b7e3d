use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient mask uses the pre-activation input: zero where `x <= 0`.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(upstream, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(upstream, |s, g| g * s * (T::one() - s))
}

fn axis_layout<T: Real>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("axis {axis} out of range for shape {:?}", x.shape())));
    }
    Ok((x.shape()[..axis].iter().product(), x.shape()[axis], x.shape()[axis + 1..].iter().product()))
}

/// Softmax of `logits / temperature` along `axis`, computed after subtracting the maximum.
pub fn softmax_temperature<T: Real>(logits: &Tensor<T>, axis: usize, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {temperature}")));
    }
    let (outer, n, inner) = axis_layout(logits, axis)?;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..n {
                let e = ((src[at(k)] - max) / temperature).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..n {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Gradient with respect to the logits, given the softmax output `probs`.
pub fn softmax_temperature_backward<T: Real>(
    probs: &Tensor<T>,
    upstream: &Tensor<T>,
    axis: usize,
    temperature: T,
) -> Result<Tensor<T>> {
    probs.expect_same_shape(upstream)?;
    let (outer, n, inner) = axis_layout(probs, axis)?;
    let (p, g) = (probs.data(), upstream.data());
    let mut out = vec![T::zero(); p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot = (0..n).map(|k| p[at(k)] * g[at(k)]).sum::<T>();
            for k in 0..n {
                out[at(k)] = p[at(k)] * (g[at(k)] - dot) / temperature;
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}
