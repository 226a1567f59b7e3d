//! Bidirectional GRU, forward pass only.
//!
//! Gate layout follows the common `(reset, update, new)` stacking:
//! `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z = σ(W_iz x + b_iz + W_hz h + b_hz)`,
//! `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.

use crate::error::{shape_err, Result};
use crate::init::{self, SeededRng};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct GruDirection<T> {
    /// `[3H, D]`
    pub w_ih: Tensor<T>,
    /// `[3H, H]`
    pub w_hh: Tensor<T>,
    /// `[3H]`
    pub b_ih: Tensor<T>,
    /// `[3H]`
    pub b_hh: Tensor<T>,
}

impl<T: Real> GruDirection<T> {
    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: Tensor::zeros([3 * hidden, input])?,
            w_hh: Tensor::zeros([3 * hidden, hidden])?,
            b_ih: Tensor::zeros([3 * hidden])?,
            b_hh: Tensor::zeros([3 * hidden])?,
        })
    }

    pub fn random(input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: init::uniform([3 * hidden, input], bound, rng)?,
            w_hh: init::uniform([3 * hidden, hidden], bound, rng)?,
            b_ih: init::uniform([3 * hidden], bound, rng)?,
            b_hh: init::uniform([3 * hidden], bound, rng)?,
        })
    }

    fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn run(
        &self,
        x: &[T],
        steps: usize,
        dim: usize,
        reverse: bool,
        out: &mut [T],
        out_stride: usize,
        out_offset: usize,
    ) {
        let h_dim = self.hidden();
        let mut h = vec![T::zero(); h_dim];
        let mut gi = vec![T::zero(); 3 * h_dim];
        let mut gh = vec![T::zero(); 3 * h_dim];
        let sig = |v: T| T::one() / (T::one() + (-v).exp());
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            let xt = &x[t * dim..(t + 1) * dim];
            gi.copy_from_slice(self.b_ih.data());
            gh.copy_from_slice(self.b_hh.data());
            T::gemm(3 * h_dim, dim, 1, T::one(), self.w_ih.data(), dim, 1, xt, 1, 1, T::one(), &mut gi, 1, 1);
            T::gemm(3 * h_dim, h_dim, 1, T::one(), self.w_hh.data(), h_dim, 1, &h, 1, 1, T::one(), &mut gh, 1, 1);
            for j in 0..h_dim {
                let r = sig(gi[j] + gh[j]);
                let z = sig(gi[h_dim + j] + gh[h_dim + j]);
                let n = (gi[2 * h_dim + j] + r * gh[2 * h_dim + j]).tanh();
                h[j] = (T::one() - z) * n + z * h[j];
            }
            out[t * out_stride + out_offset..t * out_stride + out_offset + h_dim].copy_from_slice(&h);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub forward: GruDirection<T>,
    pub backward: GruDirection<T>,
}

impl<T: Real> GruParams<T> {
    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn input(&self) -> usize {
        self.forward.w_ih.shape()[1]
    }
}

/// `x: [B, T, D] -> [B, T, 2H]`, forward direction first.
pub fn gru_forward<T: Real>(x: &Tensor<T>, p: &GruParams<T>) -> Result<Tensor<T>> {
    let [b, steps, dim] = x.dims::<3>("gru input")?;
    if dim != p.input() {
        return shape_err(format!("gru expects {} features, input has {dim}", p.input()));
    }
    let h = p.hidden();
    let mut out = vec![T::zero(); b * steps * 2 * h];
    for item in 0..b {
        let xi = &x.data()[item * steps * dim..(item + 1) * steps * dim];
        let oi = &mut out[item * steps * 2 * h..(item + 1) * steps * 2 * h];
        p.forward.run(xi, steps, dim, false, oi, 2 * h, 0);
        p.backward.run(xi, steps, dim, true, oi, 2 * h, h);
    }
    Tensor::new(vec![b, steps, 2 * h], out)
}
