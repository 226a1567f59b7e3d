//! Attention-weighted sum of per-basis outputs and its gradient.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which output axis the attention weights vary along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapt {
    /// One weight per sample (`π: [B, K, 1]`).
    Sample,
    /// One weight per frequency row (`π: [B, K, F]`).
    Frequency,
    /// One weight per time frame (`π: [B, K, T]`).
    Time,
}

impl Adapt {
    fn check(self, pi: &[usize], batch: usize, basis: usize, f: usize, t: usize) -> Result<()> {
        let len = match self {
            Adapt::Sample => 1,
            Adapt::Frequency => f,
            Adapt::Time => t,
        };
        if pi != [batch, basis, len] {
            return Err(Error::Contract(format!(
                "attention weights {pi:?} do not align with output [{batch}, {basis}, {len}] ({self:?})"
            )));
        }
        Ok(())
    }

    #[inline]
    fn at(self, f: usize, t: usize) -> usize {
        match self {
            Adapt::Sample => 0,
            Adapt::Frequency => f,
            Adapt::Time => t,
        }
    }
}

/// `y[b, c, f, t] = Σ_i π[b, i, ·] · y_all[b, i * C_out + c, f, t]`, summed in ascending `i`.
pub fn weighted_sum<T: Real>(y_all: &Tensor<T>, pi: &Tensor<T>, basis: usize, adapt: Adapt) -> Result<Tensor<T>> {
    let [b, kc, f, t] = y_all.dims::<4>("per-basis outputs")?;
    if kc % basis != 0 {
        return Err(Error::Contract(format!("{kc} stacked channels are not a multiple of K={basis}")));
    }
    let cout = kc / basis;
    adapt.check(pi.shape(), b, basis, f, t)?;
    let (ya, p) = (y_all.data(), pi.data());
    let plen = pi.shape()[2];
    let mut out = vec![T::zero(); b * cout * f * t];
    for bi in 0..b {
        for c in 0..cout {
            let dst = &mut out[((bi * cout + c) * f) * t..((bi * cout + c + 1) * f) * t];
            for i in 0..basis {
                let src = &ya[((bi * kc + i * cout + c) * f) * t..((bi * kc + i * cout + c + 1) * f) * t];
                let w = &p[(bi * basis + i) * plen..(bi * basis + i + 1) * plen];
                for fi in 0..f {
                    for ti in 0..t {
                        let k = fi * t + ti;
                        dst[k] = dst[k] + w[adapt.at(fi, ti)] * src[k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, f, t], out)
}

/// Gradients of [`weighted_sum`]: `(d_y_all, d_pi)`.
pub fn weighted_sum_backward<T: Real>(
    y_all: &Tensor<T>,
    pi: &Tensor<T>,
    basis: usize,
    adapt: Adapt,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, kc, f, t] = y_all.dims::<4>("per-basis outputs")?;
    let cout = kc / basis;
    adapt.check(pi.shape(), b, basis, f, t)?;
    if upstream.shape() != [b, cout, f, t] {
        return Err(Error::Contract(format!(
            "upstream gradient {:?} does not match output [{b}, {cout}, {f}, {t}]",
            upstream.shape()
        )));
    }
    let (ya, p, g) = (y_all.data(), pi.data(), upstream.data());
    let plen = pi.shape()[2];
    let mut d_all = vec![T::zero(); ya.len()];
    let mut d_pi = vec![T::zero(); p.len()];
    for bi in 0..b {
        for i in 0..basis {
            let w = &p[(bi * basis + i) * plen..(bi * basis + i + 1) * plen];
            let dw = &mut d_pi[(bi * basis + i) * plen..(bi * basis + i + 1) * plen];
            for c in 0..cout {
                let base_all = ((bi * kc + i * cout + c) * f) * t;
                let base_g = ((bi * cout + c) * f) * t;
                for fi in 0..f {
                    for ti in 0..t {
                        let (ka, kg) = (base_all + fi * t + ti, base_g + fi * t + ti);
                        let l = adapt.at(fi, ti);
                        d_all[ka] = w[l] * g[kg];
                        dw[l] = dw[l] + g[kg] * ya[ka];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(y_all.shape().to_vec(), d_all)?, Tensor::new(pi.shape().to_vec(), d_pi)?))
}
