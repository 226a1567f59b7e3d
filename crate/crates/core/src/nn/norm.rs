//! Batch normalization over the channel axis (axis 1) of any rank >= 2 tensor.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Real> BatchNormParams<T> {
    /// Unit scale, zero shift, running statistics `(0, 1)`, eval mode.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full([channels], T::one())?,
            beta: Tensor::zeros([channels])?,
            running_mean: Tensor::zeros([channels])?,
            running_var: Tensor::full([channels], T::one())?,
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
            mode: BnMode::Eval,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving update from the statistics of a train-mode forward.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = self.momentum;
        let n = cache.count;
        let unbias = if n > 1 { T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap() } else { T::one() };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (T::one() - m) * *rm + m * cache.mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (T::one() - m) * *rv + m * cache.var[c] * unbias;
        }
    }
}

/// Intermediates of one forward pass, needed by [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased variance of the batch (train) or the running variance (eval).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

fn layout<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 || x.shape()[1] != channels {
        return shape_err(format!("batchnorm over {channels} channels cannot take input {:?}", x.shape()));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((x.shape()[0], inner))
}

/// Pure forward pass; running statistics are left untouched.
pub fn batchnorm_forward<T: Real>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<(Tensor<T>, BnCache<T>)> {
    let ch = p.channels();
    let (outer, inner) = layout(x, ch)?;
    let count = outer * inner;
    let xd = x.data();
    let (mean, var) = match p.mode {
        BnMode::Train => {
            if count == 0 {
                return Err(Error::InvalidArgument("batchnorm over an empty normalization set".into()));
            }
            let n = T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            for c in 0..ch {
                let mut s = T::zero();
                for o in 0..outer {
                    let off = (o * ch + c) * inner;
                    s = s + xd[off..off + inner].iter().copied().sum::<T>();
                }
                let mu = s / n;
                let mut v = T::zero();
                for o in 0..outer {
                    let off = (o * ch + c) * inner;
                    v = v + xd[off..off + inner].iter().map(|&a| (a - mu) * (a - mu)).sum::<T>();
                }
                mean[c] = mu;
                var[c] = v / n;
            }
            (mean, var)
        }
        BnMode::Eval => (p.running_mean.data().to_vec(), p.running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for c in 0..ch {
            let off = (o * ch + c) * inner;
            let (g, b) = (p.gamma.data()[c], p.beta.data()[c]);
            for k in off..off + inner {
                let h = (xd[k] - mean[c]) * inv_std[c];
                xhat[k] = h;
                out[k] = g * h + b;
            }
        }
    }
    let cache = BnCache { mode: p.mode, xhat: Tensor::new(x.shape().to_vec(), xhat)?, mean, var, inv_std, count };
    Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
}

/// Forward pass; in train mode the running statistics are updated.
pub fn batchnorm<T: Real>(x: &Tensor<T>, p: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let (y, cache) = batchnorm_forward(x, p)?;
    p.update_running(&cache);
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub d_x: Tensor<T>,
    pub d_gamma: Tensor<T>,
    pub d_beta: Tensor<T>,
}

/// Backward pass; in train mode this includes the batch-statistics terms.
pub fn batchnorm_backward<T: Real>(
    p: &BatchNormParams<T>,
    cache: &BnCache<T>,
    upstream: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let ch = p.channels();
    upstream.expect_same_shape(&cache.xhat)?;
    let (outer, inner) = layout(upstream, ch)?;
    let gd = upstream.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for o in 0..outer {
        for c in 0..ch {
            let off = (o * ch + c) * inner;
            for k in off..off + inner {
                dgamma[c] = dgamma[c] + gd[k] * xh[k];
                dbeta[c] = dbeta[c] + gd[k];
            }
        }
    }
    let mut dx = vec![T::zero(); gd.len()];
    let n = T::from_usize(cache.count.max(1)).unwrap();
    for o in 0..outer {
        for c in 0..ch {
            let off = (o * ch + c) * inner;
            let scale = p.gamma.data()[c] * cache.inv_std[c];
            for k in off..off + inner {
                dx[k] = match cache.mode {
                    BnMode::Eval => scale * gd[k],
                    BnMode::Train => scale * (gd[k] - dbeta[c] / n - xh[k] * dgamma[c] / n),
                };
            }
        }
    }
    Ok(BnGrads {
        d_x: Tensor::new(upstream.shape().to_vec(), dx)?,
        d_gamma: Tensor::new(vec![ch], dgamma)?,
        d_beta: Tensor::new(vec![ch], dbeta)?,
    })
}
