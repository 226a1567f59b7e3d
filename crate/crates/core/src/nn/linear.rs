use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Fully connected map over the last axis.
#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn dims(&self) -> Result<(usize, usize)> {
        let [out, inp] = self.weight.dims::<2>("linear weight")?;
        if self.bias.shape() != [out] {
            return shape_err(format!("linear bias {:?} does not match {out} outputs", self.bias.shape()));
        }
        Ok((out, inp))
    }
}

/// `x: [..., in] -> [..., out]`
pub fn linear<T: Real>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let (out, inp) = p.dims()?;
    if x.shape().last() != Some(&inp) {
        return shape_err(format!("linear expects {inp} features, input has shape {:?}", x.shape()));
    }
    let rows = x.len() / inp;
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(p.bias.data());
    }
    // y [rows, out] += x [rows, in] * W^T [in, out]
    T::gemm(rows, inp, out, T::one(), x.data(), inp, 1, p.weight.data(), 1, inp, T::one(), &mut y, out, 1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::new(shape, y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub d_x: Tensor<T>,
    pub d_weight: Tensor<T>,
    pub d_bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, p: &LinearParams<T>, upstream: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (out, inp) = p.dims()?;
    let rows = x.len() / inp;
    if upstream.len() != rows * out || upstream.shape().last() != Some(&out) {
        return shape_err(format!("linear upstream {:?} does not match output", upstream.shape()));
    }
    let g = upstream.data();
    let mut dx = vec![T::zero(); rows * inp];
    T::gemm(rows, out, inp, T::one(), g, out, 1, p.weight.data(), inp, 1, T::zero(), &mut dx, inp, 1);
    let mut dw = vec![T::zero(); out * inp];
    T::gemm(out, rows, inp, T::one(), g, 1, out, x.data(), inp, 1, T::zero(), &mut dw, inp, 1);
    let mut db = vec![T::zero(); out];
    for r in 0..rows {
        for (o, d) in db.iter_mut().enumerate() {
            *d = *d + g[r * out + o];
        }
    }
    Ok(LinearGrads {
        d_x: Tensor::new(x.shape().to_vec(), dx)?,
        d_weight: Tensor::new(vec![out, inp], dw)?,
        d_bias: Tensor::new(vec![out], db)?,
    })
}
