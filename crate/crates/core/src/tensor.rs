//! Dense row-major tensors.
//!
//! Activations use the fixed axis order `[batch, channel, frequency, time]`
//! throughout the crate; time is the innermost (contiguous) axis. Attention
//! weights use `[batch, basis, frequency]` (or `[batch, basis, time]` for the
//! time-adaptive baseline).

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Element type tag, used by the binary container formats and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Floating point element type: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// explicit row/column strides (in elements).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossless for f32/f64 constants used in this crate.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched lies inside the spans checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense N-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return shape_err(format!("axis {pos} has zero extent in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} elements, data has {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for ax in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[ax] = strides[ax + 1] * self.shape[ax + 1];
        }
        strides
    }

    /// Linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return shape_err(format!("index of rank {} for tensor of rank {}", index.len(), self.shape.len()));
        }
        let mut off = 0;
        for (ax, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return shape_err(format!("index {i} out of range for axis {ax} (extent {d})"));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan())).collect(),
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shapes differ: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Asserts the rank and returns the extents, for layer preconditions.
    pub fn dims<const N: usize>(&self, what: &str) -> Result<[usize; N]> {
        <[usize; N]>::try_from(self.shape.as_slice())
            .map_err(|_| Error::Shape(format!("{what}: expected rank {N}, got shape {:?}", self.shape)))
    }

    fn split_at_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    ///
    /// Values along the axis are summed in ascending order, so the result is
    /// bitwise independent of how elements are ordered along that axis.
    pub fn reduce_mean(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = self.split_at_axis(axis)?;
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let denom = T::from_usize(n).expect("extent fits");
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = Vec::with_capacity(n);
        for o in 0..outer {
            for i in 0..inner {
                buf.clear();
                buf.extend((0..n).map(|k| self.data[(o * n + k) * inner + i]));
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let sum = buf.iter().fold(T::zero(), |acc, &v| acc + v);
                out.push(sum / denom);
            }
        }
        Ok(Self { shape, data: out })
    }

    /// `true` iff every element satisfies `|a - b| <= atol + rtol * |b|`.
    pub fn allclose(&self, other: &Self, rtol: T, atol: T) -> Result<bool> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Circular shift along `axis`: element `i` moves to `(i + shift) mod n`.
    pub fn circular_shift(&self, axis: usize, shift: isize) -> Result<Self> {
        let (outer, n, inner) = self.split_at_axis(axis)?;
        let s = shift.rem_euclid(n as isize) as usize;
        let mut out = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            for k in 0..n {
                let dst = (k + s) % n;
                let src_off = (o * n + k) * inner;
                let dst_off = (o * n + dst) * inner;
                out[dst_off..dst_off + inner].copy_from_slice(&self.data[src_off..src_off + inner]);
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Reorders positions along `axis`: output position `j` takes input position `perm[j]`.
    pub fn permute_axis(&self, axis: usize, perm: &[usize]) -> Result<Self> {
        let (outer, n, inner) = self.split_at_axis(axis)?;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("not a permutation of 0..{n}: {perm:?}")));
        }
        let mut out = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            for (j, &p) in perm.iter().enumerate() {
                let src = (o * n + p) * inner;
                let dst = (o * n + j) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Concatenates tensors along axis 0; trailing extents must agree.
    pub fn concat0(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err(format!("cannot concatenate {:?} with {:?}", first.shape, p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    /// Gathers the given rows along axis 0, in order.
    pub fn select0(&self, rows: &[usize]) -> Result<Self> {
        if self.rank() == 0 || rows.is_empty() {
            return shape_err(format!("cannot select {rows:?} from shape {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return shape_err(format!("row {r} out of range for shape {:?}", self.shape));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Sub-tensor `index` along axis 0.
    pub fn index0(&self, index: usize) -> Result<Self> {
        if self.rank() == 0 || index >= self.shape[0] {
            return shape_err(format!("index {index} out of range for shape {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Ok(Self { shape, data: self.data[index * inner..(index + 1) * inner].to_vec() })
    }
}
