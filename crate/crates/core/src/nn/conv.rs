//! Static 2D and 1D convolution (cross-correlation, no kernel flip).
//!
//! `conv2d` lowers each batch item to an im2col matrix and runs one GEMM per
//! block of output rows; the column buffer is capped so large spectrograms do
//! not allocate the full unfolded input at once.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Boundary handling for padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    Zeros,
    /// Wrap-around; only meaningful for equivariance checks.
    Circular,
}

#[derive(Debug, Clone)]
pub struct Conv2dParams<T> {
    /// `[C_out, C_in, k_f, k_t]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub padding_mode: PaddingMode,
}

impl<T: Real> Conv2dParams<T> {
    /// Stride 1 with symmetric "same" zero padding `(k - 1) / 2` on both axes.
    pub fn same(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [cout, _, kf, kt] = weight.dims::<4>("conv2d weight")?;
        if bias.shape() != [cout] {
            return shape_err(format!("conv2d bias {:?} does not match C_out={cout}", bias.shape()));
        }
        Ok(Self {
            weight,
            bias,
            stride: (1, 1),
            padding: ((kf - 1) / 2, (kt - 1) / 2),
            padding_mode: PaddingMode::Zeros,
        })
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_mode(mut self, mode: PaddingMode) -> Self {
        self.padding_mode = mode;
        self
    }

    pub fn cast<U: Real>(&self) -> Conv2dParams<U> {
        Conv2dParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            padding_mode: self.padding_mode,
        }
    }
}

/// Resolved extents of one 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub f_in: usize,
    pub t_in: usize,
    pub k_f: usize,
    pub k_t: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub mode: PaddingMode,
    pub f_out: usize,
    pub t_out: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
        mode: PaddingMode,
    ) -> Result<Self> {
        let [batch, c_in, f_in, t_in] = <[usize; 4]>::try_from(x_shape)
            .map_err(|_| Error::Shape(format!("conv2d input must be [B,C,F,T], got {x_shape:?}")))?;
        let [c_out, w_cin, k_f, k_t] = <[usize; 4]>::try_from(w_shape)
            .map_err(|_| Error::Shape(format!("conv2d weight must be rank 4, got {w_shape:?}")))?;
        if w_cin != c_in {
            return shape_err(format!("conv2d expects {w_cin} input channels, input has {c_in}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (pf, pt) = padding;
        if f_in + 2 * pf < k_f || t_in + 2 * pt < k_t {
            return shape_err(format!(
                "padded input {}x{} smaller than kernel {k_f}x{k_t}",
                f_in + 2 * pf,
                t_in + 2 * pt
            ));
        }
        if mode == PaddingMode::Circular && (pf > f_in || pt > t_in) {
            return Err(Error::Config("circular padding wider than the input".into()));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            f_in,
            t_in,
            k_f,
            k_t,
            stride,
            padding,
            mode,
            f_out: (f_in + 2 * pf - k_f) / stride.0 + 1,
            t_out: (t_in + 2 * pt - k_t) / stride.1 + 1,
        })
    }

    pub fn of<T: Real>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Self> {
        Self::new(x.shape(), p.weight.shape(), p.stride, p.padding, p.padding_mode)
    }

    /// Input row/column feeding output position `o` through tap `k`, or `None` for a zero pad.
    #[inline]
    pub fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize, mode: PaddingMode) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            match mode {
                PaddingMode::Zeros => None,
                PaddingMode::Circular => Some(pos.rem_euclid(extent as isize) as usize),
            }
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.k_f * self.k_t
    }

    fn rows_per_block(&self) -> usize {
        const MAX_COLS: usize = 1 << 22;
        (MAX_COLS / (self.patch() * self.t_out).max(1)).clamp(1, self.f_out)
    }

    /// Fills `cols` (`[patch, rows * t_out]`) for output rows `f0..f0+rows` of one batch item.
    fn im2col<T: Real>(&self, x_item: &[T], f0: usize, rows: usize, cols: &mut [T]) {
        let n = rows * self.t_out;
        let (sf, st) = self.stride;
        let (pf, pt) = self.padding;
        for ci in 0..self.c_in {
            let plane = &x_item[ci * self.f_in * self.t_in..(ci + 1) * self.f_in * self.t_in];
            for i in 0..self.k_f {
                for j in 0..self.k_t {
                    let row = ((ci * self.k_f + i) * self.k_t + j) * n;
                    for r in 0..rows {
                        let dst = &mut cols[row + r * self.t_out..row + (r + 1) * self.t_out];
                        match Self::source(f0 + r, i, sf, pf, self.f_in, self.mode) {
                            None => dst.fill(T::zero()),
                            Some(src_f) => {
                                let src = &plane[src_f * self.t_in..(src_f + 1) * self.t_in];
                                for (to, d) in dst.iter_mut().enumerate() {
                                    *d = match Self::source(to, j, st, pt, self.t_in, self.mode) {
                                        Some(t) => src[t],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input gradient of one batch item.
    fn col2im<T: Real>(&self, cols: &[T], f0: usize, rows: usize, dx_item: &mut [T]) {
        let n = rows * self.t_out;
        let (sf, st) = self.stride;
        let (pf, pt) = self.padding;
        for ci in 0..self.c_in {
            let plane = &mut dx_item[ci * self.f_in * self.t_in..(ci + 1) * self.f_in * self.t_in];
            for i in 0..self.k_f {
                for j in 0..self.k_t {
                    let row = ((ci * self.k_f + i) * self.k_t + j) * n;
                    for r in 0..rows {
                        let Some(src_f) = Self::source(f0 + r, i, sf, pf, self.f_in, self.mode) else {
                            continue;
                        };
                        let src = &cols[row + r * self.t_out..row + (r + 1) * self.t_out];
                        let dst = &mut plane[src_f * self.t_in..(src_f + 1) * self.t_in];
                        for (to, &g) in src.iter().enumerate() {
                            if let Some(t) = Self::source(to, j, st, pt, self.t_in, self.mode) {
                                dst[t] = dst[t] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of `x: [B, C_in, F, T]` giving `[B, C_out, F', T']`.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let g = ConvGeometry::of(x, p)?;
    if p.bias.shape() != [g.c_out] {
        return shape_err(format!("conv2d bias {:?} does not match C_out={}", p.bias.shape(), g.c_out));
    }
    let plane_out = g.f_out * g.t_out;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane_out];
    for (co, &b) in p.bias.data().iter().enumerate() {
        for item in 0..g.batch {
            let off = (item * g.c_out + co) * plane_out;
            out[off..off + plane_out].fill(b);
        }
    }
    let in_item = g.c_in * g.f_in * g.t_in;
    let block = g.rows_per_block();
    let mut cols = vec![T::zero(); g.patch() * block * g.t_out];
    for item in 0..g.batch {
        let x_item = &x.data()[item * in_item..(item + 1) * in_item];
        let out_item = &mut out[item * g.c_out * plane_out..(item + 1) * g.c_out * plane_out];
        let mut f0 = 0;
        while f0 < g.f_out {
            let rows = block.min(g.f_out - f0);
            let n = rows * g.t_out;
            g.im2col(x_item, f0, rows, &mut cols[..g.patch() * n]);
            T::gemm(
                g.c_out,
                g.patch(),
                n,
                T::one(),
                p.weight.data(),
                g.patch(),
                1,
                &cols,
                n,
                1,
                T::one(),
                &mut out_item[f0 * g.t_out..],
                plane_out,
                1,
            );
            f0 += rows;
        }
    }
    Tensor::new(vec![g.batch, g.c_out, g.f_out, g.t_out], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub d_x: Tensor<T>,
    pub d_weight: Tensor<T>,
    pub d_bias: Tensor<T>,
}

/// Gradients of `sum(upstream * conv2d(x, p))` with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(x: &Tensor<T>, p: &Conv2dParams<T>, upstream: &Tensor<T>) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::of(x, p)?;
    let out_shape = [g.batch, g.c_out, g.f_out, g.t_out];
    if upstream.shape() != out_shape {
        return shape_err(format!(
            "conv2d upstream gradient {:?} does not match output {out_shape:?}",
            upstream.shape()
        ));
    }
    let plane_out = g.f_out * g.t_out;
    let in_item = g.c_in * g.f_in * g.t_in;
    let mut d_bias = vec![T::zero(); g.c_out];
    for item in 0..g.batch {
        for (co, db) in d_bias.iter_mut().enumerate() {
            let off = (item * g.c_out + co) * plane_out;
            *db = *db + upstream.data()[off..off + plane_out].iter().copied().sum::<T>();
        }
    }
    let mut d_weight = vec![T::zero(); g.c_out * g.patch()];
    let mut d_x = vec![T::zero(); g.batch * in_item];
    let block = g.rows_per_block();
    let mut cols = vec![T::zero(); g.patch() * block * g.t_out];
    let mut d_cols = vec![T::zero(); g.patch() * block * g.t_out];
    for item in 0..g.batch {
        let x_item = &x.data()[item * in_item..(item + 1) * in_item];
        let up_item = &upstream.data()[item * g.c_out * plane_out..(item + 1) * g.c_out * plane_out];
        let mut f0 = 0;
        while f0 < g.f_out {
            let rows = block.min(g.f_out - f0);
            let n = rows * g.t_out;
            g.im2col(x_item, f0, rows, &mut cols[..g.patch() * n]);
            let up_block = &up_item[f0 * g.t_out..];
            // d_weight += up [C_out, n] * cols^T [n, patch]
            T::gemm(
                g.c_out,
                n,
                g.patch(),
                T::one(),
                up_block,
                plane_out,
                1,
                &cols,
                1,
                n,
                T::one(),
                &mut d_weight,
                g.patch(),
                1,
            );
            // d_cols = W^T [patch, C_out] * up [C_out, n]
            T::gemm(
                g.patch(),
                g.c_out,
                n,
                T::one(),
                p.weight.data(),
                1,
                g.patch(),
                up_block,
                plane_out,
                1,
                T::zero(),
                &mut d_cols,
                n,
                1,
            );
            g.col2im(&d_cols[..g.patch() * n], f0, rows, &mut d_x[item * in_item..(item + 1) * in_item]);
            f0 += rows;
        }
    }
    Ok(Conv2dGrads {
        d_x: Tensor::new(x.shape().to_vec(), d_x)?,
        d_weight: Tensor::new(p.weight.shape().to_vec(), d_weight)?,
        d_bias: Tensor::new(vec![g.c_out], d_bias)?,
    })
}

/// 1D convolution along frequency with zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1dParams<T> {
    /// `[C_out, C_in, k]`, `k` odd
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Conv1dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let p = Self { weight, bias };
        p.dims()?;
        Ok(p)
    }

    /// `(C_out, C_in, k)` after validating the kernel.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let [cout, cin, k] = self.weight.dims::<3>("conv1d weight")?;
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [cout] {
                return shape_err(format!("conv1d bias {:?} does not match C_out={cout}", b.shape()));
            }
        }
        Ok((cout, cin, k))
    }
}

/// `x: [B, C_in, L] -> [B, C_out, L]`, mixing channels and adjacent positions.
pub fn conv1d_freq<T: Real>(x: &Tensor<T>, p: &Conv1dParams<T>) -> Result<Tensor<T>> {
    let (cout, cin, k) = p.dims()?;
    let [b, xc, len] = x.dims::<3>("conv1d input")?;
    if xc != cin {
        return shape_err(format!("conv1d expects {cin} input channels, input has {xc}"));
    }
    let pad = (k - 1) / 2;
    let w = p.weight.data();
    let xd = x.data();
    let mut out = vec![T::zero(); b * cout * len];
    for bi in 0..b {
        for co in 0..cout {
            let bias = p.bias.as_ref().map_or(T::zero(), |t| t.data()[co]);
            let row = &mut out[(bi * cout + co) * len..(bi * cout + co + 1) * len];
            row.fill(bias);
            for ci in 0..cin {
                let src = &xd[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                for tap in 0..k {
                    let wv = w[(co * cin + ci) * k + tap];
                    for (pos, o) in row.iter_mut().enumerate() {
                        let s = pos + tap;
                        if s >= pad && s - pad < len {
                            *o = *o + wv * src[s - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, len], out)
}

#[derive(Debug, Clone)]
pub struct Conv1dGrads<T> {
    pub d_x: Tensor<T>,
    pub d_weight: Tensor<T>,
    pub d_bias: Option<Tensor<T>>,
}

pub fn conv1d_freq_backward<T: Real>(
    x: &Tensor<T>,
    p: &Conv1dParams<T>,
    upstream: &Tensor<T>,
) -> Result<Conv1dGrads<T>> {
    let (cout, cin, k) = p.dims()?;
    let [b, _, len] = x.dims::<3>("conv1d input")?;
    if upstream.shape() != [b, cout, len] {
        return shape_err(format!("conv1d upstream gradient {:?} does not match output", upstream.shape()));
    }
    let pad = (k - 1) / 2;
    let w = p.weight.data();
    let xd = x.data();
    let gd = upstream.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); cout];
    for bi in 0..b {
        for co in 0..cout {
            let grow = &gd[(bi * cout + co) * len..(bi * cout + co + 1) * len];
            db[co] = db[co] + grow.iter().copied().sum::<T>();
            for ci in 0..cin {
                let xoff = (bi * cin + ci) * len;
                for tap in 0..k {
                    let widx = (co * cin + ci) * k + tap;
                    let mut acc = T::zero();
                    for (pos, &g) in grow.iter().enumerate() {
                        let s = pos + tap;
                        if s >= pad && s - pad < len {
                            acc = acc + g * xd[xoff + s - pad];
                            dx[xoff + s - pad] = dx[xoff + s - pad] + g * w[widx];
                        }
                    }
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
    Ok(Conv1dGrads {
        d_x: Tensor::new(x.shape().to_vec(), dx)?,
        d_weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
        d_bias: match p.bias {
            Some(_) => Some(Tensor::new(vec![cout], db)?),
            None => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;

    /// Six nested loops straight from the definition.
    fn conv2d_oracle(x: &Tensor<f64>, p: &Conv2dParams<f64>) -> Tensor<f64> {
        let g = ConvGeometry::of(x, p).unwrap();
        Tensor::from_fn([g.batch, g.c_out, g.f_out, g.t_out], |o| {
            let (b, co, fo, to) = (o[0], o[1], o[2], o[3]);
            let mut acc = p.bias.data()[co];
            for ci in 0..g.c_in {
                for i in 0..g.k_f {
                    for j in 0..g.k_t {
                        let f = (fo * g.stride.0 + i) as isize - g.padding.0 as isize;
                        let t = (to * g.stride.1 + j) as isize - g.padding.1 as isize;
                        let (f, t) = match g.mode {
                            PaddingMode::Zeros => {
                                if f < 0 || t < 0 || f >= g.f_in as isize || t >= g.t_in as isize {
                                    continue;
                                }
                                (f as usize, t as usize)
                            }
                            PaddingMode::Circular => {
                                (f.rem_euclid(g.f_in as isize) as usize, t.rem_euclid(g.t_in as isize) as usize)
                            }
                        };
                        acc += p.weight.get(&[co, ci, i, j]).unwrap() * x.get(&[b, ci, f, t]).unwrap();
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    fn random_params(seed: u64, cout: usize, cin: usize, kf: usize, kt: usize) -> Conv2dParams<f64> {
        let mut rng = init::rng(seed);
        let w = init::uniform([cout, cin, kf, kt], 1.0, &mut rng).unwrap();
        let b = init::uniform([cout], 1.0, &mut rng).unwrap();
        Conv2dParams::same(w, b).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::from_fn([2, 1, 5, 7], |i| (i[2] * 7 + i[3]) as f32 - 3.0).unwrap();
        let p = Conv2dParams::same(Tensor::full([1, 1, 1, 1], 1.0f32).unwrap(), Tensor::zeros([1]).unwrap()).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn counting_taps() {
        let x = Tensor::<f32>::full([1, 1, 5, 5], 1.0).unwrap();
        let p = Conv2dParams::same(Tensor::full([1, 1, 3, 3], 1.0f32).unwrap(), Tensor::zeros([1]).unwrap()).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.get(&[0, 0, 2, 2]).unwrap(), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]).unwrap(), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 2]).unwrap(), 6.0);
    }

    #[test]
    fn matches_loop_oracle_across_geometries() {
        let cases = [
            (2, 3, 4, 7, 9, 3, 3, (1, 1), (1, 1), PaddingMode::Zeros),
            (1, 2, 5, 6, 11, 3, 5, (1, 2), (1, 2), PaddingMode::Zeros),
            (2, 1, 3, 8, 8, 5, 3, (2, 1), (0, 1), PaddingMode::Zeros),
            (1, 3, 2, 6, 7, 3, 3, (1, 1), (1, 1), PaddingMode::Circular),
            (1, 2, 2, 5, 4, 1, 1, (1, 1), (0, 0), PaddingMode::Zeros),
        ];
        for (seed, &(b, cin, cout, f, t, kf, kt, stride, pad, mode)) in cases.iter().enumerate() {
            let p = random_params(seed as u64, cout, cin, kf, kt).with_stride(stride).with_padding(pad).with_mode(mode);
            let mut rng = init::rng(100 + seed as u64);
            let x = init::uniform([b, cin, f, t], 1.0, &mut rng).unwrap();
            let want = conv2d_oracle(&x, &p);
            let got64 = conv2d(&x, &p).unwrap();
            assert!(got64.max_abs_diff(&want).unwrap() < 1e-12);

            let p32 = p.cast::<f32>();
            let got32 = conv2d(&x.cast::<f32>(), &p32).unwrap().cast::<f64>();
            assert!(got32.max_abs_diff(&want).unwrap() < 1e-5, "case {seed}");
        }
    }

    #[test]
    fn shape_errors() {
        let p = random_params(1, 2, 3, 3, 3);
        let x = Tensor::<f64>::zeros([1, 2, 5, 5]).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
        let x = Tensor::<f64>::zeros([1, 3, 5]).unwrap();
        assert!(conv2d(&x, &p).is_err());
        let p = random_params(1, 2, 3, 5, 5).with_padding((0, 0));
        assert!(conv2d(&Tensor::<f64>::zeros([1, 3, 3, 3]).unwrap(), &p).is_err());
    }

    #[test]
    fn linearity() {
        let mut p = random_params(4, 3, 2, 3, 3);
        p.bias = Tensor::zeros([3]).unwrap();
        let p = p.cast::<f32>();
        let mut rng = init::rng(5);
        let a = init::uniform::<f32>([2, 2, 6, 9], 1.0, &mut rng).unwrap();
        let z = init::uniform::<f32>([2, 2, 6, 9], 1.0, &mut rng).unwrap();
        let (ca, cz) = (1.5f32, -0.75f32);
        let lhs = conv2d(&a.zip_map(&z, |u, v| ca * u + cz * v).unwrap(), &p).unwrap();
        let rhs = conv2d(&a, &p).unwrap().zip_map(&conv2d(&z, &p).unwrap(), |u, v| ca * u + cz * v).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn circular_conv_commutes_with_shifts() {
        let p = random_params(8, 2, 2, 3, 3).with_mode(PaddingMode::Circular);
        let mut rng = init::rng(9);
        let x = init::uniform::<f64>([1, 2, 7, 6], 1.0, &mut rng).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for axis in [2, 3] {
            for s in 0..6 {
                let lhs = conv2d(&x.circular_shift(axis, s).unwrap(), &p).unwrap();
                let rhs = y.circular_shift(axis, s).unwrap();
                assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-6);
            }
        }
    }

    /// Central differences on `sum(g * conv2d(x))`.
    #[test]
    fn backward_matches_finite_differences() {
        for (mode, stride) in
            [(PaddingMode::Zeros, (1, 1)), (PaddingMode::Circular, (1, 1)), (PaddingMode::Zeros, (2, 2))]
        {
            let p = random_params(12, 3, 2, 3, 3).with_mode(mode).with_stride(stride);
            let mut rng = init::rng(13);
            let x = init::uniform::<f64>([2, 2, 5, 6], 1.0, &mut rng).unwrap();
            let y = conv2d(&x, &p).unwrap();
            let g = init::uniform::<f64>(y.shape().to_vec(), 1.0, &mut rng).unwrap();
            let grads = conv2d_backward(&x, &p, &g).unwrap();
            let loss = |x: &Tensor<f64>, p: &Conv2dParams<f64>| -> f64 {
                conv2d(x, p).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
                assert!((num - grads.d_x.data()[i]).abs() < 1e-7);
            }
            for i in 0..p.weight.len() {
                let mut pp = p.clone();
                pp.weight.data_mut()[i] += h;
                let mut pm = p.clone();
                pm.weight.data_mut()[i] -= h;
                let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
                assert!((num - grads.d_weight.data()[i]).abs() < 1e-7);
            }
            let bias_sum: Vec<f64> = (0..3)
                .map(|co| {
                    let mut s = 0.0;
                    for b in 0..2 {
                        for fo in 0..y.shape()[2] {
                            for to in 0..y.shape()[3] {
                                s += g.get(&[b, co, fo, to]).unwrap();
                            }
                        }
                    }
                    s
                })
                .collect();
            for (a, b) in grads.d_bias.data().iter().zip(&bias_sum) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_identity_and_edges() {
        let x = Tensor::<f64>::from_fn([1, 2, 5], |i| (i[1] * 5 + i[2]) as f64).unwrap();
        let w = Tensor::from_fn([2, 2, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 }).unwrap();
        let p = Conv1dParams::new(w, None).unwrap();
        assert_eq!(conv1d_freq(&x, &p).unwrap(), x);

        // averaging kernel on a constant: interior 1, edges 2/3 from zero padding
        let x = Tensor::<f64>::full([1, 1, 5], 1.0).unwrap();
        let p = Conv1dParams::new(Tensor::full([1, 1, 3], 1.0 / 3.0).unwrap(), None).unwrap();
        let y = conv1d_freq(&x, &p).unwrap();
        let expect = [2.0 / 3.0, 1.0, 1.0, 1.0, 2.0 / 3.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let even = Conv1dParams::new(Tensor::<f64>::zeros([1, 1, 2]).unwrap(), None);
        assert!(matches!(even, Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_equals_conv2d_with_column_kernel() {
        let mut rng = init::rng(21);
        let x = init::uniform::<f64>([2, 3, 9], 1.0, &mut rng).unwrap();
        let w = init::uniform::<f64>([4, 3, 3], 1.0, &mut rng).unwrap();
        let b = init::uniform::<f64>([4], 1.0, &mut rng).unwrap();
        let y1 = conv1d_freq(&x, &Conv1dParams::new(w.clone(), Some(b.clone())).unwrap()).unwrap();
        let p2 = Conv2dParams::same(w.reshape([4, 3, 3, 1]).unwrap(), b).unwrap();
        let y2 = conv2d(&x.reshape([2, 3, 9, 1]).unwrap(), &p2).unwrap().reshape([2, 4, 9]).unwrap();
        assert!(y1.max_abs_diff(&y2).unwrap() < 1e-6);
    }

    #[test]
    fn conv1d_backward_matches_finite_differences() {
        let mut rng = init::rng(31);
        let x = init::uniform::<f64>([2, 3, 6], 1.0, &mut rng).unwrap();
        let p = Conv1dParams::new(
            init::uniform([2, 3, 3], 1.0, &mut rng).unwrap(),
            Some(init::uniform([2], 1.0, &mut rng).unwrap()),
        )
        .unwrap();
        let g = init::uniform::<f64>([2, 2, 6], 1.0, &mut rng).unwrap();
        let grads = conv1d_freq_backward(&x, &p, &g).unwrap();
        let loss = |x: &Tensor<f64>, p: &Conv1dParams<f64>| -> f64 {
            conv1d_freq(x, p).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            assert!((num - grads.d_x.data()[i]).abs() < 1e-8);
        }
        for i in 0..p.weight.len() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.weight.data_mut()[i] += h;
            pm.weight.data_mut()[i] -= h;
            let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert!((num - grads.d_weight.data()[i]).abs() < 1e-8);
        }
        let db = grads.d_bias.unwrap();
        assert!(
            (db.data()[0]
                - g.index0(0).unwrap().index0(0).unwrap().sum()
                - g.index0(1).unwrap().index0(0).unwrap().sum())
            .abs()
                < 1e-12
        );
    }
}
