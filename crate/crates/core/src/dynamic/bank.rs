use crate::error::{shape_err, Error, Result};
use crate::init::{self, SeededRng};
use crate::nn::{Conv2dParams, PaddingMode};
use crate::tensor::{Real, Tensor};

/// `K` convolution kernels of one shape with their biases.
#[derive(Debug, Clone)]
pub struct BasisKernelBank<T> {
    /// `[K, C_out, C_in, k_f, k_t]`
    pub weights: Tensor<T>,
    /// `[K, C_out]`
    pub biases: Tensor<T>,
}

impl<T: Real> BasisKernelBank<T> {
    pub fn new(weights: Tensor<T>, biases: Tensor<T>) -> Result<Self> {
        let bank = Self { weights, biases };
        bank.dims()?;
        Ok(bank)
    }

    /// Each kernel drawn independently with Kaiming-uniform fan-in scaling.
    pub fn random(
        basis: usize,
        c_out: usize,
        c_in: usize,
        kernel: (usize, usize),
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weights = init::kaiming_uniform([basis, c_out, c_in, kernel.0, kernel.1], fan_in, rng)?;
        let biases = init::uniform([basis, c_out], 1.0 / (fan_in as f64).sqrt(), rng)?;
        Self::new(weights, biases)
    }

    /// `(K, C_out, C_in, k_f, k_t)`
    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        let [k, cout, cin, kf, kt] = self.weights.dims::<5>("basis kernel bank")?;
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 basis kernels, got {k}")));
        }
        if self.biases.shape() != [k, cout] {
            return shape_err(format!("bank biases {:?} do not match [{k}, {cout}]", self.biases.shape()));
        }
        Ok((k, cout, cin, kf, kt))
    }

    pub fn basis(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weights.shape()[3], self.weights.shape()[4])
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Kernel `i` as a plain convolution.
    pub fn kernel(
        &self,
        i: usize,
        stride: (usize, usize),
        padding: (usize, usize),
        mode: PaddingMode,
    ) -> Result<Conv2dParams<T>> {
        let (_, cout, cin, kf, kt) = self.dims()?;
        let w = self.weights.index0(i)?.reshape([cout, cin, kf, kt])?;
        let b = self.biases.index0(i)?.reshape([cout])?;
        Ok(Conv2dParams::same(w, b)?.with_stride(stride).with_padding(padding).with_mode(mode))
    }

    /// All kernels as one convolution with `K * C_out` output channels, basis-major.
    pub fn stacked(
        &self,
        stride: (usize, usize),
        padding: (usize, usize),
        mode: PaddingMode,
    ) -> Result<Conv2dParams<T>> {
        let (k, cout, cin, kf, kt) = self.dims()?;
        let w = self.weights.clone().reshape([k * cout, cin, kf, kt])?;
        let b = self.biases.clone().reshape([k * cout])?;
        Ok(Conv2dParams::same(w, b)?.with_stride(stride).with_padding(padding).with_mode(mode))
    }
}
