//! Configurable CNN/CRNN stacks built from static and dynamic layers, with
//! weight serialization and a small SGD trainer.

mod config;
mod io;
mod task;
mod train;

use crate::dynamic::{
    attention_weights, dy_forward, fdy_forward_efficient, tdy_forward, DyConvLayer, DynamicSpec, FdyConvLayer,
    TdyConvLayer,
};
use crate::error::{Error, Result};
use crate::init::{self, SeededRng};
use crate::nn::{
    avgpool2d, batchnorm_forward, conv2d, gru_forward, linear, relu, sigmoid, BatchNormParams, Conv2dParams,
    GruDirection, GruParams, LinearParams,
};
use crate::tensor::{Real, Tensor};

pub use config::{default_toy_config, mini_toy_config, Activation, LayerKind, LayerSpec, ModelConfig};
pub use io::{
    decode_entries, encode_entries, load_weights, read_tensor, save_weights, write_tensor, Entry, FORMAT_VERSION, MAGIC,
};
pub use task::{band_accuracy, band_task, train_band, BandReport, BandTask};
pub use train::{toy_train, ToyDataset, TrainConfig};

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2dParams<T>),
    Fdy(FdyConvLayer<T>),
    Dy(DyConvLayer<T>),
    Tdy(TdyConvLayer<T>),
    BatchNorm(BatchNormParams<T>),
    Relu,
    AvgPool((usize, usize)),
    Gru(GruParams<T>),
    Linear(LinearParams<T>),
    Sigmoid,
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Fdy(_) => LayerKind::Fdy,
            Layer::Dy(_) => LayerKind::Dy,
            Layer::Tdy(_) => LayerKind::Tdy,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::Gru(_) => LayerKind::Gru,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::Sigmoid => LayerKind::Sigmoid,
        }
    }
}

/// Lists `(suffix, tensor)` pairs of one layer. Expanded once for shared and
/// once for mutable borrows.
macro_rules! layer_tensors {
    ($layer:expr, $($r:tt)+) => {{
        let mut v = Vec::new();
        match $layer {
            Layer::Conv2d(p) => {
                v.push(("weight", $($r)+ p.weight));
                v.push(("bias", $($r)+ p.bias));
            }
            Layer::Fdy(FdyConvLayer { bank, attn, .. })
            | Layer::Dy(DyConvLayer { bank, attn, .. })
            | Layer::Tdy(TdyConvLayer { bank, attn, .. }) => {
                v.push(("weights", $($r)+ bank.weights));
                v.push(("biases", $($r)+ bank.biases));
                v.push(("attn.conv_a.weight", $($r)+ attn.conv_a.weight));
                v.push(("attn.bn.gamma", $($r)+ attn.bn.gamma));
                v.push(("attn.bn.beta", $($r)+ attn.bn.beta));
                v.push(("attn.bn.running_mean", $($r)+ attn.bn.running_mean));
                v.push(("attn.bn.running_var", $($r)+ attn.bn.running_var));
                v.push(("attn.conv_b.weight", $($r)+ attn.conv_b.weight));
                if let Some(b) = $($r)+ attn.conv_b.bias {
                    v.push(("attn.conv_b.bias", b));
                }
            }
            Layer::BatchNorm(p) => {
                v.push(("gamma", $($r)+ p.gamma));
                v.push(("beta", $($r)+ p.beta));
                v.push(("running_mean", $($r)+ p.running_mean));
                v.push(("running_var", $($r)+ p.running_var));
            }
            Layer::Gru(p) => {
                for (dir, d) in [("forward", $($r)+ p.forward), ("backward", $($r)+ p.backward)] {
                    let GruDirection { w_ih, w_hh, b_ih, b_hh } = d;
                    let names: [&'static str; 4] = if dir == "forward" {
                        ["forward.w_ih", "forward.w_hh", "forward.b_ih", "forward.b_hh"]
                    } else {
                        ["backward.w_ih", "backward.w_hh", "backward.b_ih", "backward.b_hh"]
                    };
                    v.push((names[0], w_ih));
                    v.push((names[1], w_hh));
                    v.push((names[2], b_ih));
                    v.push((names[3], b_hh));
                }
            }
            Layer::Linear(p) => {
                v.push(("weight", $($r)+ p.weight));
                v.push(("bias", $($r)+ p.bias));
            }
            Layer::Relu | Layer::AvgPool(_) | Layer::Sigmoid => {}
        }
        v
    }};
}

fn is_statistic(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
}

/// Builds a model with every parameter drawn from `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let trace = cfg.validate()?;
    let mut rng = init::rng(seed);
    let mut act = Activation::Map { channels: 1, freq: cfg.input_freq };
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, spec) in cfg.layers.iter().enumerate() {
        let layer =
            build_layer(cfg, spec, act, &mut rng).map_err(|e| Error::Layer { layer: i, message: e.to_string() })?;
        layers.push(layer);
        act = trace[i];
    }
    Ok(Model { config: cfg.clone(), layers })
}

fn build_layer<T: Real>(
    cfg: &ModelConfig,
    spec: &LayerSpec,
    input: Activation,
    rng: &mut SeededRng,
) -> Result<Layer<T>> {
    let channels = match input {
        Activation::Map { channels, .. } => channels,
        Activation::Seq { features } => features,
    };
    let features = match input {
        Activation::Map { channels, freq } => channels * freq,
        Activation::Seq { features } => features,
    };
    let dynamic = |out: usize, kernel: (usize, usize), time_stride: usize| DynamicSpec {
        kernel,
        time_stride,
        temperature: cfg.temperature,
        attention_kernel: cfg.attention_kernel,
        attention_init: cfg.attention_init,
        ..DynamicSpec::new(channels, out, cfg.dynamic_k)
    };
    Ok(match *spec {
        LayerSpec::Conv2d { out, kernel, stride } => {
            let fan_in = channels * kernel.0 * kernel.1;
            let w = init::kaiming_uniform([out, channels, kernel.0, kernel.1], fan_in, rng)?;
            let b = init::bias_uniform(out, fan_in, rng)?;
            Layer::Conv2d(Conv2dParams::same(w, b)?.with_stride(stride))
        }
        LayerSpec::Fdy { out, kernel, time_stride } => {
            Layer::Fdy(FdyConvLayer::random(&dynamic(out, kernel, time_stride), rng)?)
        }
        LayerSpec::Dy { out, kernel, time_stride } => {
            Layer::Dy(DyConvLayer::random(&dynamic(out, kernel, time_stride), rng)?)
        }
        LayerSpec::Tdy { out, kernel } => Layer::Tdy(TdyConvLayer::random(&dynamic(out, kernel, 1), rng)?),
        LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormParams::new(channels)?),
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::AvgPool { window } => Layer::AvgPool(window),
        LayerSpec::Gru { hidden } => Layer::Gru(GruParams {
            forward: GruDirection::random(features, hidden, rng)?,
            backward: GruDirection::random(features, hidden, rng)?,
        }),
        LayerSpec::Linear { out } => {
            let weight = init::kaiming_uniform([out, features], features, rng)?;
            Layer::Linear(LinearParams { weight, bias: init::bias_uniform(out, features, rng)? })
        }
        LayerSpec::Sigmoid => Layer::Sigmoid,
    })
}

/// `[B, C, F, T] -> [B, T, C * F]`
pub(crate) fn map_to_seq<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, f, t] = x.dims::<4>("feature map")?;
    Tensor::from_fn([b, t, c * f], |i| x.data()[((i[0] * c) * f + i[2]) * t + i[1]])
}

/// Inverse of [`map_to_seq`] for a gradient arriving in sequence layout.
pub(crate) fn seq_to_map<T: Real>(g: &Tensor<T>, c: usize, f: usize) -> Result<Tensor<T>> {
    let [b, t, _] = g.dims::<3>("frame sequence")?;
    Tensor::from_fn([b, c, f, t], |i| g.data()[(i[0] * t + i[3]) * c * f + i[1] * f + i[2]])
}

/// `[B, T, D] -> [B, D, T]`
pub(crate) fn seq_to_scores<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, t, d] = x.dims::<3>("frame sequence")?;
    Tensor::from_fn([b, d, t], |i| x.data()[(i[0] * t + i[2]) * d + i[1]])
}

impl<T: Real> Model<T> {
    /// Named parameters (including batch-norm running statistics) in a
    /// stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = layer.kind().name();
            for (suffix, t) in layer_tensors!(layer, &) {
                out.push((format!("layers.{i}.{kind}.{suffix}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind().name();
            for (suffix, t) in layer_tensors!(layer, &mut) {
                out.push((format!("layers.{i}.{kind}.{suffix}"), t));
            }
        }
        out
    }

    /// Count of trainable scalars; running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().filter(|(n, _)| !is_statistic(n)).map(|(_, t)| t.len()).sum()
    }

    /// Eval-mode inference: `[B, 1, F, T] -> [B, classes, T_out]` scores in `[0, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, f, _] = x.dims::<4>("model input")?;
        if c != 1 || f != self.config.input_freq {
            return Err(Error::Shape(format!(
                "model expects [B, 1, {}, T], got {:?}",
                self.config.input_freq,
                x.shape()
            )));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self
                .apply(layer, &h)
                .map_err(|e| Error::Layer { layer: i, message: format!("{}: {e}", layer.kind().name()) })?;
        }
        seq_to_scores(&h)
    }

    /// Attention weights of every FDY layer during an eval forward pass, as
    /// `(layer index, [B, K, F])` pairs in layer order.
    pub fn attention_maps(&self, x: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let mut maps = Vec::new();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |e: Error| Error::Layer { layer: i, message: format!("{}: {e}", layer.kind().name()) };
            if let Layer::Fdy(l) = layer {
                maps.push((i, attention_weights(&h, &l.attn).map_err(wrap)?));
            }
            h = self.apply(layer, &h).map_err(wrap)?;
        }
        Ok(maps)
    }

    fn apply(&self, layer: &Layer<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        let as_seq = |h: &Tensor<T>| if h.rank() == 4 { map_to_seq(h) } else { Ok(h.clone()) };
        Ok(match layer {
            Layer::Conv2d(p) => conv2d(h, p)?,
            Layer::Fdy(l) => fdy_forward_efficient(h, l)?,
            Layer::Dy(l) => dy_forward(h, l)?,
            Layer::Tdy(l) => tdy_forward(h, l)?,
            Layer::BatchNorm(p) => {
                let mut p = p.clone();
                p.mode = crate::nn::BnMode::Eval;
                batchnorm_forward(h, &p)?.0
            }
            Layer::Relu => relu(h),
            Layer::AvgPool(w) => avgpool2d(h, *w)?,
            Layer::Gru(p) => gru_forward(&as_seq(h)?, p)?,
            Layer::Linear(p) => linear(&as_seq(h)?, p)?,
            Layer::Sigmoid => sigmoid(h),
        })
    }

    /// Switches every batch norm, including those inside attention branches.
    pub fn set_bn_mode(&mut self, mode: crate::nn::BnMode) {
        for layer in &mut self.layers {
            match layer {
                Layer::BatchNorm(p) => p.mode = mode,
                Layer::Fdy(FdyConvLayer { attn, .. })
                | Layer::Dy(DyConvLayer { attn, .. })
                | Layer::Tdy(TdyConvLayer { attn, .. }) => attn.bn.mode = mode,
                _ => {}
            }
        }
    }

    /// Sets every tensor to zero and every batch-norm variance to one.
    pub fn zero_weights(&mut self) {
        for (name, t) in self.named_tensors_mut() {
            let v = if name.ends_with("running_var") { T::one() } else { T::zero() };
            t.data_mut().fill(v);
        }
    }
}
