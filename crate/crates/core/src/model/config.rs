//! Declarative layer stacks in a flat `key=value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! class_count=2
//! input_freq=32
//! dynamic_k=4
//! temperature=31
//! layer=conv2d out=8 kernel=3x3
//! layer=batchnorm
//! layer=relu
//! layer=fdy out=16 kernel=3x3
//! layer=avgpool window=32x1
//! layer=linear out=2
//! layer=sigmoid
//! ```

use std::fmt::Write as _;

use crate::dynamic::{AttentionInit, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Fdy,
    Dy,
    Tdy,
    BatchNorm,
    Relu,
    AvgPool,
    Gru,
    Linear,
    Sigmoid,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Fdy => "fdy",
            LayerKind::Dy => "dy",
            LayerKind::Tdy => "tdy",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Gru => "gru",
            LayerKind::Linear => "linear",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            LayerKind::Conv2d,
            LayerKind::Fdy,
            LayerKind::Dy,
            LayerKind::Tdy,
            LayerKind::BatchNorm,
            LayerKind::Relu,
            LayerKind::AvgPool,
            LayerKind::Gru,
            LayerKind::Linear,
            LayerKind::Sigmoid,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Fdy | LayerKind::Dy | LayerKind::Tdy)
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, LayerKind::Fdy | LayerKind::Dy | LayerKind::Tdy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d { out: usize, kernel: (usize, usize), stride: (usize, usize) },
    Fdy { out: usize, kernel: (usize, usize), time_stride: usize },
    Dy { out: usize, kernel: (usize, usize), time_stride: usize },
    Tdy { out: usize, kernel: (usize, usize) },
    BatchNorm,
    Relu,
    AvgPool { window: (usize, usize) },
    Gru { hidden: usize },
    Linear { out: usize },
    Sigmoid,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Fdy { .. } => LayerKind::Fdy,
            LayerSpec::Dy { .. } => LayerKind::Dy,
            LayerSpec::Tdy { .. } => LayerKind::Tdy,
            LayerSpec::BatchNorm => LayerKind::BatchNorm,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::AvgPool { .. } => LayerKind::AvgPool,
            LayerSpec::Gru { .. } => LayerKind::Gru,
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
        }
    }
}

/// Activation layout between layers: a feature map `[B, C, F, T]` or a
/// frame sequence `[B, T, D]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Map { channels: usize, freq: usize },
    Seq { features: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    pub input_freq: usize,
    pub dynamic_k: usize,
    pub temperature: f64,
    pub attention_kernel: usize,
    pub attention_init: AttentionInit,
}

impl ModelConfig {
    pub fn new(class_count: usize, input_freq: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            layers,
            class_count,
            input_freq,
            dynamic_k: 4,
            temperature: DEFAULT_TEMPERATURE,
            attention_kernel: 3,
            attention_init: AttentionInit::UniformStart,
        }
    }

    /// Checks the first-convolution rule and shape chaining; returns the
    /// activation layout after every layer.
    pub fn validate(&self) -> Result<Vec<Activation>> {
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if self.input_freq == 0 {
            return Err(Error::Config("input_freq must be at least 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let has_dynamic = self.layers.iter().any(|l| l.kind().is_dynamic());
        if has_dynamic {
            if self.dynamic_k < 2 {
                return Err(Error::Config(format!("dynamic_k must be at least 2, got {}", self.dynamic_k)));
            }
            if !(self.temperature > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
            }
            if self.attention_kernel.is_multiple_of(2) {
                return Err(Error::Config(format!("attention_kernel must be odd, got {}", self.attention_kernel)));
            }
            if let Some(i) = self.layers.iter().position(|l| l.kind().is_conv()) {
                if self.layers[i].kind() != LayerKind::Conv2d {
                    return Err(Error::Layer {
                        layer: i,
                        message: format!(
                            "the first convolution must be a static conv2d, found {}",
                            self.layers[i].kind().name()
                        ),
                    });
                }
            }
        }

        let mut act = Activation::Map { channels: 1, freq: self.input_freq };
        let mut trace = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            act = step(act, layer).map_err(|message| Error::Layer { layer: i, message })?;
            trace.push(act);
        }
        let last = self.layers.len() - 1;
        if self.layers[last] != LayerSpec::Sigmoid {
            return Err(Error::Layer { layer: last, message: "the last layer must be sigmoid".into() });
        }
        if act != (Activation::Seq { features: self.class_count }) {
            return Err(Error::Layer {
                layer: last,
                message: format!("network ends in {act:?}, expected {} per-frame class scores", self.class_count),
            });
        }
        Ok(trace)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::new(0, 0, Vec::new());
        let mut seen_classes = false;
        let mut seen_freq = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: n + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "class_count" => {
                    cfg.class_count = parse_num(value).map_err(err)?;
                    seen_classes = true;
                }
                "input_freq" => {
                    cfg.input_freq = parse_num(value).map_err(err)?;
                    seen_freq = true;
                }
                "dynamic_k" => cfg.dynamic_k = parse_num(value).map_err(err)?,
                "temperature" => cfg.temperature = parse_num(value).map_err(err)?,
                "attention_kernel" => cfg.attention_kernel = parse_num(value).map_err(err)?,
                "attention_init" => {
                    cfg.attention_init = match value {
                        "uniform" => AttentionInit::UniformStart,
                        "random" => AttentionInit::Random,
                        other => return Err(err(format!("attention_init must be uniform or random, got `{other}`"))),
                    }
                }
                "layer" => cfg.layers.push(parse_layer(value).map_err(err)?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        if !seen_classes || !seen_freq {
            return Err(Error::Config("config must set class_count and input_freq".into()));
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class_count={}", self.class_count);
        let _ = writeln!(s, "input_freq={}", self.input_freq);
        let _ = writeln!(s, "dynamic_k={}", self.dynamic_k);
        let _ = writeln!(s, "temperature={}", self.temperature);
        let _ = writeln!(s, "attention_kernel={}", self.attention_kernel);
        let init = match self.attention_init {
            AttentionInit::UniformStart => "uniform",
            AttentionInit::Random => "random",
        };
        let _ = writeln!(s, "attention_init={init}");
        for layer in &self.layers {
            let _ = writeln!(s, "layer={}", layer_text(layer));
        }
        s
    }

    /// Total time downsampling factor of the convolution strides and pools.
    pub fn time_reduction(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { stride, .. } => stride.1,
                LayerSpec::Fdy { time_stride, .. } | LayerSpec::Dy { time_stride, .. } => *time_stride,
                LayerSpec::AvgPool { window } => window.1,
                _ => 1,
            })
            .product()
    }
}

fn step(act: Activation, layer: &LayerSpec) -> std::result::Result<Activation, String> {
    let map = |what: &str| match act {
        Activation::Map { channels, freq } => Ok((channels, freq)),
        Activation::Seq { .. } => {
            Err(format!("{what} needs a [B, C, F, T] feature map, but the input is a frame sequence"))
        }
    };
    let kernel_ok = |kernel: (usize, usize)| {
        if kernel.0 == 0 || kernel.1 == 0 || kernel.0.is_multiple_of(2) || kernel.1.is_multiple_of(2) {
            Err(format!("kernel {}x{} must have odd extents", kernel.0, kernel.1))
        } else {
            Ok(())
        }
    };
    let positive = |v: usize, what: &str| if v == 0 { Err(format!("{what} must be at least 1")) } else { Ok(()) };
    Ok(match *layer {
        LayerSpec::Conv2d { out, kernel, stride } => {
            let (_, freq) = map("conv2d")?;
            kernel_ok(kernel)?;
            positive(out, "out")?;
            positive(stride.0, "frequency stride")?;
            positive(stride.1, "time stride")?;
            Activation::Map { channels: out, freq: (freq - 1) / stride.0 + 1 }
        }
        LayerSpec::Fdy { out, kernel, time_stride } | LayerSpec::Dy { out, kernel, time_stride } => {
            let (_, freq) = map(layer.kind().name())?;
            kernel_ok(kernel)?;
            positive(out, "out")?;
            positive(time_stride, "time stride")?;
            Activation::Map { channels: out, freq }
        }
        LayerSpec::Tdy { out, kernel } => {
            let (_, freq) = map("tdy")?;
            kernel_ok(kernel)?;
            positive(out, "out")?;
            Activation::Map { channels: out, freq }
        }
        LayerSpec::BatchNorm => {
            map("batchnorm")?;
            act
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => act,
        LayerSpec::AvgPool { window } => {
            let (channels, freq) = map("avgpool")?;
            positive(window.0, "window")?;
            positive(window.1, "window")?;
            if freq % window.0 != 0 {
                return Err(format!("pool window {} does not divide {freq} frequency rows", window.0));
            }
            Activation::Map { channels, freq: freq / window.0 }
        }
        LayerSpec::Gru { hidden } => {
            positive(hidden, "hidden")?;
            Activation::Seq { features: 2 * hidden }
        }
        LayerSpec::Linear { out } => {
            positive(out, "out")?;
            Activation::Seq { features: out }
        }
    })
}

fn parse_num<N: std::str::FromStr>(s: &str) -> std::result::Result<N, String>
where
    N::Err: std::fmt::Display,
{
    s.parse().map_err(|e| format!("bad number `{s}`: {e}"))
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected AxB, got `{s}`"))?;
    Ok((parse_num(a)?, parse_num(b)?))
}

fn parse_layer(value: &str) -> std::result::Result<LayerSpec, String> {
    let mut parts = value.split_whitespace();
    let name = parts.next().ok_or("empty layer description")?;
    let kind = LayerKind::parse(name).ok_or_else(|| format!("unknown layer kind `{name}`"))?;
    let mut opts = std::collections::BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("expected option=value, got `{p}`"))?;
        if opts.insert(k, v).is_some() {
            return Err(format!("option `{k}` given twice"));
        }
    }
    let mut take = |k: &str| opts.remove(k);
    let out = |v: Option<&str>| v.ok_or("missing `out=`".to_string()).and_then(parse_num::<usize>);
    let kernel = |v: Option<&str>| v.map_or(Ok((3, 3)), parse_pair);
    let spec = match kind {
        LayerKind::Conv2d => LayerSpec::Conv2d {
            out: out(take("out"))?,
            kernel: kernel(take("kernel"))?,
            stride: take("stride").map_or(Ok((1, 1)), parse_pair)?,
        },
        LayerKind::Fdy => LayerSpec::Fdy {
            out: out(take("out"))?,
            kernel: kernel(take("kernel"))?,
            time_stride: take("time_stride").map_or(Ok(1), parse_num)?,
        },
        LayerKind::Dy => LayerSpec::Dy {
            out: out(take("out"))?,
            kernel: kernel(take("kernel"))?,
            time_stride: take("time_stride").map_or(Ok(1), parse_num)?,
        },
        LayerKind::Tdy => LayerSpec::Tdy { out: out(take("out"))?, kernel: kernel(take("kernel"))? },
        LayerKind::BatchNorm => LayerSpec::BatchNorm,
        LayerKind::Relu => LayerSpec::Relu,
        LayerKind::Sigmoid => LayerSpec::Sigmoid,
        LayerKind::AvgPool => LayerSpec::AvgPool { window: parse_pair(take("window").ok_or("missing `window=`")?)? },
        LayerKind::Gru => {
            LayerSpec::Gru { hidden: take("hidden").ok_or("missing `hidden=`".to_string()).and_then(parse_num)? }
        }
        LayerKind::Linear => LayerSpec::Linear { out: out(take("out"))? },
    };
    if let Some(k) = opts.keys().next() {
        return Err(format!("unknown option `{k}` for {name}"));
    }
    Ok(spec)
}

fn layer_text(layer: &LayerSpec) -> String {
    match *layer {
        LayerSpec::Conv2d { out, kernel, stride } => {
            format!("conv2d out={out} kernel={}x{} stride={}x{}", kernel.0, kernel.1, stride.0, stride.1)
        }
        LayerSpec::Fdy { out, kernel, time_stride } => {
            format!("fdy out={out} kernel={}x{} time_stride={time_stride}", kernel.0, kernel.1)
        }
        LayerSpec::Dy { out, kernel, time_stride } => {
            format!("dy out={out} kernel={}x{} time_stride={time_stride}", kernel.0, kernel.1)
        }
        LayerSpec::Tdy { out, kernel } => format!("tdy out={out} kernel={}x{}", kernel.0, kernel.1),
        LayerSpec::BatchNorm => "batchnorm".into(),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::AvgPool { window } => format!("avgpool window={}x{}", window.0, window.1),
        LayerSpec::Gru { hidden } => format!("gru hidden={hidden}"),
        LayerSpec::Linear { out } => format!("linear out={out}"),
        LayerSpec::Sigmoid => "sigmoid".into(),
    }
}

/// conv2d(1->16) -> [fdy(->32) -> bn -> relu -> avgpool(2,1)] x3 -> fdy(->64)
/// -> avgpool over the remaining rows -> linear -> sigmoid.
pub fn default_toy_config(class_count: usize, input_freq: usize) -> Result<ModelConfig> {
    if !input_freq.is_multiple_of(8) {
        return Err(Error::Config(format!("the toy model pools frequency by 8; {input_freq} rows do not divide")));
    }
    let mut layers = vec![LayerSpec::Conv2d { out: 16, kernel: (3, 3), stride: (1, 1) }];
    for _ in 0..3 {
        layers.extend([
            LayerSpec::Fdy { out: 32, kernel: (3, 3), time_stride: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::AvgPool { window: (2, 1) },
        ]);
    }
    layers.extend([
        LayerSpec::Fdy { out: 64, kernel: (3, 3), time_stride: 1 },
        LayerSpec::AvgPool { window: (input_freq / 8, 1) },
        LayerSpec::Linear { out: class_count },
        LayerSpec::Sigmoid,
    ]);
    let cfg = ModelConfig::new(class_count, input_freq, layers);
    cfg.validate()?;
    Ok(cfg)
}

/// The same pattern shrunk for CPU training: narrow channels, a batch norm
/// after the first conv and 32 input rows.
pub fn mini_toy_config(class_count: usize) -> ModelConfig {
    let mut layers = vec![
        LayerSpec::Conv2d { out: 8, kernel: (3, 3), stride: (1, 1) },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::AvgPool { window: (2, 1) },
    ];
    for _ in 0..2 {
        layers.extend([
            LayerSpec::Fdy { out: 16, kernel: (3, 3), time_stride: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::AvgPool { window: (2, 1) },
        ]);
    }
    layers.extend([
        LayerSpec::Fdy { out: 16, kernel: (3, 3), time_stride: 1 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::AvgPool { window: (4, 1) },
        LayerSpec::Linear { out: class_count },
        LayerSpec::Sigmoid,
    ]);
    ModelConfig::new(class_count, 32, layers)
}
