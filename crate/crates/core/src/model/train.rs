//! Plain SGD on frame-level binary cross-entropy.

use rand::seq::SliceRandom;

use crate::dynamic::{fdy_backward, fdy_forward_train, FdyCache};
use crate::error::{Error, Result};
use crate::init;
use crate::nn::{
    avgpool2d, avgpool2d_backward, batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, linear,
    linear_backward, relu, relu_backward, sigmoid, sigmoid_backward, BnCache, BnMode,
};
use crate::tensor::{Real, Tensor};

use super::{map_to_seq, seq_to_map, seq_to_scores, Layer, Model};

/// Inputs `[N, 1, F, T]` with frame targets `[N, classes, T_out]` in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct ToyDataset<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Real> ToyDataset<T> {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.inputs.select0(idx)?, self.targets.select0(idx)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// `None` trains on the full dataset every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

enum Cache<T> {
    Conv2d(Tensor<T>),
    Fdy(Box<FdyCache<T>>),
    BatchNorm(BnCache<T>),
    Relu(Tensor<T>),
    AvgPool(Vec<usize>),
    Linear { x: Tensor<T>, map: Option<(usize, usize)> },
    Sigmoid(Tensor<T>),
}

fn unsupported<T: Real>(i: usize, layer: &Layer<T>) -> Error {
    Error::Unsupported(format!("layer {i} ({}) has no backward pass", layer.kind().name()))
}

/// Checks that every layer can be trained and that the network ends in a sigmoid.
fn check_trainable<T: Real>(model: &Model<T>) -> Result<()> {
    for (i, layer) in model.layers.iter().enumerate() {
        if matches!(layer, Layer::Gru(_) | Layer::Dy(_) | Layer::Tdy(_)) {
            return Err(unsupported(i, layer));
        }
    }
    match model.layers.last() {
        Some(Layer::Sigmoid) => Ok(()),
        _ => Err(Error::Unsupported("training needs a terminal sigmoid".into())),
    }
}

/// Train-mode forward up to (not including) the terminal sigmoid. Updates
/// batch-norm running statistics.
fn forward_logits<T: Real>(model: &mut Model<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
    let body = model.layers.len() - 1;
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(body);
    for (i, layer) in model.layers[..body].iter_mut().enumerate() {
        let wrap = |e: Error| Error::Layer { layer: i, message: e.to_string() };
        let (next, cache) = match layer {
            Layer::Conv2d(p) => (conv2d(&h, p).map_err(wrap)?, Cache::Conv2d(h)),
            Layer::Fdy(l) => {
                let (y, c) = fdy_forward_train(&h, l).map_err(wrap)?;
                if let Some(a) = &c.attn {
                    l.attn.bn.update_running(&a.bn);
                }
                (y, Cache::Fdy(Box::new(c)))
            }
            Layer::BatchNorm(p) => {
                let (y, c) = batchnorm_forward(&h, p).map_err(wrap)?;
                p.update_running(&c);
                (y, Cache::BatchNorm(c))
            }
            Layer::Relu => (relu(&h), Cache::Relu(h)),
            Layer::AvgPool(w) => (avgpool2d(&h, *w).map_err(wrap)?, Cache::AvgPool(h.shape().to_vec())),
            Layer::Linear(p) => {
                let (seq, map) =
                    if h.rank() == 4 { (map_to_seq(&h)?, Some((h.shape()[1], h.shape()[2]))) } else { (h, None) };
                (linear(&seq, p).map_err(wrap)?, Cache::Linear { x: seq, map })
            }
            Layer::Sigmoid => {
                let y = sigmoid(&h);
                (y.clone(), Cache::Sigmoid(y))
            }
            Layer::Gru(_) | Layer::Dy(_) | Layer::Tdy(_) => return Err(unsupported(i, layer)),
        };
        h = next;
        caches.push(cache);
    }
    Ok((h, caches))
}

fn sgd<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) {
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
}

fn backward_and_step<T: Real>(model: &mut Model<T>, caches: Vec<Cache<T>>, d_logits: Tensor<T>, lr: T) -> Result<()> {
    let mut g = d_logits;
    for (i, cache) in caches.into_iter().enumerate().rev() {
        let layer = &mut model.layers[i];
        let wrap = |e: Error| Error::Layer { layer: i, message: e.to_string() };
        g = match (layer, cache) {
            (Layer::Conv2d(p), Cache::Conv2d(x)) => {
                let gr = conv2d_backward(&x, p, &g).map_err(wrap)?;
                sgd(&mut p.weight, &gr.d_weight, lr);
                sgd(&mut p.bias, &gr.d_bias, lr);
                gr.d_x
            }
            (Layer::Fdy(l), Cache::Fdy(c)) => {
                let gr = fdy_backward(l, &c, &g).map_err(wrap)?;
                sgd(&mut l.bank.weights, &gr.d_weights, lr);
                sgd(&mut l.bank.biases, &gr.d_biases, lr);
                if let Some(a) = gr.d_attn {
                    sgd(&mut l.attn.conv_a.weight, &a.conv_a_weight, lr);
                    sgd(&mut l.attn.bn.gamma, &a.bn_gamma, lr);
                    sgd(&mut l.attn.bn.beta, &a.bn_beta, lr);
                    sgd(&mut l.attn.conv_b.weight, &a.conv_b_weight, lr);
                    if let Some(b) = l.attn.conv_b.bias.as_mut() {
                        sgd(b, &a.conv_b_bias, lr);
                    }
                }
                gr.d_x
            }
            (Layer::BatchNorm(p), Cache::BatchNorm(c)) => {
                let gr = batchnorm_backward(p, &c, &g).map_err(wrap)?;
                sgd(&mut p.gamma, &gr.d_gamma, lr);
                sgd(&mut p.beta, &gr.d_beta, lr);
                gr.d_x
            }
            (Layer::Relu, Cache::Relu(x)) => relu_backward(&x, &g).map_err(wrap)?,
            (Layer::AvgPool(w), Cache::AvgPool(shape)) => avgpool2d_backward(&shape, *w, &g).map_err(wrap)?,
            (Layer::Linear(p), Cache::Linear { x, map }) => {
                let gr = linear_backward(&x, p, &g).map_err(wrap)?;
                sgd(&mut p.weight, &gr.d_weight, lr);
                sgd(&mut p.bias, &gr.d_bias, lr);
                match map {
                    Some((c, f)) => seq_to_map(&gr.d_x, c, f)?,
                    None => gr.d_x,
                }
            }
            (Layer::Sigmoid, Cache::Sigmoid(y)) => sigmoid_backward(&y, &g).map_err(wrap)?,
            (layer, _) => {
                return Err(Error::Contract(format!("cache for layer {i} does not match {:?}", layer.kind())))
            }
        };
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets` (both
/// `[B, classes, T]`) and its gradient with respect to the logits.
pub(crate) fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "model emits {:?} scores but targets are {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    for (&z, &y) in logits.data().iter().zip(targets.data()) {
        let (z, y) = (z.to_f64().unwrap(), y.to_f64().unwrap());
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    let inv = T::lit(1.0 / n);
    let grad = logits.zip_map(targets, |z, y| (T::one() / (T::one() + (-z).exp()) - y) * inv)?;
    Ok((loss / n, grad))
}

/// `[B, D, T] -> [B, T, D]`
fn scores_to_seq<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, d, t] = x.dims::<3>("scores")?;
    Tensor::from_fn([b, t, d], |i| x.data()[(i[0] * d + i[2]) * t + i[1]])
}

/// Runs `cfg.steps` SGD steps and returns the loss seen at each step (before
/// its update). Batch norms train on batch statistics and are left in eval
/// mode afterwards.
pub fn toy_train<T: Real>(model: &mut Model<T>, data: &ToyDataset<T>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    check_trainable(model)?;
    if data.is_empty() || data.targets.shape()[0] != data.len() {
        return Err(Error::InvalidArgument("dataset needs matching, non-empty inputs and targets".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be finite and non-negative, got {}", cfg.lr)));
    }
    let batch = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut rng = init::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let lr = T::lit(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);

    model.set_bn_mode(BnMode::Train);
    let result = (|| {
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = if batch == data.len() {
                order.clone()
            } else {
                if cursor + batch > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += batch;
                order[cursor - batch..cursor].to_vec()
            };
            let (x, y) = data.batch(&idx)?;
            let (h, caches) = forward_logits(model, &x)?;
            let logits = seq_to_scores(&h)?;
            let (loss, d_scores) = bce_with_logits(&logits, &y)?;
            losses.push(loss);
            backward_and_step(model, caches, scores_to_seq(&d_scores)?, lr)?;
        }
        Ok(())
    })();
    model.set_bn_mode(BnMode::Eval);
    result.map(|()| losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LayerSpec, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig::new(
            2,
            8,
            vec![
                LayerSpec::Conv2d { out: 3, kernel: (3, 3), stride: (1, 1) },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Fdy { out: 4, kernel: (3, 3), time_stride: 1 },
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: (2, 1) },
                LayerSpec::Linear { out: 2 },
                LayerSpec::Sigmoid,
            ],
        )
    }

    fn data(n: usize, seed: u64) -> ToyDataset<f64> {
        let mut rng = init::rng(seed);
        ToyDataset {
            inputs: init::uniform([n, 1, 8, 6], 1.0, &mut rng).unwrap(),
            targets: Tensor::from_fn([n, 2, 6], |i| ((i[0] + i[1] + i[2]) % 2) as f64).unwrap(),
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut model = build_model::<f64>(&tiny(), 1).unwrap();
        let cfg = TrainConfig { steps: 5, lr: 0.0, batch_size: None, seed: 1 };
        let losses = toy_train(&mut model, &data(3, 2), &cfg).unwrap();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
    }

    #[test]
    fn overfits_a_single_example() {
        let mut model = build_model::<f64>(&tiny(), 3).unwrap();
        let cfg = TrainConfig { steps: 2000, lr: 0.5, batch_size: None, seed: 1 };
        let losses = toy_train(&mut model, &data(1, 4), &cfg).unwrap();
        assert!(losses.iter().any(|&l| l < 0.01), "final loss {}", losses.last().unwrap());
    }

    #[test]
    fn seed_determinism() {
        let cfg = TrainConfig { steps: 10, lr: 0.1, batch_size: Some(2), seed: 5 };
        let run = || {
            let mut model = build_model::<f32>(&tiny(), 1).unwrap();
            let d = data(5, 2);
            let d = ToyDataset { inputs: d.inputs.cast(), targets: d.targets.cast() };
            toy_train(&mut model, &d, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gru_is_rejected() {
        let cfg = ModelConfig::new(
            2,
            4,
            vec![
                LayerSpec::Conv2d { out: 2, kernel: (3, 3), stride: (1, 1) },
                LayerSpec::Gru { hidden: 2 },
                LayerSpec::Linear { out: 2 },
                LayerSpec::Sigmoid,
            ],
        );
        let mut model = build_model::<f64>(&cfg, 1).unwrap();
        let d = ToyDataset { inputs: Tensor::zeros([1, 1, 4, 3]).unwrap(), targets: Tensor::zeros([1, 2, 3]).unwrap() };
        let cfg = TrainConfig { steps: 1, lr: 0.1, batch_size: None, seed: 1 };
        assert!(matches!(toy_train(&mut model, &d, &cfg), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = init::rng(8);
        let z = init::uniform::<f64>([2, 3, 4], 3.0, &mut rng).unwrap();
        let y = Tensor::from_fn([2, 3, 4], |i| (i[2] % 2) as f64).unwrap();
        let (_, g) = bce_with_logits(&z, &y).unwrap();
        for k in 0..z.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.data_mut()[k] += 1e-6;
            zm.data_mut()[k] -= 1e-6;
            let num = (bce_with_logits(&zp, &y).unwrap().0 - bce_with_logits(&zm, &y).unwrap().0) / 2e-6;
            assert!((num - g.data()[k]).abs() < 1e-8);
        }
    }
}
