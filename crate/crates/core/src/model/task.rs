//! Synthetic band-location task: a 3x3 burst in either the lower or the upper
//! half of the frequency axis, labelled by which half it sits in.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Real, Tensor};

use super::{toy_train, Model, ToyDataset, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BandTask {
    pub freq: usize,
    pub frames: usize,
    pub samples: usize,
    /// Half-width of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BandTask {
    fn default() -> Self {
        Self { freq: 32, frames: 12, samples: 64, noise: 0.05, seed: 42 }
    }
}

const BURST: usize = 3;

/// Builds the dataset and the clip labels (0 = lower half, 1 = upper half).
/// Frame targets mark the burst frames of the labelled class.
pub fn band_task<T: Real>(task: &BandTask) -> Result<(ToyDataset<T>, Vec<usize>)> {
    if task.freq < 2 * BURST || !task.freq.is_multiple_of(2) || task.frames < BURST || task.samples == 0 {
        return Err(Error::InvalidArgument(format!(
            "band task needs an even frequency axis of at least {} rows, {BURST}+ frames and 1+ samples",
            2 * BURST
        )));
    }
    let mut rng = init::rng(task.seed);
    let half = task.freq / 2;
    let (f, t) = (task.freq, task.frames);
    let mut inputs = Vec::with_capacity(task.samples * f * t);
    let mut targets = vec![T::zero(); task.samples * 2 * t];
    let mut labels = Vec::with_capacity(task.samples);
    for n in 0..task.samples {
        let label = n % 2;
        let f0 = label * half + rng.random_range(0..=half - BURST);
        let t0 = rng.random_range(0..=t - BURST);
        for fi in 0..f {
            for ti in 0..t {
                let inside = (f0..f0 + BURST).contains(&fi) && (t0..t0 + BURST).contains(&ti);
                let noise = if task.noise > 0.0 { rng.random_range(-task.noise..task.noise) } else { 0.0 };
                inputs.push(T::lit(if inside { 1.0 } else { 0.0 } + noise));
            }
        }
        for ti in t0..t0 + BURST {
            targets[(n * 2 + label) * t + ti] = T::one();
        }
        labels.push(label);
    }
    Ok((
        ToyDataset {
            inputs: Tensor::new([task.samples, 1, f, t], inputs)?,
            targets: Tensor::new([task.samples, 2, t], targets)?,
        },
        labels,
    ))
}

/// Fraction of clips whose highest-scoring class (max over frames) matches the label.
pub fn band_accuracy<T: Real>(model: &Model<T>, inputs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let scores = model.forward(inputs)?;
    let [n, classes, frames] = scores.dims::<3>("scores")?;
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!("{} labels for {n} clips", labels.len())));
    }
    let d = scores.data();
    let correct = (0..n)
        .filter(|&i| {
            let peak = |c: usize| {
                d[(i * classes + c) * frames..(i * classes + c + 1) * frames]
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), T::max)
            };
            let best = (0..classes).fold(0, |b, c| if peak(c) > peak(b) { c } else { b });
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandReport {
    pub losses: Vec<f64>,
    /// `(steps so far, training accuracy)` after every evaluation chunk.
    pub accuracy_trace: Vec<(usize, f64)>,
    /// First evaluated step count at which accuracy reached the target.
    pub reached_at: Option<usize>,
}

impl BandReport {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy_trace.last().map_or(0.0, |&(_, a)| a)
    }
}

/// Trains on the band task in chunks of `eval_every` steps, measuring
/// training accuracy after each chunk. Stops once `target` is reached or
/// `cfg.steps` are spent. Chunk `i` shuffles with seed `cfg.seed + i`.
pub fn train_band<T: Real>(
    model: &mut Model<T>,
    data: &ToyDataset<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    eval_every: usize,
    target: f64,
) -> Result<BandReport> {
    if eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be at least 1".into()));
    }
    let mut report = BandReport { losses: Vec::new(), accuracy_trace: Vec::new(), reached_at: None };
    let mut done = 0;
    let mut chunk = 0;
    while done < cfg.steps {
        let steps = eval_every.min(cfg.steps - done);
        let part = TrainConfig { steps, seed: cfg.seed.wrapping_add(chunk), ..cfg.clone() };
        report.losses.extend(toy_train(model, data, &part)?);
        done += steps;
        chunk += 1;
        let acc = band_accuracy(model, &data.inputs, labels)?;
        report.accuracy_trace.push((done, acc));
        if acc >= target {
            report.reached_at = Some(done);
            break;
        }
    }
    Ok(report)
}
