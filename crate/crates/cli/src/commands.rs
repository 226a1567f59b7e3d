use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fdy::audio::{featurize as log_mel_features, load_wav, MelConfig};
use fdy::model::{
    band_task, build_model, default_toy_config, load_weights, mini_toy_config, read_tensor, save_weights, train_band,
    write_tensor, BandTask, Model, ModelConfig, TrainConfig,
};
use fdy::sed::{
    collar_f1, decode_events, intersection_f1, median_filter, read_events, write_events, Collars, F1Report, PostConfig,
};
use fdy::suites::{self, BenchShape, Fault, GradShape};
use fdy::Real;

use crate::{
    BenchArgs, DTypeArg, EvalArgs, FaultArg, FeaturizeArgs, GradcheckArgs, InferArgs, ModelArgs, TrainToyArgs,
    VerifyArgs,
};

/// Outcome of a subcommand that ran to completion. Errors map to exit status 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    Failed,
}

impl Status {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Success
        } else {
            Status::Failed
        }
    }
}

/// Prints a report and optionally mirrors it to a file.
fn emit(report: &str, out: Option<&Path>) -> Result<()> {
    print!("{report}");
    if let Some(path) = out {
        fs::write(path, report).with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading directory {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn clip_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn featurize(a: FeaturizeArgs) -> Result<Status> {
    let defaults = MelConfig::default();
    let cfg = MelConfig {
        sample_rate: a.sample_rate.unwrap_or(defaults.sample_rate),
        n_fft: a.n_fft.unwrap_or(defaults.n_fft),
        win_length: a.n_fft.unwrap_or(defaults.win_length),
        hop_length: a.hop_length.unwrap_or(defaults.hop_length),
        n_mels: a.n_mels.unwrap_or(defaults.n_mels),
        ..defaults
    };
    cfg.validate()?;
    let batch = a.input.is_dir();
    let inputs = wav_inputs(&a.input)?;
    if batch {
        if inputs.is_empty() {
            eprintln!("warning: no .wav files in {}", a.input.display());
        }
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    }
    let mut failures = 0;
    for path in &inputs {
        let id = clip_id(path);
        let target = if batch { a.out.join(format!("{id}.tensor")) } else { a.out.clone() };
        let result = load_wav(path).and_then(|clip| log_mel_features(&clip, &cfg)).and_then(|feat| match a.dtype {
            DTypeArg::F32 => write_tensor(&target, "logmel", &feat.cast::<f32>()).map(|_| feat),
            DTypeArg::F64 => write_tensor(&target, "logmel", &feat).map(|_| feat),
        });
        match result {
            Ok(feat) => {
                let s = feat.shape();
                println!("clip={id} shape={}x{} out={}", s[0], s[1], target.display());
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e}", path.display());
            }
        }
    }
    println!("files={} failed={failures}", inputs.len() - failures);
    if failures > 0 {
        bail!("{failures} of {} inputs could not be featurized", inputs.len());
    }
    Ok(Status::Success)
}

fn model_config(m: &ModelArgs, fallback: impl FnOnce() -> Result<ModelConfig>) -> Result<ModelConfig> {
    let mut cfg = match &m.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ModelConfig::parse(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => fallback()?,
    };
    if let Some(k) = m.k {
        cfg.dynamic_k = k;
    }
    if let Some(t) = m.temperature {
        cfg.temperature = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset_config(preset: &str, classes: usize) -> Result<ModelConfig> {
    match preset {
        "toy" => Ok(default_toy_config(classes, MelConfig::default().n_mels)?),
        "mini" => Ok(mini_toy_config(classes)),
        other => bail!("unknown model preset `{other}` (expected toy or mini)"),
    }
}

pub fn infer(a: InferArgs) -> Result<Status> {
    let cfg = model_config(&a.model, || preset_config(&a.preset, a.classes))?;
    match a.model.dtype {
        DTypeArg::F32 => infer_typed::<f32>(&a, &cfg),
        DTypeArg::F64 => infer_typed::<f64>(&a, &cfg),
    }
}

fn infer_typed<T: Real>(a: &InferArgs, cfg: &ModelConfig) -> Result<Status> {
    let mut model: Model<T> = build_model(cfg, 0)?;
    load_weights(&mut model, &a.weights).with_context(|| format!("loading weights {}", a.weights.display()))?;
    let labels = match &a.labels {
        Some(l) => l.clone(),
        None => (0..cfg.class_count).map(|c| format!("class_{c}")).collect(),
    };
    if labels.len() != cfg.class_count {
        bail!("{} labels given for a model with {} classes", labels.len(), cfg.class_count);
    }
    let median_windows = match a.median_window.as_slice() {
        [w] => vec![*w; cfg.class_count],
        ws if ws.len() == cfg.class_count => ws.to_vec(),
        ws => bail!("{} median windows given for a model with {} classes", ws.len(), cfg.class_count),
    };
    let post = PostConfig {
        threshold: a.threshold,
        median_windows,
        frame_hop_seconds: a.frame_seconds * cfg.time_reduction() as f64,
    };
    post.validate(cfg.class_count)?;

    if let Some(dir) = &a.dump_attention {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut clips: Vec<(String, &PathBuf)> = a.features.iter().map(|p| (clip_id(p), p)).collect();
    clips.sort();
    let mut events = Vec::new();
    for (id, path) in clips {
        let (_, feat) = read_tensor::<T>(path).with_context(|| format!("reading features {}", path.display()))?;
        let [f, t] = feat.dims::<2>("features").with_context(|| path.display().to_string())?;
        let x = feat.reshape([1, 1, f, t])?;
        let scores = model.forward(&x).with_context(|| path.display().to_string())?;
        if let Some(dir) = &a.dump_attention {
            for (layer, pi) in model.attention_maps(&x)? {
                let target = dir.join(format!("{id}.layer{layer}.pi.tensor"));
                write_tensor(&target, &format!("layers.{layer}.pi"), &pi)
                    .with_context(|| format!("writing {}", target.display()))?;
            }
        }
        let classes = scores.shape()[1];
        let frames = scores.shape()[2];
        let scores = scores.reshape([classes, frames])?;
        let smoothed = median_filter(&scores, &post.median_windows)?;
        events.extend(decode_events(&smoothed, &post, &id, &labels)?);
    }
    write_events(&a.out, &events).with_context(|| format!("writing {}", a.out.display()))?;
    println!("clips={} events={} out={}", a.features.len(), events.len(), a.out.display());
    Ok(Status::Success)
}

pub fn verify(a: VerifyArgs) -> Result<Status> {
    let fault = match a.fault {
        None => Fault::None,
        Some(FaultArg::SkipNormalization) => Fault::SkipNormalization,
    };
    let (results, freq) = suites::verify(a.seed, a.trials, fault)?;
    let mut report = String::new();
    for r in &results {
        writeln!(report, "{}", r.report_line())?;
    }
    writeln!(
        report,
        "frequency_detail fdy_broken={}/{} conv_equivariant={}/{} fdy_min_discrepancy={:.3e} conv_max_discrepancy={:.3e}",
        freq.fdy_broken, freq.trials, freq.conv_equivariant, freq.trials, freq.fdy_min_discrepancy, freq.conv_max_discrepancy
    )?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    writeln!(report, "status={}", if failed.is_empty() { "pass" } else { "fail" })?;
    emit(&report, a.out.as_deref())?;
    if let Some(first) = failed.first() {
        match &first.first_failure {
            Some(f) => {
                eprintln!("suite {} failed first at trial {} (seed {}): {}", first.suite, f.trial, f.seed, f.detail)
            }
            None => eprintln!("suite {} failed", first.suite),
        }
    }
    Ok(Status::from_pass(failed.is_empty()))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Status> {
    let Some(shape) = GradShape::preset(&a.preset) else {
        bail!("unknown gradcheck preset `{}` (expected default or tiny)", a.preset);
    };
    let rep = suites::gradcheck(a.seed, shape, a.step)?;
    let mut report = String::new();
    for g in &rep.groups {
        writeln!(
            report,
            "group={} coordinates={} worst_relative_error={:.3e}",
            g.group, g.coordinates, g.worst_relative_error
        )?;
    }
    let pass = rep.worst() < a.bound;
    writeln!(
        report,
        "worst_relative_error={:.3e} bound={:.1e} step={:.1e} status={}",
        rep.worst(),
        a.bound,
        rep.step,
        if pass { "pass" } else { "fail" }
    )?;
    emit(&report, a.out.as_deref())?;
    Ok(Status::from_pass(pass))
}

pub fn bench(a: BenchArgs) -> Result<Status> {
    let Some(shape) = BenchShape::preset(&a.preset) else {
        bail!("unknown bench preset `{}` (expected default or small)", a.preset);
    };
    let rep = suites::bench(shape, a.repeats, a.seed)?;
    let s = rep.shape;
    let mut report = format!(
        "shape=B{}xC{}->{}xF{}xT{} K={} repeats={}\n",
        s.batch, s.c_in, s.c_out, s.freq, s.frames, s.basis, rep.repeats
    );
    writeln!(report, "path=naive median_seconds={:.6}", rep.naive_median_s)?;
    writeln!(report, "path=efficient median_seconds={:.6}", rep.efficient_median_s)?;
    writeln!(report, "path=plain_conv median_seconds={:.6}", rep.plain_median_s)?;
    writeln!(report, "efficient_over_naive={:.4}", rep.ratio())?;
    emit(&report, a.out.as_deref())?;
    if rep.ratio() > 0.5 {
        eprintln!("warning: efficient path is not at least twice as fast as the naive path on this machine");
    }
    Ok(Status::Success)
}

fn f1_lines(report: &mut String, metric: &str, r: &F1Report) -> Result<()> {
    for (label, c) in &r.per_class {
        let f1 = c.f1().map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        writeln!(report, "metric={metric} class={label} tp={} fp={} fn={} f1={f1}", c.tp, c.fp, c.fn_)?;
    }
    writeln!(report, "metric={metric} macro_f1={:.6}", r.macro_f1())?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<Status> {
    let reference = read_events(&a.reference).with_context(|| format!("reading {}", a.reference.display()))?;
    let hypothesis = read_events(&a.hypothesis).with_context(|| format!("reading {}", a.hypothesis.display()))?;
    let cb = collar_f1(&reference, &hypothesis, Collars::default());
    let ib = intersection_f1(&reference, &hypothesis, a.dtc, a.gtc)?;
    let mut report = String::new();
    f1_lines(&mut report, "cb", &cb)?;
    f1_lines(&mut report, "ib", &ib)?;
    emit(&report, a.out.as_deref())?;
    Ok(Status::Success)
}

pub fn train_toy(a: TrainToyArgs) -> Result<Status> {
    if a.preset != "band" {
        bail!("unknown task preset `{}` (expected band)", a.preset);
    }
    let cfg = model_config(&a.model, || Ok(mini_toy_config(2)))?;
    match a.model.dtype {
        DTypeArg::F32 => train_typed::<f32>(&a, &cfg),
        DTypeArg::F64 => train_typed::<f64>(&a, &cfg),
    }
}

fn train_typed<T: Real>(a: &TrainToyArgs, cfg: &ModelConfig) -> Result<Status> {
    let task = BandTask { freq: cfg.input_freq, seed: a.seed, ..BandTask::default() };
    let (data, labels) = band_task::<T>(&task)?;
    let mut model: Model<T> = build_model(cfg, a.seed)?;
    let train = TrainConfig { steps: a.steps, lr: a.lr, batch_size: Some(a.batch), seed: a.seed };
    let rep = train_band(&mut model, &data, &labels, &train, a.eval_every, a.target)?;
    println!("params={}", model.param_count());
    for &(step, acc) in &rep.accuracy_trace {
        println!("step={step} loss={:.6} accuracy={acc:.4}", rep.losses[step - 1]);
    }
    let reached = rep.reached_at.is_some();
    println!(
        "final_accuracy={:.4} steps={} target={} status={}",
        rep.final_accuracy(),
        rep.losses.len(),
        a.target,
        if reached { "pass" } else { "fail" }
    );
    if let Some(out) = &a.out {
        save_weights(&model, out).with_context(|| format!("writing {}", out.display()))?;
        let cfg_path = out.with_extension("config");
        fs::write(&cfg_path, cfg.to_text()).with_context(|| format!("writing {}", cfg_path.display()))?;
        println!("weights={} config={}", out.display(), cfg_path.display());
    }
    Ok(Status::from_pass(reached))
}
