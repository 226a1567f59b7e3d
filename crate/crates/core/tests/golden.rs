//! Pinned end-to-end outputs. Regenerate with
//! `FDY_REGENERATE_GOLDEN=1 cargo test -p fdy-core --test golden -- --ignored`
//! and review the diff before committing.

use std::path::PathBuf;

use fdy::audio::{featurize, load_wav, write_wav_pcm16, MelConfig};
use fdy::dynamic::AttentionInit;
use fdy::init;
use fdy::model::{
    build_model, encode_entries, load_weights, mini_toy_config, read_tensor, save_weights, write_tensor, Entry, Model,
    ModelConfig,
};
use fdy::Tensor;
use rand::Rng;

const SAMPLE_RATE: u32 = 16_000;
const CLASSES: usize = 3;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn mini_mel() -> MelConfig {
    MelConfig { n_mels: 32, ..MelConfig::default() }
}

/// Ten seconds of a rising chirp under noise, with a 1 kHz tone burst from 3 s to 5 s.
fn synth_clip() -> Vec<i16> {
    let mut rng = init::rng(2024);
    let n = 10 * SAMPLE_RATE as usize;
    let mut phase = 0.0f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            phase += 2.0 * std::f64::consts::PI * (200.0 + 300.0 * t) / SAMPLE_RATE as f64;
            let mut v = 0.2 * phase.sin() + rng.random_range(-0.02..0.02);
            if (3.0..5.0).contains(&t) {
                v += 0.3 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin();
            }
            (v * 32767.0).round() as i16
        })
        .collect()
}

fn golden_model() -> Model<f32> {
    // random attention init so the golden scores depend on the attention branch
    let cfg = ModelConfig { attention_init: AttentionInit::Random, ..mini_toy_config(CLASSES) };
    let mut model = build_model::<f32>(&cfg, 7).unwrap();
    // non-trivial running statistics so eval-mode batch norm is exercised
    let mut rng = init::rng(8);
    for (name, t) in model.named_tensors_mut() {
        if name.ends_with("running_mean") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else if name.ends_with("running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }
    model
}

fn input(features: &Tensor<f32>) -> Tensor<f32> {
    let s = features.shape().to_vec();
    features.clone().reshape([1, 1, s[0], s[1]]).unwrap()
}

#[test]
#[ignore = "writes fixtures; run with FDY_REGENERATE_GOLDEN=1"]
fn regenerate_golden() {
    if std::env::var("FDY_REGENERATE_GOLDEN").as_deref() != Ok("1") {
        eprintln!("FDY_REGENERATE_GOLDEN is not 1; leaving fixtures untouched");
        return;
    }
    let d = dir();
    std::fs::create_dir_all(&d).unwrap();
    write_wav_pcm16(d.join("clip_10s.wav"), &synth_clip(), 1, SAMPLE_RATE).unwrap();
    let clip = load_wav(d.join("clip_10s.wav")).unwrap();
    let features = featurize(&clip, &mini_mel()).unwrap().cast::<f32>();
    write_tensor(d.join("features.tensor"), "logmel", &features).unwrap();
    let model = golden_model();
    std::fs::write(d.join("model.config"), model.config.to_text()).unwrap();
    save_weights(&model, d.join("model.fdyw")).unwrap();
    let scores = model.forward(&input(&features)).unwrap();
    let s = scores.shape().to_vec();
    write_tensor(d.join("scores.tensor"), "scores", &scores.reshape([s[1], s[2]]).unwrap()).unwrap();
}

#[test]
fn ten_second_fixture_has_default_feature_shape() {
    let clip = load_wav(dir().join("clip_10s.wav")).unwrap();
    assert_eq!(clip.samples.len(), 160_000);
    let features = featurize(&clip, &MelConfig::default()).unwrap();
    assert_eq!(features.shape(), &[128, 626]);
}

#[test]
fn front_end_matches_pinned_features() {
    let clip = load_wav(dir().join("clip_10s.wav")).unwrap();
    let features = featurize(&clip, &mini_mel()).unwrap();
    let (name, pinned) = read_tensor::<f64>(dir().join("features.tensor")).unwrap();
    assert_eq!(name, "logmel");
    let diff = features.max_abs_diff(&pinned).unwrap();
    assert!(diff <= 1e-5, "feature drift {diff:e}");
}

#[test]
fn released_weights_reproduce_pinned_scores() {
    let text = std::fs::read_to_string(dir().join("model.config")).unwrap();
    let cfg = ModelConfig::parse(&text).unwrap();
    let mut model = build_model::<f32>(&cfg, 0).unwrap();
    load_weights(&mut model, dir().join("model.fdyw")).unwrap();
    let (_, features) = read_tensor::<f32>(dir().join("features.tensor")).unwrap();
    let (_, pinned) = read_tensor::<f32>(dir().join("scores.tensor")).unwrap();
    let scores = model.forward(&input(&features)).unwrap();
    let s = scores.shape().to_vec();
    let scores = scores.reshape([s[1], s[2]]).unwrap();
    let diff = scores.max_abs_diff(&pinned).unwrap();
    assert!(diff <= 1e-5, "score drift {diff:e}");
}

#[test]
fn released_weights_reencode_to_the_same_bytes() {
    let bytes = std::fs::read(dir().join("model.fdyw")).unwrap();
    let cfg = ModelConfig::parse(&std::fs::read_to_string(dir().join("model.config")).unwrap()).unwrap();
    let mut model = build_model::<f32>(&cfg, 0).unwrap();
    load_weights(&mut model, dir().join("model.fdyw")).unwrap();
    let entries: Vec<Entry> = model.named_tensors().into_iter().map(|(n, t)| Entry::from_tensor(n, t)).collect();
    assert_eq!(encode_entries(&entries).unwrap(), bytes);
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(synth_clip(), synth_clip());
    let a = golden_model();
    let b = golden_model();
    for ((na, ta), (nb, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}
