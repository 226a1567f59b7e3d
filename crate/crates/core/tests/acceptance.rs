//! Acceptance checks, one line per criterion. Runs without the libtest harness
//! so every line is printed, pass or fail; the exit status is nonzero if any
//! hard criterion fails. The benchmark ratio only warns.

use std::path::PathBuf;
use std::time::Instant;

use fdy::audio::{featurize, load_wav, MelConfig};
use fdy::dynamic::{
    attention_weights, fdy_backward, fdy_forward_efficient, fdy_forward_naive, fdy_forward_naive_with_pi,
    fdy_forward_train, fdy_forward_with_pi, AttentionInit, DynamicSpec, FdyConvLayer,
};
use fdy::init::{self, SeededRng};
use fdy::model::{
    band_task, build_model, decode_entries, load_weights, mini_toy_config, save_weights, train_band, BandTask,
    ModelConfig, TrainConfig,
};
use fdy::nn::{conv2d, BnMode, PaddingMode};
use fdy::sed::{collar_f1, intersection_f1, read_events, Collars};
use fdy::suites::{bench, BenchShape};
use fdy::{Error, Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    /// Failures of soft criteria are reported but do not fail the run.
    hard: bool,
    detail: String,
}

fn hard(pass: bool, detail: String) -> Outcome {
    Outcome { pass, hard: true, detail }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random_layer<T: Real>(
    rng: &mut SeededRng,
    shape: [usize; 4],
    basis: usize,
    padding: PaddingMode,
) -> FdyConvLayer<T> {
    let spec = DynamicSpec {
        padding_mode: padding,
        attention_init: AttentionInit::Random,
        ..DynamicSpec::new(shape[1], rng.random_range(1..=8), basis)
    };
    FdyConvLayer::random(&spec, rng).unwrap()
}

fn diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).unwrap().to_f64().unwrap()
}

fn path_equivalence() -> Outcome {
    let start = Instant::now();
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for trial in 0..100u64 {
        let mut rng = init::rng(10_000 + trial);
        let shape =
            [rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(4..=32), rng.random_range(4..=32)];
        let basis = rng.random_range(2..=6);
        let seed = rng.random::<u64>();
        let l64: FdyConvLayer<f64> = random_layer(&mut init::rng(seed), shape, basis, PaddingMode::Zeros);
        let l32: FdyConvLayer<f32> = random_layer(&mut init::rng(seed), shape, basis, PaddingMode::Zeros);
        let x64 = init::uniform::<f64>(shape, 1.0, &mut rng).unwrap();
        let x32 = x64.cast::<f32>();
        worst64 =
            worst64.max(diff(&fdy_forward_naive(&x64, &l64).unwrap(), &fdy_forward_efficient(&x64, &l64).unwrap()));
        worst32 =
            worst32.max(diff(&fdy_forward_naive(&x32, &l32).unwrap(), &fdy_forward_efficient(&x32, &l32).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    hard(
        worst32 <= 1e-5 && worst64 <= 1e-10 && secs <= 60.0,
        format!("100 configs: real32 max {worst32:.2e} (<= 1e-5), real64 max {worst64:.2e} (<= 1e-10), {secs:.1} s (<= 60 s)"),
    )
}

fn attention_simplex() -> Outcome {
    let (mut min, mut worst_sum) = (f64::INFINITY, 0.0f64);
    for trial in 0..100u64 {
        let mut rng = init::rng(20_000 + trial);
        let shape =
            [rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(4..=32), rng.random_range(4..=32)];
        let basis = rng.random_range(2..=6);
        let layer: FdyConvLayer<f64> = random_layer(&mut rng, shape, basis, PaddingMode::Zeros);
        let x = init::uniform::<f64>(shape, 20.0, &mut rng).unwrap();
        let pi = attention_weights(&x, &layer.attn).unwrap();
        let [b, k, f] = pi.dims::<3>("pi").unwrap();
        for bi in 0..b {
            for fi in 0..f {
                let col: Vec<f64> = (0..k).map(|i| pi.get(&[bi, i, fi]).unwrap()).collect();
                min = col.iter().copied().fold(min, f64::min);
                worst_sum = worst_sum.max((col.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    hard(
        min >= -1e-9 && worst_sum <= 1e-6,
        format!("100 inputs: min pi {min:.2e} (>= -1e-9), max |sum - 1| {worst_sum:.2e} (<= 1e-6)"),
    )
}

fn time_equivariance() -> Outcome {
    const FRAMES: usize = 16;
    let mut rng = init::rng(30_000);
    let shape = [2, 4, 12, FRAMES];
    let layer: FdyConvLayer<f32> = random_layer(&mut rng, shape, 4, PaddingMode::Circular);
    let x = init::uniform::<f32>(shape, 1.0, &mut rng).unwrap();
    let y = fdy_forward_efficient(&x, &layer).unwrap();
    let mut worst = 0.0f64;
    for s in 0..FRAMES as isize {
        let lhs = fdy_forward_efficient(&x.circular_shift(3, s).unwrap(), &layer).unwrap();
        worst = worst.max(diff(&lhs, &y.circular_shift(3, s).unwrap()));
    }
    let pi = attention_weights(&x, &layer.attn).unwrap();
    let mut perms: Vec<Vec<usize>> = vec![(0..FRAMES).rev().collect()];
    for _ in 0..20 {
        let mut p: Vec<usize> = (0..FRAMES).collect();
        p.shuffle(&mut rng);
        perms.push(p);
    }
    let bitwise = perms.iter().all(|p| {
        let q = attention_weights(&x.permute_axis(3, p).unwrap(), &layer.attn).unwrap();
        pi.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    hard(
        worst <= 1e-5 && bitwise,
        format!(
            "16 shifts: max {worst:.2e} (<= 1e-5); pi bitwise invariant over {} permutations: {bitwise}",
            perms.len()
        ),
    )
}

fn shift_discrepancy(x: &Tensor<f32>, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> f64 {
    let y = f(x);
    (1..x.shape()[2] as isize)
        .map(|s| diff(&f(&x.circular_shift(2, s).unwrap()), &y.circular_shift(2, s).unwrap()))
        .fold(0.0, f64::max)
}

fn frequency_non_equivariance() -> Outcome {
    let (mut broken, mut kept) = (0, 0);
    let (mut fdy_min, mut conv_max) = (f64::INFINITY, 0.0f64);
    for trial in 0..100u64 {
        let mut rng = init::rng(40_000 + trial);
        let shape =
            [rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(8..=32), rng.random_range(4..=16)];
        let basis = rng.random_range(2..=6);
        let layer: FdyConvLayer<f32> = random_layer(&mut rng, shape, basis, PaddingMode::Circular);
        let plain = layer.kernel(0).unwrap();
        let x = init::uniform::<f32>(shape, 1.0, &mut rng).unwrap();
        let d_fdy = shift_discrepancy(&x, |x| fdy_forward_efficient(x, &layer).unwrap());
        let d_conv = shift_discrepancy(&x, |x| conv2d(x, &plain).unwrap());
        fdy_min = fdy_min.min(d_fdy);
        conv_max = conv_max.max(d_conv);
        broken += usize::from(d_fdy > 1e-3);
        kept += usize::from(d_conv < 1e-5);
    }
    hard(
        broken >= 95 && kept == 100,
        format!(
            "fdy discrepancy > 1e-3 in {broken}/100 (>= 95, min {fdy_min:.2e}); conv2d < 1e-5 in {kept}/100 (= 100, max {conv_max:.2e})"
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    const H: f64 = 1e-5;
    let mut rng = init::rng(50_000);
    let spec = DynamicSpec { attention_init: AttentionInit::Random, ..DynamicSpec::new(3, 4, 3) };
    let mut layer = FdyConvLayer::<f64>::random(&spec, &mut rng).unwrap();
    layer.attn.bn.mode = BnMode::Train;
    let x = init::uniform::<f64>([2, 3, 8, 10], 1.0, &mut rng).unwrap();
    let (y, cache) = fdy_forward_train(&x, &layer).unwrap();
    let up = init::uniform::<f64>(y.shape().to_vec(), 1.0, &mut rng).unwrap();
    let g = fdy_backward(&layer, &cache, &up).unwrap();
    let ga = g.d_attn.unwrap();
    let loss = |x: &Tensor<f64>, l: &FdyConvLayer<f64>| -> f64 {
        fdy_forward_efficient(x, l).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut worst = Vec::new();
    let mut w = 0.0f64;
    for k in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[k] += H;
        m.data_mut()[k] -= H;
        w = w.max(rel(g.d_x.data()[k], (loss(&p, &layer) - loss(&m, &layer)) / (2.0 * H)));
    }
    worst.push(("input", w));
    type Get = fn(&mut FdyConvLayer<f64>) -> &mut Tensor<f64>;
    let groups: [(&str, Get, &Tensor<f64>); 7] = [
        ("basis weights", |l| &mut l.bank.weights, &g.d_weights),
        ("basis biases", |l| &mut l.bank.biases, &g.d_biases),
        ("attention conv a", |l| &mut l.attn.conv_a.weight, &ga.conv_a_weight),
        ("bn gamma", |l| &mut l.attn.bn.gamma, &ga.bn_gamma),
        ("bn beta", |l| &mut l.attn.bn.beta, &ga.bn_beta),
        ("attention conv b", |l| &mut l.attn.conv_b.weight, &ga.conv_b_weight),
        ("attention conv b bias", |l| l.attn.conv_b.bias.as_mut().unwrap(), &ga.conv_b_bias),
    ];
    for (name, get, analytic) in groups {
        let mut w = 0.0f64;
        for k in 0..analytic.len() {
            let (mut p, mut m) = (layer.clone(), layer.clone());
            get(&mut p).data_mut()[k] += H;
            get(&mut m).data_mut()[k] -= H;
            w = w.max(rel(analytic.data()[k], (loss(&x, &p) - loss(&x, &m)) / (2.0 * H)));
        }
        worst.push((name, w));
    }
    let (name, max) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let secs = start.elapsed().as_secs_f64();
    hard(
        max < 1e-3 && secs <= 120.0,
        format!(
            "worst relative error {max:.2e} in {name} (< 1e-3) over {} groups, {secs:.1} s (<= 120 s)",
            worst.len()
        ),
    )
}

fn random_simplex(rng: &mut SeededRng, shape: [usize; 3]) -> Tensor<f64> {
    let raw = init::uniform::<f64>(shape, 1.0, rng).unwrap().map(|v| v + 1.0);
    Tensor::from_fn(shape, |i| {
        raw.get(i).unwrap() / (0..shape[1]).map(|k| raw.get(&[i[0], k, i[2]]).unwrap()).sum::<f64>()
    })
    .unwrap()
}

fn degenerate_attention() -> Outcome {
    let mut rng = init::rng(60_000);
    let shape = [2, 3, 10, 9];
    let basis = 4;
    let mut layer: FdyConvLayer<f64> = random_layer(&mut rng, shape, basis, PaddingMode::Zeros);
    let x = init::uniform::<f64>(shape, 1.0, &mut rng).unwrap();

    let mut one_hot_exact = true;
    let mut naive_one_hot = 0.0f64;
    for j in 0..basis {
        let pi = Tensor::from_fn([2, basis, 10], |i| if i[1] == j { 1.0 } else { 0.0 }).unwrap();
        let plain = conv2d(&x, &layer.kernel(j).unwrap()).unwrap();
        one_hot_exact &= fdy_forward_with_pi(&x, &layer, &pi).unwrap().0 == plain;
        naive_one_hot = naive_one_hot.max(diff(&fdy_forward_naive_with_pi(&x, &layer, &pi).unwrap(), &plain));
    }

    let [_, c_out, c_in, kh, kw] = layer.bank.weights.dims::<5>("bank").unwrap();
    let per = c_out * c_in * kh * kw;
    let first: Vec<f64> = layer.bank.weights.data()[..per].to_vec();
    let first_bias: Vec<f64> = layer.bank.biases.data()[..c_out].to_vec();
    for i in 0..basis {
        layer.bank.weights.data_mut()[i * per..(i + 1) * per].copy_from_slice(&first);
        layer.bank.biases.data_mut()[i * c_out..(i + 1) * c_out].copy_from_slice(&first_bias);
    }
    let plain = conv2d(&x, &layer.kernel(0).unwrap()).unwrap();
    let mut identical = 0.0f64;
    for _ in 0..5 {
        let pi = random_simplex(&mut rng, [2, basis, 10]);
        identical = identical.max(diff(&fdy_forward_with_pi(&x, &layer, &pi).unwrap().0, &plain));
        identical = identical.max(diff(&fdy_forward_naive_with_pi(&x, &layer, &pi).unwrap(), &plain));
    }
    identical = identical.max(diff(&fdy_forward_efficient(&x, &layer).unwrap(), &plain));
    hard(
        one_hot_exact && naive_one_hot <= 1e-12 && identical <= 1e-6,
        format!(
            "one-hot pi bit-exact: {one_hot_exact} (naive path {naive_one_hot:.1e}); identical kernels max {identical:.2e} (<= 1e-6)"
        ),
    )
}

fn toy_learning() -> Outcome {
    let start = Instant::now();
    let run = || {
        let cfg = mini_toy_config(2);
        let (data, labels) = band_task::<f32>(&BandTask::default()).unwrap();
        let mut model = build_model::<f32>(&cfg, 42).unwrap();
        let train = TrainConfig { steps: 3000, lr: 0.1, batch_size: Some(16), seed: 42 };
        let report = train_band(&mut model, &data, &labels, &train, 50, 0.95).unwrap();
        (model.param_count(), report)
    };
    let (params, a) = run();
    let (_, b) = run();
    let deterministic = a == b;
    let secs = start.elapsed().as_secs_f64();
    let steps = a.reached_at.map_or_else(|| "never".to_string(), |s| s.to_string());
    hard(
        params <= 50_000 && a.reached_at.is_some_and(|s| s <= 3000) && deterministic && secs <= 600.0,
        format!(
            "{params} params (<= 50000); accuracy {:.3} (>= 0.95) reached at step {steps} (<= 3000); rerun identical: {deterministic}; {secs:.1} s (<= 600 s)",
            a.final_accuracy()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let dir = fixtures().join("metrics");
    let r = read_events(dir.join("reference.tsv")).unwrap();
    let h = read_events(dir.join("hypothesis.tsv")).unwrap();
    let cb = collar_f1(&r, &h, Collars::default()).macro_f1();
    let ib = intersection_f1(&r, &h, 0.5, 0.5).unwrap().macro_f1();
    // hand-derived: per-class collar F1 4/11, 4/11, 4/5; intersection F1 4/5 for every class
    let (cb_want, ib_want) = ((4.0 / 11.0 + 4.0 / 11.0 + 0.8) / 3.0, 0.8);
    let perfect =
        (collar_f1(&r, &r, Collars::default()).macro_f1(), intersection_f1(&r, &r, 0.5, 0.5).unwrap().macro_f1());
    let empty =
        (collar_f1(&r, &[], Collars::default()).macro_f1(), intersection_f1(&r, &[], 0.5, 0.5).unwrap().macro_f1());
    hard(
        (cb - cb_want).abs() < 1e-12 && (ib - ib_want).abs() < 1e-12 && perfect == (1.0, 1.0) && empty == (0.0, 0.0),
        format!(
            "12 clips: macro CB-F1 {cb:.6} (want {cb_want:.6}), macro IB-F1 {ib:.6} (want {ib_want:.6}); perfect {perfect:?}; empty {empty:?}"
        ),
    )
}

fn front_end_shape() -> Outcome {
    let clip = load_wav(fixtures().join("golden/clip_10s.wav")).unwrap();
    let shape = featurize(&clip, &MelConfig::default()).unwrap().shape().to_vec();
    hard(
        shape == [128, 626],
        format!("{:.1} s at {} Hz -> {shape:?} (want [128, 626])", clip.duration_seconds(), clip.sample_rate),
    )
}

fn benchmark() -> Outcome {
    let r = bench(BenchShape::DEFAULT, 20, 70_000).unwrap();
    Outcome {
        pass: r.ratio() <= 0.5,
        hard: false,
        detail: format!(
            "median over 20: naive {:.3} s, efficient {:.3} s, plain conv {:.3} s; efficient/naive {:.3} (<= 0.5)",
            r.naive_median_s,
            r.efficient_median_s,
            r.plain_median_s,
            r.ratio()
        ),
    }
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fdyw");
    let cfg = ModelConfig { attention_init: AttentionInit::Random, ..mini_toy_config(3) };
    let model = build_model::<f32>(&cfg, 80_000).unwrap();
    save_weights(&model, &path).unwrap();
    let mut loaded = build_model::<f32>(&cfg, 80_001).unwrap();
    load_weights(&mut loaded, &path).unwrap();
    let bitwise = model.named_tensors().iter().zip(loaded.named_tensors()).all(|((na, a), (nb, b))| {
        na == &nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let again = dir.path().join("again.fdyw");
    save_weights(&loaded, &again).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let same_bytes = bytes == std::fs::read(&again).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    let magic_err = decode_entries(&bad_magic);
    let truncated_err = decode_entries(&bytes[..bytes.len() - 7]);
    let magic_ok = matches!(magic_err, Err(Error::BadMagic(_)));
    let truncated_ok = matches!(truncated_err, Err(Error::Truncated { .. }));
    hard(
        bitwise && same_bytes && magic_ok && truncated_ok,
        format!(
            "round trip bitwise: {bitwise}, re-save identical bytes: {same_bytes}; corrupted magic -> {}; truncated payload -> {}",
            magic_err.err().map_or("no error".into(), |e| e.to_string()),
            truncated_err.err().map_or("no error".into(), |e| e.to_string())
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("path equivalence", path_equivalence),
        ("attention simplex", attention_simplex),
        ("time-shift equivariance", time_equivariance),
        ("frequency non-equivariance", frequency_non_equivariance),
        ("gradient correctness", gradient_check),
        ("degenerate attention", degenerate_attention),
        ("toy learning", toy_learning),
        ("metric oracles", metric_oracles),
        ("front-end shape", front_end_shape),
        ("benchmark ratio", benchmark),
        ("serialization", serialization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        let status = match (o.pass, o.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        hard_failures += usize::from(!o.pass && o.hard);
        println!("criterion {:>2} {status} {name}: {}", i + 1, o.detail);
    }
    if hard_failures > 0 {
        println!("acceptance: {hard_failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
