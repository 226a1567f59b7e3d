//! Log-mel front-end: WAV decoding, centered STFT power spectrum and a
//! Slaney-style mel filterbank.
//!
//! All arithmetic is done in `f64`; callers cast the result when they need
//! `f32` features.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 2048,
            win_length: 2048,
            hop_length: 256,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= f_min < f_max <= sample_rate/2, got f_min={} f_max={} sample_rate={}",
                self.f_min, self.f_max, self.sample_rate
            ));
        }
        if !(1 <= self.hop_length && self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return bad(format!(
                "need 1 <= hop_length <= win_length <= n_fft, got {} / {} / {}",
                self.hop_length, self.win_length, self.n_fft
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of STFT frames for a clip of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop_length
    }
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM16 or float32 WAV file, averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let decode = |e: &dyn std::fmt::Display| Error::Decode { path: path.to_path_buf(), message: e.to_string() };
    let mut reader = hound::WavReader::open(path).map_err(|e| decode(&e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| decode(&e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| decode(&e))?,
        (format, bits) => {
            return Err(decode(&format!("unsupported encoding {format:?} with {bits} bits per sample")));
        }
    };
    let channels = spec.channels as usize;
    if channels == 0 || !interleaved.len().is_multiple_of(channels) {
        return Err(decode(&"sample count is not a multiple of the channel count"));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| if channels == 1 { frame[0] } else { frame.iter().sum::<f64>() / channels as f64 })
        .collect();
    AudioClip::new(samples, spec.sample_rate).map_err(|e| decode(&e))
}

/// Writes interleaved PCM16 samples.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[i16], channels: u16, sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    write_with(path.as_ref(), spec, |w| samples.iter().try_for_each(|&s| w.write_sample(s)))
}

/// Writes interleaved float32 samples.
pub fn write_wav_f32(path: impl AsRef<Path>, samples: &[f32], channels: u16, sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels, sample_rate, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
    write_with(path.as_ref(), spec, |w| samples.iter().try_for_each(|&s| w.write_sample(s)))
}

type WavWriter = hound::WavWriter<std::io::BufWriter<std::fs::File>>;

fn write_with(
    path: &Path,
    spec: hound::WavSpec,
    body: impl FnOnce(&mut WavWriter) -> std::result::Result<(), hound::Error>,
) -> Result<()> {
    let io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    body(&mut writer).map_err(io)?;
    writer.finalize().map_err(io)
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Index into a signal of length `len` after reflect padding, for any offset.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Power spectrogram `[n_fft/2 + 1, frames]` of centered, Hann-windowed frames.
pub fn stft_power(clip: &AudioClip, cfg: &MelConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRate { expected: cfg.sample_rate, found: clip.sample_rate });
    }
    if clip.samples.is_empty() {
        return Err(Error::InvalidArgument("cannot compute a spectrogram of an empty clip".into()));
    }
    let (n_fft, hop) = (cfg.n_fft, cfg.hop_length);
    let bins = cfg.freq_bins();
    let frames = cfg.frames(clip.samples.len());

    // a shorter window sits in the middle of the FFT frame
    let mut window = vec![0.0; n_fft];
    let left = (n_fft - cfg.win_length) / 2;
    window[left..left + cfg.win_length].copy_from_slice(&hann_periodic(cfg.win_length));

    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; bins * frames];
    let pad = (n_fft / 2) as isize;
    for t in 0..frames {
        let start = (t * hop) as isize - pad;
        for (n, slot) in buf.iter_mut().enumerate() {
            let s = clip.samples[reflect(start + n as isize, clip.samples.len())];
            *slot = Complex::new(s * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            out[k * frames + t] = buf[k].norm_sqr();
        }
    }
    Tensor::new([bins, frames], out)
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Area-normalized triangular filters `[n_mels, n_fft/2 + 1]`.
///
/// Fails when a filter covers no FFT bin, which happens when `n_mels` is too
/// large for the frequency resolution.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let bins = cfg.freq_bins();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> =
        (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let fft_hz: Vec<f64> = (0..bins).map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64).collect();
    let mut fb = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (r - l);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (w, &f) in row.iter_mut().zip(&fft_hz) {
            let rising = (f - l) / (c - l);
            let falling = (r - f) / (r - c);
            *w = rising.min(falling).max(0.0) * norm;
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({l:.1}..{r:.1} Hz) covers no FFT bin; reduce n_mels or increase n_fft"
            )));
        }
    }
    Tensor::new([cfg.n_mels, bins], fb)
}

/// `ln(max(fb · power, log_floor))`, shape `[n_mels, frames]`.
pub fn log_mel(power: &Tensor<f64>, cfg: &MelConfig) -> Result<Tensor<f64>> {
    let [bins, frames] = power.dims::<2>("power spectrogram")?;
    if bins != cfg.freq_bins() {
        return Err(Error::Shape(format!(
            "power spectrogram has {bins} bins, configuration implies {}",
            cfg.freq_bins()
        )));
    }
    let fb = mel_filterbank(cfg)?;
    let (w, p) = (fb.data(), power.data());
    let mut out = vec![0.0; cfg.n_mels * frames];
    for m in 0..cfg.n_mels {
        let row = &w[m * bins..(m + 1) * bins];
        let first = row.iter().position(|&v| v != 0.0).unwrap_or(0);
        let last = row.iter().rposition(|&v| v != 0.0).unwrap_or(0);
        let dst = &mut out[m * frames..(m + 1) * frames];
        for (k, &weight) in row.iter().enumerate().take(last + 1).skip(first) {
            let src = &p[k * frames..(k + 1) * frames];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        }
        for d in dst.iter_mut() {
            *d = d.max(cfg.log_floor).ln();
        }
    }
    Tensor::new([cfg.n_mels, frames], out)
}

/// `log_mel(stft_power(clip))`.
pub fn featurize(clip: &AudioClip, cfg: &MelConfig) -> Result<Tensor<f64>> {
    log_mel(&stft_power(clip, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small() -> MelConfig {
        MelConfig { n_fft: 256, win_length: 256, hop_length: 64, n_mels: 32, ..MelConfig::default() }
    }

    fn noise(len: usize, seed: u64) -> AudioClip {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    #[test]
    fn ten_seconds_give_626_frames_and_128_bands() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.frames(160_000), 626);
        let clip = noise(160_000, 1);
        let p = stft_power(&clip, &cfg).unwrap();
        assert_eq!(p.shape(), &[1025, 626]);
        assert_eq!(log_mel(&p, &cfg).unwrap().shape(), &[128, 626]);
    }

    #[test]
    fn matches_brute_force_dft() {
        let cfg = small();
        let clip = noise(1000, 2);
        let p = stft_power(&clip, &cfg).unwrap();
        let n = cfg.n_fft;
        let w = hann_periodic(n);
        for t in [0, 3, 8, 15] {
            for k in [0, 1, 17, 64, 128] {
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..n {
                    // reflect padding by hand
                    let mut idx = (t * cfg.hop_length + j) as isize - (n / 2) as isize;
                    if idx < 0 {
                        idx = -idx;
                    }
                    let len = clip.samples.len() as isize;
                    if idx >= len {
                        idx = 2 * (len - 1) - idx;
                    }
                    let s = clip.samples[idx as usize] * w[j];
                    let phase = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += s * phase.cos();
                    im += s * phase.sin();
                }
                let want = re * re + im * im;
                let got = p.get(&[k, t]).unwrap();
                assert!((got - want).abs() <= 1e-9 * want.max(1.0), "bin {k} frame {t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn bin_centred_cosine_concentrates_around_its_bin() {
        let cfg = small();
        let k = 20;
        let freq = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let samples = (0..4000).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).cos()).collect();
        let p = stft_power(&AudioClip::new(samples, 16_000).unwrap(), &cfg).unwrap();
        for t in 5..50 {
            let total: f64 = (0..cfg.freq_bins()).map(|b| p.get(&[b, t]).unwrap()).sum();
            let centre = p.get(&[k, t]).unwrap();
            let lobe = centre + p.get(&[k - 1, t]).unwrap() + p.get(&[k + 1, t]).unwrap();
            // Hann coefficients 1/2 and -1/4 put 4/6 of the power in the centre bin
            assert!((centre / total - 2.0 / 3.0).abs() < 1e-9);
            assert!(lobe / total >= 0.99);
        }
    }

    #[test]
    fn silence_gives_zero_power_and_floor() {
        let cfg = small();
        let clip = AudioClip::new(vec![0.0; 640], 16_000).unwrap();
        let p = stft_power(&clip, &cfg).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        let m = log_mel(&p, &cfg).unwrap();
        assert!(m.data().iter().all(|&v| v == 1e-5f64.ln()));
    }

    #[test]
    fn filterbank_rows_are_nonnegative_contiguous_triangles() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let bins = cfg.freq_bins();
        for m in 0..cfg.n_mels {
            let row = &fb.data()[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            let first = row.iter().position(|&w| w > 0.0).unwrap();
            let last = row.iter().rposition(|&w| w > 0.0).unwrap();
            assert!(row[first..=last].iter().all(|&w| w > 0.0), "filter {m} has a gap");
        }
    }

    #[test]
    fn log_mel_matches_dense_matrix_product() {
        let cfg = small();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let frames = 7;
        let power = Tensor::from_fn([cfg.freq_bins(), frames], |_| rng.random_range(0.0..10.0)).unwrap();
        let fb = mel_filterbank(&cfg).unwrap();
        let got = log_mel(&power, &cfg).unwrap();
        for m in 0..cfg.n_mels {
            for t in 0..frames {
                let dot: f64 =
                    (0..cfg.freq_bins()).map(|k| fb.get(&[m, k]).unwrap() * power.get(&[k, t]).unwrap()).sum();
                let want = dot.max(cfg.log_floor).ln();
                let g = got.get(&[m, t]).unwrap();
                assert!((g - want).abs() <= 1e-6 * want.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn scaling_up_never_lowers_log_mel() {
        let cfg = small();
        let clip = noise(2000, 4);
        let base = featurize(&clip, &cfg).unwrap();
        let louder = AudioClip::new(clip.samples.iter().map(|s| s * 1.7).collect(), 16_000).unwrap();
        let up = featurize(&louder, &cfg).unwrap();
        assert!(base.data().iter().zip(up.data()).all(|(a, b)| b >= a));
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        let clip = noise(3000, 5);
        assert_eq!(featurize(&clip, &cfg).unwrap(), featurize(&clip, &cfg).unwrap());
    }

    #[test]
    fn too_many_mels_is_a_configuration_error() {
        let cfg = MelConfig { n_fft: 64, win_length: 64, hop_length: 16, n_mels: 128, ..MelConfig::default() };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = MelConfig::default();
        assert!(matches!(
            stft_power(&AudioClip::new(vec![0.0; 10], 44_100).unwrap(), &cfg),
            Err(Error::SampleRate { expected: 16_000, found: 44_100 })
        ));
        assert!(stft_power(&AudioClip::new(vec![], 16_000).unwrap(), &cfg).is_err());
        assert!(MelConfig { f_max: 9000.0, ..cfg.clone() }.validate().is_err());
        assert!(MelConfig { hop_length: 4096, ..cfg }.validate().is_err());
    }

    #[test]
    fn wav_decoding() {
        let dir = tempfile::tempdir().unwrap();
        let silent = dir.path().join("silent.wav");
        write_wav_pcm16(&silent, &vec![0; 16_000], 1, 16_000).unwrap();
        let clip = load_wav(&silent).unwrap();
        assert_eq!(clip.samples, vec![0.0; 16_000]);

        let edge = dir.path().join("edge.wav");
        write_wav_pcm16(&edge, &[-32768, 16384, 32767], 1, 16_000).unwrap();
        assert_eq!(load_wav(&edge).unwrap().samples, vec![-1.0, 0.5, 32767.0 / 32768.0]);

        let stereo = dir.path().join("stereo.wav");
        let xs: Vec<f32> = (0..100).flat_map(|i| [i as f32 / 200.0, -(i as f32) / 200.0]).collect();
        write_wav_f32(&stereo, &xs, 2, 22_050).unwrap();
        let clip = load_wav(&stereo).unwrap();
        assert_eq!(clip.sample_rate, 22_050);
        assert_eq!(clip.samples, vec![0.0; 100]);

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF\x04\x00\x00\x00WAVE").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::Decode { .. })));
    }
}
