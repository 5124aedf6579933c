//! Log-mel filterbank features, 16-bit PCM input, the feature dataset
//! container and a synthetic token-template corpus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{Vocab, DEFAULT_BOUNDARY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub mel_bins: usize,
    pub fft_size: usize,
    /// Energies are clamped to this before the log.
    pub floor: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; Nyquist when unset.
    pub high_hz: Option<f64>,
    /// Per-utterance mean/variance normalization of each bin.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            mel_bins: 80,
            fft_size: 512,
            floor: 1e-10,
            low_hz: 0.0,
            high_hz: None,
            normalize: true,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn high(&self) -> f64 {
        self.high_hz.unwrap_or_else(|| self.nyquist())
    }

    /// Frames produced from `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        let w = self.window_samples();
        if len < w {
            0
        } else {
            1 + (len - w) / self.hop_samples()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("features.{k}");
        if self.sample_rate == 0 {
            return Err(Error::config(key("sample_rate"), "must be positive"));
        }
        if self.hop_samples() == 0 {
            return Err(Error::config(
                key("hop_ms"),
                "hop is shorter than one sample",
            ));
        }
        if self.window_samples() < self.hop_samples() {
            return Err(Error::config(
                key("window_ms"),
                "window must be at least the hop",
            ));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::config(
                key("fft_size"),
                format!(
                    "{} is shorter than the {}-sample window",
                    self.fft_size,
                    self.window_samples()
                ),
            ));
        }
        if self.mel_bins == 0 {
            return Err(Error::config(key("mel_bins"), "must be >= 1"));
        }
        if self.floor.is_nan() || self.floor <= 0.0 {
            return Err(Error::config(key("floor"), "must be positive"));
        }
        if !(0.0 <= self.low_hz && self.low_hz < self.high() && self.high() <= self.nyquist()) {
            return Err(Error::config(
                key("high_hz"),
                "need 0 <= low_hz < high_hz <= Nyquist",
            ));
        }
        let bank = self.filterbank();
        if let Some(m) = bank.iter().position(|row| {
            let s: f64 = row.iter().sum();
            s.is_nan() || s <= 0.0
        }) {
            return Err(Error::config(
                key("mel_bins"),
                format!("filter {m} covers no FFT bin; use fewer bins or a larger fft_size"),
            ));
        }
        Ok(())
    }

    /// Filter center frequencies in Hz, evenly spaced on the mel scale.
    pub fn mel_centers(&self) -> Vec<f64> {
        self.mel_edges()[1..=self.mel_bins].to_vec()
    }

    fn mel_edges(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.low_hz), hz_to_mel(self.high()));
        let n = self.mel_bins + 1;
        (0..=n)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
            .collect()
    }

    /// Triangle weights `[mel_bins][fft_size / 2 + 1]`.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let edges = self.mel_edges();
        let bins = self.fft_size / 2 + 1;
        let bin_hz = self.sample_rate as f64 / self.fft_size as f64;
        (0..self.mel_bins)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// `[T, mel_bins]` log mel energies: Hann-windowed frames, power spectrum,
/// triangle filterbank, `ln(max(energy, floor))`.
pub fn logmel(samples: &[f64], cfg: &FeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (w, hop, n_fft) = (cfg.window_samples(), cfg.hop_samples(), cfg.fft_size);
    let frames = cfg.num_frames(samples.len());
    if frames == 0 {
        return Err(Error::Input(format!(
            "signal of {} samples is shorter than one {w}-sample window",
            samples.len()
        )));
    }
    let hann: Vec<f64> = (0..w)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / w as f64).cos())
        .collect();
    let bank = cfg.filterbank();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut out = Vec::with_capacity(frames * cfg.mel_bins);
    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + w];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if i < w { frame[i] * hann[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for row in &bank {
            let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.floor).ln());
        }
    }
    Tensor::new([frames, cfg.mel_bins], out)
}

/// Per-bin zero mean, unit variance over time.
pub fn normalize(features: &mut Tensor) {
    let (t, f) = (features.shape()[0], features.shape()[1]);
    if t == 0 {
        return;
    }
    let data = features.data_mut();
    for j in 0..f {
        let mean = (0..t).map(|i| data[i * f + j]).sum::<f64>() / t as f64;
        let var = (0..t)
            .map(|i| (data[i * f + j] - mean).powi(2))
            .sum::<f64>()
            / t as f64;
        let scale = 1.0 / (var + 1e-8).sqrt();
        for i in 0..t {
            data[i * f + j] = (data[i * f + j] - mean) * scale;
        }
    }
}

/// Log-mel features with the configured normalization.
pub fn extract(samples: &[f64], cfg: &FeatureConfig) -> Result<Tensor> {
    let mut x = logmel(samples, cfg)?;
    if cfg.normalize {
        normalize(&mut x);
    }
    Ok(x)
}

/// Mono 16-bit little-endian PCM to samples in [-1, 1).
pub fn pcm_s16le(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::format("pcm", "odd number of bytes in 16-bit audio"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect())
}

pub fn to_pcm_s16le(samples: &[f64]) -> Vec<u8> {
    samples
        .iter()
        .flat_map(|&s| ((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).to_le_bytes())
        .collect()
}

pub fn read_pcm(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    pcm_s16le(&bytes)
}

/// One utterance of precomputed features and its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, F]`.
    pub features: Tensor,
    pub text: String,
}

pub const DATASET_MAGIC: &[u8; 8] = b"CVTXDATA";
pub const DATASET_VERSION: u32 = 1;

/// Feature container:
/// `magic | u32 version | u32 count | per utterance: id, u32 T, u32 F, f32 data, text`
/// with strings stored as `u32 length` + UTF-8, all little-endian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.0.len() {
            return Err(Error::format("dataset", "truncated file"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("dataset", "string is not UTF-8"))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.utterances.len() as u32).to_le_bytes());
        for u in &self.utterances {
            put_str(&mut out, &u.id);
            for &d in u.features.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in u.features.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            put_str(&mut out, &u.text);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor(buf);
        if c.take(8)? != DATASET_MAGIC {
            return Err(Error::format(
                "dataset",
                "bad magic; not a feature container",
            ));
        }
        let version = c.u32()?;
        if version != DATASET_VERSION as usize {
            return Err(Error::format(
                "dataset",
                format!("unsupported version {version}"),
            ));
        }
        let n = c.u32()?;
        let mut utterances = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = c.string()?;
            let (t, f) = (c.u32()?, c.u32()?);
            let bytes = c.take(t * f * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let features = Tensor::new([t, f], data)?;
            let text = c.string()?;
            utterances.push(Utterance { id, features, text });
        }
        if !c.0.is_empty() {
            return Err(Error::format("dataset", "trailing bytes"));
        }
        Ok(Dataset { utterances })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Utterances built by concatenating fixed per-token feature templates.
/// Every token is its own one-symbol word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub alphabet: String,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Minimum RMS distance between any two templates.
    pub min_distance: f64,
    pub template_seed: u64,
}

impl SyntheticTask {
    pub fn toy() -> Self {
        SyntheticTask {
            alphabet: "abcdefgh".into(),
            feature_dim: 16,
            frames_per_token: 4,
            min_tokens: 2,
            max_tokens: 6,
            noise: 0.1,
            min_distance: 0.8,
            template_seed: 0,
        }
    }

    pub fn symbols(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    /// One unit per symbol, each a whole word.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(
            self.symbols()
                .iter()
                .map(|c| format!("{DEFAULT_BOUNDARY}{c}")),
            DEFAULT_BOUNDARY,
        )
    }

    /// `[frames_per_token, feature_dim]` template per symbol. Draws are
    /// rejected until all pairs are at least `min_distance` apart.
    pub fn templates(&self) -> Result<Vec<Tensor>> {
        let n = self.symbols().len();
        if n == 0 || self.frames_per_token == 0 || self.feature_dim == 0 {
            return Err(Error::Input(
                "synthetic task needs symbols, frames and bins".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        let shape = [self.frames_per_token, self.feature_dim];
        let mut out: Vec<Tensor> = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n {
                return Err(Error::Input(format!(
                    "could not place {n} templates {} apart",
                    self.min_distance
                )));
            }
            let t = Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
            if out.iter().all(|o| rms_distance(o, &t) >= self.min_distance) {
                out.push(t);
            }
        }
        Ok(out)
    }

    /// `n` utterances; deterministic in `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        let templates = self.templates()?;
        let symbols = self.symbols();
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Input("need 1 <= min_tokens <= max_tokens".into()));
        }
        let noise =
            Normal::new(0.0, self.noise).map_err(|e| Error::Input(format!("noise: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.feature_dim;
        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let len = rng.random_range(self.min_tokens..=self.max_tokens);
            let picks: Vec<usize> = (0..len)
                .map(|_| rng.random_range(0..symbols.len()))
                .collect();
            let mut data = Vec::with_capacity(len * self.frames_per_token * f);
            for &p in &picks {
                for &v in templates[p].data() {
                    data.push(v + noise.sample(&mut rng));
                }
            }
            let text = picks
                .iter()
                .map(|&p| symbols[p].to_string())
                .collect::<Vec<_>>()
                .join(" ");
            utterances.push(Utterance {
                id: format!("synth-{i:05}"),
                features: Tensor::new([len * self.frames_per_token, f], data)?,
                text,
            });
        }
        Ok(Dataset { utterances })
    }
}

pub fn make_synthetic(task: &SyntheticTask, n_utts: usize, seed: u64) -> Result<Dataset> {
    task.generate(n_utts, seed)
}

fn rms_distance(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    (s / a.numel() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, rate: u32) -> Vec<f64> {
        let n = (seconds * rate as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn frame_count_arithmetic() {
        let cfg = FeatureConfig::default();
        assert_eq!((cfg.window_samples(), cfg.hop_samples()), (400, 160));
        let x = logmel(&vec![0.0; 16000], &cfg).unwrap();
        assert_eq!(x.shape(), &[98, 80]);
        assert!(matches!(logmel(&[0.0; 399], &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let cfg = FeatureConfig::default();
        let x = logmel(&vec![0.0; 4000], &cfg).unwrap();
        assert!(x.data().iter().all(|&v| v == cfg.floor.ln()));
    }

    #[test]
    fn filterbank_geometry() {
        let cfg = FeatureConfig::default();
        cfg.validate().unwrap();
        let c = cfg.mel_centers();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        for row in cfg.filterbank() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn sine_at_center_peaks_in_its_filter() {
        let cfg = FeatureConfig::default();
        let centers = cfg.mel_centers();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut tested = 0;
        for (m, &c) in centers.iter().enumerate() {
            // need the triangle to span a few FFT bins to resolve the peak
            if m == 0 || centers[m] - centers[m - 1] < 4.0 * bin_hz || m + 1 == centers.len() {
                continue;
            }
            let x = logmel(&sine(c, 0.2, cfg.sample_rate), &cfg).unwrap();
            for row in x.data().chunks(cfg.mel_bins) {
                let best = crate::model::argmax(row);
                assert_eq!(best, m, "sine at {c:.1} Hz peaked in filter {best}");
            }
            tested += 1;
        }
        assert!(tested > 20);
    }

    #[test]
    fn hop_shift_moves_one_frame() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = logmel(&sig[160..], &cfg).unwrap();
        let b = logmel(&sig, &cfg).unwrap();
        for t in 0..a.shape()[0] {
            for j in 0..80 {
                assert!((a.at(&[t, j]) - b.at(&[t + 1, j])).abs() < 1e-6);
            }
        }
        assert!(b.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_zero_mean_unit_variance() {
        let cfg = FeatureConfig::default();
        let mut sig = sine(440.0, 0.3, 16000);
        sig.iter_mut()
            .enumerate()
            .for_each(|(i, s)| *s *= 1.0 + (i as f64 / 1000.0).sin() * 0.5);
        let x = extract(&sig, &cfg).unwrap();
        let t = x.shape()[0];
        for j in [10, 40] {
            let mean: f64 = (0..t).map(|i| x.at(&[i, j])).sum::<f64>() / t as f64;
            let var: f64 = (0..t).map(|i| (x.at(&[i, j]) - mean).powi(2)).sum::<f64>() / t as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn pcm_round_trip() {
        let s = vec![0.0, 0.5, -0.25, -1.0];
        let back = pcm_s16le(&to_pcm_s16le(&s)).unwrap();
        assert_eq!(back, s);
        assert!(pcm_s16le(&[1, 2, 3]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let d = make_synthetic(&SyntheticTask::toy(), 4, 9).unwrap();
        let mut d32 = d.clone();
        for u in &mut d32.utterances {
            u.features
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d32);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_exact_without_noise() {
        let task = SyntheticTask::toy();
        assert_eq!(
            make_synthetic(&task, 5, 1).unwrap(),
            make_synthetic(&task, 5, 1).unwrap()
        );
        assert_ne!(
            make_synthetic(&task, 5, 1).unwrap(),
            make_synthetic(&task, 5, 2).unwrap()
        );
        let quiet = SyntheticTask {
            noise: 0.0,
            min_tokens: 1,
            max_tokens: 1,
            ..task.clone()
        };
        let templates = quiet.templates().unwrap();
        let symbols = quiet.symbols();
        for u in make_synthetic(&quiet, 10, 4).unwrap().utterances {
            let k = symbols
                .iter()
                .position(|c| u.text == c.to_string())
                .unwrap();
            assert_eq!(u.features, templates[k]);
        }
    }

    #[test]
    fn templates_keep_their_distance() {
        let task = SyntheticTask::toy();
        let t = task.templates().unwrap();
        for i in 0..t.len() {
            for j in 0..i {
                assert!(rms_distance(&t[i], &t[j]) >= task.min_distance);
            }
        }
    }

    #[test]
    fn nearest_template_recovers_tokens() {
        let task = SyntheticTask::toy();
        let templates = task.templates().unwrap();
        let symbols = task.symbols();
        let (mut right, mut total) = (0, 0);
        for u in make_synthetic(&task, 200, 11).unwrap().utterances {
            let words: Vec<&str> = u.text.split(' ').collect();
            let l = task.frames_per_token;
            for (s, w) in words.iter().enumerate() {
                let seg = u.features.narrow_rows(s * l, l).unwrap();
                let best = (0..templates.len())
                    .min_by(|&a, &b| {
                        rms_distance(&seg, &templates[a])
                            .total_cmp(&rms_distance(&seg, &templates[b]))
                    })
                    .unwrap();
                right += usize::from(symbols[best].to_string() == *w);
                total += 1;
            }
        }
        assert!(right as f64 / total as f64 >= 0.99, "{right}/{total}");
    }
}
