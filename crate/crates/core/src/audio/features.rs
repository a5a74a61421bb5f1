//! Waveform to normalized log-mel spectrogram.
//!
//! 16 kHz input, 1024-sample (64 ms) periodic Hann window, hop 256 (75 %
//! overlap), reflect-padded centered frames, 80 triangular HTK-mel filters over
//! 0–8000 Hz applied to the power spectrum, natural log with a floor of 1e-5,
//! then `(log − mean) / std · 0.5` with corpus-level statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::Waveform;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MODEL_SAMPLE_RATE: u32 = 16_000;
/// Target standard deviation of normalized features.
pub const FEATURE_SCALE: f64 = 0.5;
pub const FEATURE_DUMP_MAGIC: &[u8; 8] = b"MELF0001";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: MODEL_SAMPLE_RATE,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != MODEL_SAMPLE_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "feature pipeline runs at {MODEL_SAMPLE_RATE} Hz, config asks for {}",
                self.sample_rate
            )));
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::invalid("n_fft must be even and ≥ 2; hop and n_mels must be positive"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::invalid(format!("mel band edges must satisfy 0 ≤ fmin < fmax ≤ {nyquist}")));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log floor must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }
}

/// Corpus-level statistics of log-mel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// `n_mels × frames` log-mel matrix, row-major by band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor,
    normalized: bool,
}

impl MelSpectrogram {
    pub fn new(values: Tensor, normalized: bool) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid(format!("spectrogram must be 2-D, got shape {:?}", values.shape())));
        }
        Ok(Self { values, normalized })
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values.data()[mel * self.frames() + frame]
    }
}

pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters, `n_mels × n_bins`, unit peak.
pub fn mel_filterbank(config: &FeatureConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let n_bins = config.n_bins();
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    let edges: Vec<f64> =
        (0..config.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64)).collect();
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    let mut fb = Array2::zeros((config.n_mels, n_bins));
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
    }
    Ok(fb)
}

/// Magnitude STFT reused across calls with the same configuration.
pub struct Stft {
    config: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self { config, window: periodic_hann(config.n_fft), fft })
    }

    /// `(n_fft/2 + 1) × ceil(len / hop)` magnitudes; frame `i` is centered on sample `i·hop`.
    pub fn magnitude(&self, wave: &Waveform) -> Result<Tensor> {
        let cfg = &self.config;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {} Hz; the model expects {} Hz (resample before scoring)",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let len = wave.len();
        if len < cfg.n_fft {
            return Err(Error::invalid(format!("waveform has {len} samples, need at least {}", cfg.n_fft)));
        }
        let half = cfg.n_fft / 2;
        let reflect = |i: isize| -> f64 {
            let n = len as isize;
            let j = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            wave.samples[j as usize]
        };
        let frames = cfg.frames_for(len);
        let n_bins = cfg.n_bins();
        let mut out = vec![0.0; n_bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for f in 0..frames {
            let start = (f * cfg.hop) as isize - half as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(reflect(start + i as isize) * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..n_bins {
                out[k * frames + f] = buf[k].norm();
            }
        }
        Tensor::new(vec![n_bins, frames], out)
    }
}

pub fn stft_magnitude(wave: &Waveform, config: &FeatureConfig) -> Result<Tensor> {
    Stft::new(*config)?.magnitude(wave)
}

/// Projects magnitudes onto the mel filterbank in the power domain.
pub fn mel_project(mag: &Tensor, config: &FeatureConfig) -> Result<Tensor> {
    let fb = mel_filterbank(config)?;
    apply_filterbank(&fb, mag)
}

fn apply_filterbank(fb: &Array2<f64>, mag: &Tensor) -> Result<Tensor> {
    let shape = mag.shape();
    if shape.len() != 2 || shape[0] != fb.ncols() {
        return Err(Error::invalid(format!("expected {} frequency rows, got shape {shape:?}", fb.ncols())));
    }
    let power = Array2::from_shape_vec((shape[0], shape[1]), mag.data().iter().map(|v| v * v).collect())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mel = fb.dot(&power);
    Tensor::new(vec![fb.nrows(), shape[1]], mel.into_raw_vec_and_offset().0)
}

/// `ln(max(mel, floor))`, element-wise.
pub fn log_compress(mel: &Tensor, floor: f64) -> Tensor {
    let data = mel.data().iter().map(|&v| v.max(floor).ln()).collect();
    Tensor::new(mel.shape().to_vec(), data).expect("shape preserved")
}

/// `(ln(max(mel, floor)) − mean) / std · 0.5`.
pub fn log_compress_normalize(mel: &Tensor, stats: NormStats, floor: f64) -> Result<MelSpectrogram> {
    if !(stats.std > 0.0) {
        return Err(Error::invalid(format!("normalization std must be positive, got {}", stats.std)));
    }
    let scale = FEATURE_SCALE / stats.std;
    let data = mel.data().iter().map(|&v| (v.max(floor).ln() - stats.mean) * scale).collect();
    MelSpectrogram::new(Tensor::new(mel.shape().to_vec(), data)?, true)
}

/// STFT, filterbank and log compression with cached plan and filters.
pub struct FeatureExtractor {
    config: FeatureConfig,
    stft: Stft,
    filterbank: Array2<f64>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        Ok(Self { config, stft: Stft::new(config)?, filterbank: mel_filterbank(&config)? })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn mel_power(&self, wave: &Waveform) -> Result<Tensor> {
        apply_filterbank(&self.filterbank, &self.stft.magnitude(wave)?)
    }

    /// Unnormalized log-mel values.
    pub fn log_mel(&self, wave: &Waveform) -> Result<Tensor> {
        Ok(log_compress(&self.mel_power(wave)?, self.config.log_floor))
    }

    pub fn normalized(&self, wave: &Waveform, stats: NormStats) -> Result<MelSpectrogram> {
        log_compress_normalize(&self.mel_power(wave)?, stats, self.config.log_floor)
    }
}

/// Global mean and population std of log-mel values over a corpus.
pub fn compute_dataset_stats(corpus: &[Waveform], config: &FeatureConfig) -> Result<NormStats> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot compute feature statistics of an empty corpus"));
    }
    let extractor = FeatureExtractor::new(*config)?;
    let logs = corpus.iter().map(|w| extractor.log_mel(w)).collect::<Result<Vec<_>>>()?;
    stats_from_log_mels(&logs)
}

fn stats_from_log_mels(logs: &[Tensor]) -> Result<NormStats> {
    let count: usize = logs.iter().map(Tensor::len).sum();
    let mean = logs.iter().flat_map(|t| t.data()).sum::<f64>() / count as f64;
    let var = logs.iter().flat_map(|t| t.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    // Summation rounding leaves ~1e-13 of spread on constant input.
    if !(std > 1e-9 * mean.abs().max(1.0)) {
        return Err(Error::invalid(
            "log-mel values have zero spread across the corpus (silent or constant audio); \
             supply varied training material",
        ));
    }
    Ok(NormStats { mean, std })
}

/// `MELF0001`, u32 n_mels, u32 frames, then little-endian f32 values by band.
pub fn write_feature_dump(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_DUMP_MAGIC)?;
    w.write_all(&(spec.n_mels() as u32).to_le_bytes())?;
    w.write_all(&(spec.frames() as u32).to_le_bytes())?;
    for &v in spec.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_DUMP_MAGIC {
        return Err(Error::UnsupportedFormat("not a MELF0001 feature dump".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n_mels = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let frames = u32::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(n_mels * frames);
    for _ in 0..n_mels * frames {
        r.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    MelSpectrogram::new(Tensor::new(vec![n_mels, frames], data)?, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn sine(freq: f64, len: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..len).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()).collect(),
            16000,
        )
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = SeededRng::new(seed);
        Waveform::new((0..len).map(|_| 0.1 * rng.standard_normal()).collect(), 16000)
    }

    #[test]
    fn sine_at_bin_center_concentrates_energy() {
        let cfg = FeatureConfig::default();
        let k = 40;
        let wave = sine(k as f64 * 16000.0 / 1024.0, 8000, 0.5);
        let mag = stft_magnitude(&wave, &cfg).unwrap();
        let frames = mag.shape()[1];
        assert_eq!(frames, 8000usize.div_ceil(256));
        for f in 4..frames - 4 {
            let total: f64 = (0..513).map(|b| mag.data()[b * frames + f].powi(2)).sum();
            let near: f64 = (k - 1..=k + 1).map(|b| mag.data()[b * frames + f].powi(2)).sum();
            assert!(near / total >= 0.9, "frame {f}: {}", near / total);
        }
    }

    #[test]
    fn zero_signal_zero_magnitude() {
        let mag = stft_magnitude(&Waveform::new(vec![0.0; 2048], 16000), &FeatureConfig::default()).unwrap();
        assert!(mag.data().iter().all(|&v| v == 0.0));
        assert_eq!(mag.shape(), &[513, 8]);
    }

    #[test]
    fn parseval_single_frame() {
        let cfg = FeatureConfig::default();
        let wave = noise(4096, 3);
        let mag = stft_magnitude(&wave, &cfg).unwrap();
        let frames = mag.shape()[1];
        let f = 6;
        let window = periodic_hann(1024);
        let start = f * 256 - 512;
        let time: f64 = (0..1024).map(|i| (wave.samples[start + i] * window[i]).powi(2)).sum();
        let col = |b: usize| mag.data()[b * frames + f].powi(2);
        let freq: f64 = col(0) + col(512) + 2.0 * (1..512).map(col).sum::<f64>();
        assert!((freq / 1024.0 - time).abs() <= 1e-6 * time);
    }

    #[test]
    fn wrong_rate_and_short_input_rejected() {
        let cfg = FeatureConfig::default();
        assert!(matches!(
            stft_magnitude(&Waveform::new(vec![0.0; 4096], 44100), &cfg),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            stft_magnitude(&Waveform::new(vec![0.0; 1000], 16000), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mel_scale_reference() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_positive() {
        let fb = mel_filterbank(&FeatureConfig::default()).unwrap();
        assert_eq!(fb.dim(), (80, 513));
        assert!(fb.iter().all(|&v| v >= 0.0));
        for row in fb.rows() {
            assert!(row.sum() > 0.0);
        }
    }

    #[test]
    fn mel_of_zero_is_zero() {
        let mag = Tensor::zeros(vec![513, 3]).unwrap();
        let mel = mel_project(&mag, &FeatureConfig::default()).unwrap();
        assert_eq!(mel.shape(), &[80, 3]);
        assert!(mel.data().iter().all(|&v| v == 0.0));
        assert!(mel_project(&Tensor::zeros(vec![512, 3]).unwrap(), &FeatureConfig::default()).is_err());
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats { mean: -2.0, std: 3.0 };
        let mel = Tensor::new(vec![2, 2], vec![(-2f64).exp(); 4]).unwrap();
        let out = log_compress_normalize(&mel, stats, 1e-5).unwrap();
        assert!(out.values().iter().all(|v| v.abs() < 1e-15));
        assert!(out.is_normalized());

        let low = Tensor::new(vec![1, 3], vec![0.0, 1e-9, 1e-5]).unwrap();
        let out = log_compress_normalize(&low, stats, 1e-5).unwrap();
        assert_eq!(out.values()[0], out.values()[2]);
        assert_eq!(out.values()[1], out.values()[2]);

        assert!(log_compress_normalize(&mel, NormStats { mean: 0.0, std: 0.0 }, 1e-5).is_err());
    }

    #[test]
    fn training_stats_normalize_training_set() {
        let cfg = FeatureConfig::default();
        let corpus = vec![sine(440.0, 6000, 0.3), noise(5000, 1), sine(1200.0, 4000, 0.05)];
        let stats = compute_dataset_stats(&corpus, &cfg).unwrap();
        let ex = FeatureExtractor::new(cfg).unwrap();
        let all: Vec<f64> =
            corpus.iter().flat_map(|w| ex.normalized(w, stats).unwrap().values().to_vec()).collect();
        let (m, s) = crate::numerics::mean_std(&all).unwrap();
        assert!(m.abs() < 1e-6 && (s - 0.5).abs() < 1e-6, "{m} {s}");
    }

    #[test]
    fn dataset_stats_edge_cases() {
        let cfg = FeatureConfig::default();
        assert!(compute_dataset_stats(&[], &cfg).is_err());
        let silent = Waveform::new(vec![0.0; 4096], 16000);
        let err = compute_dataset_stats(&[silent], &cfg).unwrap_err();
        assert!(err.to_string().contains("zero spread"));

        let one = noise(3000, 9);
        let stats = compute_dataset_stats(std::slice::from_ref(&one), &cfg).unwrap();
        let own = crate::numerics::mean_std(FeatureExtractor::new(cfg).unwrap().log_mel(&one).unwrap().data()).unwrap();
        assert_eq!((stats.mean, stats.std), own);

        let a = vec![noise(3000, 1), sine(300.0, 5000, 0.2), noise(2000, 2)];
        let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
        let sa = compute_dataset_stats(&a, &cfg).unwrap();
        let sb = compute_dataset_stats(&b, &cfg).unwrap();
        assert!((sa.mean - sb.mean).abs() < 1e-12 && (sa.std - sb.std).abs() < 1e-12);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let w = noise(5000, 4);
        let stats = NormStats { mean: -3.0, std: 2.0 };
        let a = ex.normalized(&w, stats).unwrap();
        let b = ex.normalized(&w, stats).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn one_hop_shift_shifts_frames() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let base = noise(8192 + 256, 12);
        let shifted = Waveform::new(base.samples[256..].to_vec(), 16000);
        let a = ex.log_mel(&base).unwrap();
        let b = ex.log_mel(&shifted).unwrap();
        let (fa, fb) = (a.shape()[1], b.shape()[1]);
        for m in 0..80 {
            for f in 3..fb - 3 {
                let va = a.data()[m * fa + f + 1];
                let vb = b.data()[m * fb + f];
                assert!((va - vb).abs() <= 1e-10, "mel {m} frame {f}: {va} vs {vb}");
            }
        }
    }

    #[test]
    fn louder_never_lowers_features() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let stats = NormStats { mean: -4.0, std: 2.5 };
        let w = sine(700.0, 5000, 0.05);
        let quiet = ex.normalized(&w, stats).unwrap();
        for g in [1.5, 4.0] {
            let loud = ex.normalized(&w.scaled(g), stats).unwrap();
            assert!(quiet.values().iter().zip(loud.values()).all(|(q, l)| l >= q));
        }
    }

    #[test]
    fn feature_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.melf");
        let spec = MelSpectrogram::new(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, -0.125]).unwrap(), true)
            .unwrap();
        write_feature_dump(&path, &spec).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"MELF0001");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(read_feature_dump(&path).unwrap(), spec);
    }
}
