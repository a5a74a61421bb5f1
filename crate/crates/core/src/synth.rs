//! Synthetic "clean" and noise signals for desk-scale experiments.
//!
//! A clean utterance is a run of voiced syllables separated by short pauses.
//! Each syllable is a harmonic series on a gliding, slightly vibrating
//! fundamental, shaped by a spectral tilt and two formant-like resonances and
//! faded in and out with a raised-cosine envelope. Every utterance gets a very
//! low white floor so that pauses are not digitally silent.

use std::f64::consts::PI;

use crate::audio::{Waveform, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Default keeps every utterance above one 64-frame scoring patch.
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Peak amplitude of the voiced part.
    pub peak: f64,
    /// Standard deviation of the background floor.
    pub floor_std: f64,
    /// Highest harmonic frequency, Hz.
    pub max_harmonic_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: MODEL_SAMPLE_RATE,
            min_seconds: 1.1,
            max_seconds: 2.0,
            peak: 0.1,
            floor_std: 1e-4,
            max_harmonic_hz: 5000.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.min_seconds > 0.0) || self.max_seconds < self.min_seconds {
            return Err(Error::invalid("need a positive sample rate and 0 < min_seconds ≤ max_seconds"));
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) || !(self.floor_std >= 0.0) {
            return Err(Error::invalid("peak must lie in (0, 1] and floor_std must be non-negative"));
        }
        if !(self.max_harmonic_hz > 0.0) || self.max_harmonic_hz >= self.sample_rate as f64 / 2.0 {
            return Err(Error::invalid("max_harmonic_hz must lie below Nyquist"));
        }
        Ok(())
    }
}

struct Syllable {
    start: usize,
    len: usize,
    f0_start: f64,
    f0_end: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
    tilt: f64,
    formants: [(f64, f64, f64); 2],
}

impl Syllable {
    fn random(rng: &mut SeededRng, start: usize, len: usize) -> Self {
        let f0_start = rng.uniform_range(90.0, 260.0);
        Self {
            start,
            len,
            f0_start,
            f0_end: f0_start * rng.uniform_range(0.8, 1.2),
            vibrato_hz: rng.uniform_range(4.0, 7.0),
            vibrato_depth: rng.uniform_range(0.0, 0.02),
            tilt: rng.uniform_range(0.7, 1.4),
            formants: [
                (rng.uniform_range(300.0, 900.0), rng.uniform_range(100.0, 250.0), 1.0),
                (rng.uniform_range(900.0, 2600.0), rng.uniform_range(150.0, 350.0), rng.uniform_range(0.3, 0.8)),
            ],
        }
    }

    fn harmonic_gain(&self, k: usize, freq: f64) -> f64 {
        let resonance: f64 = self.formants.iter().map(|&(fc, bw, g)| g * (-((freq - fc) / bw).powi(2)).exp()).sum();
        (k as f64).powf(-self.tilt) * (0.15 + resonance)
    }

    fn render(&self, out: &mut [f64], sample_rate: f64, max_hz: f64) {
        let mut phase = 0.0;
        for i in 0..self.len {
            let frac = i as f64 / self.len as f64;
            let t = i as f64 / sample_rate;
            let f0 = (self.f0_start + (self.f0_end - self.f0_start) * frac)
                * (1.0 + self.vibrato_depth * (2.0 * PI * self.vibrato_hz * t).sin());
            phase += 2.0 * PI * f0 / sample_rate;
            let envelope = 0.5 - 0.5 * (2.0 * PI * frac).cos();
            let mut acc = 0.0;
            let mut k = 1;
            while k as f64 * f0 < max_hz {
                acc += self.harmonic_gain(k, k as f64 * f0) * (k as f64 * phase).sin();
                k += 1;
            }
            out[self.start + i] += envelope * acc;
        }
    }
}

/// One synthetic voiced utterance.
pub fn harmonic_utterance(rng: &mut SeededRng, config: &SynthConfig) -> Result<Waveform> {
    config.validate()?;
    let sr = config.sample_rate as f64;
    let seconds = rng.uniform_range(config.min_seconds, config.max_seconds);
    let len = (seconds * sr).round() as usize;
    let mut samples = vec![0.0; len];

    let mut syllables = Vec::new();
    let mut pos = (rng.uniform_range(0.02, 0.1) * sr) as usize;
    loop {
        let syl_len = (rng.uniform_range(0.12, 0.35) * sr) as usize;
        if pos + syl_len > len {
            break;
        }
        syllables.push(Syllable::random(rng, pos, syl_len));
        pos += syl_len + (rng.uniform_range(0.03, 0.15) * sr) as usize;
    }
    if syllables.is_empty() {
        let syl_len = len / 2;
        syllables.push(Syllable::random(rng, len / 4, syl_len));
    }
    for s in &syllables {
        s.render(&mut samples, sr, config.max_harmonic_hz);
    }

    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { config.peak / peak } else { 0.0 };
    for v in &mut samples {
        *v = *v * gain + config.floor_std * rng.standard_normal();
    }
    Ok(Waveform::new(samples, config.sample_rate))
}

/// `count` utterances; utterance `i` depends only on `(seed, i)`.
pub fn harmonic_corpus(seed: u64, count: usize, config: &SynthConfig) -> Result<Vec<Waveform>> {
    let root = SeededRng::new(seed);
    (0..count).map(|i| harmonic_utterance(&mut root.child(i as u64), config)).collect()
}

/// Unit-variance Gaussian white noise.
pub fn white_noise(rng: &mut SeededRng, len: usize, sample_rate: u32) -> Waveform {
    Waveform::new((0..len).map(|_| rng.standard_normal()).collect(), sample_rate)
}
