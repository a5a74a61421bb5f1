//! Versioned on-disk model format.
//!
//! ```text
//! "DSQA0001" | u32 LE header length | JSON header | f32 LE tensor payloads
//! ```
//!
//! The header records the architecture, `σ_data`, the integration schedule,
//! the feature configuration, the normalization statistics and the name and
//! shape of every tensor in payload order. Weights are stored as 32-bit
//! floats and widened on load, so save → load → save reproduces the file
//! byte for byte.

use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureConfig, FeatureExtractor, MelSpectrogram, NormStats, Waveform};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::likelihood::{score_utterances, TraceMode};
use crate::network::{DenoiserParams, Layer, NetworkArch};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSQA0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: NetworkArch,
    sigma_data: f64,
    schedule: NoiseSchedule,
    features: FeatureConfig,
    norm: NormStats,
    tensors: Vec<TensorEntry>,
}

/// A trained denoiser together with everything needed to score audio with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub features: FeatureConfig,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule, features: FeatureConfig) -> Result<Self> {
        schedule.validate()?;
        features.validate()?;
        if params.in_dim() % features.n_mels != 0 {
            return Err(Error::invalid(format!(
                "network input of {} elements is not a whole number of {}-band frames",
                params.in_dim(),
                features.n_mels
            )));
        }
        Ok(Self { params, schedule, features })
    }

    pub fn patch_frames(&self) -> usize {
        self.params.in_dim() / self.features.n_mels
    }

    pub fn norm(&self) -> NormStats {
        NormStats { mean: self.params.feature_mean, std: self.params.feature_std }
    }

    /// Normalized log-mel features of one waveform.
    pub fn spectrogram(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        FeatureExtractor::new(self.features)?.normalized(wave, self.norm())
    }

    /// Per-element log-likelihood score of each waveform, in input order.
    pub fn score_waveforms(&self, waves: &[Waveform], mode: TraceMode) -> Vec<Result<f64>> {
        let specs: Vec<Result<MelSpectrogram>> = waves.par_iter().map(|w| self.spectrogram(w)).collect();
        let ok: Vec<MelSpectrogram> = specs.iter().filter_map(|s| s.as_ref().ok().cloned()).collect();
        let mut scored = score_utterances(&self.params, &ok, &self.schedule, mode).into_iter();
        specs
            .into_iter()
            .map(|s| match s {
                Ok(_) => scored.next().expect("one score per spectrogram"),
                Err(e) => Err(e),
            })
            .collect()
    }

    fn header(&self) -> Header {
        let mut tensors = Vec::new();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let (rows, cols) = layer.weight.dim();
            tensors.push(TensorEntry { name: format!("layers.{i}.weight"), shape: vec![rows, cols] });
            tensors.push(TensorEntry { name: format!("layers.{i}.bias"), shape: vec![rows] });
        }
        Header {
            format_version: FORMAT_VERSION,
            arch: self.params.arch.clone(),
            sigma_data: self.params.sigma_data,
            schedule: self.schedule,
            features: self.features,
            norm: self.norm(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.arch.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for layer in &self.params.layers {
            for &v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing DSQA0001 magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(bad(format!("header length {header_len} exceeds file size")));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header is not JSON: {e}")))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(bad(format!("unsupported format_version {v}; this build reads {FORMAT_VERSION}"))),
            None => return Err(bad("header has no format_version".into())),
        }
        let header: Header = serde_json::from_value(value).map_err(|e| bad(format!("malformed header: {e}")))?;
        header.arch.validate()?;

        let dims = header.arch.layer_dims();
        let expected: Vec<TensorEntry> = dims
            .iter()
            .enumerate()
            .flat_map(|(i, &(fan_in, fan_out))| {
                [
                    TensorEntry { name: format!("layers.{i}.weight"), shape: vec![fan_out, fan_in] },
                    TensorEntry { name: format!("layers.{i}.bias"), shape: vec![fan_out] },
                ]
            })
            .collect();
        if header.tensors != expected {
            return Err(bad("tensor table does not match the architecture".into()));
        }
        let payload = &body[header_len..];
        let floats: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * floats {
            return Err(bad(format!("payload has {} bytes, header describes {}", payload.len(), 4 * floats)));
        }
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        if payload.chunks_exact(4).any(|c| !f32::from_le_bytes(c.try_into().unwrap()).is_finite()) {
            return Err(bad("payload contains non-finite weights".into()));
        }
        let layers = dims
            .iter()
            .map(|&(fan_in, fan_out)| {
                let weight = Array2::from_shape_vec((fan_out, fan_in), values.by_ref().take(fan_in * fan_out).collect())
                    .expect("length checked above");
                let bias = Array1::from_iter(values.by_ref().take(fan_out));
                Layer { weight, bias }
            })
            .collect();
        let params =
            DenoiserParams::from_layers(header.arch, layers, header.sigma_data, header.norm.mean, header.norm.std)?;
        Self::new(params, header.schedule, header.features)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
