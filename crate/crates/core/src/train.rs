//! Denoising score matching for the preconditioned denoiser.
//!
//! Each example draws `ln σ ~ N(P_mean, P_std²)`, corrupts a clean patch with
//! `N(0, σ²)` noise and regresses `D_θ` onto the clean patch with weight
//! `λ(σ) = (σ² + σ_d²)/(σ·σ_d)²`. Because `λ·c_out² = 1`, the loss equals
//! `‖F_θ − (x − c_skip·y)/c_out‖²`, so every noise level contributes on a
//! comparable scale.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::diffusion::{precond_constants, DEFAULT_SIGMA_DATA};
use crate::error::{Error, Result};
use crate::network::{DenoiserParams, NetworkArch, ParamGrads};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_samples: usize,
    pub lr: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub ema_rate: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub seed: u64,
    pub sigma_data: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_samples: 200_000,
            lr: 1e-3,
            warmup_steps: 1000,
            ema_rate: 0.999,
            p_mean: -1.2,
            p_std: 1.2,
            seed: 0,
            sigma_data: DEFAULT_SIGMA_DATA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.total_samples == 0 {
            return Err(Error::invalid("total_samples must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::invalid("ema_rate must lie in [0, 1)"));
        }
        if !(self.p_std > 0.0) || !self.p_mean.is_finite() {
            return Err(Error::invalid("P_std must be positive and P_mean finite"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.total_samples.div_ceil(self.batch_size)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Anything that can hand out clean training patches.
pub trait PatchSource {
    fn dim(&self) -> usize;

    /// Writes one patch into `out`, drawing any randomness from `rng`.
    fn sample(&self, rng: &mut SeededRng, out: &mut [f64]);
}

/// Fixed collection of patches, sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct PatchSet {
    dim: usize,
    patches: Vec<Vec<f64>>,
}

impl PatchSet {
    pub fn new(patches: Vec<Vec<f64>>) -> Result<Self> {
        let dim = patches.first().map(Vec::len).ok_or_else(|| Error::invalid("patch set is empty"))?;
        if dim == 0 || patches.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("patches must share a positive length"));
        }
        Ok(Self { dim, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

impl PatchSource for PatchSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut SeededRng, out: &mut [f64]) {
        out.copy_from_slice(&self.patches[rng.below(self.patches.len())]);
    }
}

/// Random crops of `patch_frames` consecutive frames from a spectrogram corpus.
#[derive(Debug, Clone)]
pub struct SpectrogramCrops {
    specs: Vec<MelSpectrogram>,
    patch_frames: usize,
}

impl SpectrogramCrops {
    pub fn new(specs: Vec<MelSpectrogram>, patch_frames: usize) -> Result<Self> {
        if patch_frames == 0 {
            return Err(Error::invalid("patch_frames must be at least 1"));
        }
        let specs: Vec<_> = specs.into_iter().filter(|s| s.frames() >= patch_frames).collect();
        let Some(first) = specs.first() else {
            return Err(Error::invalid(format!("no spectrogram has the {patch_frames} frames a patch needs")));
        };
        let n_mels = first.n_mels();
        if specs.iter().any(|s| s.n_mels() != n_mels) {
            return Err(Error::invalid("spectrograms disagree on the number of mel bands"));
        }
        Ok(Self { specs, patch_frames })
    }
}

impl PatchSource for SpectrogramCrops {
    fn dim(&self) -> usize {
        self.specs[0].n_mels() * self.patch_frames
    }

    fn sample(&self, rng: &mut SeededRng, out: &mut [f64]) {
        let spec = &self.specs[rng.below(self.specs.len())];
        let start = rng.below(spec.frames() - self.patch_frames + 1);
        let (frames, pf) = (spec.frames(), self.patch_frames);
        let values = spec.values();
        for m in 0..spec.n_mels() {
            out[m * pf..(m + 1) * pf].copy_from_slice(&values[m * frames + start..m * frames + start + pf]);
        }
    }
}

/// `ln σ ~ N(p_mean, p_std²)`.
pub fn sample_sigma(rng: &mut SeededRng, p_mean: f64, p_std: f64) -> f64 {
    (p_mean + p_std * rng.standard_normal()).exp()
}

pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Summed DSM loss over a batch and its exact parameter gradient.
///
/// Row `i` of `noise` is the pre-sampled `N(0, σ_i²)` corruption of row `i` of `clean`.
pub fn dsm_loss_batch(
    params: &DenoiserParams,
    clean: ArrayView2<'_, f64>,
    sigmas: &[f64],
    noise: ArrayView2<'_, f64>,
) -> Result<(f64, ParamGrads)> {
    if clean.dim() != noise.dim() || clean.nrows() != sigmas.len() {
        return Err(Error::invalid(format!(
            "clean {:?}, noise {:?} and {} sigmas do not line up",
            clean.dim(),
            noise.dim(),
            sigmas.len()
        )));
    }
    let consts = sigmas
        .iter()
        .map(|&s| precond_constants(s, params.sigma_data))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = &clean + &noise;
    let noisy = inputs.clone();
    for (mut row, c) in inputs.axis_iter_mut(Axis(0)).zip(&consts) {
        row *= c.c_in;
    }
    let c_noise: Vec<f64> = consts.iter().map(|c| c.c_noise).collect();
    let trace = params.forward_trace_rows(inputs.view(), &c_noise)?;

    let mut upstream = Array2::zeros(clean.dim());
    let mut loss = 0.0;
    for (r, c) in consts.iter().enumerate() {
        let lambda = loss_weight(sigmas[r], params.sigma_data);
        let f = trace.output().row(r);
        let resid: Array1<f64> = &noisy.row(r) * c.c_skip + &(&f * c.c_out) - &clean.row(r);
        loss += lambda * resid.dot(&resid);
        upstream.row_mut(r).assign(&(resid * (2.0 * lambda * c.c_out)));
    }
    let (_, grads) = params.backward(&trace, upstream.view(), true)?;
    Ok((loss, grads.expect("requested parameter gradients")))
}

/// `λ(σ)·‖D_θ(clean + noise; σ) − clean‖²` and its parameter gradient.
pub fn dsm_loss(params: &DenoiserParams, clean: &[f64], sigma: f64, noise: &[f64]) -> Result<(f64, ParamGrads)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let n = clean.len();
    let c = ArrayView2::from_shape((1, n), clean).map_err(|e| Error::invalid(e.to_string()))?;
    let e = ArrayView2::from_shape((1, noise.len()), noise).map_err(|e| Error::invalid(e.to_string()))?;
    dsm_loss_batch(params, c, &[sigma], e)
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: ParamGrads,
    v: ParamGrads,
    t: i32,
}

impl Adam {
    pub fn new(arch: &NetworkArch) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ParamGrads::zeros_like(arch),
            v: ParamGrads::zeros_like(arch),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.m.layers).zip(&mut self.v.layers)
        {
            ndarray::Zip::from(&mut layer.weight).and(&g.weight).and(&mut m.weight).and(&mut v.weight).for_each(
                |p, &g, m, v| update(p, g, m, v),
            );
            ndarray::Zip::from(&mut layer.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(
                |p, &g, m, v| update(p, g, m, v),
            );
        }
    }
}

/// `ema ← rate·ema + (1 − rate)·current`, layer by layer.
pub fn ema_update(ema: &mut DenoiserParams, current: &DenoiserParams, rate: f64) {
    for (e, c) in ema.layers.iter_mut().zip(&current.layers) {
        ndarray::Zip::from(&mut e.weight).and(&c.weight).for_each(|e, &c| *e = rate * *e + (1.0 - rate) * c);
        ndarray::Zip::from(&mut e.bias).and(&c.bias).for_each(|e, &c| *e = rate * *e + (1.0 - rate) * c);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean per-example loss of the step's batch.
    pub loss: f64,
    pub lr: f64,
    pub ema_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// EMA weights, the ones to use for scoring.
    pub params: DenoiserParams,
    /// Raw weights after the last step.
    pub raw: DenoiserParams,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    /// Mean batch loss over the last 10% of steps (at least one).
    pub fn final_smoothed_loss(&self) -> f64 {
        window_mean(&self.log[self.log.len() - tail_len(self.log.len())..])
    }

    /// Mean batch loss over the first 10% of steps.
    pub fn initial_smoothed_loss(&self) -> f64 {
        window_mean(&self.log[..tail_len(self.log.len())])
    }

    pub fn write_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_log_csv(path, &self.log)
    }
}

fn tail_len(n: usize) -> usize {
    (n / 10).max(1)
}

fn window_mean(rows: &[LogRow]) -> f64 {
    rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss,lr,ema_rate")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.lr, r.ema_rate)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains from `init` and returns the EMA-averaged weights.
///
/// Batches are drawn sequentially from one generator seeded by `config.seed`
/// and each step is a single batched forward/backward pass, so the result is
/// bit-identical for a given seed regardless of thread count.
pub fn train_from(source: &dyn PatchSource, init: DenoiserParams, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = source.dim();
    if n != init.in_dim() {
        return Err(Error::invalid(format!("patches have {n} elements, network expects {}", init.in_dim())));
    }
    let mut params = init;
    params.sigma_data = config.sigma_data;
    let mut ema = params.clone();
    let mut adam = Adam::new(&params.arch);
    let mut rng = SeededRng::new(config.seed);
    let steps = config.steps();
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let batch = config.batch_size.min(config.total_samples - step * config.batch_size);
        let mut clean = Array2::zeros((batch, n));
        let mut noise = Array2::zeros((batch, n));
        let mut sigmas = Vec::with_capacity(batch);
        for r in 0..batch {
            source.sample(&mut rng, clean.row_mut(r).as_slice_mut().expect("contiguous row"));
            let sigma = sample_sigma(&mut rng, config.p_mean, config.p_std);
            noise.row_mut(r).mapv_inplace(|_| sigma * rng.standard_normal());
            sigmas.push(sigma);
        }
        let (loss, mut grads) = dsm_loss_batch(&params, clean.view(), &sigmas, noise.view())?;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure { step, detail: "training loss is not finite".into() });
        }
        grads.scale(1.0 / batch as f64);
        let lr = config.lr_at(step);
        adam.step(&mut params, &grads, lr);
        ema_update(&mut ema, &params, config.ema_rate);
        log.push(LogRow { step, loss: loss / batch as f64, lr, ema_rate: config.ema_rate });
    }
    Ok(TrainOutcome { params: ema, raw: params, log })
}

/// Initializes a network for `arch` from `config.seed` and trains it.
pub fn train(source: &dyn PatchSource, arch: NetworkArch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut init_rng = SeededRng::new(config.seed).child(1);
    let init = DenoiserParams::init(arch, config.sigma_data, &mut init_rng)?;
    let config = TrainConfig { seed: SeededRng::new(config.seed).child(2).seed(), ..*config };
    train_from(source, init, &config)
}
