//! Exact log-likelihood through the probability-flow ODE.
//!
//! The augmented state `[x, Δlog p]` is integrated forward from `σ_min` to
//! `T = σ_max` over the ρ-warped grid with Heun's method:
//!
//! ```text
//! dx/dt      = f(x; t)
//! dΔlog p/dt = Tr(∂f/∂x)      (≈ εᵀ (∂f/∂x) ε with a fixed Rademacher ε)
//! log p_0(x) = log N(x_T; 0, T²I) + Δlog p
//! ```
//!
//! Both components share the predictor/corrector stages, so the trace term
//! at each stage is evaluated at exactly the state the drift was evaluated at,
//! using one reverse-mode VJP per probe.
//!
//! Many independent points are solved together: every drift evaluation is a
//! single batched pass through the denoiser.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::audio::MelSpectrogram;
use crate::diffusion::{karras_time_grid, Denoiser, NoiseSchedule, ProbabilityFlow};
use crate::error::{Error, Result};
use crate::numerics::{dot, sample_rademacher, SeededRng, Tensor};

/// Largest dimension for which [`TraceMode::Exact`] is accepted.
pub const EXACT_TRACE_MAX_DIM: usize = 4096;

/// State norm beyond which integration is aborted as divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Rows per batched solve when scoring many patches.
const PATCH_BATCH: usize = 32;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// Average of `probe_count` fixed Rademacher probes drawn from `seed`.
    Hutchinson { probe_count: usize, seed: u64 },
    /// Sum over all basis vectors; one VJP per dimension.
    Exact,
}

impl Default for TraceMode {
    fn default() -> Self {
        TraceMode::Hutchinson { probe_count: 1, seed: 0 }
    }
}

impl TraceMode {
    pub fn hutchinson(seed: u64) -> Self {
        TraceMode::Hutchinson { probe_count: 1, seed }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match *self {
            TraceMode::Hutchinson { probe_count, .. } if probe_count == 0 => {
                Err(Error::invalid("Hutchinson estimator needs at least one probe"))
            }
            TraceMode::Exact if n > EXACT_TRACE_MAX_DIM => Err(Error::invalid(format!(
                "exact trace limited to {EXACT_TRACE_MAX_DIM} elements, input has {n}"
            ))),
            _ => Ok(()),
        }
    }

    fn probe_seed(&self) -> u64 {
        match *self {
            TraceMode::Hutchinson { seed, .. } => seed,
            TraceMode::Exact => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodResult {
    /// `log p_0(x)` in nats.
    pub log_p: f64,
    pub log_p_per_dim: f64,
    pub x_t: Tensor,
    /// Integrated trace term, `log p_0(x) − log p_T(x_T)`.
    pub delta_log_p: f64,
    pub log_p_terminal: f64,
    pub probe_seed: u64,
    pub n_elements: usize,
}

/// Hutchinson estimate `εᵀ (∂f/∂x) ε` from one VJP.
pub fn hutchinson_trace_term<F>(drift_vjp: F, x: &[f64], eps: &[f64]) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    if x.len() != eps.len() {
        return Err(Error::invalid(format!("probe length {} does not match state {}", eps.len(), x.len())));
    }
    let g = drift_vjp(x, eps)?;
    Ok(dot(&g, eps))
}

/// `Tr(∂f/∂x)` from one VJP per basis vector.
pub fn exact_trace_term<F>(drift_vjp: F, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    TraceMode::Exact.validate(n)?;
    let mut basis = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        basis[i] = 1.0;
        total += drift_vjp(x, &basis)?[i];
        basis[i] = 0.0;
    }
    Ok(total)
}

/// `log N(x_T; 0, T²I)`.
pub fn log_p_terminal(x_t: &[f64], terminal_time: f64) -> Result<f64> {
    if !(terminal_time > 0.0) {
        return Err(Error::invalid("terminal time must be positive"));
    }
    let n = x_t.len() as f64;
    let t2 = terminal_time * terminal_time;
    let sq: f64 = x_t.iter().map(|v| v * v).sum();
    Ok(-0.5 * n * (LN_2PI + t2.ln()) - sq / (2.0 * t2))
}

/// Rademacher probes shared by every point scored with `seed`.
fn probe_matrix(mode: &TraceMode, n: usize) -> Result<Array2<f64>> {
    match *mode {
        TraceMode::Hutchinson { probe_count, seed } => {
            let root = SeededRng::new(seed);
            let mut probes = Array2::zeros((probe_count, n));
            for (p, mut row) in probes.rows_mut().into_iter().enumerate() {
                let mut rng = if p == 0 { root.clone() } else { root.child(p as u64) };
                row.assign(&Array1::from(sample_rademacher(&mut rng, n)?.into_data()));
            }
            Ok(probes)
        }
        TraceMode::Exact => Ok(Array2::eye(n)),
    }
}

struct CoupledSystem<'a, D: Denoiser + ?Sized> {
    flow: ProbabilityFlow<'a, D>,
    /// Probe rows, replicated for each point.
    probes: Array2<f64>,
    exact: bool,
}

impl<D: Denoiser + ?Sized> CoupledSystem<'_, D> {
    /// Drift of every point and its trace term at time `t`.
    fn eval(&self, xs: &Array2<f64>, t: f64) -> Result<(Array2<f64>, Array1<f64>)> {
        let (points, n) = xs.dim();
        let per_point = self.probes.nrows();
        let mut states = Array2::zeros((points * per_point, n));
        let mut vs = Array2::zeros((points * per_point, n));
        for b in 0..points {
            for p in 0..per_point {
                states.row_mut(b * per_point + p).assign(&xs.row(b));
                vs.row_mut(b * per_point + p).assign(&self.probes.row(p));
            }
        }
        let (drift, vjp) = self.flow.drift_and_vjp_batch(states.view(), t, vs.view())?;
        let mut f = Array2::zeros((points, n));
        let mut trace = Array1::zeros(points);
        for b in 0..points {
            f.row_mut(b).assign(&drift.row(b * per_point));
            let mut acc = 0.0;
            for p in 0..per_point {
                let g = vjp.row(b * per_point + p);
                acc += if self.exact { g[p] } else { g.dot(&self.probes.row(p)) };
            }
            trace[b] = if self.exact { acc } else { acc / per_point as f64 };
        }
        Ok((f, trace))
    }
}

fn check_states(xs: &Array2<f64>, step: usize) -> Result<()> {
    for (b, row) in xs.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericalFailure { step, detail: format!("non-finite state for point {b}") });
        }
        if norm > DIVERGENCE_NORM {
            return Err(Error::NumericalFailure {
                step,
                detail: format!("state norm {norm:.3e} of point {b} exceeds {DIVERGENCE_NORM:e}"),
            });
        }
    }
    Ok(())
}

/// Heun integration of `[x, Δ]` over the schedule's grid.
///
/// Steps are uniform-width in `u = t^(1/ρ)` and the state is carried as
/// `y = x / √(σ_d² + t²)`, the preconditioner's input scaling, so that
///
/// ```text
/// dy/du = (dt/du) · (f(x; t) − x·t/(σ_d² + t²)) / √(σ_d² + t²)
/// dΔ/du = (dt/du) · trace(x; t),      dt/du = ρ·t^((ρ−1)/ρ)
/// ```
///
/// Both are exact rewrites of the flow; in these coordinates the state of
/// data with scale `σ_d` is stationary and the trace integrand is smooth.
fn heun_solve<E>(
    x0: Array2<f64>,
    schedule: &NoiseSchedule,
    data_scale: f64,
    mut eval: E,
) -> Result<(Array2<f64>, Array1<f64>)>
where
    E: FnMut(&Array2<f64>, f64) -> Result<(Array2<f64>, Array1<f64>)>,
{
    let grid = karras_time_grid(schedule)?;
    let rho = schedule.rho;
    let coord: Vec<f64> = grid.iter().map(|t| t.powf(1.0 / rho)).collect();
    let scale = |t: f64| (data_scale * data_scale + t * t).sqrt();
    let dt_du = |t: f64| rho * t.powf((rho - 1.0) / rho);

    let rates = |x: &Array2<f64>, t: f64, f: Array2<f64>, tr: Array1<f64>| {
        let c2 = data_scale * data_scale + t * t;
        let j = dt_du(t);
        let dy = (f - &(x * (t / c2))) * (j / c2.sqrt());
        (dy, tr * j)
    };

    check_states(&x0, 0)?;
    let points = x0.nrows();
    let mut y = &x0 / scale(grid[0]);
    let mut x = x0;
    let mut delta = Array1::<f64>::zeros(points);
    let (f, tr) = eval(&x, grid[0])?;
    let (mut dy_cur, mut dq_cur) = rates(&x, grid[0], f, tr);
    for step in 0..grid.len() - 1 {
        let (t1, h) = (grid[step + 1], coord[step + 1] - coord[step]);
        let y_pred = &y + &(&dy_cur * h);
        let x_pred = &y_pred * scale(t1);
        check_states(&x_pred, step)?;
        let (f, tr) = eval(&x_pred, t1)?;
        let (dy_next, dq_next) = rates(&x_pred, t1, f, tr);
        y = &y + &((&dy_cur + &dy_next) * (0.5 * h));
        delta = &delta + &((&dq_cur + &dq_next) * (0.5 * h));
        x = &y * scale(t1);
        check_states(&x, step)?;
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::NumericalFailure { step, detail: "non-finite log-density increment".into() });
        }
        if step + 2 < grid.len() {
            let (f, tr) = eval(&x, t1)?;
            (dy_cur, dq_cur) = rates(&x, t1, f, tr);
        }
    }
    Ok((x, delta))
}

/// Solves the coupled problem for every row of `x0` at once.
pub fn compute_log_likelihood_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: ArrayView2<'_, f64>,
    schedule: &NoiseSchedule,
    mode: TraceMode,
) -> Result<Vec<LikelihoodResult>> {
    let (points, n) = x0.dim();
    if points == 0 {
        return Ok(Vec::new());
    }
    if n != denoiser.dim() {
        return Err(Error::invalid(format!("input has {n} elements, denoiser expects {}", denoiser.dim())));
    }
    mode.validate(n)?;
    let system = CoupledSystem {
        flow: ProbabilityFlow::for_schedule(denoiser, schedule)?,
        probes: probe_matrix(&mode, n)?,
        exact: matches!(mode, TraceMode::Exact),
    };
    let (x, delta) = heun_solve(x0.to_owned(), schedule, denoiser.data_scale(), |x, t| system.eval(x, t))?;

    let terminal = schedule.terminal_time();
    x.axis_iter(Axis(0))
        .zip(delta.iter())
        .map(|(row, &delta_log_p)| {
            let x_t = row.to_vec();
            let log_p_terminal = log_p_terminal(&x_t, terminal)?;
            let log_p = log_p_terminal + delta_log_p;
            Ok(LikelihoodResult {
                log_p,
                log_p_per_dim: log_p / n as f64,
                x_t: Tensor::from_vec(x_t),
                delta_log_p,
                log_p_terminal,
                probe_seed: mode.probe_seed(),
                n_elements: n,
            })
        })
        .collect()
}

/// Log-likelihood of a single point; `x_t` keeps the input's shape.
pub fn compute_log_likelihood<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Tensor,
    schedule: &NoiseSchedule,
    mode: TraceMode,
) -> Result<LikelihoodResult> {
    let xs = ArrayView2::from_shape((1, x0.len()), x0.data()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut result = compute_log_likelihood_batch(denoiser, xs, schedule, mode)?.remove(0);
    result.x_t = result.x_t.reshape(x0.shape().to_vec())?;
    Ok(result)
}

/// Integrates only the state `dx/dt = f(x; t)` from `σ_min` to `σ_max`, with
/// the same steps as [`compute_log_likelihood`].
pub fn integrate_flow<D: Denoiser + ?Sized>(denoiser: &D, x0: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let flow = ProbabilityFlow::for_schedule(denoiser, schedule)?;
    let xs = ArrayView2::from_shape((1, x0.len()), x0).map_err(|e| Error::invalid(e.to_string()))?;
    let (x, _) = heun_solve(xs.to_owned(), schedule, denoiser.data_scale(), |x, t| {
        Ok((flow.drift_batch(x.view(), t)?, Array1::zeros(x.nrows())))
    })?;
    Ok(x.into_raw_vec_and_offset().0)
}

/// Splits a spectrogram into flattened `n_mels × patch_frames` patches.
///
/// Patches do not overlap. A trailing remainder of at least half a patch is
/// zero-padded to full length; a shorter one is dropped. Inputs shorter than
/// one full patch are rejected.
pub fn extract_patches(spec: &MelSpectrogram, patch_frames: usize) -> Result<Vec<Vec<f64>>> {
    if patch_frames == 0 {
        return Err(Error::invalid("patch_frames must be at least 1"));
    }
    let (n_mels, frames) = (spec.n_mels(), spec.frames());
    if frames < patch_frames {
        return Err(Error::invalid(format!(
            "spectrogram has {frames} frames; scoring needs at least {patch_frames}"
        )));
    }
    let values = spec.values();
    let mut patches = Vec::new();
    let mut start = 0;
    while start < frames {
        let avail = (frames - start).min(patch_frames);
        if avail < patch_frames && avail * 2 < patch_frames {
            break;
        }
        let mut patch = vec![0.0; n_mels * patch_frames];
        for m in 0..n_mels {
            let row = &values[m * frames + start..m * frames + start + avail];
            patch[m * patch_frames..m * patch_frames + avail].copy_from_slice(row);
        }
        patches.push(patch);
        start += patch_frames;
    }
    Ok(patches)
}

/// Mean per-element log-likelihood over the spectrogram's patches.
pub fn score_utterance<D: Denoiser + ?Sized>(
    denoiser: &D,
    spec: &MelSpectrogram,
    schedule: &NoiseSchedule,
    mode: TraceMode,
) -> Result<f64> {
    let mut scores = score_utterances(denoiser, std::slice::from_ref(spec), schedule, mode);
    scores.remove(0)
}

/// Scores many spectrograms, pooling their patches into shared batches.
///
/// Results come back in input order and do not depend on thread scheduling.
/// A failing batch is retried one utterance at a time so that a single bad
/// input only fails its own entry.
pub fn score_utterances<D: Denoiser + ?Sized>(
    denoiser: &D,
    specs: &[MelSpectrogram],
    schedule: &NoiseSchedule,
    mode: TraceMode,
) -> Vec<Result<f64>> {
    let n = denoiser.dim();
    let mut owners = Vec::new();
    let mut patches = Vec::new();
    let mut results: Vec<Option<Result<f64>>> = (0..specs.len()).map(|_| None).collect();
    for (u, spec) in specs.iter().enumerate() {
        if spec.n_mels() == 0 || n % spec.n_mels() != 0 {
            results[u] = Some(Err(Error::invalid(format!(
                "model input of {n} elements is not a whole number of {}-band frames",
                spec.n_mels()
            ))));
            continue;
        }
        match extract_patches(spec, n / spec.n_mels()) {
            Ok(ps) => {
                for p in ps {
                    owners.push(u);
                    patches.push(p);
                }
            }
            Err(e) => results[u] = Some(Err(e)),
        }
    }

    let chunk = match mode {
        TraceMode::Exact => 1,
        TraceMode::Hutchinson { probe_count, .. } => (PATCH_BATCH / probe_count).max(1),
    };
    let chunks: Vec<(usize, usize)> =
        (0..patches.len()).step_by(chunk).map(|s| (s, (s + chunk).min(patches.len()))).collect();
    let solved: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut xs = Array2::zeros((hi - lo, n));
            for (r, p) in patches[lo..hi].iter().enumerate() {
                xs.row_mut(r).assign(&ndarray::ArrayView1::from(p.as_slice()));
            }
            compute_log_likelihood_batch(denoiser, xs.view(), schedule, mode)
                .map(|rs| rs.into_iter().map(|r| r.log_p_per_dim).collect())
        })
        .collect();

    let mut sums = vec![0.0; specs.len()];
    let mut counts = vec![0usize; specs.len()];
    let mut retry = vec![false; specs.len()];
    for (&(lo, hi), res) in chunks.iter().zip(solved) {
        match res {
            Ok(values) => {
                for (i, v) in (lo..hi).zip(values) {
                    sums[owners[i]] += v;
                    counts[owners[i]] += 1;
                }
            }
            Err(_) => {
                for &u in &owners[lo..hi] {
                    retry[u] = true;
                }
            }
        }
    }

    for u in 0..specs.len() {
        if results[u].is_some() {
            continue;
        }
        if retry[u] {
            let own: Vec<&Vec<f64>> = owners.iter().zip(&patches).filter(|(o, _)| **o == u).map(|(_, p)| p).collect();
            let mut xs = Array2::zeros((own.len(), n));
            for (r, p) in own.iter().enumerate() {
                xs.row_mut(r).assign(&ndarray::ArrayView1::from(p.as_slice()));
            }
            results[u] = Some(
                compute_log_likelihood_batch(denoiser, xs.view(), schedule, mode)
                    .map(|rs| rs.iter().map(|r| r.log_p_per_dim).sum::<f64>() / rs.len() as f64),
            );
        } else {
            results[u] = Some(Ok(sums[u] / counts[u] as f64));
        }
    }
    results.into_iter().map(|r| r.expect("every utterance resolved")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DenoiserParams, NetworkArch};
    use crate::oracle::{oracle_log_density, GaussianMixture};

    fn linear_vjp(matrix: Vec<Vec<f64>>) -> impl Fn(&[f64], &[f64]) -> Result<Vec<f64>> {
        move |_x, v| {
            let n = v.len();
            Ok((0..n).map(|c| (0..n).map(|r| matrix[r][c] * v[r]).sum()).collect())
        }
    }

    #[test]
    fn hutchinson_identity_and_diagonal() {
        let eye: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| (i == j) as u8 as f64).collect()).collect();
        let d = [0.3, -1.2, 4.0, 0.0, 2.5];
        let diag: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect();
        let x = [0.0; 5];
        for seed in 0..16 {
            let eps = sample_rademacher(&mut SeededRng::new(seed), 5).unwrap();
            assert_eq!(hutchinson_trace_term(linear_vjp(eye.clone()), &x, eps.data()).unwrap(), 5.0);
            let est = hutchinson_trace_term(linear_vjp(diag.clone()), &x, eps.data()).unwrap();
            assert!((est - d.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn hutchinson_enumeration_matches_exact() {
        let mut rng = SeededRng::new(31);
        for _ in 0..10 {
            let m: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
            let exact = exact_trace_term(linear_vjp(m.clone()), &[0.0; 3]).unwrap();
            assert!((exact - (m[0][0] + m[1][1] + m[2][2])).abs() < 1e-15);
            let mut avg = 0.0;
            for pattern in 0..8u32 {
                let eps: Vec<f64> = (0..3).map(|i| if pattern >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
                avg += hutchinson_trace_term(linear_vjp(m.clone()), &[0.0; 3], &eps).unwrap() / 8.0;
            }
            assert!((avg - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn hutchinson_rejects_mismatched_probe() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(hutchinson_trace_term(linear_vjp(eye), &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn exact_trace_guard() {
        let big = vec![0.0; EXACT_TRACE_MAX_DIM + 1];
        assert!(exact_trace_term(|_x, v: &[f64]| Ok(v.to_vec()), &big).is_err());
    }

    #[test]
    fn exact_trace_gaussian_closed_form() {
        let s = 1.3;
        let g = GaussianMixture::isotropic(vec![0.0; 6], s).unwrap();
        let flow = ProbabilityFlow::new(&g, 0.002).unwrap();
        let x = [0.3, 0.1, -0.4, 1.0, 0.0, 2.0];
        let t = 2.2;
        let tr = exact_trace_term(|x, v| flow.drift_vjp(x, t, v), &x).unwrap();
        assert!((tr - 6.0 * t / (s * s + t * t)).abs() < 1e-12);
    }

    #[test]
    fn terminal_log_density() {
        let v = log_p_terminal(&[0.0, 0.0], 80.0).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln() + 2.0 * 80f64.ln()).abs() < 1e-12);
        assert!((v + 10.6019).abs() < 1e-4);
        let three = log_p_terminal(&[0.0, 0.0, 0.0], 80.0).unwrap();
        assert!((three - v + 0.5 * (2.0 * std::f64::consts::PI * 6400.0).ln()).abs() < 1e-12);
        assert!(log_p_terminal(&[1.0, 0.0], 80.0).unwrap() < v);
        assert!(log_p_terminal(&[0.0], 0.0).is_err());
    }

    #[test]
    fn gaussian_oracle_likelihood_matches_analytic() {
        let g = GaussianMixture::isotropic(vec![0.0; 8], 1.0).unwrap();
        let mut rng = SeededRng::new(2);
        for _ in 0..10 {
            let x: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let r = compute_log_likelihood(&g, &Tensor::from_vec(x.clone()), &NoiseSchedule::default(), TraceMode::Exact)
                .unwrap();
            let analytic = oracle_log_density(&g, &x).unwrap();
            assert!((r.log_p - analytic).abs() / 8.0 <= 1e-3, "{} vs {analytic}", r.log_p);
            assert_eq!(r.log_p, r.log_p_terminal + r.delta_log_p);
            assert_eq!(r.log_p - r.delta_log_p - log_p_terminal(r.x_t.data(), 80.0).unwrap(), 0.0);
            assert_eq!(r.log_p_per_dim, r.log_p / 8.0);
        }
    }

    #[test]
    fn likelihood_is_deterministic_per_seed() {
        let arch = NetworkArch::new(6, vec![12], 4).unwrap();
        let p = DenoiserParams::init(arch, 0.5, &mut SeededRng::new(3)).unwrap();
        let x = Tensor::from_vec(vec![0.1, -0.3, 0.2, 0.0, 0.5, -0.1]);
        let s = NoiseSchedule::default();
        let a = compute_log_likelihood(&p, &x, &s, TraceMode::hutchinson(7)).unwrap();
        let b = compute_log_likelihood(&p, &x, &s, TraceMode::hutchinson(7)).unwrap();
        assert_eq!(a.log_p.to_bits(), b.log_p.to_bits());
        assert_eq!(a.probe_seed, 7);
    }

    #[test]
    fn batch_rows_equal_single_solves() {
        let g = GaussianMixture::symmetric_pair(vec![1.0, -0.5], 0.5).unwrap();
        let xs = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -1.0, 0.4, 2.0, -2.0]).unwrap();
        let s = NoiseSchedule::default().with_steps(16).unwrap();
        let batch = compute_log_likelihood_batch(&g, xs.view(), &s, TraceMode::Exact).unwrap();
        for (r, res) in batch.iter().enumerate() {
            let single =
                compute_log_likelihood(&g, &Tensor::from_vec(xs.row(r).to_vec()), &s, TraceMode::Exact).unwrap();
            assert!((single.log_p - res.log_p).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        // A denoiser that pushes away from data blows the state up.
        struct Repel;
        impl Denoiser for Repel {
            fn dim(&self) -> usize {
                2
            }
            fn data_scale(&self) -> f64 {
                1.0
            }
            fn denoise_batch(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>> {
                Ok(&xs * (-1e4 * sigma))
            }
            fn denoise_and_vjp_batch(
                &self,
                xs: ArrayView2<'_, f64>,
                sigma: f64,
                vs: ArrayView2<'_, f64>,
            ) -> Result<(Array2<f64>, Array2<f64>)> {
                Ok((&xs * (-1e4 * sigma), &vs * (-1e4 * sigma)))
            }
        }
        let err = compute_log_likelihood(&Repel, &Tensor::from_vec(vec![1.0, 1.0]), &NoiseSchedule::default(), TraceMode::Exact)
            .unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { .. }), "{err}");
    }

    #[test]
    fn flow_scaling_for_gaussian() {
        let s = 1.0;
        let g = GaussianMixture::isotropic(vec![0.0; 3], s).unwrap();
        let sched = NoiseSchedule::default();
        let x0 = [0.5, -1.0, 2.0];
        let xt = integrate_flow(&g, &x0, &sched).unwrap();
        let scale = ((s * s + 6400.0) / (s * s + 0.002f64.powi(2))).sqrt();
        for (a, b) in xt.iter().zip(&x0) {
            assert!(((a - b * scale) / (b * scale)).abs() <= 1e-3);
        }
    }

    #[test]
    fn trace_mode_validation() {
        let g = GaussianMixture::isotropic(vec![0.0; 2], 1.0).unwrap();
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        let bad = TraceMode::Hutchinson { probe_count: 0, seed: 0 };
        assert!(compute_log_likelihood(&g, &x, &NoiseSchedule::default(), bad).is_err());
    }
}
