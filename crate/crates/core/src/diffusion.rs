//! Noise schedule, preconditioning and the probability-flow drift.
//!
//! With the schedule `σ(t) = t` the probability-flow ODE reduces to
//! `dx/dt = (x − D(x; t)) / t`, where `D` is the denoiser. Anything that can
//! denoise (the preconditioned network, or a closed-form oracle) implements
//! [`Denoiser`] and gets the drift and its vector-Jacobian product through
//! [`ProbabilityFlow`].

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DenoiserParams;
use crate::numerics::Tensor;

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_NUM_STEPS: usize = 32;
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            rho: DEFAULT_RHO,
            num_steps: DEFAULT_NUM_STEPS,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, num_steps: usize) -> Result<Self> {
        let s = Self { sigma_min, sigma_max, rho, num_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn with_steps(self, num_steps: usize) -> Result<Self> {
        Self::new(self.sigma_min, self.sigma_max, self.rho, num_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        if self.num_steps < 2 {
            return Err(Error::invalid("schedule needs at least 2 grid points"));
        }
        Ok(())
    }

    /// Terminal time `T = σ_max`.
    pub fn terminal_time(&self) -> f64 {
        self.sigma_max
    }
}

/// ρ-warped time grid from `σ_min` up to `σ_max`, ascending.
pub fn karras_time_grid(schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let n = schedule.num_steps;
    let inv_rho = 1.0 / schedule.rho;
    let lo = schedule.sigma_min.powf(inv_rho);
    let hi = schedule.sigma_max.powf(inv_rho);
    let mut grid: Vec<f64> =
        (0..n).map(|i| (lo + (i as f64 / (n - 1) as f64) * (hi - lo)).powf(schedule.rho)).collect();
    // Pin the endpoints so the drift guard at σ_min never trips on rounding.
    grid[0] = schedule.sigma_min;
    grid[n - 1] = schedule.sigma_max;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_in: f64,
    pub c_out: f64,
    pub c_skip: f64,
    pub c_noise: f64,
}

pub fn precond_constants(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0) || !(sigma_data > 0.0) {
        return Err(Error::invalid(format!(
            "preconditioning needs positive sigma and sigma_data, got {sigma} and {sigma_data}"
        )));
    }
    let total = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_in: 1.0 / total.sqrt(),
        c_out: sigma * sigma_data / total.sqrt(),
        c_skip: sigma_data * sigma_data / total,
        c_noise: sigma.ln() / 4.0,
    })
}

/// A map `x ↦ D(x; σ)` estimating clean data from a noisy observation.
///
/// Batched: each row of `xs` is an independent point.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// Typical per-element standard deviation of the clean data.
    fn data_scale(&self) -> f64;

    fn denoise_batch(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>>;

    /// `D(x; σ)` and `vᵀ ∂D/∂x` row by row, sharing the forward evaluation.
    fn denoise_and_vjp_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        sigma: f64,
        vs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl Denoiser for DenoiserParams {
    fn dim(&self) -> usize {
        self.in_dim()
    }

    fn data_scale(&self) -> f64 {
        self.sigma_data
    }

    fn denoise_batch(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>> {
        let pc = precond_constants(sigma, self.sigma_data)?;
        let scaled = &xs * pc.c_in;
        let f = self.forward_batch(scaled.view(), pc.c_noise)?;
        Ok(&xs * pc.c_skip + f * pc.c_out)
    }

    fn denoise_and_vjp_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        sigma: f64,
        vs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if xs.dim() != vs.dim() {
            return Err(Error::invalid("state and cotangent batches differ in shape"));
        }
        let pc = precond_constants(sigma, self.sigma_data)?;
        let scaled = &xs * pc.c_in;
        let trace = self.forward_trace(scaled.view(), pc.c_noise)?;
        let (g, _) = self.backward(&trace, vs, false)?;
        let d = &xs * pc.c_skip + trace.output() * pc.c_out;
        let vjp = &vs * pc.c_skip + g * (pc.c_out * pc.c_in);
        Ok((d, vjp))
    }
}

/// `D(x; σ) = c_skip·x + c_out·F(c_in·x; c_noise)` for a single point.
pub fn denoise(denoiser: &impl Denoiser, x: &Tensor, sigma: f64) -> Result<Tensor> {
    let xs = row_view(x.data())?;
    let d = denoiser.denoise_batch(xs, sigma)?;
    Tensor::new(x.shape().to_vec(), d.into_raw_vec_and_offset().0)
}

/// The probability-flow drift `f(x; t) = (x − D(x; t)) / t` of a denoiser.
#[derive(Debug, Clone, Copy)]
pub struct ProbabilityFlow<'a, D: ?Sized> {
    denoiser: &'a D,
    t_min: f64,
}

impl<'a, D: Denoiser + ?Sized> ProbabilityFlow<'a, D> {
    /// `t_min` guards the singularity at `t = 0`; pass the schedule's `σ_min`.
    pub fn new(denoiser: &'a D, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0) {
            return Err(Error::invalid("drift needs a positive lower time bound"));
        }
        Ok(Self { denoiser, t_min })
    }

    pub fn for_schedule(denoiser: &'a D, schedule: &NoiseSchedule) -> Result<Self> {
        Self::new(denoiser, schedule.sigma_min)
    }

    pub fn denoiser(&self) -> &'a D {
        self.denoiser
    }

    pub fn dim(&self) -> usize {
        self.denoiser.dim()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.t_min) || !t.is_finite() {
            return Err(Error::invalid(format!(
                "drift evaluated at t = {t}, below the lower bound {}",
                self.t_min
            )));
        }
        Ok(())
    }

    pub fn drift_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        self.check_time(t)?;
        let d = self.denoiser.denoise_batch(xs, t)?;
        Ok((&xs - &d) / t)
    }

    /// Drift and `vᵀ ∂f/∂x = (v − vᵀ ∂D/∂x) / t`, row by row.
    pub fn drift_and_vjp_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        t: f64,
        vs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_time(t)?;
        let (d, dv) = self.denoiser.denoise_and_vjp_batch(xs, t, vs)?;
        Ok(((&xs - &d) / t, (&vs - &dv) / t))
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.drift_batch(row_view(x)?, t)?.into_raw_vec_and_offset().0)
    }

    pub fn drift_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        if x.len() != v.len() {
            return Err(Error::invalid("state and cotangent differ in length"));
        }
        let (_, g) = self.drift_and_vjp_batch(row_view(x)?, t, row_view(v)?)?;
        Ok(g.into_raw_vec_and_offset().0)
    }
}

pub(crate) fn row_view(x: &[f64]) -> Result<ArrayView2<'_, f64>> {
    ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))
}
