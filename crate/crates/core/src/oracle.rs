//! Closed-form data distributions for validating the likelihood engine.
//!
//! An isotropic Gaussian mixture stays a mixture under Gaussian noise: adding
//! `N(0, σ²I)` only inflates the shared component variance to `s² + σ²`. Its
//! minimum-MSE denoiser is then the posterior-weighted mean
//!
//! ```text
//! D(x; σ) = x + σ² ∇log p_σ(x) = (s²·x + σ²·m(x)) / (s² + σ²)
//! m(x)    = Σ_k r_k(x) μ_k
//! ```
//!
//! with responsibilities `r_k`. Its Jacobian is symmetric,
//! `∂D/∂x = s²/(s²+σ²)·I + σ²/(s²+σ²)²·C(x)` where `C` is the responsibility-
//! weighted covariance of the means, so the VJP is computed analytically.

use ndarray::{Array2, ArrayView2};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    component_std: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, component_std: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::invalid("mixture needs one weight per mean and at least one component"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid("mixture means must share a positive dimension"));
        }
        if !(component_std > 0.0) {
            return Err(Error::invalid("component std must be positive"));
        }
        Ok(Self { weights, means, component_std })
    }

    pub fn isotropic(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], std)
    }

    /// Equal-weight pair with means `±mu`.
    pub fn symmetric_pair(mu: Vec<f64>, std: f64) -> Result<Self> {
        let neg = mu.iter().map(|v| -v).collect();
        Self::new(vec![0.5, 0.5], vec![mu, neg], std)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn component_std(&self) -> f64 {
        self.component_std
    }

    /// `√(E‖x − E x‖² / n)` of the mixture.
    pub fn per_element_std(&self) -> f64 {
        let n = self.dim();
        let mut mean = vec![0.0; n];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (m, v) in mean.iter_mut().zip(mu) {
                *m += w * v;
            }
        }
        let spread: f64 = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| w * mu.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        (self.component_std.powi(2) + spread / n as f64).sqrt()
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::invalid(format!("point has dimension {n}, mixture has {}", self.dim())));
        }
        Ok(())
    }

    /// Log-weights of each component at `x` under variance `var`, plus their log-sum-exp.
    fn component_logits(&self, x: &[f64], var: f64) -> (Vec<f64>, f64) {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, mu)| {
                let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
                w.ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        (logits, lse)
    }

    fn responsibilities(&self, x: &[f64], var: f64) -> Vec<f64> {
        let (logits, lse) = self.component_logits(x, var);
        logits.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `log p_σ(x)` of the mixture convolved with `N(0, σ²I)`.
    pub fn log_density_noised(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check_dim(x.len())?;
        let var = self.component_std.powi(2) + sigma * sigma;
        let (_, lse) = self.component_logits(x, var);
        Ok(lse - 0.5 * self.dim() as f64 * (LN_2PI + var.ln()))
    }

    /// `∇ log p_σ(x)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let var = self.component_std.powi(2) + sigma * sigma;
        let m = self.posterior_mean_of_means(x, var);
        Ok(x.iter().zip(&m).map(|(xi, mi)| (mi - xi) / var).collect())
    }

    fn posterior_mean_of_means(&self, x: &[f64], var: f64) -> Vec<f64> {
        let r = self.responsibilities(x, var);
        let mut m = vec![0.0; self.dim()];
        for (rk, mu) in r.iter().zip(&self.means) {
            for (mi, v) in m.iter_mut().zip(mu) {
                *mi += rk * v;
            }
        }
        m
    }

    fn denoise_row(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        let s2 = self.component_std.powi(2);
        let var = s2 + sigma * sigma;
        let m = self.posterior_mean_of_means(x, var);
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(&m) {
            *o = (s2 * xi + sigma * sigma * mi) / var;
        }
    }

    fn denoise_and_vjp_row(&self, x: &[f64], sigma: f64, v: &[f64], d_out: &mut [f64], vjp_out: &mut [f64]) {
        let s2 = self.component_std.powi(2);
        let sig2 = sigma * sigma;
        let var = s2 + sig2;
        let r = self.responsibilities(x, var);
        let n = self.dim();
        let mut m = vec![0.0; n];
        for (rk, mu) in r.iter().zip(&self.means) {
            for (mi, val) in m.iter_mut().zip(mu) {
                *mi += rk * val;
            }
        }
        for i in 0..n {
            d_out[i] = (s2 * x[i] + sig2 * m[i]) / var;
        }
        // C v = Σ_k r_k (μ_k − m) ((μ_k − m)·v)
        let mut cv = vec![0.0; n];
        for (rk, mu) in r.iter().zip(&self.means) {
            let proj: f64 = mu.iter().zip(&m).zip(v).map(|((a, b), w)| (a - b) * w).sum();
            for i in 0..n {
                cv[i] += rk * (mu[i] - m[i]) * proj;
            }
        }
        for i in 0..n {
            vjp_out[i] = s2 / var * v[i] + sig2 / (var * var) * cv[i];
        }
    }
}

impl Denoiser for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn data_scale(&self) -> f64 {
        self.per_element_std()
    }

    fn denoise_batch(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>> {
        self.check_dim(xs.ncols())?;
        check_sigma(sigma)?;
        let mut out = Array2::zeros(xs.dim());
        for (x, mut o) in xs.rows().into_iter().zip(out.rows_mut()) {
            let x = x.to_vec();
            self.denoise_row(&x, sigma, o.as_slice_mut().expect("contiguous row"));
        }
        Ok(out)
    }

    fn denoise_and_vjp_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        sigma: f64,
        vs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_dim(xs.ncols())?;
        check_sigma(sigma)?;
        if xs.dim() != vs.dim() {
            return Err(Error::invalid("state and cotangent batches differ in shape"));
        }
        let mut d = Array2::zeros(xs.dim());
        let mut g = Array2::zeros(xs.dim());
        for (((x, v), mut dr), mut gr) in xs.rows().into_iter().zip(vs.rows()).zip(d.rows_mut()).zip(g.rows_mut()) {
            let (x, v) = (x.to_vec(), v.to_vec());
            self.denoise_and_vjp_row(
                &x,
                sigma,
                &v,
                dr.as_slice_mut().expect("contiguous row"),
                gr.as_slice_mut().expect("contiguous row"),
            );
        }
        Ok((d, g))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Minimum-MSE denoiser of the mixture at noise level `sigma`.
pub fn oracle_denoiser(gmm: &GaussianMixture, x: &Tensor, sigma: f64) -> Result<Tensor> {
    crate::diffusion::denoise(gmm, x, sigma)
}

/// `log Σ_k w_k N(x; μ_k, s²I)`.
pub fn oracle_log_density(gmm: &GaussianMixture, x: &[f64]) -> Result<f64> {
    gmm.log_density_noised(x, 0.0)
}
