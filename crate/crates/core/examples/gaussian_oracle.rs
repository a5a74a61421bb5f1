//! ODE log-likelihood of an isotropic Gaussian against its closed form.
//!
//! `cargo run --release --example gaussian_oracle -- [dim] [steps]`

use dsqa::diffusion::NoiseSchedule;
use dsqa::likelihood::{compute_log_likelihood, TraceMode};
use dsqa::numerics::{SeededRng, Tensor};
use dsqa::oracle::{oracle_log_density, GaussianMixture};

fn main() -> dsqa::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(32);

    let oracle = GaussianMixture::isotropic(vec![0.0; dim], 1.0)?;
    let schedule = NoiseSchedule::default().with_steps(steps)?;
    let mut rng = SeededRng::new(0);
    for i in 0..5 {
        let x: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let truth = oracle_log_density(&oracle, &x)?;
        let r = compute_log_likelihood(&oracle, &Tensor::from_vec(x), &schedule, TraceMode::Exact)?;
        println!(
            "point {i}: ode {:+.6}  closed form {:+.6}  |err|/dim {:.2e}",
            r.log_p,
            truth,
            (r.log_p - truth).abs() / dim as f64
        );
    }
    Ok(())
}
