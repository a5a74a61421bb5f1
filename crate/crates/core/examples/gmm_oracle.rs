//! Convergence of the GMM likelihood error as the step count grows.

use dsqa::cli::{verify_oracle, OracleDist};

fn main() -> dsqa::error::Result<()> {
    let dim: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    println!("steps  max_err     mean_err");
    for steps in [4, 8, 16, 32, 64] {
        let r = verify_oracle(OracleDist::Gmm, dim, 100, steps, 0)?;
        println!("{steps:>5}  {:.3e}  {:.3e}", r.max_error, r.mean_error);
    }
    Ok(())
}
