//! Hutchinson probes against the exact trace of a random dense matrix.

use dsqa::likelihood::{exact_trace_term, hutchinson_trace_term};
use dsqa::numerics::SeededRng;

fn main() -> dsqa::error::Result<()> {
    let n = 64;
    let mut rng = SeededRng::new(42);
    let a: Vec<f64> = (0..n * n).map(|_| rng.standard_normal()).collect();
    let vjp = |_: &[f64], v: &[f64]| -> dsqa::error::Result<Vec<f64>> {
        Ok((0..n).map(|j| (0..n).map(|i| v[i] * a[i * n + j]).sum()).collect())
    };
    let x = vec![0.0; n];
    let exact = exact_trace_term(vjp, &x)?;
    println!("exact trace {exact:.4}");

    for probes in [1, 10, 100, 1000, 10_000] {
        let mut sum = 0.0;
        for _ in 0..probes {
            let eps: Vec<f64> = (0..n).map(|_| rng.rademacher()).collect();
            sum += hutchinson_trace_term(vjp, &x, &eps)?;
        }
        let est = sum / probes as f64;
        println!("{probes:>6} probes: {est:>9.4}  (err {:+.4})", est - exact);
    }
    Ok(())
}
