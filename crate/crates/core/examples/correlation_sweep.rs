//! Full corruption sweep over a directory of WAVs, with correlations and a histogram.
//!
//! `cargo run --release --example correlation_sweep -- model.ckpt clean_dir [snr,snr,...]`

use std::path::Path;

use dsqa::checkpoint::Checkpoint;
use dsqa::cli::read_wav_dir;
use dsqa::eval::{condition_means, histogram, run_corruption_sweep, sweep_correlations, NoiseSource, SweepConfig};

fn main() -> dsqa::error::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: correlation_sweep model.ckpt clean_dir [snr,snr,...]");
        std::process::exit(2);
    }
    let model = Checkpoint::load(&args[0])?;
    let clean = read_wav_dir(Path::new(&args[1]))?;
    let mut config = SweepConfig::default();
    if let Some(list) = args.get(2) {
        config.snrs = list.split(',').map(|s| s.trim().parse().expect("SNR list of numbers")).collect();
    }

    let outcome = run_corruption_sweep(&model, &clean, &NoiseSource::White, &config)?;
    for f in &outcome.failures {
        eprintln!("skipped {} {}: {}", f.utterance_id, f.condition, f.error);
    }
    for c in condition_means(&outcome.records) {
        println!("{:>10}  n={:<4} mean {:+.4}", c.condition, c.count, c.mean);
    }
    let corr = sweep_correlations(&outcome.records)?;
    println!("PCC {:.3}  SRCC {:.3}  over {} noisy records", corr.pcc, corr.srcc, corr.n);

    for row in histogram(&outcome.records, 10)? {
        if row.count > 0 {
            println!("{:>10} [{:+.3}, {:+.3})  {}", row.condition, row.bin_left, row.bin_right, row.count);
        }
    }
    Ok(())
}
