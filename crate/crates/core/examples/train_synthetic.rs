//! Trains a small denoiser on synthetic harmonic speech and saves a checkpoint.
//!
//! `cargo run --release --example train_synthetic -- [steps] [out.ckpt]`
//!
//! The defaults finish in well under a minute. Scale `steps` up (and use the
//! CLI for the full-size network) for a model worth scoring with.

use dsqa::audio::{compute_dataset_stats, FeatureConfig, FeatureExtractor};
use dsqa::checkpoint::Checkpoint;
use dsqa::diffusion::NoiseSchedule;
use dsqa::network::NetworkArch;
use dsqa::synth::{harmonic_corpus, SynthConfig};
use dsqa::train::{train, SpectrogramCrops, TrainConfig};

fn main() -> dsqa::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let out = args.next().unwrap_or_else(|| "synthetic.ckpt".into());

    let features = FeatureConfig::default();
    let corpus = harmonic_corpus(1, 50, &SynthConfig::default())?;
    let stats = compute_dataset_stats(&corpus, &features)?;
    let extractor = FeatureExtractor::new(features)?;
    let specs = corpus.iter().map(|w| extractor.normalized(w, stats)).collect::<dsqa::error::Result<Vec<_>>>()?;

    let patch_frames = 16;
    let source = SpectrogramCrops::new(specs, patch_frames)?;
    let arch = NetworkArch::new(features.n_mels * patch_frames, vec![256, 256], 32)?;
    let config = TrainConfig { total_samples: steps * 32, warmup_steps: steps / 10, ..Default::default() };
    let outcome = train(&source, arch, &config)?;
    for row in outcome.log.iter().step_by((steps / 10).max(1)) {
        println!("step {:>5}  loss {:>10.2}  lr {:.2e}", row.step, row.loss, row.lr);
    }

    let mut params = outcome.params;
    params.feature_mean = stats.mean;
    params.feature_std = stats.std;
    Checkpoint::new(params, NoiseSchedule::default(), features)?.save(&out)?;
    println!("saved {out}");
    Ok(())
}
