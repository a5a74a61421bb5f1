//! Log-mel features of a WAV file, or of a synthetic utterance if none is given.

use dsqa::audio::{compute_dataset_stats, read_wav, FeatureConfig, FeatureExtractor};
use dsqa::numerics::SeededRng;
use dsqa::synth::{harmonic_utterance, SynthConfig};

fn main() -> dsqa::error::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(path) => read_wav(path)?,
        None => harmonic_utterance(&mut SeededRng::new(1), &SynthConfig::default())?,
    };
    let config = FeatureConfig::default();
    let extractor = FeatureExtractor::new(config)?;
    let stats = compute_dataset_stats(std::slice::from_ref(&wave), &config)?;
    let spec = extractor.normalized(&wave, stats)?;
    println!(
        "{} samples at {} Hz -> {} mel bands x {} frames (mean {:.3}, std {:.3})",
        wave.len(),
        wave.sample_rate,
        spec.n_mels(),
        spec.frames(),
        stats.mean,
        stats.std
    );

    // coarse energy picture: one row per 10 mel bands, one column per 4 frames
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for band in (0..spec.n_mels()).step_by(10).rev() {
        let row: String = (0..spec.frames())
            .step_by(4)
            .map(|f| {
                let v = (spec.get(band, f) + 1.0) / 2.0;
                shades[(v.clamp(0.0, 0.999) * shades.len() as f64) as usize]
            })
            .collect();
        println!("{band:>3} |{row}");
    }
    Ok(())
}
