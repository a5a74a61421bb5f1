//! Scores one utterance clean and under white noise at decreasing SNR.
//!
//! `cargo run --release --example score_corruptions -- model.ckpt [file.wav]`
//!
//! A model can be produced with the `train_synthetic` example.

use dsqa::audio::read_wav;
use dsqa::checkpoint::Checkpoint;
use dsqa::eval::add_noise_at_snr;
use dsqa::likelihood::TraceMode;
use dsqa::numerics::SeededRng;
use dsqa::synth::{harmonic_utterance, white_noise, SynthConfig};

fn main() -> dsqa::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(model) = args.next() else {
        eprintln!("usage: score_corruptions model.ckpt [file.wav]");
        std::process::exit(2);
    };
    let model = Checkpoint::load(model)?;
    let clean = match args.next() {
        Some(path) => read_wav(path)?,
        None => harmonic_utterance(&mut SeededRng::new(99), &SynthConfig::default())?,
    };

    let mut rng = SeededRng::new(5);
    let noise = white_noise(&mut rng, clean.len(), clean.sample_rate);
    let mut waves = vec![clean.clone()];
    let snrs = [20.0, 10.0, 5.0, 0.0, -5.0, -10.0];
    for snr in snrs {
        waves.push(add_noise_at_snr(&clean, &noise, snr, &mut rng)?.wave);
    }
    let scores = model.score_waveforms(&waves, TraceMode::default());
    let labels = std::iter::once("clean".to_string()).chain(snrs.iter().map(|s| format!("{s} dB")));
    for (label, score) in labels.zip(scores) {
        println!("{label:>8}  {:+.4} nats/dim", score?);
    }
    Ok(())
}
