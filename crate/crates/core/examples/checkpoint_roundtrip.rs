//! Writes a randomly initialised model, reads it back, and checks the bytes and outputs agree.

use dsqa::audio::FeatureConfig;
use dsqa::checkpoint::Checkpoint;
use dsqa::diffusion::{Denoiser, NoiseSchedule};
use dsqa::network::{DenoiserParams, NetworkArch};
use dsqa::numerics::SeededRng;

fn main() -> dsqa::error::Result<()> {
    let features = FeatureConfig::default();
    let arch = NetworkArch::new(features.n_mels * 4, vec![64, 64], 16)?;
    let params = DenoiserParams::init(arch, 0.5, &mut SeededRng::new(3))?;
    let original = Checkpoint::new(params, NoiseSchedule::default(), features)?;

    let bytes = original.to_bytes()?;
    let restored = Checkpoint::from_bytes(&bytes)?;
    let again = restored.to_bytes()?;
    println!("{} bytes, identical after round trip: {}", bytes.len(), bytes == again);

    let x = ndarray::Array2::from_shape_fn((2, original.params.dim()), |(i, j)| ((i * 7 + j) % 11) as f64 / 11.0);
    let a = original.params.denoise_batch(x.view(), 1.3)?;
    let b = restored.params.denoise_batch(x.view(), 1.3)?;
    let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // stored weights are f32, so the in-memory f64 model differs slightly
    println!("max |D_original - D_restored| = {diff:.2e}");
    Ok(())
}
