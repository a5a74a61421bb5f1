//! Audio input and the log-mel feature pipeline.

mod features;
mod wav;

pub use features::{
    compute_dataset_stats, hz_to_mel, log_compress, log_compress_normalize, mel_filterbank, mel_project, mel_to_hz,
    periodic_hann, read_feature_dump, stft_magnitude, write_feature_dump, FeatureConfig, FeatureExtractor,
    MelSpectrogram, NormStats, Stft, FEATURE_DUMP_MAGIC, FEATURE_SCALE, MODEL_SAMPLE_RATE,
};
pub use wav::{read_wav, write_wav_f32, write_wav_pcm16, Waveform};
