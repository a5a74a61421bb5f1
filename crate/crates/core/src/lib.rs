pub mod audio;
pub mod cli;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod likelihood;
pub mod network;
pub mod numerics;
pub mod oracle;
pub mod synth;
pub mod train;
