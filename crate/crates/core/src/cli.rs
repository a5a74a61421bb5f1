//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a run fails (including a failed oracle
//! check or any file that could not be scored), 2 on invalid usage.
//!
//! Seeds derive from `--seed` per subsystem: the synthetic training corpus
//! uses stream 0 of the seed, network initialization and batch sampling use
//! streams 1 and 2, oracle test points stream 3. Probe vectors use
//! `--probe-seed` (default: `--seed`) and eval noise uses `--seed` directly.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::audio::{compute_dataset_stats, read_wav, FeatureConfig, FeatureExtractor, Waveform};
use crate::checkpoint::Checkpoint;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::{
    condition_means, emit_histogram_csv, run_corruption_sweep, sweep_correlations, write_correlations_csv,
    write_records_csv, NoiseSource, SweepConfig, DEFAULT_SNRS,
};
use crate::likelihood::{compute_log_likelihood_batch, TraceMode};
use crate::network::NetworkArch;
use crate::numerics::SeededRng;
use crate::oracle::{oracle_log_density, GaussianMixture};
use crate::synth::{harmonic_corpus, SynthConfig};
use crate::train::{train, SpectrogramCrops, TrainConfig};

/// Tolerance in nats per element for the Gaussian oracle.
pub const GAUSSIAN_TOLERANCE: f64 = 1e-3;
/// Tolerance in nats per element for the mixture oracle.
pub const GMM_TOLERANCE: f64 = 5e-3;

#[derive(Debug, Parser)]
#[command(name = "dsqa", version, about = "Signal quality scoring by diffusion-model log-likelihood")]
pub struct Cli {
    /// Root seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DSQA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Print the per-element log-likelihood of WAV files.
    Score(ScoreArgs),
    /// Compare ODE likelihoods with closed-form densities.
    VerifyOracle(VerifyArgs),
    /// Score a clean corpus under a grid of noise levels and correlate.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["data", "synthetic"])))]
pub struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of 16 kHz mono WAV files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on generated harmonic signals instead of files.
    #[arg(long)]
    pub synthetic: bool,
    /// Number of generated utterances with --synthetic.
    #[arg(long, default_value_t = 200)]
    pub utterances: usize,
    /// Optimizer steps (default: 200000 samples worth).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.999)]
    pub ema_rate: f64,
    #[arg(long, default_value_t = 64)]
    pub patch_frames: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [512, 512, 512])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    /// Optional CSV training log (step, loss, lr, ema_rate).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceChoice {
    Hutchinson,
    Exact,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Heun grid points.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = TraceChoice::Hutchinson)]
    pub trace: TraceChoice,
    /// Seed of the Rademacher probe (default: --seed).
    #[arg(long)]
    pub probe_seed: Option<u64>,
    /// Probes averaged per trace estimate.
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
}

impl ScoringArgs {
    fn mode(&self, seed: u64) -> TraceMode {
        match self.trace {
            TraceChoice::Exact => TraceMode::Exact,
            TraceChoice::Hutchinson => {
                TraceMode::Hutchinson { probe_count: self.probes, seed: self.probe_seed.unwrap_or(seed) }
            }
        }
    }

    fn schedule(&self, base: NoiseSchedule) -> Result<NoiseSchedule> {
        base.with_steps(self.steps)
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Also write the scores to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleDist {
    Gaussian,
    Gmm,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = OracleDist::Gaussian)]
    pub dist: OracleDist,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of clean 16 kHz mono WAV files.
    #[arg(long)]
    pub clean: PathBuf,
    /// `white`, or a directory of noise WAV files.
    #[arg(long, default_value = "white")]
    pub noise: String,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = DEFAULT_SNRS)]
    pub snrs: Vec<f64>,
    /// Directory for records.csv, correlations.csv and histogram.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[command(flatten)]
    pub scoring: ScoringArgs,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        // A second call in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Score(args) => cmd_score(args, cli.seed),
        Command::VerifyOracle(args) => cmd_verify_oracle(args, cli.seed),
        Command::Eval(args) => cmd_eval(args, cli.seed),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn usage(msg: impl Into<String>) -> Result<i32> {
    eprintln!("error: {}", msg.into());
    Ok(2)
}

/// `*.wav` files of `dir`, sorted by name, with their file stems.
pub fn read_wav_dir(dir: &Path) -> Result<Vec<(String, Waveform)>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("{} contains no .wav files", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_wav(&p)?))
        })
        .collect()
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<i32> {
    if args.patch_frames == 0 || args.batch_size == 0 || args.steps == Some(0) {
        return usage("--patch-frames, --batch-size and --steps must be positive");
    }
    let features = FeatureConfig::default();
    let root = SeededRng::new(seed);
    let corpus: Vec<Waveform> = match &args.data {
        Some(dir) => read_wav_dir(dir)?.into_iter().map(|(_, w)| w).collect(),
        None => harmonic_corpus(root.child(0).seed(), args.utterances, &SynthConfig::default())?,
    };
    if corpus.is_empty() {
        return usage("--utterances must be positive");
    }
    let stats = compute_dataset_stats(&corpus, &features)?;
    let extractor = FeatureExtractor::new(features)?;
    let specs = corpus.iter().map(|w| extractor.normalized(w, stats)).collect::<Result<Vec<_>>>()?;
    let source = SpectrogramCrops::new(specs, args.patch_frames)?;

    let defaults = TrainConfig::default();
    let config = TrainConfig {
        batch_size: args.batch_size,
        total_samples: args.steps.map_or(defaults.total_samples, |s| s * args.batch_size),
        lr: args.lr,
        warmup_steps: args.warmup,
        ema_rate: args.ema_rate,
        seed,
        ..defaults
    };
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let arch = match NetworkArch::new(features.n_mels * args.patch_frames, args.hidden.clone(), args.embed_dim) {
        Ok(a) => a,
        Err(e) => return usage(e.to_string()),
    };
    let outcome = train(&source, arch, &config)?;
    let mut params = outcome.params.clone();
    params.feature_mean = stats.mean;
    params.feature_std = stats.std;
    Checkpoint::new(params, NoiseSchedule::default(), features)?.save(&args.out)?;
    if let Some(log) = &args.log {
        outcome.write_log_csv(log)?;
    }
    println!("steps: {}", outcome.log.len());
    println!("final smoothed loss: {}", outcome.final_smoothed_loss());
    println!("checkpoint: {}", args.out.display());
    Ok(0)
}

fn cmd_score(args: &ScoreArgs, seed: u64) -> Result<i32> {
    let model = Checkpoint::load(&args.model)?;
    let schedule = match args.scoring.schedule(model.schedule) {
        Ok(s) => s,
        Err(e) => return usage(e.to_string()),
    };
    let model = Checkpoint { schedule, ..model };
    let mode = args.scoring.mode(seed);

    let mut waves = Vec::new();
    let mut errors: Vec<Option<Error>> = Vec::new();
    for path in &args.files {
        match read_wav(path) {
            Ok(w) => {
                waves.push(w);
                errors.push(None);
            }
            Err(e) => errors.push(Some(e)),
        }
    }
    let mut scores = model.score_waveforms(&waves, mode).into_iter();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (path, read_error) in args.files.iter().zip(errors) {
        let result = match read_error {
            Some(e) => Err(e),
            None => scores.next().expect("one score per decoded file"),
        };
        match result {
            Ok(score) => rows.push((path.display().to_string(), score)),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", path.display());
            }
        }
    }

    let mut table = String::from("utterance_id,log_p_per_dim\n");
    for (id, score) in &rows {
        table.push_str(&format!("{id},{score}\n"));
    }
    std::io::stdout().write_all(table.as_bytes())?;
    if let Some(csv) = &args.csv {
        std::fs::write(csv, &table)?;
    }
    Ok(if failed > 0 { 1 } else { 0 })
}

/// Default mixture for `--dist gmm`: equal weights, means `±e₁`, component std 0.5.
pub fn default_gmm(dim: usize) -> Result<GaussianMixture> {
    let mut mu = vec![0.0; dim];
    if let Some(first) = mu.first_mut() {
        *first = 1.0;
    }
    GaussianMixture::symmetric_pair(mu, 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub max_error: f64,
    pub mean_error: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Exact-trace ODE likelihood of `points` samples of the oracle against its closed form.
pub fn verify_oracle(dist: OracleDist, dim: usize, points: usize, steps: usize, seed: u64) -> Result<OracleReport> {
    if dim == 0 || points == 0 {
        return Err(Error::invalid("--dim and --points must be positive"));
    }
    let (gmm, tolerance) = match dist {
        OracleDist::Gaussian => (GaussianMixture::isotropic(vec![0.0; dim], 1.0)?, GAUSSIAN_TOLERANCE),
        OracleDist::Gmm => (default_gmm(dim)?, GMM_TOLERANCE),
    };
    let schedule = NoiseSchedule::default().with_steps(steps)?;
    let mut rng = SeededRng::new(seed).child(3);
    let mut xs = ndarray::Array2::zeros((points, dim));
    for mut row in xs.rows_mut() {
        let k = if rng.uniform() < gmm.weights()[0] { 0 } else { gmm.weights().len() - 1 };
        for (v, m) in row.iter_mut().zip(&gmm.means()[k]) {
            *v = m + gmm.component_std() * rng.standard_normal();
        }
    }
    let results = compute_log_likelihood_batch(&gmm, xs.view(), &schedule, TraceMode::Exact)?;
    let mut errors = Vec::with_capacity(points);
    for (row, r) in xs.rows().into_iter().zip(&results) {
        let truth = oracle_log_density(&gmm, row.as_slice().expect("contiguous row"))?;
        errors.push((r.log_p - truth).abs() / dim as f64);
    }
    Ok(OracleReport {
        max_error: errors.iter().copied().fold(0.0, f64::max),
        mean_error: errors.iter().sum::<f64>() / points as f64,
        tolerance,
    })
}

fn cmd_verify_oracle(args: &VerifyArgs, seed: u64) -> Result<i32> {
    if args.dim == 0 || args.points == 0 || args.steps < 2 {
        return usage("--dim and --points must be positive and --steps at least 2");
    }
    let report = verify_oracle(args.dist, args.dim, args.points, args.steps, seed)?;
    let name = match args.dist {
        OracleDist::Gaussian => "gaussian",
        OracleDist::Gmm => "gmm",
    };
    println!("dist: {name}");
    println!("dim: {}  points: {}  steps: {}", args.dim, args.points, args.steps);
    println!("max error (nats/dim): {:.6e}", report.max_error);
    println!("mean error (nats/dim): {:.6e}", report.mean_error);
    println!("tolerance (nats/dim): {:e}", report.tolerance);
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<i32> {
    if args.bins < 2 {
        return usage("--bins must be at least 2");
    }
    if args.snrs.is_empty() || args.snrs.iter().any(|s| !s.is_finite()) {
        return usage("--snrs must list finite values");
    }
    let model = Checkpoint::load(&args.model)?;
    let schedule = match args.scoring.schedule(model.schedule) {
        Ok(s) => s,
        Err(e) => return usage(e.to_string()),
    };
    let model = Checkpoint { schedule, ..model };
    let clean = read_wav_dir(&args.clean)?;
    let noise = if args.noise == "white" {
        NoiseSource::White
    } else {
        NoiseSource::Corpus(read_wav_dir(Path::new(&args.noise))?.into_iter().map(|(_, w)| w).collect())
    };
    let config = SweepConfig { snrs: args.snrs.clone(), mode: args.scoring.mode(seed), seed };
    let outcome = run_corruption_sweep(&model, &clean, &noise, &config)?;

    std::fs::create_dir_all(&args.out_dir)?;
    write_records_csv(args.out_dir.join("records.csv"), &outcome.records)?;
    emit_histogram_csv(args.out_dir.join("histogram.csv"), &outcome.records, args.bins)?;
    match sweep_correlations(&outcome.records) {
        Ok(corr) => {
            write_correlations_csv(args.out_dir.join("correlations.csv"), &corr)?;
            println!("pcc: {}  srcc: {}  n: {}", corr.pcc, corr.srcc, corr.n);
        }
        Err(e) => {
            std::fs::write(args.out_dir.join("correlations.csv"), "metric,value,n\npcc,nan,0\nsrcc,nan,0\n")?;
            eprintln!("correlations: {e}");
        }
    }
    for c in condition_means(&outcome.records) {
        println!("{:>12}  n={:<4} mean={}", c.condition, c.count, c.mean);
    }
    if outcome.clipped > 0 {
        println!("clipped samples: {}", outcome.clipped);
    }
    for f in &outcome.failures {
        eprintln!("{} [{}]: {}", f.utterance_id, f.condition, f.error);
    }
    Ok(if outcome.failures.is_empty() { 0 } else { 1 })
}
