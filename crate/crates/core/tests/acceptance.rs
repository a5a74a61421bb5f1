//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test` (no libtest harness) and exits non-zero if any
//! criterion fails. Criteria 4, 6 and 7 share one model trained on the
//! synthetic harmonic corpus.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use dsqa::audio::{compute_dataset_stats, write_wav_pcm16, FeatureConfig, FeatureExtractor, Waveform};
use dsqa::checkpoint::Checkpoint;
use dsqa::cli::{verify_oracle, OracleDist, GAUSSIAN_TOLERANCE, GMM_TOLERANCE};
use dsqa::diffusion::{Denoiser, NoiseSchedule, ProbabilityFlow};
use dsqa::error::Result;
use dsqa::eval::{
    condition_means, roc_auc, run_corruption_sweep, spearman, standardized_separation, sweep_correlations,
    EvalRecord, NoiseSource, SweepConfig, CLEAN_CONDITION, DEFAULT_SNRS,
};
use dsqa::likelihood::{exact_trace_term, hutchinson_trace_term, integrate_flow, TraceMode};
use dsqa::network::{DenoiserParams, NetworkArch};
use dsqa::numerics::SeededRng;
use dsqa::oracle::GaussianMixture;
use dsqa::synth::{harmonic_corpus, SynthConfig};
use dsqa::train::{train, SpectrogramCrops, TrainConfig};

const TRAIN_UTTERANCES: usize = 200;
const TEST_UTTERANCES: usize = 50;
const PROBE_UTTERANCES: usize = 20;
const PROBE_SEEDS: u64 = 16;
const TRAIN_STEPS: usize = 1500;
const PATCH_FRAMES: usize = 64;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn error(&mut self, id: &str, name: &str, err: impl std::fmt::Display) {
        self.line(id, name, false, format!("error: {err}"));
    }
}

fn criterion_1(report: &mut Report) {
    let name = "Gaussian oracle likelihood (n=8, 100 points, 32 steps, exact trace)";
    let start = Instant::now();
    match verify_oracle(OracleDist::Gaussian, 8, 100, 32, 0) {
        Ok(r) => {
            let secs = start.elapsed().as_secs_f64();
            report.line(
                "1",
                name,
                r.max_error <= GAUSSIAN_TOLERANCE && secs < 5.0,
                format!(
                    "max |err| = {:.3e} nats/dim (tol {GAUSSIAN_TOLERANCE:e}), mean {:.3e}, runtime {secs:.2} s (limit 5 s)",
                    r.max_error, r.mean_error
                ),
            );
        }
        Err(e) => report.error("1", name, e),
    }
}

fn criterion_2(report: &mut Report) {
    let name = "GMM oracle likelihood (n=2, 100 points)";
    let steps = [8, 16, 32, 64];
    let errors: Result<Vec<f64>> =
        steps.iter().map(|&n| verify_oracle(OracleDist::Gmm, 2, 100, n, 0).map(|r| r.max_error)).collect();
    match errors {
        Ok(errs) => {
            let at_32 = errs[2];
            let monotone = errs.windows(2).all(|w| w[1] <= 1.1 * w[0]);
            let trail: Vec<String> = steps.iter().zip(&errs).map(|(n, e)| format!("N={n}: {e:.3e}")).collect();
            report.line(
                "2",
                name,
                at_32 <= GMM_TOLERANCE && monotone,
                format!(
                    "max |err| at 32 steps = {at_32:.3e} nats/dim (tol {GMM_TOLERANCE:e}); {}; monotone: {monotone}",
                    trail.join(", ")
                ),
            );
        }
        Err(e) => report.error("2", name, e),
    }
}

fn criterion_3(report: &mut Report) {
    let name = "Hutchinson exactness";
    let mut rng = SeededRng::new(3);
    let mut worst_diag: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below(16);
        let diag: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let vjp = |_: &[f64], v: &[f64]| Ok(v.iter().zip(&diag).map(|(a, b)| a * b).collect());
        let x = vec![0.0; n];
        let eps: Vec<f64> = (0..n).map(|_| rng.rademacher()).collect();
        let est = hutchinson_trace_term(vjp, &x, &eps).unwrap();
        let exact = exact_trace_term(vjp, &x).unwrap();
        worst_diag = worst_diag.max((est - exact).abs());
    }
    let mut worst_dense: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..9).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        // vᵀA for a row-major 3×3 A
        let vjp = |_: &[f64], v: &[f64]| Ok((0..3).map(|j| (0..3).map(|i| v[i] * a[i * 3 + j]).sum()).collect());
        let x = [0.0; 3];
        let mut total = 0.0;
        for pattern in 0..8u32 {
            let eps: Vec<f64> = (0..3).map(|i| if pattern >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
            total += hutchinson_trace_term(vjp, &x, &eps).unwrap();
        }
        let exact = exact_trace_term(vjp, &x).unwrap();
        worst_dense = worst_dense.max((total / 8.0 - exact).abs());
    }
    report.line(
        "3",
        name,
        worst_diag <= 1e-12 && worst_dense <= 1e-12,
        format!(
            "diagonal single-probe max |err| = {worst_diag:.1e}, dense 3x3 all-8-probe max |err| = {worst_dense:.1e} (tol 1e-12)"
        ),
    );
}

fn criterion_5(report: &mut Report) {
    let name = "drift VJP vs central finite differences (100 cases, 64-bit)";
    let mut rng = SeededRng::new(5);
    let schedule = NoiseSchedule::default();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for case in 0..100u64 {
        let in_dim = 1 + rng.below(12);
        let hidden: Vec<usize> = (0..1 + rng.below(3)).map(|_| 2 + rng.below(24)).collect();
        let embed = 2 * rng.below(5);
        let arch = NetworkArch::new(in_dim, hidden, embed).unwrap();
        let params = DenoiserParams::init(arch, 0.5, &mut SeededRng::new(case)).unwrap();
        let flow = ProbabilityFlow::for_schedule(&params, &schedule).unwrap();
        let t = (schedule.sigma_min.ln() + rng.uniform() * (schedule.sigma_max / schedule.sigma_min).ln()).exp();
        let x: Vec<f64> = (0..in_dim).map(|_| (0.25 + t * t).sqrt() * rng.standard_normal()).collect();
        let v: Vec<f64> = (0..in_dim).map(|_| rng.standard_normal()).collect();
        let d: Vec<f64> = (0..in_dim).map(|_| rng.standard_normal()).collect();
        let g = flow.drift_vjp(&x, t, &v).unwrap();
        let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let shift = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + s * h * b).collect() };
        let fp = flow.drift(&shift(1.0), t).unwrap();
        let fm = flow.drift(&shift(-1.0), t).unwrap();
        let fd: f64 = fp.iter().zip(&fm).zip(&v).map(|((p, m), w)| (p - m) / (2.0 * h) * w).sum();
        let scale = analytic.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((analytic - fd).abs() / scale);
    }
    report.line("5", name, worst <= 1e-6, format!("max relative error {worst:.2e} (tol 1e-6)"));
}

/// Gaussian oracle seen through a fixed state scale instead of its own std.
struct FixedScale<'a>(&'a GaussianMixture, f64);

impl Denoiser for FixedScale<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn data_scale(&self) -> f64 {
        self.1
    }
    fn denoise_batch(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>> {
        self.0.denoise_batch(xs, sigma)
    }
    fn denoise_and_vjp_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        sigma: f64,
        vs: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.0.denoise_and_vjp_batch(xs, sigma, vs)
    }
}

fn flow_errors(scale: Option<f64>) -> Result<Vec<(f64, f64)>> {
    let schedule = NoiseSchedule::default();
    let (a, b) = (schedule.sigma_min, schedule.sigma_max);
    let x0 = vec![0.7, -1.3, 0.2, 2.0];
    let mut out = Vec::new();
    for s in [0.25, 0.5, 1.0, 2.0] {
        let oracle = GaussianMixture::isotropic(vec![0.0; 4], s)?;
        let xt = match scale {
            Some(c) => integrate_flow(&FixedScale(&oracle, c), &x0, &schedule)?,
            None => integrate_flow(&oracle, &x0, &schedule)?,
        };
        let factor = ((s * s + b * b) / (s * s + a * a)).sqrt();
        let err = xt.iter().zip(&x0).map(|(v, x)| (v - x * factor).abs() / (x * factor).abs()).fold(0.0, f64::max);
        out.push((s, err));
    }
    Ok(out)
}

fn criterion_8(report: &mut Report) {
    let name = "Gaussian drift flow x_T = x_0·√((s²+T²)/(s²+σ_min²)) at 32 steps";
    let fmt = |errs: &[(f64, f64)]| errs.iter().map(|(s, e)| format!("s={s}: {e:.2e}")).collect::<Vec<_>>().join(", ");
    match (flow_errors(None), flow_errors(Some(0.5))) {
        (Ok(native), Ok(fixed)) => {
            let worst = native.iter().map(|p| p.1).fold(0.0, f64::max);
            // With the oracle's own scale the rescaled state is constant and the
            // solver is exact; the fixed-scale run shows the discretization error.
            report.line(
                "8",
                name,
                worst <= 1e-3,
                format!(
                    "max relative error {worst:.2e} (tol 1e-3) [{}]; with state scale fixed at 0.5 instead: [{}]",
                    fmt(&native),
                    fmt(&fixed)
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => report.error("8", name, e),
    }
}

struct Trained {
    model: Checkpoint,
    train_secs: f64,
    test: Vec<(String, Waveform)>,
}

fn train_model() -> Result<Trained> {
    let features = FeatureConfig::default();
    let synth = SynthConfig::default();
    let corpus = harmonic_corpus(1, TRAIN_UTTERANCES, &synth)?;
    let start = Instant::now();
    let stats = compute_dataset_stats(&corpus, &features)?;
    let extractor = FeatureExtractor::new(features)?;
    let specs = corpus.iter().map(|w| extractor.normalized(w, stats)).collect::<Result<Vec<_>>>()?;
    let source = SpectrogramCrops::new(specs, PATCH_FRAMES)?;
    let arch = NetworkArch::new(features.n_mels * PATCH_FRAMES, vec![512, 512, 512], 64)?;
    let config = TrainConfig { total_samples: TRAIN_STEPS * 32, seed: 11, ..Default::default() };
    let outcome = train(&source, arch, &config)?;
    let train_secs = start.elapsed().as_secs_f64();
    println!(
        "  model: {} training utterances, {} steps, smoothed loss {:.1} -> {:.1}, {:.0} s",
        TRAIN_UTTERANCES,
        outcome.log.len(),
        outcome.initial_smoothed_loss(),
        outcome.final_smoothed_loss(),
        train_secs
    );
    let mut params = outcome.params;
    params.feature_mean = stats.mean;
    params.feature_std = stats.std;
    // Score with the weights exactly as a checkpoint stores them.
    let model = Checkpoint::from_bytes(&Checkpoint::new(params, NoiseSchedule::default(), features)?.to_bytes()?)?;
    let test = harmonic_corpus(2, TEST_UTTERANCES, &synth)?
        .into_iter()
        .enumerate()
        .map(|(i, w)| (format!("test_{i:03}"), w))
        .collect();
    Ok(Trained { model, train_secs, test })
}

fn criterion_4(report: &mut Report, trained: &Trained) {
    let name = "Hutchinson probe spread on the trained model (20 utterances, 16 seeds)";
    let waves: Vec<Waveform> = trained.test[..PROBE_UTTERANCES].iter().map(|(_, w)| w.clone()).collect();
    let mut per_seed: Vec<Vec<f64>> = Vec::new();
    for seed in 0..PROBE_SEEDS {
        match trained.model.score_waveforms(&waves, TraceMode::hutchinson(seed)).into_iter().collect::<Result<Vec<_>>>() {
            Ok(s) => per_seed.push(s),
            Err(e) => return report.error("4", name, e),
        }
    }
    let stds: Vec<f64> = (0..waves.len())
        .map(|u| {
            let col: Vec<f64> = per_seed.iter().map(|s| s[u]).collect();
            dsqa::numerics::mean_std(&col).unwrap().1
        })
        .collect();
    let max_std = stds.iter().copied().fold(0.0, f64::max);
    let mean_var = stds.iter().map(|s| s * s).sum::<f64>() / stds.len() as f64;
    let all: Vec<Waveform> = trained.test.iter().map(|(_, w)| w.clone()).collect();
    let ranking = match (
        trained.model.score_waveforms(&all, TraceMode::hutchinson(0)).into_iter().collect::<Result<Vec<_>>>(),
        trained.model.score_waveforms(&all, TraceMode::hutchinson(1)).into_iter().collect::<Result<Vec<_>>>(),
    ) {
        (Ok(a), Ok(b)) => spearman(&a, &b).unwrap_or(f64::NAN),
        _ => f64::NAN,
    };
    report.line(
        "4",
        name,
        max_std < 1e-2,
        format!(
            "max std {max_std:.2e} (tol 1e-2), mean variance {mean_var:.2e} (published full-scale figure: variance below 1e-4); \
             rank SRCC between probe seeds 0 and 1 on {} clean utterances: {ranking:.4}",
            all.len()
        ),
    );
}

fn scores_of<'a>(records: &'a [EvalRecord], condition: &'a str) -> Vec<f64> {
    records.iter().filter(|r| r.condition == condition).map(|r| r.score).collect()
}

fn criteria_6_7(report: &mut Report, trained: &Trained) {
    let name6 = "trained-model separation, clean vs 0 dB white noise";
    let name7 = "monotonicity and SRCC over {-10,-5,0,5,10,20} dB (50 utterances)";
    let config = SweepConfig { snrs: DEFAULT_SNRS.to_vec(), mode: TraceMode::default(), seed: 7 };
    let start = Instant::now();
    let outcome = match run_corruption_sweep(&trained.model, &trained.test, &NoiseSource::White, &config) {
        Ok(o) => o,
        Err(e) => {
            report.error("6", name6, &e);
            return report.error("7", name7, e);
        }
    };
    println!(
        "  sweep: {} records, {} failures, {:.0} s",
        outcome.records.len(),
        outcome.failures.len(),
        start.elapsed().as_secs_f64()
    );
    let records = &outcome.records;

    let clean = scores_of(records, CLEAN_CONDITION);
    let noisy = scores_of(records, "snr_0dB");
    match (standardized_separation(&clean, &noisy), roc_auc(&clean, &noisy)) {
        (Ok(sep), Ok(auc)) => {
            let paired = clean.iter().zip(&noisy).filter(|(c, n)| c > n).count();
            report.line(
                "6",
                name6,
                (sep >= 2.0 || auc >= 0.95) && trained.train_secs <= 1800.0 && outcome.failures.is_empty(),
                format!(
                    "mean gap = {sep:.2} pooled std (need 2), AUC {auc:.3} (need 0.95), clean higher in {paired}/{} pairs, \
                     training {:.0} s (limit 1800 s)",
                    clean.len(),
                    trained.train_secs
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => report.error("6", name6, e),
    }

    let means = condition_means(records);
    let grid: Vec<(f64, f64)> = means.iter().filter(|c| c.reference.is_finite()).map(|c| (c.reference, c.mean)).collect();
    let increasing = grid.windows(2).all(|w| w[1].1 > w[0].1);
    let utterances = records.iter().filter(|r| r.condition == CLEAN_CONDITION).count();
    match sweep_correlations(records) {
        Ok(corr) => {
            let trail: Vec<String> = means.iter().map(|c| format!("{} {:.3}", c.condition, c.mean)).collect();
            report.line(
                "7",
                name7,
                corr.srcc >= 0.8 && increasing && utterances >= 50,
                format!(
                    "SRCC {:.3} (need 0.8), PCC {:.3}, strictly increasing means: {increasing}; [{}]",
                    corr.srcc,
                    corr.pcc,
                    trail.join(", ")
                ),
            );
        }
        Err(e) => report.error("7", name7, e),
    }
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dsqa")).args(args).env("DSQA_THREADS", "1").output().expect("spawn dsqa")
}

fn criterion_9(report: &mut Report) {
    let name = "reproducibility of every subcommand and checkpoint round-trip";
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let clean_dir = root.join("clean");
    std::fs::create_dir(&clean_dir).unwrap();
    for (i, w) in harmonic_corpus(9, 3, &SynthConfig::default()).unwrap().iter().enumerate() {
        write_wav_pcm16(clean_dir.join(format!("c{i}.wav")), w).unwrap();
    }
    let wav = clean_dir.join("c0.wav").to_string_lossy().into_owned();

    let mut checks: Vec<(&str, bool)> = Vec::new();
    let train_args = |out: &str| {
        vec![
            "train", "--synthetic", "--utterances", "12", "--steps", "30", "--patch-frames", "8", "--hidden", "32,32",
            "--embed-dim", "8", "--seed", "4", "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([out.to_string()])
        .collect::<Vec<_>>()
    };
    let (a, b) = (p("a.ckpt"), p("b.ckpt"));
    let ta = run_cli(&train_args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    let tb = run_cli(&train_args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    let bytes_a = std::fs::read(&a).unwrap_or_default();
    checks.push(("train", ta.status.success() && tb.status.success() && !bytes_a.is_empty() && bytes_a == std::fs::read(&b).unwrap_or_default()));

    let roundtrip = Checkpoint::from_bytes(&bytes_a).and_then(|c| c.to_bytes()).map(|again| again == bytes_a);
    checks.push(("checkpoint round-trip", matches!(roundtrip, Ok(true))));

    let score = || run_cli(&["score", "--model", &a, &wav, "--seed", "2"]);
    let (s1, s2) = (score(), score());
    checks.push(("score", s1.status.success() && s1.stdout == s2.stdout && !s1.stdout.is_empty()));

    let verify = || run_cli(&["verify-oracle", "--dist", "gmm", "--dim", "2", "--points", "10", "--seed", "3"]);
    let (v1, v2) = (verify(), verify());
    checks.push(("verify-oracle", v1.status.success() && v1.stdout == v2.stdout));

    let eval = |out: &str| {
        run_cli(&["eval", "--model", &a, "--clean", clean_dir.to_str().unwrap(), "--snrs", "-5,5", "--seed", "6", "--out-dir", out])
    };
    let (e1, e2) = (eval(&p("e1")), eval(&p("e2")));
    let same_files = ["records.csv", "correlations.csv", "histogram.csv"].iter().all(|f| {
        let x = std::fs::read(Path::new(&p("e1")).join(f));
        let y = std::fs::read(Path::new(&p("e2")).join(f));
        matches!((x, y), (Ok(x), Ok(y)) if x == y && !x.is_empty())
    });
    checks.push(("eval", e1.status.success() && e2.status.success() && same_files));

    let pass = checks.iter().all(|(_, ok)| *ok);
    let detail: Vec<String> = checks.iter().map(|(n, ok)| format!("{n}: {}", if *ok { "identical" } else { "DIFFERS" })).collect();
    report.line("9", name, pass, detail.join(", "));
}

fn main() {
    // `cargo test -- <filter>` passes arguments meant for libtest; run everything regardless.
    let mut report = Report { failures: 0 };
    println!("acceptance suite");
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_5(&mut report);
    criterion_8(&mut report);
    criterion_9(&mut report);
    match train_model() {
        Ok(trained) => {
            criterion_4(&mut report, &trained);
            criteria_6_7(&mut report, &trained);
        }
        Err(e) => {
            report.error("4", "Hutchinson probe spread", &e);
            report.error("6", "trained-model separation", &e);
            report.error("7", "monotonicity and SRCC", e);
        }
    }
    println!("{} of 9 criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
