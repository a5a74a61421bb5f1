//! Corruption sweeps and correlation statistics.
//!
//! Each clean utterance is scored as is and after mixing in noise at every
//! SNR of the grid. The injected SNR serves as the reference metric, and the
//! scores of the noisy conditions are correlated against it.
//!
//! CSV outputs are UTF-8 with LF line endings:
//!
//! * records: `utterance_id,condition,score,reference` (`reference` is `inf` for clean rows)
//! * correlations: `metric,value,n` with one `pcc` and one `srcc` row
//! * histogram: `condition,bin_left,bin_right,count` over edges shared by all conditions

use std::io::Write;
use std::path::Path;

use crate::audio::Waveform;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::likelihood::TraceMode;
use crate::numerics::SeededRng;
use crate::synth::white_noise;

pub const DEFAULT_SNRS: [f64; 6] = [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0];
pub const CLEAN_CONDITION: &str = "clean";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub utterance_id: String,
    pub condition: String,
    /// Per-element log-likelihood.
    pub score: f64,
    /// Injected SNR in dB; `+∞` for the unmodified signal.
    pub reference: f64,
}

pub fn snr_condition(snr_db: f64) -> String {
    format!("snr_{snr_db}dB")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMixture {
    pub wave: Waveform,
    /// SNR of clean versus scaled noise before clipping.
    pub realized_snr_db: f64,
    /// Samples that had to be clipped to `[−1, 1]`.
    pub clipped: usize,
}

/// `clean` plus `noise` scaled to `snr_db`.
///
/// Longer noise is cropped at a random offset; shorter noise is tiled from a
/// random offset. The mixture is clipped to `[−1, 1]` and the number of
/// clipped samples reported.
pub fn add_noise_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut SeededRng) -> Result<NoisyMixture> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
    }
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::invalid(format!(
            "clean is {} Hz but noise is {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    let signal_power = clean.power();
    if !(signal_power > 0.0) {
        return Err(Error::invalid("clean signal is silent; SNR is undefined"));
    }
    if noise.is_empty() {
        return Err(Error::invalid("noise signal is empty"));
    }
    let len = clean.len();
    let offset = if noise.len() > len { rng.below(noise.len() - len + 1) } else { rng.below(noise.len()) };
    let segment: Vec<f64> = (0..len).map(|i| noise.samples[(offset + i) % noise.len()]).collect();
    let noise_power = segment.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if !(noise_power > 0.0) {
        return Err(Error::invalid("noise segment is silent"));
    }
    let gain = (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let scaled_power = scaled.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let realized_snr_db = 10.0 * (signal_power / scaled_power).log10();

    let mut clipped = 0;
    let samples = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, n)| {
            let m = c + n;
            if m.abs() > 1.0 {
                clipped += 1;
            }
            m.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(NoisyMixture { wave: Waveform::new(samples, clean.sample_rate), realized_snr_db, clipped })
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("correlation inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("correlation inputs must be finite"));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("one input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Probability that a random positive outranks a random negative, ties counted half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("AUC needs at least one score in each class"));
    }
    let mut all: Vec<f64> = positives.to_vec();
    all.extend_from_slice(negatives);
    let ranks = average_ranks(&all);
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let rank_sum: f64 = ranks[..positives.len()].iter().sum();
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// `(mean(a) − mean(b)) / √((var(a) + var(b)) / 2)` with population variances.
pub fn standardized_separation(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, sa) = crate::numerics::mean_std(a)?;
    let (mb, sb) = crate::numerics::mean_std(b)?;
    let pooled = ((sa * sa + sb * sb) / 2.0).sqrt();
    if pooled == 0.0 {
        return Err(Error::UndefinedCorrelation("both groups have zero spread".into()));
    }
    Ok((ma - mb) / pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Fresh unit-variance Gaussian noise for every mixture.
    White,
    /// A random file from the corpus for every mixture.
    Corpus(Vec<Waveform>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub snrs: Vec<f64>,
    pub mode: TraceMode,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { snrs: DEFAULT_SNRS.to_vec(), mode: TraceMode::default(), seed: 0 }
    }
}

#[derive(Debug)]
pub struct SweepFailure {
    pub utterance_id: String,
    pub condition: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<SweepFailure>,
    /// Total clipped samples over all mixtures.
    pub clipped: usize,
}

/// Scores every utterance clean and at every SNR of the grid.
///
/// The mixture for utterance `u` at grid position `k` draws its noise from
/// `SeededRng::new(seed).child(u).child(k)`, so records do not depend on
/// scheduling or on the other utterances. Records come out ordered by
/// utterance, then clean, then the grid in the given order; failing pairs
/// are reported and skipped.
pub fn run_corruption_sweep(
    model: &Checkpoint,
    clean: &[(String, Waveform)],
    noise: &NoiseSource,
    config: &SweepConfig,
) -> Result<SweepOutcome> {
    if clean.is_empty() {
        return Err(Error::invalid("clean corpus is empty"));
    }
    if let NoiseSource::Corpus(files) = noise {
        if files.is_empty() {
            return Err(Error::invalid("noise corpus is empty"));
        }
    }
    if config.snrs.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("SNR grid must be finite"));
    }

    let root = SeededRng::new(config.seed);
    let mut outcome = SweepOutcome::default();
    let mut pending: Vec<(String, String, f64, Waveform)> = Vec::new();
    for (u, (id, wave)) in clean.iter().enumerate() {
        pending.push((id.clone(), CLEAN_CONDITION.to_string(), f64::INFINITY, wave.clone()));
        for (k, &snr) in config.snrs.iter().enumerate() {
            let mut rng = root.child(u as u64).child(k as u64);
            let condition = snr_condition(snr);
            let noise_wave = match noise {
                NoiseSource::White => white_noise(&mut rng, wave.len(), wave.sample_rate),
                NoiseSource::Corpus(files) => files[rng.below(files.len())].clone(),
            };
            match add_noise_at_snr(wave, &noise_wave, snr, &mut rng) {
                Ok(mix) => {
                    outcome.clipped += mix.clipped;
                    pending.push((id.clone(), condition, snr, mix.wave));
                }
                Err(error) => outcome.failures.push(SweepFailure { utterance_id: id.clone(), condition, error }),
            }
        }
    }

    let waves: Vec<Waveform> = pending.iter().map(|p| p.3.clone()).collect();
    let scores = model.score_waveforms(&waves, config.mode);
    for ((utterance_id, condition, reference, _), score) in pending.into_iter().zip(scores) {
        match score {
            Ok(score) => outcome.records.push(EvalRecord { utterance_id, condition, score, reference }),
            Err(error) => outcome.failures.push(SweepFailure { utterance_id, condition, error }),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlations {
    pub pcc: f64,
    pub srcc: f64,
    pub n: usize,
}

/// PCC and SRCC of score against injected SNR over the noisy records.
pub fn sweep_correlations(records: &[EvalRecord]) -> Result<Correlations> {
    let (refs, scores): (Vec<f64>, Vec<f64>) =
        records.iter().filter(|r| r.reference.is_finite()).map(|r| (r.reference, r.score)).unzip();
    Ok(Correlations { pcc: pearson(&scores, &refs)?, srcc: spearman(&scores, &refs)?, n: scores.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSummary {
    pub condition: String,
    pub reference: f64,
    pub count: usize,
    pub mean: f64,
}

/// Mean score per condition, ordered by first appearance.
pub fn condition_means(records: &[EvalRecord]) -> Vec<ConditionSummary> {
    let mut out: Vec<ConditionSummary> = Vec::new();
    for r in records {
        match out.iter_mut().find(|c| c.condition == r.condition) {
            Some(c) => {
                c.count += 1;
                c.mean += r.score;
            }
            None => out.push(ConditionSummary {
                condition: r.condition.clone(),
                reference: r.reference,
                count: 1,
                mean: r.score,
            }),
        }
    }
    for c in &mut out {
        c.mean /= c.count as f64;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub condition: String,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

/// Per-condition counts over `bins` uniform bins spanning all scores.
pub fn histogram(records: &[EvalRecord], bins: usize) -> Result<Vec<HistogramRow>> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut conditions: Vec<&str> = Vec::new();
    for r in records {
        if !conditions.contains(&r.condition.as_str()) {
            conditions.push(&r.condition);
        }
    }
    let (mut lo, mut hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.score), hi.max(r.score))
    });
    if records.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut rows = Vec::with_capacity(conditions.len() * bins);
    for cond in conditions {
        let mut counts = vec![0usize; bins];
        for r in records.iter().filter(|r| r.condition == cond) {
            let idx = (((r.score - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        for (b, count) in counts.into_iter().enumerate() {
            rows.push(HistogramRow { condition: cond.to_string(), bin_left: edges[b], bin_right: edges[b + 1], count });
        }
    }
    Ok(rows)
}

fn csv_writer(path: impl AsRef<Path>) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Io(e.into()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

pub fn write_records_csv(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["utterance_id", "condition", "score", "reference"]).map_err(csv_err)?;
    for r in records {
        w.write_record([r.utterance_id.as_str(), &r.condition, &r.score.to_string(), &r.reference.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlations_csv(path: impl AsRef<Path>, corr: &Correlations) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "metric,value,n")?;
    writeln!(w, "pcc,{},{}", corr.pcc, corr.n)?;
    writeln!(w, "srcc,{},{}", corr.srcc, corr.n)?;
    w.flush()?;
    Ok(())
}

pub fn emit_histogram_csv(path: impl AsRef<Path>, records: &[EvalRecord], bins: usize) -> Result<()> {
    let rows = histogram(records, bins)?;
    let mut w = csv_writer(path)?;
    w.write_record(["condition", "bin_left", "bin_right", "count"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.condition, r.bin_left.to_string(), r.bin_right.to_string(), r.count.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
