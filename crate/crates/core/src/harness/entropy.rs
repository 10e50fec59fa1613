//! Does teacher entropy predict teacher error?
//!
//! Each text position yields an (entropy, wrong?) pair. The pairs are
//! correlated directly (Pearson r against the 0/1 error indicator) and also
//! sorted into equal-count entropy bins, whose error rates are regressed on
//! the bins' mean entropies.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};

use super::config::RunConfig;
use super::data::{rng_for, stream, Sample, Task};
use super::model::ToyModel;
use crate::error::{Error, Result};
use crate::numkit::softmax;

/// Where the reference label of each position comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labeling {
    /// Drawn from the teacher's own distribution, so the error probability
    /// is `1 − max_v p(v)`.
    SelfSampling,
    /// The teacher's argmax; never wrong.
    Oracle,
    /// The sample's ground-truth targets.
    Task,
}

impl std::str::FromStr for Labeling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfSampling),
            "oracle" => Ok(Self::Oracle),
            "task" => Ok(Self::Task),
            _ => Err(Error::Config(format!("unknown labeling {s:?} (self, oracle, task)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub bin: usize,
    pub entropy_lo: f64,
    pub entropy_hi: f64,
    pub count: usize,
    pub mean_entropy: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyError {
    /// Correlation of entropy with the error indicator; 0 when either has no
    /// variance.
    pub pearson_r: f64,
    /// R² of the line through (mean entropy, error rate) per bin; 0 when the
    /// error rates have no variance.
    pub binned_r2: f64,
    pub bins: Vec<BinRow>,
}

impl EntropyError {
    pub fn error_rates_non_decreasing(&self) -> bool {
        self.bins.windows(2).all(|w| w[1].error_rate >= w[0].error_rate)
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
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
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Correlation and binned regression of `(entropy, is_error)` pairs.
pub fn entropy_error(points: &[(f64, bool)], bins: usize) -> Result<EntropyError> {
    if bins < 5 {
        return Err(Error::Domain(format!("need at least 5 bins, got {bins}")));
    }
    if points.len() < bins {
        return Err(Error::Domain(format!("{} samples for {bins} bins", points.len())));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut rows = Vec::with_capacity(bins);
    for b in 0..bins {
        let chunk = &sorted[b * n / bins..(b + 1) * n / bins];
        let count = chunk.len();
        rows.push(BinRow {
            bin: b,
            entropy_lo: chunk[0].0,
            entropy_hi: chunk[count - 1].0,
            count,
            mean_entropy: chunk.iter().map(|p| p.0).sum::<f64>() / count as f64,
            error_rate: chunk.iter().filter(|p| p.1).count() as f64 / count as f64,
        });
    }
    let h: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let e: Vec<f64> = sorted.iter().map(|p| f64::from(u8::from(p.1))).collect();
    let bx: Vec<f64> = rows.iter().map(|r| r.mean_entropy).collect();
    let by: Vec<f64> = rows.iter().map(|r| r.error_rate).collect();
    // R² of a least-squares line equals the squared correlation
    let binned_r2 = pearson(&bx, &by).powi(2);
    Ok(EntropyError {
        pearson_r: pearson(&h, &e),
        binned_r2,
        bins: rows,
    })
}

/// Scores the teacher on every valid position of `samples`.
pub fn entropy_error_experiment(
    teacher: &ToyModel,
    samples: &[Sample],
    labeling: Labeling,
    bins: usize,
    rng: &mut impl Rng,
) -> Result<EntropyError> {
    let weights = teacher.effective_weights();
    let mut points = Vec::new();
    for s in samples {
        let f = teacher.forward_with(&weights, s)?;
        for p in s.valid_positions() {
            let probs = softmax(f.logits.row(p), 1.0)?;
            let h: f64 = probs.iter().filter(|q| **q > 0.0).map(|q| -q * q.ln()).sum();
            let pred = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap_or(0);
            let label = match labeling {
                Labeling::SelfSampling => WeightedIndex::new(&probs)
                    .map_err(|e| Error::Domain(e.to_string()))?
                    .sample(rng),
                Labeling::Oracle => pred,
                Labeling::Task => s.targets[p],
            };
            points.push((h, label != pred));
        }
    }
    entropy_error(&points, bins)
}

/// Fresh task and constructed teacher for `cfg.seed`, scored on `samples`
/// newly drawn samples.
pub fn entropy_error_run(cfg: &RunConfig, samples: usize, labeling: Labeling, bins: usize) -> Result<EntropyError> {
    let task = Task::generate(cfg, &mut rng_for(cfg.seed, stream::TASK));
    let teacher = ToyModel::teacher(cfg, &task)?;
    let mut rng = rng_for(cfg.seed, stream::ENTROPY);
    let eval: Vec<Sample> = (0..samples).map(|_| task.sample(cfg, &mut rng)).collect();
    entropy_error_experiment(&teacher, &eval, labeling, bins, &mut rng)
}

pub const BINS_HEADER: &str = "bin,entropy_lo,entropy_hi,count,mean_entropy,error_rate";

pub fn write_bins(result: &EntropyError, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{BINS_HEADER}")?;
    for r in &result.bins {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.bin, r.entropy_lo, r.entropy_hi, r.count, r.mean_entropy, r.error_rate
        )?;
    }
    Ok(())
}
