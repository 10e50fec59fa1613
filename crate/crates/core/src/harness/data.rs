//! Synthetic task with planted visual clusters.
//!
//! Every sample has `visual_tokens` tokens split evenly among `clusters`
//! clusters. A token's first `semantic_dim` coordinates are its cluster mean
//! plus small noise; the remaining `nuisance_dim` coordinates are
//! cluster-independent noise. The cluster holding token 0 is designated,
//! and the label at text position `p` is drawn from
//! `softmax(γ · (A·μ + B·u_p))`, with `μ` the designated cluster's
//! empirical semantic mean and `u_p` the position's context vector.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use super::config::{MaskMode, RunConfig};
use crate::numkit::{softmax, Matrix};

/// Fixed label map shared by all samples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// `vocab × semantic_dim`.
    pub cluster_map: Matrix,
    /// `vocab × context_dim`.
    pub context_map: Matrix,
    pub label_sharpness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `visual_tokens × (semantic_dim + nuisance_dim)`.
    pub visual: Matrix,
    /// Planted cluster of every visual token.
    pub clusters: Vec<usize>,
    /// `text_positions × context_dim`.
    pub contexts: Matrix,
    pub targets: Vec<usize>,
    pub valid: Vec<bool>,
    /// Logits the labels were drawn from.
    pub true_logits: Matrix,
}

impl Sample {
    pub fn valid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(p, _)| p)
    }
}

/// A group of samples processed in one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct ToyBatch<'a> {
    pub samples: &'a [&'a Sample],
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("finite samples")
}

impl Task {
    pub fn generate(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        // unit-variance logits for unit-variance inputs
        let sem_std = 1.0 / (cfg.semantic_dim as f64).sqrt();
        let ctx_std = 1.0 / (cfg.context_dim as f64).sqrt();
        Self {
            cluster_map: gaussian(rng, cfg.vocab_size, cfg.semantic_dim, sem_std),
            context_map: gaussian(rng, cfg.vocab_size, cfg.context_dim, ctx_std),
            label_sharpness: cfg.label_sharpness,
        }
    }

    pub fn logits(&self, cluster_mean: &[f64], contexts: &Matrix) -> Matrix {
        let mu = Matrix::row_vector(cluster_mean).expect("finite mean");
        let base = mu.matmul_transposed(&self.cluster_map);
        let ctx = contexts.matmul_transposed(&self.context_map);
        let mut out = Vec::with_capacity(ctx.len());
        for p in 0..ctx.rows() {
            out.extend(
                ctx.row(p)
                    .iter()
                    .zip(base.row(0))
                    .map(|(c, b)| self.label_sharpness * (c + b)),
            );
        }
        Matrix::new(ctx.rows(), ctx.cols(), out).expect("finite logits")
    }

    pub fn sample(&self, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Sample {
        let n = cfg.visual_tokens;
        let d = cfg.input_dim();
        let mut clusters: Vec<usize> = (0..n).map(|i| i % cfg.clusters).collect();
        clusters.shuffle(rng);
        let means = gaussian(rng, cfg.clusters, cfg.semantic_dim, 1.0);
        let mut visual = Vec::with_capacity(n * d);
        for &c in &clusters {
            for &m in means.row(c) {
                visual.push(m + cfg.cluster_noise * rng.sample::<f64, _>(StandardNormal));
            }
            for _ in 0..cfg.nuisance_dim {
                visual.push(cfg.nuisance_scale * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let visual = Matrix::new(n, d, visual).expect("finite features");
        let designated = clusters[0];
        let members: Vec<usize> = (0..n).filter(|&i| clusters[i] == designated).collect();
        let mut mean = vec![0.0; cfg.semantic_dim];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(&visual.row(i)[..cfg.semantic_dim]) {
                *m += v / members.len() as f64;
            }
        }
        let contexts = gaussian(rng, cfg.text_positions, cfg.context_dim, 1.0);
        let true_logits = self.logits(&mean, &contexts);
        let targets = (0..cfg.text_positions)
            .map(|p| {
                let probs = softmax(true_logits.row(p), 1.0).expect("finite logits");
                WeightedIndex::new(&probs).expect("valid distribution").sample(rng)
            })
            .collect();
        let valid = (0..cfg.text_positions)
            .map(|p| match cfg.mask_mode {
                MaskMode::All => true,
                MaskMode::AnswerOnly => p >= cfg.text_positions / 2,
            })
            .collect();
        Sample {
            visual,
            clusters,
            contexts,
            targets,
            valid,
            true_logits,
        }
    }
}

/// Independent random streams derived from one seed.
pub(crate) mod stream {
    pub const TASK: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const STUDENT_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const ENTROPY: u64 = 6;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Task plus seeded train and eval splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Self {
        let task = Task::generate(cfg, &mut rng_for(cfg.seed, stream::TASK));
        let mut rng = rng_for(cfg.seed, stream::TRAIN);
        let train = (0..cfg.train_samples).map(|_| task.sample(cfg, &mut rng)).collect();
        let mut rng = rng_for(cfg.seed, stream::EVAL);
        let eval = (0..cfg.eval_samples).map(|_| task.sample(cfg, &mut rng)).collect();
        Self { task, train, eval }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            train_samples: 5,
            eval_samples: 3,
            ..Default::default()
        }
    }

    #[test]
    fn clusters_partition_tokens() {
        let cfg = small();
        let data = Dataset::generate(&cfg);
        for s in &data.train {
            assert_eq!(s.clusters.len(), cfg.visual_tokens);
            for c in 0..cfg.clusters {
                assert_eq!(s.clusters.iter().filter(|&&k| k == c).count(), cfg.visual_tokens / cfg.clusters);
            }
            assert_eq!(s.targets.len(), cfg.text_positions);
            assert!(s.targets.iter().all(|&t| t < cfg.vocab_size));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = Dataset::generate(&small());
        let b = Dataset::generate(&small());
        assert_eq!(a.train, b.train);
        assert_eq!(a.task, b.task);
        let c = Dataset::generate(&RunConfig { seed: 1, ..small() });
        assert_ne!(a.train[0].visual, c.train[0].visual);
    }

    #[test]
    fn answer_only_mask() {
        let cfg = RunConfig {
            mask_mode: MaskMode::AnswerOnly,
            ..small()
        };
        let data = Dataset::generate(&cfg);
        assert_eq!(data.train[0].valid, vec![false, false, true, true]);
        assert_eq!(data.train[0].valid_positions().collect::<Vec<_>>(), vec![2, 3]);
    }
}
