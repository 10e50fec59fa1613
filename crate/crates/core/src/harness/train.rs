//! Training loop and run reports.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{RckaMode, RunConfig, Variant};
use super::data::{rng_for, stream, Dataset, Sample, ToyBatch};
use super::model::{ParamKind, ToyModel};
use crate::controller::{total_loss_on_tape, ControllerState};
use crate::distill::{dkd_rows, entropy, TokenDistribution};
use crate::error::{Error, Result};
use crate::numkit::{log_softmax, softmax, Matrix, Tape, Var};
use crate::rcka::{rcka_loss_on_tape, TeacherKernel, TokenFeatures};

/// Frozen teacher outputs for one sample.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    /// Tempered teacher distribution per text position (`P × V`).
    pub probs: Matrix,
    /// Confidence gate per text position.
    pub gates: Vec<f64>,
    /// Positions whose distribution was replaced by a corrupted one.
    pub corrupted: Vec<bool>,
    pub kernel: TeacherKernel,
    /// Raw hidden tokens, kept only for batch-level RCKA.
    pub tap: Option<Matrix>,
}

fn gate_of(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    (-h / (probs.len() as f64).ln()).exp()
}

/// High-entropy logits that lean toward a class other than `avoid`.
fn corrupted_logits(rng: &mut (impl Rng + ?Sized), vocab: usize, avoid: usize) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..vocab).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut wrong = rng.gen_range(0..vocab - 1);
    if wrong >= avoid {
        wrong += 1;
    }
    logits[wrong] += 2.5;
    logits
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap_or(0)
}

/// Runs the teacher over `samples`. With `rng` given, each position is
/// corrupted with probability `cfg.noisy_fraction`.
pub fn teacher_cache(
    teacher: &ToyModel,
    samples: &[Sample],
    cfg: &RunConfig,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<TeacherCache>> {
    let weights = teacher.effective_weights();
    let keep_tap = cfg.rcka_mode == RckaMode::Concatenated;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let f = teacher.forward_with(&weights, s)?;
        let (p, v) = f.logits.shape();
        let mut probs = Vec::with_capacity(p * v);
        let mut gates = Vec::with_capacity(p);
        let mut corrupted = Vec::with_capacity(p);
        for pos in 0..p {
            let hit = match rng.as_deref_mut() {
                Some(r) => r.gen_bool(cfg.noisy_fraction),
                None => false,
            };
            let logits = if hit {
                let avoid = argmax(f.logits.row(pos));
                corrupted_logits(rng.as_deref_mut().expect("checked"), v, avoid)
            } else {
                f.logits.row(pos).to_vec()
            };
            // confidence of the predictive distribution, before tempering
            gates.push(gate_of(&softmax(&logits, 1.0)?));
            let row = softmax(&logits, cfg.dkd.temperature)?;
            corrupted.push(hit);
            probs.extend(row);
        }
        let kernel = TeacherKernel::new(&TokenFeatures::new(f.tap.clone())?)?;
        out.push(TeacherCache {
            probs: Matrix::new(p, v, probs)?,
            gates,
            corrupted,
            kernel,
            tap: keep_tap.then_some(f.tap),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub variant: Variant,
    pub train_loss: f64,
    pub eval_ce: f64,
    pub eval_acc: f64,
    /// Weight on the distillation term at the end of the epoch.
    pub beta: f64,
    pub ema_gdkd: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub variant: Variant,
    pub rows: Vec<EpochRow>,
    /// `β` after every optimizer step.
    pub beta_trajectory: Vec<f64>,
    /// Batch GDKD value at every optimizer step.
    pub gdkd_trajectory: Vec<f64>,
    /// Step at which the loss became non-finite, if it did.
    pub diverged_at: Option<u64>,
    pub student: ToyModel,
}

impl RunReport {
    pub fn final_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

pub const REPORT_HEADER: &str = "epoch,variant,train_loss,eval_ce,eval_acc,beta,ema_gdkd";

pub fn write_report(rows: &[EpochRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.variant, r.train_loss, r.eval_ce, r.eval_acc, r.beta, r.ema_gdkd
        )?;
    }
    Ok(())
}

/// Writes the report CSV to `path`.
pub fn run_report_write(rows: &[EpochRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_report(rows, &mut buf).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Held-out metrics over the valid positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub ce: f64,
    pub accuracy: f64,
}

pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<EvalMetrics> {
    let weights = model.effective_weights();
    let (mut ce, mut hits, mut n) = (0.0, 0usize, 0usize);
    for s in samples {
        let f = model.forward_with(&weights, s)?;
        for p in s.valid_positions() {
            let lp = log_softmax(f.logits.row(p), 1.0)?;
            ce -= lp[s.targets[p]];
            hits += usize::from(argmax(&lp) == s.targets[p]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("no valid positions to evaluate".into()));
    }
    Ok(EvalMetrics {
        ce: ce / n as f64,
        accuracy: hits as f64 / n as f64,
    })
}

/// Scalar values of one batch objective.
#[derive(Debug, Clone, Copy)]
struct StepValues {
    total: f64,
    gdkd: f64,
}

/// Dataset, frozen teacher and teacher outputs, shared by every variant
/// trained on the same configuration.
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub teacher: ToyModel,
    pub train_cache: Vec<TeacherCache>,
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Dataset::generate(cfg);
        let teacher = ToyModel::teacher(cfg, &data.task)?;
        let mut noise = rng_for(cfg.seed, stream::NOISE);
        let train_cache = if cfg.noisy_fraction > 0.0 {
            teacher_cache(&teacher, &data.train, cfg, Some(&mut noise))?
        } else {
            teacher_cache(&teacher, &data.train, cfg, None)?
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            teacher,
            train_cache,
        })
    }

    /// Builds the objective of one batch on `tape`.
    fn batch_objective(
        &self,
        tape: &mut Tape,
        student: &ToyModel,
        bound: &super::model::Bound,
        batch: ToyBatch<'_>,
        caches: &[&TeacherCache],
        variant: Variant,
        beta: f64,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let mut rows = Vec::new();
        let mut taps = Vec::new();
        let mut targets = Vec::new();
        let mut tprobs = Vec::new();
        let mut gates = Vec::new();
        for (s, c) in batch.samples.iter().zip(caches) {
            let (logits, tap) = student.forward_on_tape(tape, bound, s)?;
            let valid: Vec<usize> = s.valid_positions().collect();
            rows.push(tape.select_rows(logits, valid.clone())?);
            taps.push(tap);
            for p in valid {
                targets.push(s.targets[p]);
                tprobs.extend_from_slice(c.probs.row(p));
                gates.push(c.gates[p]);
            }
        }
        let m = targets.len();
        let logits = tape.concat_rows(rows)?;
        let tprobs = Matrix::new(m, cfg.vocab_size, tprobs)?;

        let ls = tape.log_softmax_rows(logits, 1.0)?;
        let picked = tape.pick_cols(ls, targets.clone())?;
        let ce_sum = tape.sum(picked);
        let ce = tape.scale(ce_sum, -1.0 / m as f64);

        let (dkd, _) = dkd_rows(tape, logits, &tprobs, &targets, &cfg.dkd)?;
        let weights: Vec<f64> = if variant.uses_dkd() && !variant.uses_gate() {
            vec![1.0 / m as f64; m]
        } else {
            let total: f64 = gates.iter().sum();
            gates.iter().map(|g| g / total).collect()
        };
        let wcol = tape.constant(Matrix::column_vector(&weights)?);
        let weighted = tape.mul(dkd, wcol)?;
        let gdkd = tape.sum(weighted);

        let total = match variant {
            Variant::CeOnly => ce,
            Variant::NaiveKd => {
                let lt = tape.log_softmax_rows(logits, cfg.dkd.temperature)?;
                let pt = tape.constant(tprobs.clone());
                let cross = tape.mul(lt, pt)?;
                let cross = tape.sum(cross);
                let neg_entropy: f64 = tprobs.data().iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
                let offset = tape.constant(Matrix::scalar(neg_entropy));
                let kl_sum = tape.sub(offset, cross)?;
                let kl = tape.scale(kl_sum, 1.0 / m as f64);
                let weighted = tape.scale(kl, cfg.naive_kd_weight);
                tape.add(ce, weighted)?
            }
            _ => {
                let rcka = if variant.uses_rcka() {
                    Some(self.rcka_term(tape, &taps, caches)?)
                } else {
                    None
                };
                total_loss_on_tape(tape, ce, Some(gdkd), rcka, beta, cfg.controller.omega)?
            }
        };
        Ok((total, gdkd))
    }

    fn rcka_term(&self, tape: &mut Tape, taps: &[Var], caches: &[&TeacherCache]) -> Result<Var> {
        match self.cfg.rcka_mode {
            RckaMode::PerSample => {
                let mut acc = None;
                for (&tap, c) in taps.iter().zip(caches) {
                    let l = rcka_loss_on_tape(tape, &c.kernel, tap)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => tape.add(a, l)?,
                    });
                }
                let sum = acc.ok_or_else(|| Error::Shape("empty batch".into()))?;
                Ok(tape.scale(sum, 1.0 / taps.len() as f64))
            }
            RckaMode::Concatenated => {
                let mut teacher_rows = Vec::new();
                let mut rows = 0;
                let mut cols = 0;
                for c in caches {
                    let t = c.tap.as_ref().expect("taps cached in concatenated mode");
                    teacher_rows.extend_from_slice(t.data());
                    rows += t.rows();
                    cols = t.cols();
                }
                let kernel = TeacherKernel::new(&TokenFeatures::new(Matrix::new(rows, cols, teacher_rows)?)?)?;
                let student = tape.concat_rows(taps.to_vec())?;
                rcka_loss_on_tape(tape, &kernel, student)
            }
        }
    }

    fn step(
        &self,
        student: &ToyModel,
        batch_idx: &[usize],
        variant: Variant,
        beta: f64,
    ) -> Result<(StepValues, Vec<Matrix>)> {
        let samples: Vec<&Sample> = batch_idx.iter().map(|&i| &self.data.train[i]).collect();
        let caches: Vec<&TeacherCache> = batch_idx.iter().map(|&i| &self.train_cache[i]).collect();
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true)?;
        let (total, gdkd) = self.batch_objective(
            &mut tape,
            student,
            &bound,
            ToyBatch { samples: &samples },
            &caches,
            variant,
            beta,
        )?;
        let values = StepValues {
            total: tape.scalar(total),
            gdkd: tape.scalar(gdkd),
        };
        if !values.total.is_finite() {
            return Ok((values, Vec::new()));
        }
        let mut grads = tape.backward(total)?;
        let g = bound
            .params
            .iter()
            .zip(student.params())
            .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
            .collect();
        Ok((values, g))
    }

    /// Objective value and parameter gradients of `student` on the given
    /// training samples, as used by one optimizer step.
    pub fn loss_and_gradients(
        &self,
        student: &ToyModel,
        batch_idx: &[usize],
        variant: Variant,
        beta: f64,
    ) -> Result<(f64, Vec<Matrix>)> {
        let (v, g) = self.step(student, batch_idx, variant, beta)?;
        Ok((v.total, g))
    }

    pub fn init_student(&self) -> Result<ToyModel> {
        ToyModel::student(&self.cfg, &mut rng_for(self.cfg.seed, stream::STUDENT_INIT))
    }

    pub fn train(&self, variant: Variant) -> Result<RunReport> {
        let cfg = &self.cfg;
        let mut student = self.init_student()?;
        let mut velocity: Vec<Matrix> = student.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let mut controller = ControllerState::new(&cfg.controller);
        let mut shuffle = rng_for(cfg.seed, stream::SHUFFLE);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        let mut report = RunReport {
            variant,
            rows: Vec::new(),
            beta_trajectory: Vec::new(),
            gdkd_trajectory: Vec::new(),
            diverged_at: None,
            student: student.clone(),
        };
        let applied_weight = |state: &ControllerState| match variant {
            Variant::CeOnly => 0.0,
            Variant::NaiveKd => cfg.naive_kd_weight,
            _ => state.beta,
        };
        let kinds = student.kinds().to_vec();
        let mut step: u64 = 0;
        'epochs: for epoch in 1..=cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                step += 1;
                let (values, grads) = self.step(&student, chunk, variant, controller.beta)?;
                if !values.total.is_finite() {
                    report.diverged_at = Some(step);
                    break 'epochs;
                }
                for (((p, v), g), kind) in student
                    .params_mut()
                    .iter_mut()
                    .zip(&mut velocity)
                    .zip(&grads)
                    .zip(&kinds)
                {
                    let lr = if *kind == ParamKind::LogScale { cfg.lr_s } else { cfg.lr_w };
                    *v = v.scale(cfg.momentum).add(g)?;
                    *p = p.sub(&v.scale(lr))?;
                }
                if student.params().iter().any(|p| !p.is_finite()) {
                    report.diverged_at = Some(step);
                    break 'epochs;
                }
                let gdkd = values.gdkd.max(0.0);
                if variant.adapts_beta() {
                    controller.update(gdkd, &cfg.controller)?;
                } else {
                    controller.observe(gdkd, &cfg.controller)?;
                }
                report.beta_trajectory.push(applied_weight(&controller));
                report.gdkd_trajectory.push(values.gdkd);
                loss_sum += values.total;
                batches += 1;
            }
            let metrics = evaluate(&student, &self.data.eval)?;
            report.rows.push(EpochRow {
                epoch,
                variant,
                train_loss: loss_sum / batches as f64,
                eval_ce: metrics.ce,
                eval_acc: metrics.accuracy,
                beta: applied_weight(&controller),
                ema_gdkd: controller.ema_loss,
            });
        }
        report.student = student;
        Ok(report)
    }
}

/// Builds the experiment for `cfg` and trains one variant.
pub fn train(cfg: &RunConfig, variant: Variant) -> Result<RunReport> {
    Experiment::new(cfg)?.train(variant)
}

/// Mean teacher entropy (nats, untempered) over the valid positions.
pub fn mean_teacher_entropy(teacher: &ToyModel, samples: &[Sample]) -> Result<f64> {
    let weights = teacher.effective_weights();
    let (mut total, mut n) = (0.0, 0usize);
    for s in samples {
        let f = teacher.forward_with(&weights, s)?;
        for p in s.valid_positions() {
            let d = TokenDistribution::from_logits(f.logits.row(p), 1.0, s.targets[p])?;
            total += entropy(&d);
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_check;

    fn tiny() -> RunConfig {
        RunConfig {
            train_samples: 32,
            eval_samples: 16,
            epochs: 2,
            batch_size: 8,
            visual_tokens: 16,
            ..Default::default()
        }
    }

    #[test]
    fn report_header_only_when_empty() {
        let mut buf = Vec::new();
        write_report(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = tiny();
        let exp = Experiment::new(&cfg).unwrap();
        let a = exp.train(Variant::Grace).unwrap();
        let b = Experiment::new(&cfg).unwrap().train(Variant::Grace).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.student, b.student);
        assert_eq!(a.rows.len(), 2);
    }

    #[test]
    fn teacher_is_untouched_by_training() {
        let exp = Experiment::new(&tiny()).unwrap();
        let before = exp.teacher.clone();
        for v in Variant::ALL {
            exp.train(v).unwrap();
        }
        assert_eq!(exp.teacher, before);
    }

    #[test]
    fn beta_column_within_bounds() {
        let cfg = RunConfig {
            controller: crate::controller::ControllerConfig {
                eta: 0.5,
                ..Default::default()
            },
            ..tiny()
        };
        let r = train(&cfg, Variant::Grace).unwrap();
        assert!(r
            .beta_trajectory
            .iter()
            .all(|b| (cfg.controller.beta_min..=cfg.controller.beta_max).contains(b)));
        let fixed = train(&cfg, Variant::GraceFixedBeta).unwrap();
        assert!(fixed.beta_trajectory.iter().all(|b| *b == cfg.controller.beta_init));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = RunConfig {
            lr_w: 1e308,
            momentum: 0.0,
            quant: None,
            ..tiny()
        };
        let r = train(&cfg, Variant::CeOnly).unwrap();
        assert!(r.diverged_at.is_some());
        assert!(r.rows.is_empty());
    }

    #[test]
    fn noise_injection_lowers_gates() {
        let cfg = RunConfig {
            noisy_fraction: 0.5,
            ..tiny()
        };
        let exp = Experiment::new(&cfg).unwrap();
        let (mut clean, mut nc, mut noisy, mut nn) = (0.0, 0, 0.0, 0);
        for c in &exp.train_cache {
            for (g, bad) in c.gates.iter().zip(&c.corrupted) {
                if *bad {
                    noisy += g;
                    nn += 1;
                } else {
                    clean += g;
                    nc += 1;
                }
            }
        }
        assert!(nn > 0 && nc > 0);
        assert!(noisy / (nn as f64) < clean / (nc as f64));
    }

    #[test]
    fn full_precision_gradients_match_finite_differences() {
        let cfg = RunConfig {
            quant: None,
            noisy_fraction: 0.3,
            ..tiny()
        };
        let exp = Experiment::new(&cfg).unwrap();
        let student = exp.init_student().unwrap();
        let batch = [0, 3, 5];
        for variant in [Variant::Grace, Variant::NaiveKd, Variant::GraceNoGate] {
            let (_, grads) = exp.loss_and_gradients(&student, &batch, variant, 1.3).unwrap();
            for (k, g) in grads.iter().enumerate() {
                // a strided subset keeps the check quick
                let picks: Vec<usize> = (0..g.len()).step_by(5).collect();
                let point: Vec<f64> = picks.iter().map(|&i| student.params()[k].data()[i]).collect();
                let analytic: Vec<f64> = picks.iter().map(|&i| g.data()[i]).collect();
                let f = |x: &[f64]| {
                    let mut m = student.clone();
                    let mut data = m.params()[k].data().to_vec();
                    for (&i, v) in picks.iter().zip(x) {
                        data[i] = *v;
                    }
                    let shape = m.params()[k].shape();
                    m.params_mut()[k] = Matrix::new(shape.0, shape.1, data).unwrap();
                    exp.loss_and_gradients(&m, &batch, variant, 1.3).unwrap().0
                };
                let err = finite_diff_check(f, &analytic, &point, 1e-6);
                assert!(err < 1e-5, "{variant} param {k}: {err}");
            }
        }
    }
}
