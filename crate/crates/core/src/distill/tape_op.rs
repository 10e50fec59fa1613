//! Per-token DKD losses as a single differentiable primitive on student
//! logits.

use super::{DkdWeights, NON_TARGET_FLOOR};
use crate::error::{Error, Result};
use crate::numkit::{log_softmax_unchecked, logsumexp, CustomOp, Matrix, Tape, Var};

/// Backward rule for [`dkd_rows`].
///
/// The loss is written in log-probability coordinates `ℓ = log_softmax(z/T)`,
/// using `ln(1 − q_y) = logsumexp(ℓ_{v≠y})` so nothing overflows for
/// near-one-hot students.
pub struct DkdRows {
    teacher: Matrix,
    targets: Vec<usize>,
    weights: DkdWeights,
    nckd_active: Vec<bool>,
}

struct RowTerms {
    loss: f64,
    nckd_active: bool,
}

fn non_target_logsumexp(logq: &[f64], y: usize) -> f64 {
    let rest: Vec<f64> = logq
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != y)
        .map(|(_, &l)| l)
        .collect();
    logsumexp(&rest)
}

fn row_terms(pt: &[f64], logq: &[f64], y: usize, w: &DkdWeights) -> Result<RowTerms> {
    let a = pt[y];
    let m: f64 = pt.iter().enumerate().filter(|&(v, _)| v != y).map(|(_, p)| p).sum();
    let ln_rest = non_target_logsumexp(logq, y);
    let mut tckd = 0.0;
    if a > 0.0 {
        tckd += a * (a.ln() - logq[y]);
    }
    if m > 0.0 {
        if ln_rest == f64::NEG_INFINITY {
            return Err(Error::InfiniteKl(
                "student has no non-target mass where the teacher does".into(),
            ));
        }
        tckd += m * (m.ln() - ln_rest);
    }
    let nckd_active = m >= NON_TARGET_FLOOR && ln_rest.exp() >= NON_TARGET_FLOOR;
    let mut nckd = 0.0;
    if nckd_active {
        for (v, &p) in pt.iter().enumerate() {
            if v == y || p == 0.0 {
                continue;
            }
            let p_hat = p / m;
            nckd += p_hat * (p_hat.ln() - (logq[v] - ln_rest));
        }
    }
    Ok(RowTerms {
        loss: w.alpha * tckd.max(0.0) + w.beta_dkd * nckd.max(0.0),
        nckd_active,
    })
}

/// Records per-token DKD losses (`N × 1`) of the student logits against
/// fixed teacher probabilities. Returns the node and the number of tokens
/// whose NCKD term was skipped.
///
/// `teacher_probs` must already be tempered; the student logits are divided by
/// `weights.temperature` here.
pub fn dkd_rows(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Matrix,
    targets: &[usize],
    weights: &DkdWeights,
) -> Result<(Var, usize)> {
    let logits = tape.value(student_logits);
    if logits.shape() != teacher_probs.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher probs {:?}",
            logits.shape(),
            teacher_probs.shape()
        )));
    }
    let (n, v) = logits.shape();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} tokens", targets.len())));
    }
    if v < 2 {
        return Err(Error::Domain("DKD needs |V| >= 2".into()));
    }
    let mut losses = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    for i in 0..n {
        let y = targets[i];
        if y >= v {
            return Err(Error::Domain(format!("target {y} out of range for |V| = {v}")));
        }
        let logq = log_softmax_unchecked(logits.row(i), weights.temperature);
        let terms = row_terms(teacher_probs.row(i), &logq, y, weights)?;
        losses.push(terms.loss);
        active.push(terms.nckd_active);
    }
    let skipped = active.iter().filter(|a| !**a).count();
    let op = DkdRows {
        teacher: teacher_probs.clone(),
        targets: targets.to_vec(),
        weights: *weights,
        nckd_active: active,
    };
    let value = Matrix::new(n, 1, losses)?;
    Ok((tape.custom(vec![student_logits], value, Box::new(op)), skipped))
}

impl CustomOp for DkdRows {
    fn name(&self) -> &'static str {
        "dkd_rows"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, upstream: &Matrix) -> Vec<Option<Matrix>> {
        let logits = inputs[0];
        let (n, v) = logits.shape();
        let t = self.weights.temperature;
        let (alpha, beta) = (self.weights.alpha, self.weights.beta_dkd);
        let mut out = Vec::with_capacity(n * v);
        let mut grad_l = vec![0.0; v];
        for i in 0..n {
            let gi = upstream.data()[i];
            let y = self.targets[i];
            let pt = self.teacher.row(i);
            let logq = log_softmax_unchecked(logits.row(i), t);
            let ln_rest = non_target_logsumexp(&logq, y);
            let a = pt[y];
            let m: f64 = pt.iter().enumerate().filter(|&(u, _)| u != y).map(|(_, p)| p).sum();
            // gradient with respect to the log-probabilities
            for (u, g) in grad_l.iter_mut().enumerate() {
                if u == y {
                    *g = -alpha * a;
                    continue;
                }
                let r = (logq[u] - ln_rest).exp();
                *g = -alpha * m * r;
                if self.nckd_active[i] {
                    *g += beta * (r - pt[u] / m);
                }
            }
            let total: f64 = grad_l.iter().sum();
            out.extend(
                grad_l
                    .iter()
                    .zip(&logq)
                    .map(|(g, l)| gi * (g - l.exp() * total) / t),
            );
        }
        vec![Some(Matrix::from_raw(n, v, out))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{dkd_per_token, TokenDistribution};
    use crate::numkit::{finite_diff_check, softmax};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut impl Rng, n: usize, v: usize, scale: f64) -> Matrix {
        Matrix::new(n, v, (0..n * v).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn tempered(logits: &Matrix, t: f64) -> Matrix {
        let (n, v) = logits.shape();
        let mut data = Vec::new();
        for i in 0..n {
            data.extend(softmax(logits.row(i), t).unwrap());
        }
        Matrix::new(n, v, data).unwrap()
    }

    fn weighted_sum(student: &Matrix, teacher: &Matrix, targets: &[usize], mix: &[f64], w: &DkdWeights) -> (f64, Matrix) {
        let mut tape = Tape::new();
        let s = tape.leaf(student.clone());
        let (l, _) = dkd_rows(&mut tape, s, teacher, targets, w).unwrap();
        let m = tape.constant(Matrix::column_vector(mix).unwrap());
        let p = tape.mul(l, m).unwrap();
        let total = tape.sum(p);
        let mut g = tape.backward(total).unwrap();
        (tape.scalar(total), g.take_or_zeros(s, student.shape()))
    }

    #[test]
    fn matches_distribution_level_dkd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DkdWeights::default();
        let teacher_logits = random_logits(&mut rng, 6, 7, 3.0);
        let student = random_logits(&mut rng, 6, 7, 3.0);
        let teacher = tempered(&teacher_logits, w.temperature);
        let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..7)).collect();
        let mut tape = Tape::new();
        let s = tape.constant(student.clone());
        let (l, skipped) = dkd_rows(&mut tape, s, &teacher, &targets, &w).unwrap();
        assert_eq!(skipped, 0);
        for i in 0..6 {
            let pt = TokenDistribution::new(teacher.row(i).to_vec(), targets[i]).unwrap();
            let ps = TokenDistribution::from_logits(student.row(i), w.temperature, targets[i]).unwrap();
            let expected = dkd_per_token(&pt, &ps, &w).unwrap();
            assert!((tape.value(l).get(i, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = DkdWeights::default();
        for _ in 0..5 {
            let teacher = tempered(&random_logits(&mut rng, 4, 5, 4.0), w.temperature);
            let student = random_logits(&mut rng, 4, 5, 4.0);
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let mix: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
            let (_, grad) = weighted_sum(&student, &teacher, &targets, &mix, &w);
            let err = finite_diff_check(
                |x| weighted_sum(&Matrix::new(4, 5, x.to_vec()).unwrap(), &teacher, &targets, &mix, &w).0,
                grad.data(),
                student.data(),
                1e-5,
            );
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn self_distillation_is_zero_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DkdWeights::default();
        let logits = random_logits(&mut rng, 3, 6, 2.0);
        let teacher = tempered(&logits, w.temperature);
        let (loss, grad) = weighted_sum(&logits, &teacher, &[0, 3, 5], &[1.0, 1.0, 1.0], &w);
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn one_hot_teacher_rows_are_skipped() {
        let w = DkdWeights::default();
        let teacher = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.5, 0.3, 0.2]]).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.0, 1.0, -1.0]]).unwrap());
        let (_, skipped) = dkd_rows(&mut tape, s, &teacher, &[0, 0], &w).unwrap();
        assert_eq!(skipped, 1);
    }
}
