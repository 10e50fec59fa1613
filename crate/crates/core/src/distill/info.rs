//! Exact mutual-information bookkeeping for small discrete models.

use crate::error::{Error, Result};

const MAX_INPUTS: usize = 64;
const MAX_VOCAB: usize = 16;
const MAX_CODES: usize = 64;
const ROW_TOL: f64 = 1e-9;

/// A finite input space with a teacher channel, a deterministic student
/// encoder and a student decoder that sees only the code.
#[derive(Debug, Clone)]
pub struct EnumerableModel {
    input_probs: Vec<f64>,
    teacher: Vec<Vec<f64>>,
    encoder: Vec<usize>,
    decoder: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Domain(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::Domain(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl EnumerableModel {
    /// `teacher[x]` is `P_T(·|x)`, `encoder[x]` the code `f_S(x)`, and
    /// `decoder[z]` is `P_S(·|z)`.
    pub fn new(
        input_probs: Vec<f64>,
        teacher: Vec<Vec<f64>>,
        encoder: Vec<usize>,
        decoder: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let nx = input_probs.len();
        if nx == 0 || nx > MAX_INPUTS {
            return Err(Error::Domain(format!("|X| = {nx} outside 1..={MAX_INPUTS}")));
        }
        if decoder.is_empty() || decoder.len() > MAX_CODES {
            return Err(Error::Domain(format!(
                "|Z| = {} outside 1..={MAX_CODES}",
                decoder.len()
            )));
        }
        if teacher.len() != nx || encoder.len() != nx {
            return Err(Error::Shape(format!(
                "{nx} inputs but {} teacher rows and {} encoder entries",
                teacher.len(),
                encoder.len()
            )));
        }
        let nv = teacher[0].len();
        if !(2..=MAX_VOCAB).contains(&nv) {
            return Err(Error::Domain(format!("|V| = {nv} outside 2..={MAX_VOCAB}")));
        }
        check_row(&input_probs, "input distribution")?;
        for (x, row) in teacher.iter().enumerate() {
            if row.len() != nv {
                return Err(Error::Shape(format!("teacher row {x} has {} entries", row.len())));
            }
            check_row(row, &format!("teacher row {x}"))?;
        }
        for (z, row) in decoder.iter().enumerate() {
            if row.len() != nv {
                return Err(Error::Shape(format!("decoder row {z} has {} entries", row.len())));
            }
            check_row(row, &format!("decoder row {z}"))?;
        }
        if let Some(z) = encoder.iter().find(|&&z| z >= decoder.len()) {
            return Err(Error::Domain(format!("encoder emits code {z} with no decoder row")));
        }
        Ok(Self {
            input_probs,
            teacher,
            encoder,
            decoder,
        })
    }

    pub fn input_count(&self) -> usize {
        self.input_probs.len()
    }

    pub fn code_count(&self) -> usize {
        self.decoder.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.teacher[0].len()
    }

    /// Joint table `p(x, y) = p(x) P_T(y|x)`.
    pub fn joint_input_label(&self) -> Vec<Vec<f64>> {
        self.input_probs
            .iter()
            .zip(&self.teacher)
            .map(|(&px, row)| row.iter().map(|p| px * p).collect())
            .collect()
    }

    /// Joint table `p(z, y) = Σ_{x: f(x)=z} p(x) P_T(y|x)`.
    pub fn joint_code_label(&self) -> Vec<Vec<f64>> {
        let mut joint = vec![vec![0.0; self.vocab_size()]; self.code_count()];
        for (x, row) in self.joint_input_label().into_iter().enumerate() {
            for (acc, p) in joint[self.encoder[x]].iter_mut().zip(row) {
                *acc += p;
            }
        }
        joint
    }

    /// `E_x[KL(P_T(·|x) ‖ P_S(·|f(x)))]`.
    pub fn expected_kl(&self) -> Result<f64> {
        let mut total = 0.0;
        for (x, (&px, pt)) in self.input_probs.iter().zip(&self.teacher).enumerate() {
            let ps = &self.decoder[self.encoder[x]];
            let mut kl = 0.0;
            for (&a, &b) in pt.iter().zip(ps) {
                if a == 0.0 {
                    continue;
                }
                if b == 0.0 {
                    return Err(Error::InfiniteKl(format!(
                        "student decoder assigns zero where teacher row {x} has mass"
                    )));
                }
                kl += a * (a / b).ln();
            }
            total += px * kl;
        }
        Ok(total)
    }
}

/// Mutual information (nats) of a joint probability table.
pub fn mutual_information(joint: &[Vec<f64>]) -> f64 {
    let cols = joint.first().map_or(0, Vec::len);
    let row_marg: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let mut col_marg = vec![0.0; cols];
    for row in joint {
        for (c, p) in col_marg.iter_mut().zip(row) {
            *c += p;
        }
    }
    let mut mi = 0.0;
    for (row, &pr) in joint.iter().zip(&row_marg) {
        for (&p, &pc) in row.iter().zip(&col_marg) {
            if p > 0.0 {
                mi += p * (p / (pr * pc)).ln();
            }
        }
    }
    mi
}

/// Both sides of the student-information lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposition1 {
    /// `I(Z_S; Y_T)`.
    pub lhs: f64,
    /// `I(X; Y_T)`.
    pub input_information: f64,
    pub expected_kl: f64,
    /// `I(X; Y_T) − E[KL]`.
    pub rhs: f64,
    pub slack: f64,
}

/// Evaluates `I(Z;Y_T) ≥ I(X;Y_T) − E[KL(P_T ‖ P_S)]` exactly.
pub fn proposition1_check(model: &EnumerableModel) -> Result<Proposition1> {
    let lhs = mutual_information(&model.joint_code_label());
    let input_information = mutual_information(&model.joint_input_label());
    let expected_kl = model.expected_kl()?;
    let rhs = input_information - expected_kl;
    Ok(Proposition1 {
        lhs,
        input_information,
        expected_kl,
        rhs,
        slack: lhs - rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn independent_joint_has_zero_information() {
        let joint = vec![vec![0.1, 0.3], vec![0.15, 0.45]];
        assert!(mutual_information(&joint).abs() < 1e-15);
    }

    #[test]
    fn perfectly_coupled_bit() {
        let joint = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        assert!((mutual_information(&joint) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_student_is_tight() {
        let teacher = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.3, 0.4, 0.3]];
        let m = EnumerableModel::new(uniform(3), teacher.clone(), vec![2, 0, 1], vec![
            teacher[1].clone(),
            teacher[2].clone(),
            teacher[0].clone(),
        ])
        .unwrap();
        let p = proposition1_check(&m).unwrap();
        assert!(p.slack.abs() < 1e-12, "{p:?}");
        assert!(p.expected_kl.abs() < 1e-15);
    }

    #[test]
    fn constant_encoder_carries_nothing() {
        let teacher = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let m = EnumerableModel::new(uniform(2), teacher, vec![0, 0], vec![vec![0.5, 0.5]]).unwrap();
        let p = proposition1_check(&m).unwrap();
        assert!(p.lhs.abs() < 1e-15);
        assert!(p.rhs <= 1e-12);
        assert!(p.slack >= -1e-10);
    }

    #[test]
    fn bad_rows_rejected() {
        let err = EnumerableModel::new(uniform(1), vec![vec![0.6, 0.6]], vec![0], vec![vec![0.5, 0.5]]);
        assert!(matches!(err, Err(Error::Domain(_))));
        let err = EnumerableModel::new(uniform(1), vec![vec![0.5, 0.5]], vec![0], vec![vec![0.1, 0.5]]);
        assert!(matches!(err, Err(Error::Domain(_))));
        let err = EnumerableModel::new(uniform(1), vec![vec![0.5, 0.5]], vec![3], vec![vec![0.5, 0.5]]);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn zero_decoder_mass_is_infinite_kl() {
        let m = EnumerableModel::new(uniform(1), vec![vec![0.5, 0.5]], vec![0], vec![vec![1.0, 0.0]]).unwrap();
        assert!(matches!(proposition1_check(&m), Err(Error::InfiniteKl(_))));
    }
}
