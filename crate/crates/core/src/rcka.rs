//! Relational centered kernel alignment between two sets of token
//! representations.
//!
//! Both sides are reduced to `n × n` cosine-similarity Gram matrices, so the
//! teacher and student may have different hidden widths. After double
//! centering, HSIC is the trace inner product of the two kernels and CKA
//! normalizes it by the self-HSICs.

use crate::error::{Error, Result};
use crate::numkit::{double_center, row_normalized, Matrix, Tape, Var};

/// `n × d` token representations, `n ≥ 2`, with no zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    rows: Matrix,
}

impl TokenFeatures {
    pub fn new(rows: Matrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::Shape(format!(
                "relational alignment needs at least two tokens, got {}",
                rows.rows()
            )));
        }
        check_rows(&rows)?;
        Ok(Self { rows })
    }

    pub fn token_count(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }
}

fn check_rows(m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        if m.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Domain(format!("token row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Cosine-similarity Gram matrix `V̄ V̄ᵀ` with rows scaled to unit norm.
pub fn gram(v: &Matrix) -> Result<Matrix> {
    let normed = row_normalized(v)?;
    Ok(normed.matmul_transposed(&normed))
}

/// `H K H` with `H = I − 11ᵀ/n`.
pub fn center(k: &Matrix) -> Result<Matrix> {
    double_center(k)
}

/// `Tr(K̃_a K̃_b) / (n − 1)²`. Both inputs are centered here; centering is
/// idempotent, so already-centered kernels pass through unchanged.
pub fn hsic(ka: &Matrix, kb: &Matrix) -> Result<f64> {
    if ka.shape() != kb.shape() {
        return Err(Error::Shape(format!(
            "HSIC of {:?} and {:?}",
            ka.shape(),
            kb.shape()
        )));
    }
    hsic_centered(&center(ka)?, &center(kb)?)
}

/// HSIC of kernels the caller has already centered.
pub fn hsic_centered(ka: &Matrix, kb: &Matrix) -> Result<f64> {
    if ka.shape() != kb.shape() || ka.rows() != ka.cols() {
        return Err(Error::Shape(format!(
            "HSIC needs equal square kernels, got {:?} and {:?}",
            ka.shape(),
            kb.shape()
        )));
    }
    let n = ka.rows();
    if n < 2 {
        return Err(Error::Shape("HSIC needs n >= 2".into()));
    }
    // Tr(AB) = Σᵢⱼ Aᵢⱼ Bⱼᵢ
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr += ka.get(i, j) * kb.get(j, i);
        }
    }
    Ok(tr / ((n - 1) * (n - 1)) as f64)
}

/// Teacher and student kernels over the same `n` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GramPair {
    pub k_teacher: Matrix,
    pub k_student: Matrix,
    pub centered: bool,
}

impl GramPair {
    /// Uncentered Gram matrices of both feature sets.
    pub fn from_features(vt: &TokenFeatures, vs: &TokenFeatures) -> Result<Self> {
        if vt.token_count() != vs.token_count() {
            return Err(Error::Shape(format!(
                "teacher has {} tokens, student {}",
                vt.token_count(),
                vs.token_count()
            )));
        }
        Ok(Self {
            k_teacher: gram(vt.matrix())?,
            k_student: gram(vs.matrix())?,
            centered: false,
        })
    }

    /// The same pair with both kernels double-centered.
    pub fn centered(&self) -> Result<Self> {
        if self.centered {
            return Ok(self.clone());
        }
        Ok(Self {
            k_teacher: center(&self.k_teacher)?,
            k_student: center(&self.k_student)?,
            centered: true,
        })
    }
}

/// `HSIC(K_T, K_S) / √(HSIC(K_T, K_T) · HSIC(K_S, K_S))`.
pub fn cka(pair: &GramPair) -> Result<f64> {
    let c = pair.centered()?;
    let cross = hsic_centered(&c.k_teacher, &c.k_student)?;
    let tt = hsic_centered(&c.k_teacher, &c.k_teacher)?;
    let ss = hsic_centered(&c.k_student, &c.k_student)?;
    if tt <= 0.0 || ss <= 0.0 {
        return Err(Error::Degenerate(format!(
            "self-HSIC is zero (teacher {tt:e}, student {ss:e}); representation is constant across tokens"
        )));
    }
    Ok(cross / (tt * ss).sqrt())
}

/// `1 − CKA` between teacher and student token Grams.
pub fn rcka_loss(vt: &TokenFeatures, vs: &TokenFeatures) -> Result<f64> {
    Ok(1.0 - cka(&GramPair::from_features(vt, vs)?)?)
}

/// Teacher side of the alignment, precomputed once since the teacher is
/// frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherKernel {
    centered: Matrix,
    self_hsic: f64,
}

impl TeacherKernel {
    pub fn new(vt: &TokenFeatures) -> Result<Self> {
        let centered = center(&gram(vt.matrix())?)?;
        let self_hsic = hsic_centered(&centered, &centered)?;
        if self_hsic <= 0.0 {
            return Err(Error::Degenerate(
                "teacher representation is constant across tokens".into(),
            ));
        }
        Ok(Self {
            centered,
            self_hsic,
        })
    }

    pub fn token_count(&self) -> usize {
        self.centered.rows()
    }

    pub fn centered(&self) -> &Matrix {
        &self.centered
    }
}

/// Records `1 − CKA(teacher, student)` on the tape, differentiable in the
/// student's `n × d_S` features.
pub fn rcka_loss_on_tape(tape: &mut Tape, teacher: &TeacherKernel, student: Var) -> Result<Var> {
    let n = tape.value(student).rows();
    if n != teacher.token_count() {
        return Err(Error::Shape(format!(
            "teacher has {} tokens, student {n}",
            teacher.token_count()
        )));
    }
    let norm = 1.0 / ((n - 1) * (n - 1)) as f64;
    let s_bar = tape.row_normalize(student)?;
    let k = tape.matmul_transposed(s_bar, s_bar)?;
    let kc = tape.center(k)?;
    let t = tape.constant(teacher.centered.clone());
    let cross_prod = tape.mul(kc, t)?;
    let cross_sum = tape.sum(cross_prod);
    let cross = tape.scale(cross_sum, norm);
    let self_prod = tape.mul(kc, kc)?;
    let self_sum = tape.sum(self_prod);
    let self_s = tape.scale(self_sum, norm * teacher.self_hsic);
    if tape.scalar(self_s) <= 0.0 {
        return Err(Error::Degenerate(
            "student representation is constant across tokens".into(),
        ));
    }
    let denom = tape.sqrt(self_s)?;
    let cka = tape.div(cross, denom)?;
    let one = tape.constant(Matrix::scalar(1.0));
    tape.sub(one, cka)
}
