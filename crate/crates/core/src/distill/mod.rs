//! Confidence-gated decoupled knowledge distillation.
//!
//! The per-token loss splits the teacher/student KL into a binary
//! target-vs-rest part ([`tckd`]) and a renormalized non-target part
//! ([`nckd`]). Tokens are then averaged with weights `g = exp(−H/ln|V|)`
//! taken from the teacher's entropy, so uncertain teacher predictions pull
//! less on the student ([`gdkd`]).
//!
//! [`theorem1_decompose`] re-expresses the gated loss as the plain mean plus
//! `N · Cov(w, L)`, computed two independent ways, and [`proposition1_check`]
//! evaluates the mutual-information bound on a fully enumerable toy model.

mod info;
mod tape_op;

use crate::error::{Error, Result};

pub use info::{mutual_information, proposition1_check, EnumerableModel, Proposition1};
pub use tape_op::{dkd_rows, DkdRows};

/// Non-target mass below which NCKD is undefined and the token is skipped.
pub const NON_TARGET_FLOOR: f64 = 1e-12;

const SUM_TOL: f64 = 1e-9;

/// A probability vector over the vocabulary together with the index of the
/// ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    target: usize,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>, target: usize) -> Result<Self> {
        validate_probs(&probs)?;
        if target >= probs.len() {
            return Err(Error::Domain(format!(
                "target index {target} out of range for |V| = {}",
                probs.len()
            )));
        }
        Ok(Self { probs, target })
    }

    /// Softmax of `logits / temperature`.
    pub fn from_logits(logits: &[f64], temperature: f64, target: usize) -> Result<Self> {
        Self::new(crate::numkit::softmax(logits, temperature)?, target)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Probability of the target class.
    pub fn target_prob(&self) -> f64 {
        self.probs[self.target]
    }

    /// Mass on all other classes, summed directly rather than as `1 − pₜ`.
    pub fn non_target_mass(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != self.target)
            .map(|(_, p)| p)
            .sum()
    }
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::Domain(format!(
            "a distribution needs |V| >= 2, got {}",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Domain(format!("invalid probability {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Weights of the DKD combination and the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkdWeights {
    pub alpha: f64,
    pub beta_dkd: f64,
    pub temperature: f64,
}

impl Default for DkdWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_dkd: 4.0,
            temperature: 2.0,
        }
    }
}

impl DkdWeights {
    pub fn new(alpha: f64, beta_dkd: f64, temperature: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) || !(beta_dkd >= 0.0 && beta_dkd.is_finite()) {
            return Err(Error::Config(format!(
                "DKD weights must be non-negative, got alpha={alpha}, beta_dkd={beta_dkd}"
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            alpha,
            beta_dkd,
            temperature,
        })
    }

    /// Non-target knowledge is meant to dominate (`beta_dkd > alpha`). This is
    /// advisory: the returned message is for the caller to surface.
    pub fn warning(&self) -> Option<String> {
        (self.beta_dkd <= self.alpha).then(|| {
            format!(
                "beta_dkd ({}) <= alpha ({}): non-target term is not emphasized",
                self.beta_dkd, self.alpha
            )
        })
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &TokenDistribution) -> f64 {
    entropy_of(p.probs())
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Entropy divided by `ln |V|`, in `[0, 1]`.
pub fn normalized_entropy(p: &TokenDistribution) -> Result<f64> {
    normalized_entropy_of(p.probs())
}

pub(crate) fn normalized_entropy_of(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::Domain("ln|V| is zero for |V| < 2".into()));
    }
    Ok((entropy_of(probs) / (probs.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Confidence weight `exp(−H/ln|V|)`, in `[e⁻¹, 1]`.
pub fn confidence_gate(p: &TokenDistribution) -> Result<f64> {
    Ok((-normalized_entropy(p)?).exp())
}

fn check_pair(pt: &TokenDistribution, ps: &TokenDistribution) -> Result<()> {
    if pt.vocab_size() != ps.vocab_size() {
        return Err(Error::Shape(format!(
            "teacher |V| = {} vs student |V| = {}",
            pt.vocab_size(),
            ps.vocab_size()
        )));
    }
    if pt.target() != ps.target() {
        return Err(Error::Domain(format!(
            "teacher target {} vs student target {}",
            pt.target(),
            ps.target()
        )));
    }
    Ok(())
}

/// One `p ln(p/q)` term with the `0 ln(0/q) = 0` convention.
fn kl_term(p: f64, q: f64, what: &str) -> Result<f64> {
    if p == 0.0 {
        return Ok(0.0);
    }
    if q == 0.0 {
        return Err(Error::InfiniteKl(format!(
            "{what}: teacher mass {p} where student has none"
        )));
    }
    Ok(p * (p / q).ln())
}

/// KL between the binary target/non-target splits of teacher and student.
pub fn tckd(pt: &TokenDistribution, ps: &TokenDistribution) -> Result<f64> {
    check_pair(pt, ps)?;
    let t = kl_term(pt.target_prob(), ps.target_prob(), "TCKD target")?
        + kl_term(pt.non_target_mass(), ps.non_target_mass(), "TCKD non-target")?;
    Ok(t.max(0.0))
}

/// KL between the teacher's and student's distributions over non-target
/// classes, each renormalized to sum to one.
pub fn nckd(pt: &TokenDistribution, ps: &TokenDistribution) -> Result<f64> {
    check_pair(pt, ps)?;
    let (mt, ms) = (pt.non_target_mass(), ps.non_target_mass());
    if mt < NON_TARGET_FLOOR || ms < NON_TARGET_FLOOR {
        return Err(Error::Domain(format!(
            "non-target mass too small for NCKD (teacher {mt:e}, student {ms:e})"
        )));
    }
    let mut total = 0.0;
    for (v, (&a, &b)) in pt.probs().iter().zip(ps.probs()).enumerate() {
        if v == pt.target() {
            continue;
        }
        total += kl_term(a / mt, b / ms, "NCKD")?;
    }
    Ok(total.max(0.0))
}

/// Both DKD components; `nckd` is `None` when the token has to be skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkdParts {
    pub tckd: f64,
    pub nckd: Option<f64>,
}

impl DkdParts {
    pub fn combine(&self, w: &DkdWeights) -> f64 {
        w.alpha * self.tckd + w.beta_dkd * self.nckd.unwrap_or(0.0)
    }
}

/// Computes TCKD and, when the non-target masses allow it, NCKD.
pub fn dkd_parts(pt: &TokenDistribution, ps: &TokenDistribution) -> Result<DkdParts> {
    let t = tckd(pt, ps)?;
    let skip = pt.non_target_mass() < NON_TARGET_FLOOR || ps.non_target_mass() < NON_TARGET_FLOOR;
    let n = if skip { None } else { Some(nckd(pt, ps)?) };
    Ok(DkdParts { tckd: t, nckd: n })
}

/// `α·TCKD + β_dkd·NCKD` for one token.
pub fn dkd_per_token(pt: &TokenDistribution, ps: &TokenDistribution, w: &DkdWeights) -> Result<f64> {
    Ok(w.alpha * tckd(pt, ps)? + w.beta_dkd * nckd(pt, ps)?)
}

/// Per-token quantities that enter the gated average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    pub dkd_loss: f64,
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub gate: f64,
    pub weight: f64,
}

/// The gated batch with every intermediate exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedBatch {
    records: Vec<TokenRecord>,
    nckd_skipped: usize,
}

impl GatedBatch {
    /// Builds the batch from per-token losses and teacher entropies (nats).
    pub fn from_parts(losses: &[f64], entropies: &[f64], vocab_size: usize) -> Result<Self> {
        if losses.len() != entropies.len() {
            return Err(Error::Shape(format!(
                "{} losses vs {} entropies",
                losses.len(),
                entropies.len()
            )));
        }
        if vocab_size < 2 {
            return Err(Error::Domain("ln|V| is zero for |V| < 2".into()));
        }
        let log_v = (vocab_size as f64).ln();
        let normalized: Vec<f64> = entropies.iter().map(|h| (h / log_v).clamp(0.0, 1.0)).collect();
        let mut batch = Self::from_normalized(losses, &normalized)?;
        for (r, &h) in batch.records.iter_mut().zip(entropies) {
            r.entropy = h;
        }
        Ok(batch)
    }

    /// Builds the batch from per-token losses and normalized entropies in
    /// `[0, 1]`. `entropy` is left equal to the normalized value.
    pub fn from_normalized(losses: &[f64], normalized_entropies: &[f64]) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::Domain("gated loss needs at least one valid token".into()));
        }
        if losses.len() != normalized_entropies.len() {
            return Err(Error::Shape(format!(
                "{} losses vs {} entropies",
                losses.len(),
                normalized_entropies.len()
            )));
        }
        if let Some(h) = normalized_entropies
            .iter()
            .find(|h| !(0.0..=1.0).contains(*h))
        {
            return Err(Error::Domain(format!("normalized entropy {h} outside [0, 1]")));
        }
        if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("non-finite token loss {l}")));
        }
        let gates: Vec<f64> = normalized_entropies.iter().map(|h| (-h).exp()).collect();
        let total: f64 = gates.iter().sum();
        let records = losses
            .iter()
            .zip(normalized_entropies)
            .zip(&gates)
            .map(|((&l, &h), &g)| TokenRecord {
                dkd_loss: l,
                entropy: h,
                normalized_entropy: h,
                gate: g,
                weight: g / total,
            })
            .collect();
        Ok(Self {
            records,
            nckd_skipped: 0,
        })
    }

    /// Builds the batch directly from gate values in `(0, 1]`.
    ///
    /// Gates below `e⁻¹` cannot come from a normalized entropy; the recorded
    /// `normalized_entropy` is then `−ln g` and exceeds one.
    pub fn from_gates(losses: &[f64], gates: &[f64]) -> Result<Self> {
        if let Some(g) = gates.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(Error::Domain(format!("gate {g} outside (0, 1]")));
        }
        if losses.is_empty() {
            return Err(Error::Domain("gated loss needs at least one valid token".into()));
        }
        if losses.len() != gates.len() {
            return Err(Error::Shape(format!("{} losses vs {} gates", losses.len(), gates.len())));
        }
        let total: f64 = gates.iter().sum();
        let records = losses
            .iter()
            .zip(gates)
            .map(|(&l, &g)| TokenRecord {
                dkd_loss: l,
                entropy: -g.ln(),
                normalized_entropy: -g.ln(),
                gate: g,
                weight: g / total,
            })
            .collect();
        Ok(Self {
            records,
            nckd_skipped: 0,
        })
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn token_count(&self) -> usize {
        self.records.len()
    }

    /// Tokens whose NCKD term was dropped for lack of non-target mass.
    pub fn nckd_skipped(&self) -> usize {
        self.nckd_skipped
    }

    /// `Σ gᵢLᵢ / Σ gᵢ`.
    pub fn gated_loss(&self) -> f64 {
        let num: f64 = self.records.iter().map(|r| r.gate * r.dkd_loss).sum();
        let den: f64 = self.records.iter().map(|r| r.gate).sum();
        num / den
    }

    /// Unweighted mean of the per-token losses.
    pub fn mean_loss(&self) -> f64 {
        self.records.iter().map(|r| r.dkd_loss).sum::<f64>() / self.records.len() as f64
    }
}

/// Gated DKD over a batch of `(teacher, student)` pairs.
///
/// `valid` masks tokens out of every sum; `None` means all tokens count.
pub fn gdkd(
    pairs: &[(TokenDistribution, TokenDistribution)],
    w: &DkdWeights,
    valid: Option<&[bool]>,
) -> Result<(f64, GatedBatch)> {
    if let Some(mask) = valid {
        if mask.len() != pairs.len() {
            return Err(Error::Shape(format!(
                "mask of {} for {} tokens",
                mask.len(),
                pairs.len()
            )));
        }
    }
    let mut losses = Vec::with_capacity(pairs.len());
    let mut entropies = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    let mut vocab = 0;
    for (i, (pt, ps)) in pairs.iter().enumerate() {
        if valid.is_some_and(|m| !m[i]) {
            continue;
        }
        let parts = dkd_parts(pt, ps)?;
        if parts.nckd.is_none() {
            skipped += 1;
        }
        losses.push(parts.combine(w));
        entropies.push(entropy(pt));
        vocab = pt.vocab_size();
    }
    if losses.is_empty() {
        return Err(Error::Domain("gated loss needs at least one valid token".into()));
    }
    let mut batch = GatedBatch::from_parts(&losses, &entropies, vocab)?;
    batch.nckd_skipped = skipped;
    Ok((batch.gated_loss(), batch))
}

/// The mean-plus-covariance rewriting of a gated loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1 {
    pub gated_loss: f64,
    pub mean: f64,
    /// `(1/N) Σ (wᵢ − 1/N)(Lᵢ − mean)`.
    pub covariance: f64,
    /// `(1/2N²) ΣᵢΣⱼ (wᵢ − wⱼ)(Lᵢ − Lⱼ)`.
    pub covariance_pairwise: f64,
    /// `mean + N · covariance`.
    pub reconstructed: f64,
}

impl Theorem1 {
    /// Whether both identities hold to `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        (self.reconstructed - self.gated_loss).abs() < tol
            && (self.covariance - self.covariance_pairwise).abs() < tol
    }
}

/// Decomposes a gated batch into its unweighted mean and the weight/loss
/// covariance (population convention).
pub fn theorem1_decompose(batch: &GatedBatch) -> Theorem1 {
    let n = batch.token_count() as f64;
    let recs = batch.records();
    let mean = batch.mean_loss();
    let w_bar = 1.0 / n;
    let covariance = recs
        .iter()
        .map(|r| (r.weight - w_bar) * (r.dkd_loss - mean))
        .sum::<f64>()
        / n;
    let mut pair_sum = 0.0;
    for a in recs {
        for b in recs {
            pair_sum += (a.weight - b.weight) * (a.dkd_loss - b.dkd_loss);
        }
    }
    let covariance_pairwise = pair_sum / (2.0 * n * n);
    Theorem1 {
        gated_loss: batch.gated_loss(),
        mean,
        covariance,
        covariance_pairwise,
        reconstructed: mean + n * covariance,
    }
}

/// Error-probability floor `max(0, (H − 1)/ln k)`, entropy in nats.
pub fn fano_error_lower_bound(conditional_entropy: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Domain(format!("Fano bound needs k >= 2, got {k}")));
    }
    let log_k = (k as f64).ln();
    if !(conditional_entropy >= 0.0 && conditional_entropy <= log_k + 1e-12) {
        return Err(Error::Domain(format!(
            "conditional entropy {conditional_entropy} outside [0, ln {k}]"
        )));
    }
    Ok(((conditional_entropy - 1.0) / log_k).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64], y: usize) -> TokenDistribution {
        TokenDistribution::new(p.to_vec(), y).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn entropy_examples() {
        close(entropy(&dist(&[0.0, 1.0, 0.0], 0)), 0.0, 1e-15);
        close(entropy(&dist(&[0.25; 4], 0)), 4f64.ln(), 1e-15);
        close(entropy(&dist(&[0.5, 0.25, 0.25], 0)), 1.5 * 2f64.ln(), 1e-15);
        close(1.5 * 2f64.ln(), 1.039721, 1e-6);
    }

    #[test]
    fn gate_examples() {
        close(confidence_gate(&dist(&[1.0, 0.0], 0)).unwrap(), 1.0, 1e-15);
        close(confidence_gate(&dist(&[0.25; 4], 1)).unwrap(), (-1.0f64).exp(), 1e-15);
        let g = confidence_gate(&dist(&[0.5, 0.25, 0.25, 0.0], 0)).unwrap();
        close(g, (-(1.5 * 2f64.ln()) / 4f64.ln()).exp(), 1e-15);
        close(g, 0.472367, 1e-6);
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(matches!(TokenDistribution::new(vec![1.0], 0), Err(Error::Domain(_))));
        assert!(matches!(TokenDistribution::new(vec![0.5, 0.6], 0), Err(Error::Domain(_))));
        assert!(matches!(TokenDistribution::new(vec![-0.1, 1.1], 0), Err(Error::Domain(_))));
        assert!(matches!(TokenDistribution::new(vec![0.5, 0.5], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn tckd_examples() {
        let a = dist(&[0.8, 0.1, 0.1], 0);
        let b = dist(&[0.5, 0.3, 0.2], 0);
        close(tckd(&a, &a).unwrap(), 0.0, 1e-15);
        let expected = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        close(tckd(&a, &b).unwrap(), expected, 1e-12);
        close(expected, 0.192745, 1e-6);
        let rev = tckd(&b, &a).unwrap();
        close(rev, 0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln(), 1e-12);
        close(rev, 0.223144, 1e-6);
        assert!((rev - expected).abs() > 0.01);
    }

    #[test]
    fn tckd_infinite_is_reported() {
        let t = dist(&[0.5, 0.5], 0);
        let s = dist(&[1.0, 0.0], 0);
        assert!(matches!(tckd(&t, &s), Err(Error::InfiniteKl(_))));
    }

    #[test]
    fn nckd_examples() {
        // same non-target shape, different target mass
        let a = dist(&[0.6, 0.3, 0.1], 0);
        let b = dist(&[0.2, 0.6, 0.2], 0);
        close(nckd(&a, &b).unwrap(), 0.0, 1e-15);
        let t = dist(&[0.5, 0.4, 0.1], 0);
        let s = dist(&[0.5, 0.25, 0.25], 0);
        close(nckd(&t, &s).unwrap(), 0.192745, 1e-6);
        close(nckd(&t, &t).unwrap(), 0.0, 1e-15);
    }

    #[test]
    fn nckd_undefined_for_one_hot() {
        let t = dist(&[1.0, 0.0, 0.0], 0);
        let s = dist(&[0.5, 0.25, 0.25], 0);
        assert!(matches!(nckd(&t, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn mismatched_pairs() {
        let a = dist(&[0.5, 0.5], 0);
        let b = dist(&[0.5, 0.25, 0.25], 0);
        assert!(matches!(tckd(&a, &b), Err(Error::Shape(_))));
        let c = dist(&[0.5, 0.5], 1);
        assert!(matches!(nckd(&a, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn dkd_combination() {
        let w = DkdWeights::default();
        let a = dist(&[0.5, 0.3, 0.2], 1);
        close(dkd_per_token(&a, &a, &w).unwrap(), 0.0, 1e-15);
        let parts = DkdParts { tckd: 0.1, nckd: Some(0.05) };
        close(parts.combine(&w), 0.3, 1e-15);
        // TCKD-only and NCKD-only instances checked against the component values
        let t = dist(&[0.8, 0.1, 0.1], 0);
        let s = dist(&[0.5, 0.25, 0.25], 0);
        close(dkd_per_token(&t, &s, &w).unwrap(), 0.192745, 1e-6);
        let t = dist(&[0.5, 0.4, 0.1], 0);
        let s = dist(&[0.5, 0.25, 0.25], 0);
        close(dkd_per_token(&t, &s, &w).unwrap(), 4.0 * 0.192745, 4e-6);
    }

    #[test]
    fn weights_warn_when_not_emphasizing_non_target() {
        assert!(DkdWeights::default().warning().is_none());
        assert!(DkdWeights::new(2.0, 1.0, 1.0).unwrap().warning().is_some());
        assert!(DkdWeights::new(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn gdkd_uniform_gates_is_mean() {
        let w = DkdWeights::default();
        let t = dist(&[0.4, 0.3, 0.3], 0);
        let pairs = vec![
            (t.clone(), dist(&[0.2, 0.4, 0.4], 0)),
            (t.clone(), dist(&[0.3, 0.5, 0.2], 0)),
            (t.clone(), dist(&[0.6, 0.1, 0.3], 0)),
        ];
        let (loss, batch) = gdkd(&pairs, &w, None).unwrap();
        close(loss, batch.mean_loss(), 1e-15);
    }

    #[test]
    fn gdkd_single_token() {
        let w = DkdWeights::default();
        let pair = (dist(&[0.7, 0.2, 0.1], 0), dist(&[0.3, 0.3, 0.4], 0));
        let (loss, _) = gdkd(std::slice::from_ref(&pair), &w, None).unwrap();
        close(loss, dkd_per_token(&pair.0, &pair.1, &w).unwrap(), 1e-15);
    }

    #[test]
    fn gdkd_hand_arithmetic() {
        let batch = GatedBatch::from_gates(&[0.1, 0.2, 0.4], &[1.0, 0.5, 0.25]).unwrap();
        close(batch.gated_loss(), 0.3 / 1.75, 1e-15);
        close(batch.gated_loss(), 0.171429, 1e-6);
        let th = theorem1_decompose(&batch);
        close(th.reconstructed, 0.171429, 1e-6);
        close(th.covariance, (0.3 / 1.75 - 0.7 / 3.0) / 3.0, 1e-15);
        close(th.covariance, -0.020635, 1e-6);
        assert!(th.holds(1e-10));
    }

    #[test]
    fn constant_losses_have_zero_covariance() {
        let batch = GatedBatch::from_normalized(&[0.3; 5], &[0.1, 0.5, 0.9, 0.0, 1.0]).unwrap();
        let th = theorem1_decompose(&batch);
        close(th.covariance, 0.0, 1e-15);
        close(th.reconstructed, th.mean, 1e-15);
    }

    #[test]
    fn gdkd_empty_and_masked() {
        let w = DkdWeights::default();
        assert!(matches!(gdkd(&[], &w, None), Err(Error::Domain(_))));
        let pair = (dist(&[0.7, 0.2, 0.1], 0), dist(&[0.3, 0.3, 0.4], 0));
        let other = (dist(&[0.3, 0.3, 0.4], 0), dist(&[0.7, 0.2, 0.1], 0));
        assert!(matches!(
            gdkd(std::slice::from_ref(&pair), &w, Some(&[false])),
            Err(Error::Domain(_))
        ));
        let (masked, batch) = gdkd(&[pair.clone(), other], &w, Some(&[true, false])).unwrap();
        assert_eq!(batch.token_count(), 1);
        close(masked, dkd_per_token(&pair.0, &pair.1, &w).unwrap(), 1e-15);
    }

    #[test]
    fn one_hot_teacher_skips_nckd_and_keeps_tckd() {
        let w = DkdWeights::default();
        let pairs = vec![
            (dist(&[1.0, 0.0, 0.0], 0), dist(&[0.5, 0.25, 0.25], 0)),
            (dist(&[0.6, 0.2, 0.2], 0), dist(&[0.5, 0.25, 0.25], 0)),
        ];
        let (_, batch) = gdkd(&pairs, &w, None).unwrap();
        assert_eq!(batch.nckd_skipped(), 1);
        close(batch.records()[0].dkd_loss, 2f64.ln(), 1e-12);
    }

    #[test]
    fn gate_ordering_opposes_entropy() {
        let batch = GatedBatch::from_normalized(&[1.0, 1.0, 1.0], &[0.2, 0.7, 0.4]).unwrap();
        let r = batch.records();
        assert!(r[1].gate < r[2].gate && r[2].gate < r[0].gate);
        let total: f64 = r.iter().map(|x| x.weight).sum();
        close(total, 1.0, 1e-12);
    }

    #[test]
    fn fano_examples() {
        close(fano_error_lower_bound(0.0, 10).unwrap(), 0.0, 0.0);
        let k = 10usize;
        let lk = (k as f64).ln();
        close(fano_error_lower_bound(lk, k).unwrap(), (lk - 1.0) / lk, 1e-15);
        for k in [2, 3, 50] {
            close(fano_error_lower_bound(1.0f64.min((k as f64).ln()), k).unwrap(), 0.0, 0.0);
        }
        assert!(fano_error_lower_bound(5.0, 4).is_err());
        assert!(fano_error_lower_bound(-0.1, 4).is_err());
        assert!(fano_error_lower_bound(0.1, 1).is_err());
    }
}
