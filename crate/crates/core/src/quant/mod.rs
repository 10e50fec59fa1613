//! Group-wise learned-step-size quantization.
//!
//! A weight matrix is flattened row-major and cut into contiguous groups of
//! `group_size` values. Each group owns a log-space scale `θ` (`s = exp θ`),
//! initialized from the 99th percentile of the group's magnitudes. The
//! forward pass fake-quantizes (`s · clamp(round(w/s), −q_n, q_p)`) and the
//! backward pass uses a clipped straight-through estimator for the weights
//! and the LSQ rule for the scale.
//!
//! A tensor whose element count is not a multiple of `group_size` gets a
//! zero-padded final group; the padding never reaches the outputs.

mod bench;
mod pack;

use crate::error::{Error, Result};
use crate::numkit::{CustomOp, Matrix, Tape, Var};

pub use bench::{run_quant_bench, BenchRow};
pub use pack::{PackedBlob, HEADER_LEN, MAGIC};

/// Floor on the percentile before dividing by `q_p`, so all-zero groups
/// still get a finite log-scale.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Multiply the scale gradient by `1/√(N·q_p)` as in the original LSQ
    /// recipe. Off by default.
    pub lsq_grad_scale: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: 128,
            lsq_grad_scale: false,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        let cfg = Self {
            bits,
            group_size,
            lsq_grad_scale: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 4 | 8) {
            return Err(Error::Config(format!(
                "unsupported bit width {} (expected 4 or 8)",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }

    /// Magnitude of the most negative code.
    pub fn q_n(&self) -> i32 {
        1 << (self.bits - 1)
    }

    /// Largest positive code.
    pub fn q_p(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

/// Linear-interpolated percentile of an unsorted slice, with rank
/// `q · (len − 1)` on the sorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Initial log-scale of one group: `ln(max(ε, p99(|w|)) / q_p)`.
pub fn init_theta(group: &[f64], cfg: &QuantConfig) -> f64 {
    let mags: Vec<f64> = group.iter().map(|v| v.abs()).collect();
    (percentile(&mags, 0.99).max(SCALE_FLOOR) / f64::from(cfg.q_p())).ln()
}

/// Initial log-scales for flattened weights, one per group. The final group
/// may be short; only its real entries enter the percentile.
pub fn init_scales(weights: &[f64], cfg: &QuantConfig) -> Vec<f64> {
    weights
        .chunks(cfg.group_size)
        .map(|g| init_theta(g, cfg))
        .collect()
}

/// Integer code of one value: `clamp(round_half_even(w/s), −q_n, q_p)`.
pub fn quantize_code(w: f64, scale: f64, cfg: &QuantConfig) -> i32 {
    let q = (w / scale).round_ties_even();
    q.clamp(-f64::from(cfg.q_n()), f64::from(cfg.q_p())) as i32
}

/// Quantize-then-dequantize one group.
pub fn fake_quantize(group: &[f64], theta: f64, cfg: &QuantConfig) -> Vec<f64> {
    let s = theta.exp();
    group
        .iter()
        .map(|&w| s * f64::from(quantize_code(w, s, cfg)))
        .collect()
}

/// Gradients of a group through [`fake_quantize`].
///
/// Weights pass the upstream gradient where `−q_n ≤ w/s ≤ q_p` and get zero
/// outside. The scale gradient follows LSQ: `round(w/s) − w/s` inside the
/// range, `−q_n` / `q_p` below / above it; the `θ` gradient is that times
/// `s`.
pub fn ste_backward(upstream: &[f64], group: &[f64], theta: f64, cfg: &QuantConfig) -> (Vec<f64>, f64) {
    let s = theta.exp();
    let (lo, hi) = (-f64::from(cfg.q_n()), f64::from(cfg.q_p()));
    let mut grad_w = Vec::with_capacity(group.len());
    let mut grad_s = 0.0;
    for (&g, &w) in upstream.iter().zip(group) {
        let v = w / s;
        if v < lo {
            grad_w.push(0.0);
            grad_s += g * lo;
        } else if v > hi {
            grad_w.push(0.0);
            grad_s += g * hi;
        } else {
            grad_w.push(g);
            grad_s += g * (v.round_ties_even() - v);
        }
    }
    if cfg.lsq_grad_scale {
        grad_s /= (group.len() as f64 * f64::from(cfg.q_p())).sqrt();
    }
    (grad_w, grad_s * s)
}

/// Weights of one linear layer with per-group log-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    d_out: usize,
    d_in: usize,
    /// Row-major weights, zero-padded to a whole number of groups.
    values: Vec<f64>,
    thetas: Vec<f64>,
    group_size: usize,
}

impl QuantizedTensor {
    /// Wraps full-precision weights and initializes the scales.
    pub fn from_weights(weights: &Matrix, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate()?;
        let (d_out, d_in) = weights.shape();
        let thetas = init_scales(weights.data(), cfg);
        let mut values = weights.data().to_vec();
        values.resize(thetas.len() * cfg.group_size, 0.0);
        Ok(Self {
            d_out,
            d_in,
            values,
            thetas,
            group_size: cfg.group_size,
        })
    }

    /// Rebuilds from explicit weights and log-scales.
    pub fn from_parts(weights: &Matrix, thetas: Vec<f64>, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = weights.len().div_ceil(cfg.group_size);
        if thetas.len() != groups {
            return Err(Error::Shape(format!(
                "{} weights need {groups} scales, got {}",
                weights.len(),
                thetas.len()
            )));
        }
        let mut values = weights.data().to_vec();
        values.resize(groups * cfg.group_size, 0.0);
        Ok(Self {
            d_out: weights.rows(),
            d_in: weights.cols(),
            values,
            thetas,
            group_size: cfg.group_size,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out, self.d_in)
    }

    pub fn element_count(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn group_count(&self) -> usize {
        self.thetas.len()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn scales(&self) -> Vec<f64> {
        self.thetas.iter().map(|t| t.exp()).collect()
    }

    /// Full-precision weights without padding.
    pub fn weights(&self) -> Matrix {
        Matrix::from_raw(self.d_out, self.d_in, self.values[..self.element_count()].to_vec())
    }

    /// Padded flattened weights.
    pub fn padded_values(&self) -> &[f64] {
        &self.values
    }

    /// Integer codes of the real (unpadded) elements.
    pub fn codes(&self, cfg: &QuantConfig) -> Vec<i32> {
        let n = self.element_count();
        self.values[..n]
            .iter()
            .enumerate()
            .map(|(i, &w)| quantize_code(w, self.thetas[i / self.group_size].exp(), cfg))
            .collect()
    }

    /// Fake-quantized weights as a `d_out × d_in` matrix.
    pub fn dequantized(&self, cfg: &QuantConfig) -> Matrix {
        Matrix::from_raw(self.d_out, self.d_in, dequantize_flat(&self.values, &self.thetas, cfg, self.element_count()))
    }
}

fn dequantize_flat(values: &[f64], thetas: &[f64], cfg: &QuantConfig, keep: usize) -> Vec<f64> {
    let mut out: Vec<f64> = values
        .chunks(cfg.group_size)
        .zip(thetas)
        .flat_map(|(g, &t)| fake_quantize(g, t, cfg))
        .collect();
    out.truncate(keep);
    out
}

/// `x · Ŵᵀ` with `Ŵ` the fake-quantized weights.
pub fn quantized_linear(x: &Matrix, qw: &QuantizedTensor, cfg: &QuantConfig) -> Result<Matrix> {
    if x.cols() != qw.d_in {
        return Err(Error::Shape(format!(
            "input has {} features, weights expect {}",
            x.cols(),
            qw.d_in
        )));
    }
    Ok(x.matmul_transposed(&qw.dequantized(cfg)))
}

/// Tape primitive: fake-quantize a weight matrix given a `G × 1` column of
/// log-scales.
struct FakeQuantOp {
    cfg: QuantConfig,
}

impl CustomOp for FakeQuantOp {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, upstream: &Matrix) -> Vec<Option<Matrix>> {
        let (w, theta) = (inputs[0], inputs[1]);
        let g = self.cfg.group_size;
        let n = w.len();
        let mut grad_w = Vec::with_capacity(n);
        let mut grad_theta = Vec::with_capacity(theta.len());
        for (k, &t) in theta.data().iter().enumerate() {
            let end = ((k + 1) * g).min(n);
            let (gw, gt) = ste_backward(&upstream.data()[k * g..end], &w.data()[k * g..end], t, &self.cfg);
            grad_w.extend(gw);
            grad_theta.push(gt);
        }
        vec![
            Some(Matrix::from_raw(w.rows(), w.cols(), grad_w)),
            Some(Matrix::from_raw(theta.rows(), 1, grad_theta)),
        ]
    }
}

/// Records fake quantization of `weights` (`d_out × d_in`) with log-scales
/// `thetas` (`G × 1`). Gradients flow to both.
pub fn fake_quantize_on_tape(tape: &mut Tape, weights: Var, thetas: Var, cfg: &QuantConfig) -> Result<Var> {
    cfg.validate()?;
    let w = tape.value(weights);
    let t = tape.value(thetas);
    let groups = w.len().div_ceil(cfg.group_size);
    if t.shape() != (groups, 1) {
        return Err(Error::Shape(format!(
            "{} weights need a {groups}x1 scale column, got {:?}",
            w.len(),
            t.shape()
        )));
    }
    let mut padded = w.data().to_vec();
    padded.resize(groups * cfg.group_size, 0.0);
    let value = Matrix::from_raw(w.rows(), w.cols(), dequantize_flat(&padded, t.data(), cfg, w.len()));
    Ok(tape.custom(vec![weights, thetas], value, Box::new(FakeQuantOp { cfg: *cfg })))
}
