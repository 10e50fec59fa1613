//! Teacher and student networks.
//!
//! Visual tokens go through a stack of `tanh` layers. The last layer's
//! tokens are pooled with attention weights `softmax(κ · cos(h_0, h_j))`,
//! so the model reads out the cluster that contains token 0. Each text
//! position combines the pooled vector with its context,
//! `z_p = tanh(W_p·pooled + W_u·u_p + b)`, and a linear head produces the
//! vocabulary logits.

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::RunConfig;
use super::data::{Sample, Task};
use crate::error::Result;
use crate::numkit::{row_normalized, softmax, Matrix, Tape, Var};
use crate::quant::{fake_quantize_on_tape, init_scales, QuantConfig, QuantizedTensor};
use crate::rcka::gram;

/// Input scale of the constructed teacher; small enough that every `tanh`
/// stays close to linear.
const TEACHER_GAIN: f64 = 0.02;
const TEACHER_SHARPNESS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Per-group log-scale of a quantized weight.
    LogScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slots {
    w: usize,
    b: Option<usize>,
    theta: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    params: Vec<Matrix>,
    kinds: Vec<ParamKind>,
    visual: Vec<Slots>,
    pooled: Slots,
    context: Slots,
    head: Slots,
    quant: Option<QuantConfig>,
    attention_sharpness: f64,
    hidden_tap: usize,
}

/// Output of one forward pass over a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `text_positions × vocab`.
    pub logits: Matrix,
    /// Visual tokens at the RCKA layer.
    pub tap: Matrix,
}

/// Parameters and effective (possibly fake-quantized) weights on a tape.
pub struct Bound {
    pub params: Vec<Var>,
    weights: Vec<Var>,
}

struct Builder {
    params: Vec<Matrix>,
    kinds: Vec<ParamKind>,
    quant: Option<QuantConfig>,
}

impl Builder {
    fn linear(&mut self, w: Matrix, bias: bool) -> Slots {
        let rows = w.rows();
        let theta = self.quant.map(|q| {
            let t = init_scales(w.data(), &q);
            self.push(Matrix::column_vector(&t).expect("finite scales"), ParamKind::LogScale)
        });
        let w = self.push(w, ParamKind::Weight);
        let b = bias.then(|| self.push(Matrix::zeros(1, rows), ParamKind::Bias));
        Slots { w, b, theta }
    }

    fn push(&mut self, m: Matrix, kind: ParamKind) -> usize {
        self.params.push(m);
        self.kinds.push(kind);
        self.params.len() - 1
    }
}

fn init_weight(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let std = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("finite init")
}

fn add_bias(m: Matrix, b: Option<&Matrix>) -> Matrix {
    match b {
        None => m,
        Some(b) => {
            let c = m.cols();
            let mut data = m.into_data();
            for row in data.chunks_mut(c) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                }
            }
            Matrix::new(data.len() / c, c, data).expect("finite")
        }
    }
}

impl ToyModel {
    /// Randomly initialized student; every linear weight is quantized when
    /// `cfg.quant` is set.
    pub fn student(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        let h = cfg.student_hidden;
        let mut b = Builder {
            params: Vec::new(),
            kinds: Vec::new(),
            quant: cfg.quant,
        };
        let mut visual = Vec::with_capacity(cfg.student_layers);
        let mut fan_in = cfg.input_dim();
        for _ in 0..cfg.student_layers {
            visual.push(b.linear(init_weight(rng, h, fan_in), true));
            fan_in = h;
        }
        let pooled = b.linear(init_weight(rng, h, h), true);
        let context = b.linear(init_weight(rng, h, cfg.context_dim), false);
        let head = b.linear(init_weight(rng, cfg.vocab_size, h), true);
        Ok(Self {
            params: b.params,
            kinds: b.kinds,
            visual,
            pooled,
            context,
            head,
            quant: cfg.quant,
            attention_sharpness: cfg.attention_sharpness,
            hidden_tap: cfg.tap_index(cfg.student_layers)?,
        })
    }

    /// Full-precision teacher built from the task's own label map. Its first
    /// layer keeps only the semantic coordinates, so its hidden tokens carry
    /// the clean cluster structure, and its logits track the true ones.
    pub fn teacher(cfg: &RunConfig, task: &Task) -> Result<Self> {
        let h = cfg.teacher_hidden;
        let (sem, v) = (cfg.semantic_dim, cfg.vocab_size);
        let mut b = Builder {
            params: Vec::new(),
            kinds: Vec::new(),
            quant: None,
        };
        let mut first = Matrix::zeros(h, cfg.input_dim());
        for i in 0..sem {
            first.data_mut()[i * cfg.input_dim() + i] = TEACHER_GAIN;
        }
        let mut visual = vec![b.linear(first, true)];
        for _ in 1..cfg.teacher_layers {
            visual.push(b.linear(Matrix::identity(h), true));
        }
        let mut wp = Matrix::zeros(h, h);
        let mut wu = Matrix::zeros(h, cfg.context_dim);
        for r in 0..v {
            for c in 0..sem {
                wp.data_mut()[r * h + c] = task.cluster_map.get(r, c);
            }
            for c in 0..cfg.context_dim {
                wu.data_mut()[r * cfg.context_dim + c] = TEACHER_GAIN * task.context_map.get(r, c);
            }
        }
        let pooled = b.linear(wp, true);
        let context = b.linear(wu, false);
        let mut head = Matrix::zeros(v, h);
        for r in 0..v {
            head.data_mut()[r * h + r] = task.label_sharpness / TEACHER_GAIN;
        }
        let head = b.linear(head, true);
        Ok(Self {
            params: b.params,
            kinds: b.kinds,
            visual,
            pooled,
            context,
            head,
            quant: None,
            attention_sharpness: TEACHER_SHARPNESS,
            hidden_tap: cfg.tap_index(cfg.teacher_layers)?,
        })
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn quant(&self) -> Option<QuantConfig> {
        self.quant
    }

    pub fn hidden_tap(&self) -> usize {
        self.hidden_tap
    }

    pub fn layer_count(&self) -> usize {
        self.visual.len()
    }

    fn linears(&self) -> impl Iterator<Item = &Slots> {
        self.visual.iter().chain([&self.pooled, &self.context, &self.head])
    }

    /// Weights as the forward pass sees them, in layer order.
    pub fn effective_weights(&self) -> Vec<Matrix> {
        self.linears()
            .map(|s| match (s.theta, self.quant) {
                (Some(t), Some(q)) => QuantizedTensor::from_parts(&self.params[s.w], self.params[t].data().to_vec(), &q)
                    .expect("layout fixed at construction")
                    .dequantized(&q),
                _ => self.params[s.w].clone(),
            })
            .collect()
    }

    /// Value-only forward pass with precomputed [`effective_weights`].
    ///
    /// [`effective_weights`]: Self::effective_weights
    pub fn forward_with(&self, weights: &[Matrix], sample: &Sample) -> Result<Forward> {
        let bias = |s: &Slots| s.b.map(|i| &self.params[i]);
        let mut h = sample.visual.clone();
        let mut tap = None;
        for (l, s) in self.visual.iter().enumerate() {
            h = add_bias(h.matmul_transposed(&weights[l]), bias(s)).map(f64::tanh);
            if l == self.hidden_tap {
                tap = Some(h.clone());
            }
        }
        let normed = row_normalized(&h)?;
        let sims: Vec<f64> = normed
            .matmul_transposed(&normed.select_rows(&[0])?)
            .data()
            .iter()
            .map(|c| c * self.attention_sharpness)
            .collect();
        let attn = Matrix::row_vector(&softmax(&sims, 1.0)?)?;
        let pooled = attn.matmul(&h)?;
        let nv = self.visual.len();
        let pp = add_bias(pooled.matmul_transposed(&weights[nv]), bias(&self.pooled));
        let ctx = sample.contexts.matmul_transposed(&weights[nv + 1]);
        let z = add_bias(ctx, Some(&pp)).map(f64::tanh);
        let logits = add_bias(z.matmul_transposed(&weights[nv + 2]), bias(&self.head));
        Ok(Forward {
            logits,
            tap: tap.expect("tap index validated"),
        })
    }

    pub fn forward(&self, sample: &Sample) -> Result<Forward> {
        self.forward_with(&self.effective_weights(), sample)
    }

    /// Puts the parameters on `tape` (tracked when `trainable`) and records
    /// the effective weights once for reuse across a batch.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let mut weights = Vec::new();
        for s in self.linears() {
            let w = match (s.theta, self.quant) {
                (Some(t), Some(q)) => fake_quantize_on_tape(tape, params[s.w], params[t], &q)?,
                _ => params[s.w],
            };
            weights.push(w);
        }
        Ok(Bound { params, weights })
    }

    /// Tape forward pass; returns `(logits, tap)`.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &Bound, sample: &Sample) -> Result<(Var, Var)> {
        let mut h = tape.constant(sample.visual.clone());
        let mut tap = None;
        for (l, s) in self.visual.iter().enumerate() {
            let lin = tape.matmul_transposed(h, bound.weights[l])?;
            let pre = match s.b {
                Some(b) => tape.add_row(lin, bound.params[b])?,
                None => lin,
            };
            h = tape.tanh(pre);
            if l == self.hidden_tap {
                tap = Some(h);
            }
        }
        let normed = tape.row_normalize(h)?;
        let first = tape.select_rows(normed, vec![0])?;
        let sims = tape.matmul_transposed(first, normed)?;
        let sims = tape.scale(sims, self.attention_sharpness);
        let log_attn = tape.log_softmax_rows(sims, 1.0)?;
        let attn = tape.exp(log_attn);
        let pooled = tape.matmul(attn, h)?;
        let nv = self.visual.len();
        let mut pp = tape.matmul_transposed(pooled, bound.weights[nv])?;
        if let Some(b) = self.pooled.b {
            pp = tape.add_row(pp, bound.params[b])?;
        }
        let u = tape.constant(sample.contexts.clone());
        let ctx = tape.matmul_transposed(u, bound.weights[nv + 1])?;
        let pre = tape.add_row(ctx, pp)?;
        let z = tape.tanh(pre);
        let mut logits = tape.matmul_transposed(z, bound.weights[nv + 2])?;
        if let Some(b) = self.head.b {
            logits = tape.add_row(logits, bound.params[b])?;
        }
        Ok((logits, tap.expect("tap index validated")))
    }
}

/// Mean cosine similarity of same-cluster token pairs minus that of
/// different-cluster pairs at the model's RCKA layer, averaged over samples.
pub fn cluster_similarity_gap(model: &ToyModel, samples: &[Sample]) -> Result<f64> {
    let weights = model.effective_weights();
    let mut total = 0.0;
    for s in samples {
        let k = gram(&model.forward_with(&weights, s)?.tap)?;
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..k.rows() {
            for j in 0..k.cols() {
                if i == j {
                    continue;
                }
                if s.clusters[i] == s.clusters[j] {
                    within += k.get(i, j);
                    nw += 1;
                } else {
                    between += k.get(i, j);
                    nb += 1;
                }
            }
        }
        total += within / nw as f64 - between / nb as f64;
    }
    Ok(total / samples.len() as f64)
}
