//! Run configuration and its `key=value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::controller::ControllerConfig;
use crate::distill::DkdWeights;
use crate::error::{Error, Result};
use crate::quant::QuantConfig;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-entropy on the labels only.
    CeOnly,
    /// Cross-entropy plus tempered KL to the teacher with a fixed weight.
    NaiveKd,
    /// Cross-entropy, gated DKD with adaptive `β`, and RCKA.
    Grace,
    GraceNoGate,
    GraceNoRcka,
    GraceFixedBeta,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CeOnly,
        Variant::NaiveKd,
        Variant::Grace,
        Variant::GraceNoGate,
        Variant::GraceNoRcka,
        Variant::GraceFixedBeta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::CeOnly => "ce_only",
            Self::NaiveKd => "naive_kd",
            Self::Grace => "grace",
            Self::GraceNoGate => "grace_no_gate",
            Self::GraceNoRcka => "grace_no_rcka",
            Self::GraceFixedBeta => "grace_fixed_beta",
        }
    }

    pub fn uses_dkd(&self) -> bool {
        matches!(self, Self::Grace | Self::GraceNoGate | Self::GraceNoRcka | Self::GraceFixedBeta)
    }

    pub fn uses_gate(&self) -> bool {
        self.uses_dkd() && *self != Self::GraceNoGate
    }

    pub fn uses_rcka(&self) -> bool {
        self.uses_dkd() && *self != Self::GraceNoRcka
    }

    pub fn adapts_beta(&self) -> bool {
        self.uses_dkd() && *self != Self::GraceFixedBeta
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which text positions count toward losses and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    All,
    /// Only the second half of the positions.
    AnswerOnly,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "answer_only" => Ok(Self::AnswerOnly),
            _ => Err(Error::Config(format!("unknown mask mode {s:?}"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::AnswerOnly => "answer_only",
        })
    }
}

/// How RCKA is pooled over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RckaMode {
    /// One kernel per sample, losses averaged.
    PerSample,
    /// One kernel over all visual tokens of the batch.
    Concatenated,
}

impl FromStr for RckaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(Self::PerSample),
            "concatenated" => Ok(Self::Concatenated),
            _ => Err(Error::Config(format!("unknown rcka mode {s:?}"))),
        }
    }
}

impl fmt::Display for RckaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerSample => "per_sample",
            Self::Concatenated => "concatenated",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for weights and biases.
    pub lr_w: f64,
    /// Step size for log-scales.
    pub lr_s: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// `None` trains the student in full precision.
    pub quant: Option<QuantConfig>,
    pub dkd: DkdWeights,
    pub controller: ControllerConfig,
    /// Weight of the KL term in the `naive_kd` variant.
    pub naive_kd_weight: f64,
    pub vocab_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub visual_tokens: usize,
    pub clusters: usize,
    pub text_positions: usize,
    pub semantic_dim: usize,
    pub nuisance_dim: usize,
    pub context_dim: usize,
    /// Spread of the within-cluster semantic noise.
    pub cluster_noise: f64,
    /// Spread of the nuisance coordinates.
    pub nuisance_scale: f64,
    /// Multiplier on the true label logits.
    pub label_sharpness: f64,
    pub teacher_hidden: usize,
    pub teacher_layers: usize,
    pub student_hidden: usize,
    pub student_layers: usize,
    /// Visual layer feeding RCKA; negative counts from the end.
    pub hidden_tap: i64,
    pub attention_sharpness: f64,
    /// Fraction of training positions whose teacher distribution is
    /// replaced by a corrupted high-entropy one.
    pub noisy_fraction: f64,
    pub mask_mode: MaskMode,
    pub rcka_mode: RckaMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 4,
            batch_size: 16,
            lr_w: 0.05,
            lr_s: 0.005,
            momentum: 0.9,
            quant: Some(QuantConfig::default()),
            dkd: DkdWeights::default(),
            controller: ControllerConfig::default(),
            naive_kd_weight: 1.0,
            vocab_size: 32,
            train_samples: 600,
            eval_samples: 2000,
            visual_tokens: 64,
            clusters: 4,
            text_positions: 4,
            semantic_dim: 8,
            nuisance_dim: 8,
            context_dim: 8,
            cluster_noise: 0.2,
            nuisance_scale: 1.5,
            label_sharpness: 2.5,
            teacher_hidden: 64,
            teacher_layers: 4,
            student_hidden: 24,
            student_layers: 2,
            hidden_tap: -2,
            attention_sharpness: 10.0,
            noisy_fraction: 0.0,
            mask_mode: MaskMode::All,
            rcka_mode: RckaMode::PerSample,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn input_dim(&self) -> usize {
        self.semantic_dim + self.nuisance_dim
    }

    /// Sets one field from its text form. Keys are the field names; the
    /// nested settings use their own field names (`bits`, `group_size`,
    /// `alpha`, `tau`, ...). `bits` accepts `4`, `8` or `fp`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_w" => self.lr_w = parse(key, v)?,
            "lr_s" => self.lr_s = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "bits" => {
                self.quant = match v {
                    "fp" => None,
                    b => {
                        let group_size = self.quant.map_or(QuantConfig::default().group_size, |q| q.group_size);
                        Some(QuantConfig::new(parse(key, b)?, group_size)?)
                    }
                }
            }
            "group_size" => {
                if let Some(q) = &mut self.quant {
                    q.group_size = parse(key, v)?;
                }
            }
            "lsq_grad_scale" => {
                if let Some(q) = &mut self.quant {
                    q.lsq_grad_scale = parse(key, v)?;
                }
            }
            "alpha" => self.dkd.alpha = parse(key, v)?,
            "beta_dkd" => self.dkd.beta_dkd = parse(key, v)?,
            "temperature" => self.dkd.temperature = parse(key, v)?,
            "tau" => self.controller.tau = parse(key, v)?,
            "eta" => self.controller.eta = parse(key, v)?,
            "beta_init" => self.controller.beta_init = parse(key, v)?,
            "beta_min" => self.controller.beta_min = parse(key, v)?,
            "beta_max" => self.controller.beta_max = parse(key, v)?,
            "ema_decay" => self.controller.ema_decay = parse(key, v)?,
            "omega" => self.controller.omega = parse(key, v)?,
            "naive_kd_weight" => self.naive_kd_weight = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "visual_tokens" => self.visual_tokens = parse(key, v)?,
            "clusters" => self.clusters = parse(key, v)?,
            "text_positions" => self.text_positions = parse(key, v)?,
            "semantic_dim" => self.semantic_dim = parse(key, v)?,
            "nuisance_dim" => self.nuisance_dim = parse(key, v)?,
            "context_dim" => self.context_dim = parse(key, v)?,
            "cluster_noise" => self.cluster_noise = parse(key, v)?,
            "nuisance_scale" => self.nuisance_scale = parse(key, v)?,
            "label_sharpness" => self.label_sharpness = parse(key, v)?,
            "teacher_hidden" => self.teacher_hidden = parse(key, v)?,
            "teacher_layers" => self.teacher_layers = parse(key, v)?,
            "student_hidden" => self.student_hidden = parse(key, v)?,
            "student_layers" => self.student_layers = parse(key, v)?,
            "hidden_tap" => self.hidden_tap = parse(key, v)?,
            "attention_sharpness" => self.attention_sharpness = parse(key, v)?,
            "noisy_fraction" => self.noisy_fraction = parse(key, v)?,
            "mask_mode" => self.mask_mode = v.parse()?,
            "rcka_mode" => self.rcka_mode = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Index of the RCKA layer among `layers` visual layers.
    pub fn tap_index(&self, layers: usize) -> Result<usize> {
        let idx = if self.hidden_tap < 0 {
            layers as i64 + self.hidden_tap
        } else {
            self.hidden_tap
        };
        if idx < 0 || idx >= layers as i64 {
            return Err(Error::Config(format!(
                "hidden_tap {} out of range for {layers} visual layers",
                self.hidden_tap
            )));
        }
        Ok(idx as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("eval_samples", self.eval_samples),
            ("clusters", self.clusters),
            ("text_positions", self.text_positions),
            ("semantic_dim", self.semantic_dim),
            ("context_dim", self.context_dim),
            ("student_hidden", self.student_hidden),
            ("student_layers", self.student_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr_w > 0.0 && self.lr_s > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.visual_tokens < 2 * self.clusters {
            return Err(Error::Config("need at least two visual tokens per cluster".into()));
        }
        if self.teacher_layers < 2 || self.teacher_hidden < self.vocab_size.max(self.semantic_dim) {
            return Err(Error::Config(format!(
                "teacher needs >= 2 layers and width >= max(vocab_size, semantic_dim), got {}x{}",
                self.teacher_layers, self.teacher_hidden
            )));
        }
        if !(0.0..=1.0).contains(&self.noisy_fraction) {
            return Err(Error::Config("noisy_fraction must lie in [0, 1]".into()));
        }
        if self.mask_mode == MaskMode::AnswerOnly && self.text_positions < 2 {
            return Err(Error::Config("answer_only masking needs >= 2 text positions".into()));
        }
        self.tap_index(self.student_layers)?;
        self.tap_index(self.teacher_layers)?;
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        DkdWeights::new(self.dkd.alpha, self.dkd.beta_dkd, self.dkd.temperature)?;
        self.controller.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides() {
        let cfg = RunConfig::from_text("# toy\nseed = 7\nbits=8\ngroup_size=64\ntau=0.2\nvariant_free=1\n");
        assert!(matches!(cfg, Err(Error::Config(_))));
        let cfg = RunConfig::from_text("seed = 7\nbits=8\ngroup_size=64\ntau=0.2\nmask_mode=answer_only\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.quant, Some(QuantConfig::new(8, 64).unwrap()));
        assert_eq!(cfg.controller.tau, 0.2);
        assert_eq!(cfg.mask_mode, MaskMode::AnswerOnly);
        let fp = RunConfig::from_text("bits=fp").unwrap();
        assert_eq!(fp.quant, None);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_text("bits=3").is_err());
        assert!(RunConfig::from_text("lr_w=-1").is_err());
        assert!(RunConfig::from_text("epochs").is_err());
        assert!(RunConfig::from_text("hidden_tap=5").is_err());
    }

    #[test]
    fn tap_resolution() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.tap_index(2).unwrap(), 0);
        assert_eq!(cfg.tap_index(4).unwrap(), 2);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("grace_plus".parse::<Variant>().is_err());
    }
}
