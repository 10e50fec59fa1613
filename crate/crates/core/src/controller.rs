//! Adaptive weighting of the distillation term by projected dual ascent.
//!
//! The gated distillation loss is smoothed with an EMA, and the multiplier
//! `β` moves by `η · (ema − τ)` each step, clipped to `[β_min, β_max]`. The
//! training objective is `CE + β·GDKD + ω·RCKA` with `β` held constant
//! during backpropagation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkit::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    /// Target level for the smoothed distillation loss.
    pub tau: f64,
    /// Dual step size.
    pub eta: f64,
    pub beta_init: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ema_decay: f64,
    /// Weight of the relational term.
    pub omega: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau: 0.35,
            eta: 0.0015,
            beta_init: 1.0,
            beta_min: 0.1,
            beta_max: 5.0,
            ema_decay: 0.99,
            omega: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.tau, self.eta, self.beta_init, self.beta_min, self.beta_max, self.ema_decay, self.omega]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("controller settings must be finite".into()));
        }
        if !(0.0 <= self.beta_min && self.beta_min <= self.beta_init && self.beta_init <= self.beta_max) {
            return Err(Error::Config(format!(
                "need 0 <= beta_min <= beta_init <= beta_max, got {} / {} / {}",
                self.beta_min, self.beta_init, self.beta_max
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.eta <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("eta and tau must be positive".into()));
        }
        if self.omega < 0.0 {
            return Err(Error::Config("omega must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    pub beta: f64,
    pub ema_loss: f64,
    pub step: u64,
    pub initialized: bool,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            beta: cfg.beta_init,
            ema_loss: 0.0,
            step: 0,
            initialized: false,
        }
    }

    /// One dual-ascent step. The first call seeds the EMA with the raw loss.
    /// A non-finite or negative loss is rejected and leaves the state as is.
    pub fn update(&mut self, gdkd_loss: f64, cfg: &ControllerConfig) -> Result<()> {
        if !gdkd_loss.is_finite() || gdkd_loss < 0.0 {
            return Err(Error::Domain(format!("controller got loss {gdkd_loss}")));
        }
        self.ema_loss = if self.initialized {
            cfg.ema_decay * self.ema_loss + (1.0 - cfg.ema_decay) * gdkd_loss
        } else {
            gdkd_loss
        };
        self.initialized = true;
        self.beta = (self.beta + cfg.eta * (self.ema_loss - cfg.tau)).clamp(cfg.beta_min, cfg.beta_max);
        self.step += 1;
        Ok(())
    }

    /// Advances the EMA and step counter without touching `β`.
    pub fn observe(&mut self, gdkd_loss: f64, cfg: &ControllerConfig) -> Result<()> {
        let beta = self.beta;
        self.update(gdkd_loss, cfg)?;
        self.beta = beta;
        Ok(())
    }
}

/// `ce + β·gdkd + ω·rcka` with the current `β`.
pub fn total_loss(ce: f64, gdkd: f64, rcka: f64, state: &ControllerState, cfg: &ControllerConfig) -> f64 {
    ce + state.beta * gdkd + cfg.omega * rcka
}

/// Same combination on the tape. `β` and `ω` enter as plain numbers, so no
/// gradient reaches them. A missing term contributes nothing.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    ce: Var,
    gdkd: Option<Var>,
    rcka: Option<Var>,
    beta: f64,
    omega: f64,
) -> Result<Var> {
    let mut total = ce;
    if let Some(g) = gdkd {
        let scaled = tape.scale(g, beta);
        total = tape.add(total, scaled)?;
    }
    if let Some(r) = rcka {
        let scaled = tape.scale(r, omega);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Adaptive,
    /// `β` frozen at `beta_init`.
    Fixed,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown controller mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "adaptive",
            Self::Fixed => "fixed",
        })
    }
}

/// Expected distillation loss as a function of `β`, `L(β) = a − b·β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineResponse {
    pub intercept: f64,
    pub slope: f64,
}

impl Default for AffineResponse {
    fn default() -> Self {
        Self {
            intercept: 0.5,
            slope: 0.1,
        }
    }
}

impl AffineResponse {
    pub fn expected(&self, beta: f64) -> f64 {
        self.intercept - self.slope * beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub beta: f64,
    pub ema_loss: f64,
    pub raw_loss: f64,
}

/// Runs the controller against a loss response model. Each step draws
/// `max(0, L(β) + σ·ξ)` with `ξ ~ N(0, 1)` from a generator seeded by `seed`.
pub fn simulate_dynamics(
    response: impl Fn(f64) -> f64,
    steps: usize,
    cfg: &ControllerConfig,
    mode: Mode,
    noise: f64,
    seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    cfg.validate()?;
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!("noise level {noise} must be >= 0")));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ControllerState::new(cfg);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let raw = (response(state.beta) + noise * normal.sample(&mut rng)).max(0.0);
        match mode {
            Mode::Adaptive => state.update(raw, cfg)?,
            Mode::Fixed => state.observe(raw, cfg)?,
        }
        out.push(TrajectoryPoint {
            step: state.step,
            beta: state.beta,
            ema_loss: state.ema_loss,
            raw_loss: raw,
        });
    }
    Ok(out)
}

pub const TRAJECTORY_HEADER: &str = "step,beta,ema_loss,raw_loss";

pub fn write_trajectory(points: &[TrajectoryPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.step, p.beta, p.ema_loss, p.raw_loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, Matrix};
    use proptest::prelude::*;

    #[test]
    fn hand_step() {
        let cfg = ControllerConfig::default();
        let mut s = ControllerState::new(&cfg);
        s.update(0.42, &cfg).unwrap();
        assert!((s.beta - 1.000105).abs() < 1e-12);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn on_target_leaves_beta() {
        let cfg = ControllerConfig::default();
        let mut s = ControllerState::new(&cfg);
        s.update(cfg.tau, &cfg).unwrap();
        assert_eq!(s.beta, cfg.beta_init);
    }

    #[test]
    fn projection_at_upper_bound() {
        let cfg = ControllerConfig::default();
        let mut s = ControllerState {
            beta: cfg.beta_max,
            ..ControllerState::new(&cfg)
        };
        s.update(3.0, &cfg).unwrap();
        assert_eq!(s.beta, cfg.beta_max);
    }

    #[test]
    fn bad_loss_leaves_state() {
        let cfg = ControllerConfig::default();
        let mut s = ControllerState::new(&cfg);
        s.update(0.5, &cfg).unwrap();
        let before = s;
        assert!(matches!(s.update(f64::NAN, &cfg), Err(Error::Domain(_))));
        assert!(matches!(s.update(-1.0, &cfg), Err(Error::Domain(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn config_contracts() {
        assert!(ControllerConfig::default().validate().is_ok());
        let bad = ControllerConfig {
            beta_init: 6.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ControllerConfig {
            ema_decay: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let cfg = ControllerConfig::default();
        let mut s = ControllerState::new(&cfg);
        s.update(0.0, &cfg).unwrap();
        for k in 1..=50 {
            s.observe(1.0, &cfg).unwrap();
            let expected = 1.0 - cfg.ema_decay.powi(k);
            assert!((s.ema_loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = ControllerConfig::default();
        let s = ControllerState::new(&cfg);
        assert!((total_loss(0.5, 0.3, 0.2, &s, &cfg) - 1.0).abs() < 1e-15);
        let no_rcka = ControllerConfig { omega: 0.0, ..cfg };
        let s2 = ControllerState { beta: 2.0, ..s };
        assert!((total_loss(0.5, 0.3, 9.0, &s2, &no_rcka) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn tape_total_loss_gradients_are_coefficients() {
        let (beta, omega) = (1.7, 0.4);
        let point = [0.5, 0.3, 0.2];
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let v: Vec<Var> = x.iter().map(|&a| tape.leaf(Matrix::scalar(a))).collect();
            let t = total_loss_on_tape(&mut tape, v[0], Some(v[1]), Some(v[2]), beta, omega).unwrap();
            let g = tape.backward(t).unwrap();
            let grads = v.iter().map(|&vi| g.get(vi).unwrap().get(0, 0)).collect();
            (tape.scalar(t), grads)
        };
        let (_, grads) = eval(&point);
        assert_eq!(grads, vec![1.0, beta, omega]);
        let err = finite_diff_check(|x| eval(x).0, &grads, &point, 1e-6);
        assert!(err < 1e-8);
    }

    #[test]
    fn constant_response_keeps_beta() {
        let cfg = ControllerConfig::default();
        let traj = simulate_dynamics(|_| cfg.tau, 500, &cfg, Mode::Adaptive, 0.0, 0).unwrap();
        assert!(traj.iter().all(|p| p.beta == cfg.beta_init));
    }

    #[test]
    fn affine_fixed_points() {
        let cfg = ControllerConfig::default();
        let model = AffineResponse::default();
        let adaptive = simulate_dynamics(|b| model.expected(b), 60_000, &cfg, Mode::Adaptive, 0.0, 0).unwrap();
        let last = adaptive.last().unwrap();
        assert!((last.beta - 1.5).abs() < 0.01, "{last:?}");
        assert!((last.ema_loss - 0.35).abs() < 1e-3);
        let fixed = simulate_dynamics(|b| model.expected(b), 2_000, &cfg, Mode::Fixed, 0.0, 0).unwrap();
        let last = fixed.last().unwrap();
        assert_eq!(last.beta, 1.0);
        assert!((last.ema_loss - 0.40).abs() < 1e-9);
    }

    #[test]
    fn noisy_adaptive_beats_fixed() {
        let cfg = ControllerConfig::default();
        let model = AffineResponse::default();
        let mut wins = 0;
        for seed in 0..10 {
            let a = simulate_dynamics(|b| model.expected(b), 30_000, &cfg, Mode::Adaptive, 0.02, seed).unwrap();
            let f = simulate_dynamics(|b| model.expected(b), 30_000, &cfg, Mode::Fixed, 0.02, seed).unwrap();
            let da = (a.last().unwrap().ema_loss - cfg.tau).abs();
            let df = (f.last().unwrap().ema_loss - cfg.tau).abs();
            wins += usize::from(da < df);
        }
        assert_eq!(wins, 10);
    }

    #[test]
    fn trajectory_csv() {
        let cfg = ControllerConfig::default();
        let traj = simulate_dynamics(|_| 0.4, 2, &cfg, Mode::Adaptive, 0.0, 0).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }

    proptest! {
        #[test]
        fn projection_and_feedback_sign(losses in proptest::collection::vec(0.0f64..1e6, 1..200)) {
            let cfg = ControllerConfig { eta: 0.5, ..Default::default() };
            let mut s = ControllerState::new(&cfg);
            for l in losses {
                let before = s.beta;
                s.update(l, &cfg).unwrap();
                prop_assert!(s.beta >= cfg.beta_min && s.beta <= cfg.beta_max);
                if s.ema_loss > cfg.tau {
                    prop_assert!(s.beta >= before);
                } else if s.ema_loss < cfg.tau {
                    prop_assert!(s.beta <= before);
                }
            }
        }
    }
}
