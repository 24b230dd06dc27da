//! Variance-preserving forward diffusion: `x_t = α_t x₀ + σ_t ε` with
//! `α_t² + σ_t² = 1`, timestep samplers and time-weighting functions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("t = {t} outside schedule range [{t_min}, {t_max}]")]
    OutOfRange { t: f64, t_min: f64, t_max: f64 },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VpLinear,
    VpCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeStrategy {
    #[default]
    Uniform,
    AnnealedLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
    /// Only read by `vp_linear`.
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VpCosine,
            t_min: 0.02,
            t_max: 0.98,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

/// A validated diffusion time together with its `(α_t, σ_t)` pair.
///
/// Everything downstream of the schedule consumes a `NoiseLevel` rather
/// than a raw `t`, so the range check happens exactly once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn sigma_sq(&self) -> f64 {
        self.sigma * self.sigma
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self, ScheduleError> {
        let s = Self {
            kind,
            t_min,
            t_max,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn vp_linear(beta_min: f64, beta_max: f64, t_min: f64, t_max: f64) -> Result<Self, ScheduleError> {
        let s = Self {
            kind: ScheduleKind::VpLinear,
            t_min,
            t_max,
            beta_min,
            beta_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.t_min) || !in_unit(self.t_max) || self.t_min >= self.t_max {
            return Err(ScheduleError::Invalid(format!(
                "need 0 < t_min < t_max < 1, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        if self.kind == ScheduleKind::VpLinear
            && !(self.beta_min >= 0.0 && self.beta_max >= self.beta_min && self.beta_max > 0.0)
        {
            return Err(ScheduleError::Invalid(format!(
                "vp_linear needs 0 <= beta_min <= beta_max, beta_max > 0; got {} {}",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }

    /// `(α_t, σ_t)` for `t` in `[t_min, t_max]`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64), ScheduleError> {
        let level = self.level(t)?;
        Ok((level.alpha, level.sigma))
    }

    pub fn level(&self, t: f64) -> Result<NoiseLevel, ScheduleError> {
        if !(t >= self.t_min && t <= self.t_max) {
            return Err(ScheduleError::OutOfRange {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            });
        }
        let (alpha, sigma) = match self.kind {
            ScheduleKind::VpLinear => {
                // log α_t = -½ ∫₀ᵗ β(s) ds with β linear in s.
                let integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t;
                let log_alpha = -0.5 * integral;
                let alpha = log_alpha.exp();
                // σ² = 1 - α² = -expm1(2 log α), accurate when α ≈ 1.
                let sigma = (-(2.0 * log_alpha).exp_m1()).sqrt();
                (alpha, sigma)
            }
            ScheduleKind::VpCosine => {
                let phase = 0.5 * std::f64::consts::PI * t;
                (phase.cos(), phase.sin())
            }
        };
        Ok(NoiseLevel { t, alpha, sigma })
    }

    /// Draws a diffusion time for training step `step` of `total_steps`.
    ///
    /// `annealed_linear` shrinks the upper end of the window linearly from
    /// `t_max` down to `t_min + anneal_window` at the last step.
    pub fn sample_t<R: Rng + ?Sized>(
        &self,
        strategy: TimeStrategy,
        anneal_window: f64,
        step: usize,
        total_steps: usize,
        rng: &mut R,
    ) -> f64 {
        debug_assert!(total_steps >= 1 && step < total_steps);
        let upper = match strategy {
            TimeStrategy::Uniform => self.t_max,
            TimeStrategy::AnnealedLinear => {
                let floor = (self.t_min + anneal_window).min(self.t_max);
                if total_steps <= 1 {
                    floor
                } else {
                    let frac = step as f64 / (total_steps - 1) as f64;
                    self.t_max + (floor - self.t_max) * frac
                }
            }
        };
        let u: f64 = rng.random();
        (self.t_min + u * (upper - self.t_min)).clamp(self.t_min, self.t_max)
    }
}

/// `ω(t)` for the KL family and `w(t)` for the score-divergence family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeighting {
    Constant,
    SigmaSq,
    Snr,
}

impl TimeWeighting {
    pub fn weight(self, level: &NoiseLevel) -> f64 {
        match self {
            TimeWeighting::Constant => 1.0,
            TimeWeighting::SigmaSq => level.sigma_sq(),
            TimeWeighting::Snr => (level.alpha * level.alpha) / level.sigma_sq(),
        }
    }
}

pub fn weight(w: TimeWeighting, sched: &NoiseSchedule, t: f64) -> Result<f64, ScheduleError> {
    Ok(w.weight(&sched.level(t)?))
}
