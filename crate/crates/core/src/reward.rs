//! Toy reward models with closed-form gradients and the reward score
//! `∇_{x_t} r(y, x̂₀(x_t))` taken through the Tweedie denoiser.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::prior::{tweedie_denoise, GaussianMixture};
use crate::schedule::NoiseLevel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("no reward target for prompt `{0}`")]
    UnknownPrompt(String),
    #[error("invalid reward model: {0}")]
    Invalid(String),
}

/// Key consulted when a prompt has no dedicated entry.
pub const DEFAULT_PROMPT: &str = "default";

#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// `-scale ‖x̂₀ - target_y‖² / 2`.
    Quadratic {
        scale: f64,
        targets: BTreeMap<String, DVector<f64>>,
    },
    /// `f(x̂₀)ᵀ h(y)` with linear image embedding `f`.
    InnerProduct {
        f: DMatrix<f64>,
        h: BTreeMap<String, DVector<f64>>,
    },
}

fn lookup<'a>(map: &'a BTreeMap<String, DVector<f64>>, y: &str) -> Result<&'a DVector<f64>, RewardError> {
    map.get(y)
        .or_else(|| map.get(DEFAULT_PROMPT))
        .ok_or_else(|| RewardError::UnknownPrompt(y.to_string()))
}

impl RewardModel {
    pub fn quadratic(scale: f64, targets: BTreeMap<String, DVector<f64>>) -> Result<Self, RewardError> {
        let r = RewardModel::Quadratic { scale, targets };
        r.validate()?;
        Ok(r)
    }

    pub fn inner_product(f: DMatrix<f64>, h: BTreeMap<String, DVector<f64>>) -> Result<Self, RewardError> {
        let r = RewardModel::InnerProduct { f, h };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        match self {
            RewardModel::Quadratic { scale, targets } => {
                if !(*scale >= 0.0) {
                    return Err(RewardError::Invalid(format!("scale must be >= 0, got {scale}")));
                }
                let mut lens = targets.values().map(|t| t.len());
                if let Some(first) = lens.next() {
                    if lens.any(|l| l != first) {
                        return Err(RewardError::Invalid("targets of mixed length".into()));
                    }
                }
            }
            RewardModel::InnerProduct { f, h } => {
                let k = f.nrows();
                if f.clone().rank(1e-10) < k {
                    return Err(RewardError::Invalid("embedding f must have full row rank".into()));
                }
                if let Some((name, _)) = h.iter().find(|(_, v)| v.len() != k) {
                    return Err(RewardError::Invalid(format!("h[{name}] must have length {k}")));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, y: &str, x0: &DVector<f64>) -> Result<f64, RewardError> {
        match self {
            RewardModel::Quadratic { scale, targets } => {
                let target = lookup(targets, y)?;
                Ok(-0.5 * scale * (x0 - target).norm_squared())
            }
            RewardModel::InnerProduct { f, h } => Ok((f * x0).dot(lookup(h, y)?)),
        }
    }

    pub fn grad_x0(&self, y: &str, x0: &DVector<f64>) -> Result<DVector<f64>, RewardError> {
        match self {
            RewardModel::Quadratic { scale, targets } => Ok((x0 - lookup(targets, y)?) * -*scale),
            RewardModel::InnerProduct { f, h } => Ok(f.transpose() * lookup(h, y)?),
        }
    }

    pub fn hessian_x0(&self, dim: usize) -> DMatrix<f64> {
        match self {
            RewardModel::Quadratic { scale, .. } => DMatrix::identity(dim, dim) * -*scale,
            RewardModel::InnerProduct { .. } => DMatrix::zeros(dim, dim),
        }
    }
}

pub fn reward_value(r: &RewardModel, y: &str, x0: &DVector<f64>) -> Result<f64, RewardError> {
    r.value(y, x0)
}

pub fn reward_grad_x0(r: &RewardModel, y: &str, x0: &DVector<f64>) -> Result<DVector<f64>, RewardError> {
    r.grad_x0(y, x0)
}

/// `Jᵀ ∇r(x̂₀)` with `(x̂₀, J)` from the Tweedie denoiser of `prior_mix`.
pub fn reward_score_xt(
    r: &RewardModel,
    y: &str,
    prior_mix: &GaussianMixture,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
) -> Result<DVector<f64>, RewardError> {
    let (x0, jac) = tweedie_denoise(prior_mix, level, x_t);
    Ok(jac.transpose() * r.grad_x0(y, &x0)?)
}

/// Reward score and its Jacobian in `x_t`:
/// `J G J + (σ²/α) ∂(H g)/∂x_t` with `G` the reward Hessian in `x̂₀`.
pub fn reward_score_and_jacobian_xt(
    r: &RewardModel,
    y: &str,
    prior_mix: &GaussianMixture,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), RewardError> {
    let (x0, jac) = tweedie_denoise(prior_mix, level, x_t);
    let g = r.grad_x0(y, &x0)?;
    let score = jac.transpose() * &g;
    let diffused = prior_mix.diffuse(level);
    let third = diffused.score_jacobian_derivative(x_t, &g);
    let dim = x_t.len();
    let ds = jac.transpose() * r.hessian_x0(dim) * &jac + third * (level.sigma_sq() / level.alpha);
    Ok((score, ds))
}

/// Unnormalized `log p_ER(y, x_t) = r(y, x̂₀(x_t))`.
pub fn er_log_density(
    r: &RewardModel,
    y: &str,
    x_t: &DVector<f64>,
    prior_mix: &GaussianMixture,
    level: &NoiseLevel,
) -> Result<f64, RewardError> {
    let (x0, _) = tweedie_denoise(prior_mix, level, x_t);
    r.value(y, &x0)
}
