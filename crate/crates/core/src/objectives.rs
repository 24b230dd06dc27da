//! Distillation gradients: the KL family (CDP, UDP, SDS, ER and their
//! weighted combination) and the score-divergence family (SIM blocks and
//! the Dive3D total).
//!
//! Every gradient is returned as an x₀-space cotangent; the caller chains it
//! through the render pullback.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fake_score::ScoreNet;
use crate::generator::{empirical_mixture, render, GeneratorError, GeneratorState, Selector, ViewTransform};
use crate::prior::{GaussianMixture, PriorError, PromptBank};
use crate::reward::{reward_score_and_jacobian_xt, RewardError, RewardModel, DEFAULT_PROMPT};
use crate::schedule::{NoiseLevel, NoiseSchedule, TimeStrategy, TimeWeighting};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("invalid objective: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Kl,
    Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    L2Sq,
    PseudoHuber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeSource {
    Analytic,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    L2Sq,
    PseudoHuber { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSpec {
    pub family: Family,
    pub gamma: f64,
    pub lambda: f64,
    /// Explicit `[α₁, α₂, α₃]`; `None` means `[1 + γ, γ, λ]`.
    pub alpha: Option<[f64; 3]>,
    pub distance: DistanceKind,
    pub huber_c: f64,
    pub fake_source: FakeSource,
    /// `w(t)` of the score-divergence family.
    pub w_kind: TimeWeighting,
    /// `ω(t)` of the KL family.
    pub omega_kind: TimeWeighting,
    pub independent_draws: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            family: Family::Sim,
            gamma: 7.5,
            lambda: 1.0,
            alpha: None,
            distance: DistanceKind::L2Sq,
            huber_c: 1.0,
            fake_source: FakeSource::Analytic,
            w_kind: TimeWeighting::Constant,
            omega_kind: TimeWeighting::SigmaSq,
            independent_draws: false,
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Invalid(m));
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if let Some(a) = self.alpha {
            if a.iter().any(|v| !(*v >= 0.0)) {
                return bad(format!("alpha entries must be >= 0, got {a:?}"));
            }
        }
        if self.distance == DistanceKind::PseudoHuber && !(self.huber_c > 0.0) {
            return bad(format!("huber_c must be > 0, got {}", self.huber_c));
        }
        let [a1, a2, _] = self.effective_alpha();
        if a2 > a1 {
            log::warn!("unconditional weight {a2} exceeds conditional weight {a1}; expect artifacts");
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> [f64; 3] {
        self.alpha.unwrap_or([1.0 + self.gamma, self.gamma, self.lambda])
    }

    pub fn distance_fn(&self) -> Distance {
        match self.distance {
            DistanceKind::L2Sq => Distance::L2Sq,
            DistanceKind::PseudoHuber => Distance::PseudoHuber { c: self.huber_c },
        }
    }

    /// The reward weight is ignored when no reward model is configured.
    pub fn needs_reward(&self) -> bool {
        self.effective_alpha()[2] != 0.0
    }
}

/// Fake-score source for one (view, t): the generator's exact diffused
/// empirical score, or the learned network.
pub enum FakeEval<'a> {
    Analytic(GaussianMixture),
    Learned { net: &'a ScoreNet, view: usize },
}

impl FakeEval<'_> {
    pub fn score_and_jacobian(&self, x_t: &DVector<f64>, level: &NoiseLevel) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            FakeEval::Analytic(mix) => mix.score_and_jacobian(x_t),
            FakeEval::Learned { net, view } => {
                let e = net.eval(x_t, *view, level);
                let j = net.input_jacobian(&e);
                (e.score, j)
            }
        }
    }
}

/// One training draw with every score it needs, evaluated at `x_t`.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub view: usize,
    pub selector: Selector,
    pub level: NoiseLevel,
    pub eps: DVector<f64>,
    pub x0: DVector<f64>,
    pub x_t: DVector<f64>,
    pub s_cond: DVector<f64>,
    pub s_uncond: DVector<f64>,
    pub s_fake: Option<DVector<f64>>,
    pub s_reward: Option<DVector<f64>>,
    pub j_cond: Option<DMatrix<f64>>,
    pub j_uncond: Option<DMatrix<f64>>,
    pub j_fake: Option<DMatrix<f64>>,
    pub j_reward: Option<DMatrix<f64>>,
}

/// Priors and reward shared by every draw of a run.
pub struct Targets<'a> {
    pub bank: &'a PromptBank,
    pub reward: Option<&'a RewardModel>,
}

impl StepSample {
    /// Perturbs `x0` with `eps` and caches the scores the objective family
    /// needs. Views without a prompt use the unconditional prior.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        targets: &Targets,
        prompt: Option<&str>,
        spec: &ObjectiveSpec,
        fake: Option<&FakeEval>,
        view: usize,
        selector: Selector,
        level: NoiseLevel,
        eps: DVector<f64>,
        x0: DVector<f64>,
    ) -> Result<Self, ObjectiveError> {
        let x_t = &x0 * level.alpha + &eps * level.sigma;
        let sim = spec.family == Family::Sim;
        let cond_mix = targets.bank.mixture(prompt)?;
        let uncond_mix = &targets.bank.unconditional;
        let (s_cond, j_cond) = score_pair(cond_mix, &level, &x_t, sim);
        let (s_uncond, j_uncond) = score_pair(uncond_mix, &level, &x_t, sim);
        let (s_reward, j_reward) = match (targets.reward, spec.needs_reward()) {
            (Some(r), true) => {
                let (s, j) = reward_score_and_jacobian_xt(r, prompt.unwrap_or(DEFAULT_PROMPT), cond_mix, &level, &x_t)?;
                (Some(s), sim.then_some(j))
            }
            _ => (None, None),
        };
        let (s_fake, j_fake) = match (sim, fake) {
            (true, Some(f)) => {
                let (s, j) = f.score_and_jacobian(&x_t, &level);
                (Some(s), Some(j))
            }
            (true, None) => return Err(ObjectiveError::Invalid("score-divergence family needs a fake score".into())),
            _ => (None, None),
        };
        Ok(Self {
            view,
            selector,
            level,
            eps,
            x0,
            x_t,
            s_cond,
            s_uncond,
            s_fake,
            s_reward,
            j_cond,
            j_uncond,
            j_fake,
            j_reward,
        })
    }
}

fn score_pair(
    mix: &GaussianMixture,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
    with_jac: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let d = mix.diffuse(level);
    if with_jac {
        let (s, j) = d.score_and_jacobian(x_t);
        (s, Some(j))
    } else {
        (d.score(x_t), None)
    }
}

/// `ω(t) (ε_φ - ε)` for a predicted noise `-σ s`.
fn noise_residual(s: &StepSample, score: &DVector<f64>, omega: TimeWeighting) -> DVector<f64> {
    (score * -s.level.sigma - &s.eps) * omega.weight(&s.level)
}

pub fn grad_cdp(s: &StepSample, spec: &ObjectiveSpec) -> DVector<f64> {
    noise_residual(s, &s.s_cond, spec.omega_kind)
}

pub fn grad_udp(s: &StepSample, spec: &ObjectiveSpec) -> DVector<f64> {
    noise_residual(s, &s.s_uncond, spec.omega_kind)
}

/// Guided noise prediction `ε̂ = -σ (s_c + γ (s_c - s_u))`.
pub fn grad_sds(s: &StepSample, spec: &ObjectiveSpec) -> DVector<f64> {
    let guided = &s.s_cond + (&s.s_cond - &s.s_uncond) * spec.gamma;
    noise_residual(s, &guided, spec.omega_kind)
}

/// `-λ ω(t) ∇_{x_t} r(y, x̂₀)`: descent on this ascends the reward.
pub fn grad_er_kl(s: &StepSample, spec: &ObjectiveSpec) -> DVector<f64> {
    er_unit(s, spec) * spec.lambda
}

fn er_unit(s: &StepSample, spec: &ObjectiveSpec) -> DVector<f64> {
    match &s.s_reward {
        Some(r) => r * -spec.omega_kind.weight(&s.level),
        None => DVector::zeros(s.x_t.len()),
    }
}

/// `α₁ CDP - α₂ UDP + α₃ ER` with `λ` folded into `α₃`.
pub fn grad_kl_unified(s: &StepSample, spec: &ObjectiveSpec) -> DVector<f64> {
    let [a1, a2, a3] = spec.effective_alpha();
    let mut g = grad_cdp(s, spec) * a1 - grad_udp(s, spec) * a2;
    if a3 != 0.0 {
        g += er_unit(s, spec) * a3;
    }
    g
}

pub fn distance_and_grad(d: Distance, v: &DVector<f64>) -> (f64, DVector<f64>) {
    match d {
        Distance::L2Sq => (v.norm_squared(), v * 2.0),
        Distance::PseudoHuber { c } => {
            let rho = (1.0 + v.norm_squared() / (c * c)).sqrt();
            (c * c * (rho - 1.0), v / rho)
        }
    }
}

pub fn distance_hessian(d: Distance, v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    match d {
        Distance::L2Sq => DMatrix::identity(n, n) * 2.0,
        Distance::PseudoHuber { c } => {
            let rho = (1.0 + v.norm_squared() / (c * c)).sqrt();
            DMatrix::identity(n, n) / rho - v * v.transpose() / (c * c * rho.powi(3))
        }
    }
}

/// One score-divergence block against `target` (with Jacobian `target_jac`).
///
/// The surrogate is `w(t) (-u)ᵀ (s_fake(x_t) + ε/σ)` with `u = d′(s_fake - target)`,
/// differentiated through `x_t` only, with the fake score's own parameters
/// held fixed. Returns the surrogate value and its x₀-space cotangent
/// `α ∂/∂x_t`.
pub fn sim_surrogate(
    s: &StepSample,
    target: &DVector<f64>,
    target_jac: &DMatrix<f64>,
    spec: &ObjectiveSpec,
) -> (f64, DVector<f64>) {
    let s_fake = s.s_fake.as_ref().expect("sim sample carries a fake score");
    let j_fake = s.j_fake.as_ref().expect("sim sample carries a fake Jacobian");
    let dist = spec.distance_fn();
    let w = spec.w_kind.weight(&s.level);
    let k = s_fake - target;
    let (_, u) = distance_and_grad(dist, &k);
    let r = s_fake + &s.eps / s.level.sigma;
    let loss = -w * u.dot(&r);
    let du = distance_hessian(dist, &k) * (j_fake - target_jac);
    let dx_t = (du.transpose() * &r + j_fake.transpose() * &u) * -w;
    (loss, dx_t * s.level.alpha)
}

/// Which score-divergence blocks a draw contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocks {
    All,
    Only(usize),
}

/// `α₁ Score-CDP - α₂ Score-UDP + α₃ Score-ER` on one shared draw.
pub fn grad_dive3d(s: &StepSample, spec: &ObjectiveSpec) -> (f64, DVector<f64>) {
    grad_dive3d_blocks(s, spec, Blocks::All)
}

pub fn grad_dive3d_blocks(s: &StepSample, spec: &ObjectiveSpec, blocks: Blocks) -> (f64, DVector<f64>) {
    let alpha = spec.effective_alpha();
    let signs = [1.0, -1.0, 1.0];
    let mut loss = 0.0;
    let mut g = DVector::zeros(s.x_t.len());
    for b in 0..3 {
        if alpha[b] == 0.0 || !matches!(blocks, Blocks::All) && blocks != Blocks::Only(b) {
            continue;
        }
        let (target, jac) = match b {
            0 => (&s.s_cond, s.j_cond.as_ref()),
            1 => (&s.s_uncond, s.j_uncond.as_ref()),
            _ => match &s.s_reward {
                Some(r) => (r, s.j_reward.as_ref()),
                None => continue,
            },
        };
        let (l, c) = sim_surrogate(s, target, jac.expect("sim sample carries target Jacobians"), spec);
        loss += signs[b] * alpha[b] * l;
        g += c * (signs[b] * alpha[b]);
    }
    (loss, g)
}

/// Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, se: (var / n).sqrt() }
    }
}

fn draw_eps<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn particle_count(state: &GeneratorState) -> Result<usize, ObjectiveError> {
    state
        .particles()
        .map(|p| p.n())
        .ok_or(ObjectiveError::Generator(GeneratorError::Unsupported("analytic generator score")))
}

/// `w(t) d(s_p - s_q)` summed over blocks with signs and weights.
fn divergence_integrand(
    s_q: &DVector<f64>,
    targets: &[(f64, DVector<f64>)],
    dist: Distance,
    w: f64,
) -> f64 {
    targets.iter().map(|(a, s_p)| a * distance_and_grad(dist, &(s_p - s_q)).0).sum::<f64>() * w
}

/// Inner expectation `E_{x_t∼q_θ,t}[w(t) d(s_p - s_q)]` at a fixed level.
pub fn divergence_at_level<R: Rng + ?Sized>(
    state: &GeneratorState,
    view: &ViewTransform,
    target_t0: &GaussianMixture,
    spec: &ObjectiveSpec,
    level: &NoiseLevel,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate, ObjectiveError> {
    let n = particle_count(state)?;
    let q = empirical_mixture(state, view, level)?;
    let p = target_t0.diffuse(level);
    let cloud = state.particles().expect("checked above");
    let w = spec.w_kind.weight(level);
    let dist = spec.distance_fn();
    let xs: Vec<f64> = (0..n_mc)
        .map(|_| {
            let i = rng.random_range(0..n);
            let x_t = view.apply(&cloud.point(i)) * level.alpha + draw_eps(q.dim(), rng) * level.sigma;
            divergence_integrand(&q.score(&x_t), &[(1.0, p.score(&x_t))], dist, w)
        })
        .collect();
    Ok(McEstimate::from_samples(&xs))
}

/// `∫ w(t) E_{x_t∼q_θ,t}[d(s_p - s_q)] dt` with uniform `t` and importance
/// weight `t_max - t_min`.
pub fn divergence_estimate<R: Rng + ?Sized>(
    state: &GeneratorState,
    view: &ViewTransform,
    target_t0: &GaussianMixture,
    spec: &ObjectiveSpec,
    sched: &NoiseSchedule,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate, ObjectiveError> {
    let n = particle_count(state)?;
    let cloud = state.particles().expect("checked above");
    let dist = spec.distance_fn();
    let span = sched.t_max - sched.t_min;
    let xs: Vec<f64> = (0..n_mc)
        .map(|_| {
            let t = sched.sample_t(TimeStrategy::Uniform, 0.0, 0, 1, rng);
            let level = sched.level(t).expect("sampled in range");
            let i = rng.random_range(0..n);
            let x_t = view.apply(&cloud.point(i)) * level.alpha + draw_eps(cloud.dim(), rng) * level.sigma;
            let q = empirical_mixture(state, view, &level).expect("particle generator");
            let p = target_t0.diffuse(&level);
            span * divergence_integrand(&q.score(&x_t), &[(1.0, p.score(&x_t))], dist, spec.w_kind.weight(&level))
        })
        .collect();
    Ok(McEstimate::from_samples(&xs))
}

/// Test function for the score-projection identity.
pub type TestFn<'a> = dyn Fn(&DVector<f64>, &NoiseLevel) -> DVector<f64> + 'a;

/// `E[u(x_t)ᵀ (s_q,t(x_t) - ∇log q_t(x_t|x₀))]` under the generator's own
/// diffusion path; zero for any `u`. `t = None` draws `t` uniformly.
pub fn score_projection_check<R: Rng + ?Sized>(
    state: &GeneratorState,
    view: &ViewTransform,
    sched: &NoiseSchedule,
    t: Option<f64>,
    u: &TestFn,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate, ObjectiveError> {
    let n = particle_count(state)?;
    let cloud = state.particles().expect("checked above");
    let fixed = match t {
        Some(t) => {
            let level = sched.level(t).map_err(|e| ObjectiveError::Invalid(e.to_string()))?;
            Some((level, empirical_mixture(state, view, &level)?))
        }
        None => None,
    };
    let xs: Vec<f64> = (0..n_mc)
        .map(|_| {
            let (level, q_owned);
            let q = match &fixed {
                Some((l, q)) => {
                    level = *l;
                    q
                }
                None => {
                    level = sched.level(sched.sample_t(TimeStrategy::Uniform, 0.0, 0, 1, rng)).expect("in range");
                    q_owned = empirical_mixture(state, view, &level).expect("particle generator");
                    &q_owned
                }
            };
            let i = rng.random_range(0..n);
            let eps = draw_eps(cloud.dim(), rng);
            let x_t = view.apply(&cloud.point(i)) * level.alpha + &eps * level.sigma;
            u(&x_t, &level).dot(&(q.score(&x_t) + eps / level.sigma))
        })
        .collect();
    Ok(McEstimate::from_samples(&xs))
}

/// Fixed `(view, particle, t, ε, x_t)` draws for finite-difference checks of
/// the score-divergence gradient. `x_t` stays put when `θ` moves, so the
/// sampling distribution is held at the generator's current diffusion.
#[derive(Debug, Clone)]
pub struct FrozenBatch {
    pub entries: Vec<FrozenEntry>,
}

#[derive(Debug, Clone)]
pub struct FrozenEntry {
    pub view: usize,
    pub particle: usize,
    pub level: NoiseLevel,
    pub eps: DVector<f64>,
    pub x_t: DVector<f64>,
}

impl FrozenBatch {
    pub fn draw<R: Rng + ?Sized>(
        state: &GeneratorState,
        views: &[ViewTransform],
        sched: &NoiseSchedule,
        n: usize,
        rng: &mut R,
    ) -> Result<Self, ObjectiveError> {
        let n_particles = particle_count(state)?;
        let entries = (0..n)
            .map(|_| {
                let view = rng.random_range(0..views.len());
                let particle = rng.random_range(0..n_particles);
                let t = sched.sample_t(TimeStrategy::Uniform, 0.0, 0, 1, rng);
                let level = sched.level(t).expect("sampled in range");
                let (x0, _) = render(state, &views[view], view, &Selector::Index(particle))?;
                let eps = draw_eps(x0.len(), rng);
                let x_t = &x0 * level.alpha + &eps * level.sigma;
                Ok(FrozenEntry { view, particle, level, eps, x_t })
            })
            .collect::<Result<Vec<_>, ObjectiveError>>()?;
        Ok(Self { entries })
    }
}

/// Block targets `(signed weight, score)` at `x_t`, matching `grad_dive3d`.
fn block_targets(
    targets: &Targets,
    prompt: Option<&str>,
    spec: &ObjectiveSpec,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
) -> Result<Vec<(f64, DVector<f64>)>, ObjectiveError> {
    let [a1, a2, a3] = spec.effective_alpha();
    let cond = targets.bank.mixture(prompt)?;
    let mut out = Vec::with_capacity(3);
    if a1 != 0.0 {
        out.push((a1, cond.diffuse(level).score(x_t)));
    }
    if a2 != 0.0 {
        out.push((-a2, targets.bank.unconditional.diffuse(level).score(x_t)));
    }
    if a3 != 0.0 {
        if let Some(r) = targets.reward {
            let (s, _) = reward_score_and_jacobian_xt(r, prompt.unwrap_or(DEFAULT_PROMPT), cond, level, x_t)?;
            out.push((a3, s));
        }
    }
    Ok(out)
}

/// The weighted divergence sum on a frozen batch, with analytic generator
/// scores at the current parameters.
pub fn divergence_on_frozen(
    state: &GeneratorState,
    views: &[ViewTransform],
    batch: &FrozenBatch,
    targets: &Targets,
    spec: &ObjectiveSpec,
) -> Result<f64, ObjectiveError> {
    let dist = spec.distance_fn();
    let mut total = 0.0;
    for e in &batch.entries {
        let view = &views[e.view];
        let q = empirical_mixture(state, view, &e.level)?;
        let blocks = block_targets(targets, view.prompt.as_deref(), spec, &e.level, &e.x_t)?;
        total += divergence_integrand(&q.score(&e.x_t), &blocks, dist, spec.w_kind.weight(&e.level));
    }
    Ok(total / batch.entries.len() as f64)
}

/// Surrogate θ-gradient assembled from `grad_dive3d` cotangents on the same
/// frozen batch. `flip` negates every cotangent (mutation fixture).
pub fn surrogate_gradient_on_frozen(
    state: &GeneratorState,
    views: &[ViewTransform],
    batch: &FrozenBatch,
    targets: &Targets,
    spec: &ObjectiveSpec,
    flip: bool,
) -> Result<Vec<f64>, ObjectiveError> {
    let sim_spec = ObjectiveSpec { family: Family::Sim, ..spec.clone() };
    let mut grad = vec![0.0; state.params().len()];
    let scale = if flip { -1.0 } else { 1.0 } / batch.entries.len() as f64;
    for e in &batch.entries {
        let view = &views[e.view];
        let (x0, pullback) = render(state, view, e.view, &Selector::Index(e.particle))?;
        let fake = FakeEval::Analytic(empirical_mixture(state, view, &e.level)?);
        let s = StepSample::evaluate(
            targets,
            view.prompt.as_deref(),
            &sim_spec,
            Some(&fake),
            e.view,
            Selector::Index(e.particle),
            e.level,
            e.eps.clone(),
            x0,
        )?;
        let (_, cot) = grad_dive3d(&s, &sim_spec);
        pullback.accumulate(state, &cot, scale, &mut grad);
    }
    Ok(grad)
}

/// Central differences of `divergence_on_frozen` in every generator parameter.
pub fn frozen_finite_difference(
    state: &GeneratorState,
    views: &[ViewTransform],
    batch: &FrozenBatch,
    targets: &Targets,
    spec: &ObjectiveSpec,
    h: f64,
) -> Result<Vec<f64>, ObjectiveError> {
    let mut probe = state.clone();
    let n = state.params().len();
    let mut fd = Vec::with_capacity(n);
    for i in 0..n {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = divergence_on_frozen(&probe, views, batch, targets, spec)?;
        probe.params_mut()[i] = orig - h;
        let down = divergence_on_frozen(&probe, views, batch, targets, spec)?;
        probe.params_mut()[i] = orig;
        fd.push((up - down) / (2.0 * h));
    }
    Ok(fd)
}

/// `‖a - b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::ParticleCloud;
    use crate::prior::Covariance;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn bimodal(w: f64) -> GaussianMixture {
        GaussianMixture::new(
            2,
            vec![
                (w, dvector![3.0, 0.0], Covariance::Isotropic(1.0)),
                (1.0 - w, dvector![-3.0, 0.0], Covariance::Isotropic(1.0)),
            ],
        )
        .unwrap()
    }

    fn bank(cond_w: f64) -> PromptBank {
        PromptBank::new(bimodal(0.5), BTreeMap::from([("y".to_string(), bimodal(cond_w))])).unwrap()
    }

    fn lvl(t: f64) -> NoiseLevel {
        NoiseSchedule::default().level(t).unwrap()
    }

    fn kl(gamma: f64) -> ObjectiveSpec {
        ObjectiveSpec { family: Family::Kl, gamma, ..Default::default() }
    }

    fn sample(bank: &PromptBank, spec: &ObjectiveSpec, x0: DVector<f64>, eps: DVector<f64>, t: f64) -> StepSample {
        let targets = Targets { bank, reward: None };
        StepSample::evaluate(&targets, Some("y"), spec, None, 0, Selector::Index(0), lvl(t), eps, x0).unwrap()
    }

    #[test]
    fn cdp_vanishes_at_its_fixed_point() {
        let b = bank(0.7);
        let mut s = sample(&b, &kl(0.0), dvector![0.5, 0.1], dvector![0.3, -0.2], 0.5);
        s.s_cond = -&s.eps / s.level.sigma;
        assert!(grad_cdp(&s, &kl(0.0)).amax() < 1e-15);
    }

    #[test]
    fn cdp_standard_normal_closed_form() {
        let g = GaussianMixture::standard_normal(2);
        let b = PromptBank::new(g.clone(), BTreeMap::from([("y".to_string(), g)])).unwrap();
        let spec = kl(3.0);
        let eps = dvector![0.4, -1.3];
        let s = sample(&b, &spec, dvector![0.0, 0.0], eps.clone(), 0.6);
        // ε_cond = -σ s(x_t) = σ x_t = σ² ε.
        let expected = &eps * (spec.omega_kind.weight(&s.level) * (s.level.sigma_sq() - 1.0));
        assert!((grad_cdp(&s, &spec) - &expected).amax() < 1e-14);
        assert!((grad_udp(&s, &spec) - expected).amax() < 1e-14);
        assert_eq!(grad_cdp(&s, &spec), grad_cdp(&s, &kl(0.0)));
    }

    #[test]
    fn sds_special_cases() {
        let b = bank(0.7);
        let s = sample(&b, &kl(0.0), dvector![0.5, 0.1], dvector![0.3, -0.2], 0.4);
        assert_eq!(grad_sds(&s, &kl(0.0)), grad_cdp(&s, &kl(0.0)));
        let sym = bank(0.5);
        let s = sample(&sym, &kl(7.5), dvector![0.5, 0.1], dvector![0.3, -0.2], 0.4);
        assert!((grad_sds(&s, &kl(7.5)) - grad_cdp(&s, &kl(7.5))).amax() < 1e-12);
        let s = sample(&b, &kl(1.0), dvector![0.5, 0.1], dvector![0.3, -0.2], 0.4);
        let combo = grad_cdp(&s, &kl(1.0)) * 2.0 - grad_udp(&s, &kl(1.0));
        assert!((grad_sds(&s, &kl(1.0)) - combo).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn sds_decomposes_into_cdp_and_udp(
            x in prop::array::uniform2(-4.0f64..4.0),
            e in prop::array::uniform2(-3.0f64..3.0),
            t in 0.02f64..0.98,
            gamma in 0.0f64..20.0,
            w in 0.05f64..0.95,
        ) {
            let b = bank(w);
            let spec = kl(gamma);
            let s = sample(&b, &spec, dvector![x[0], x[1]], dvector![e[0], e[1]], t);
            let lhs = grad_sds(&s, &spec);
            let rhs = grad_cdp(&s, &spec) * (1.0 + gamma) - grad_udp(&s, &spec) * gamma;
            prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + gamma));
        }

        #[test]
        fn pseudo_huber_slope_is_bounded(v in prop::array::uniform2(-1e3f64..1e3), c in 0.1f64..5.0) {
            let (_, g) = distance_and_grad(Distance::PseudoHuber { c }, &dvector![v[0], v[1]]);
            prop_assert!(g.norm() <= c * (1.0 + 1e-12));
        }
    }

    fn reward_model(scale: f64) -> RewardModel {
        RewardModel::quadratic(scale, BTreeMap::from([(DEFAULT_PROMPT.to_string(), dvector![0.0, 4.0])])).unwrap()
    }

    #[test]
    fn er_cases() {
        let b = bank(0.7);
        let r = reward_model(1.0);
        let targets = Targets { bank: &b, reward: Some(&r) };
        let spec = ObjectiveSpec { family: Family::Kl, lambda: 2.0, ..Default::default() };
        let s = StepSample::evaluate(&targets, Some("y"), &spec, None, 0, Selector::Index(0), lvl(0.3), dvector![0.1, 0.2], dvector![1.0, 1.0]).unwrap();
        let expected = s.s_reward.clone().unwrap() * (-2.0 * spec.omega_kind.weight(&s.level));
        assert_eq!(grad_er_kl(&s, &spec), expected);
        let zero = ObjectiveSpec { lambda: 0.0, ..spec.clone() };
        assert!(grad_er_kl(&s, &zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn er_conjugate_closed_form() {
        let mu = dvector![1.0, -1.0];
        let g = GaussianMixture::new(2, vec![(1.0, mu.clone(), Covariance::Isotropic(1.0))]).unwrap();
        let b = PromptBank::new(g.clone(), BTreeMap::from([("y".to_string(), g)])).unwrap();
        let r = reward_model(0.5);
        let targets = Targets { bank: &b, reward: Some(&r) };
        let spec = ObjectiveSpec { family: Family::Kl, lambda: 3.0, ..Default::default() };
        let s = StepSample::evaluate(&targets, Some("y"), &spec, None, 0, Selector::Index(0), lvl(0.45), dvector![0.3, 0.5], dvector![2.0, 0.0]).unwrap();
        let (a, s2) = (s.level.alpha, s.level.sigma_sq());
        let reward_score = (&s.x_t * a + &mu * s2 - dvector![0.0, 4.0]) * (-0.5 * a);
        let expected = reward_score * (-3.0 * spec.omega_kind.weight(&s.level));
        assert!((grad_er_kl(&s, &spec) - expected).amax() < 1e-12);
        // At the reward optimum the gradient vanishes.
        let x_opt = (dvector![0.0, 4.0] - &mu * s2) / a;
        let s = StepSample::evaluate(&targets, Some("y"), &spec, None, 0, Selector::Index(0), s.level, dvector![0.0, 0.0], x_opt / a).unwrap();
        assert!(grad_er_kl(&s, &spec).amax() < 1e-12);
    }

    #[test]
    fn unified_special_cases() {
        let b = bank(0.7);
        let spec = kl(7.5);
        let s = sample(&b, &spec, dvector![0.5, 0.1], dvector![0.3, -0.2], 0.4);
        assert!((grad_kl_unified(&s, &spec) - grad_sds(&s, &spec)).amax() < 1e-12);
        let bal = ObjectiveSpec { alpha: Some([2.0, 2.0, 0.0]), ..spec };
        let resid = (grad_cdp(&s, &bal) - grad_udp(&s, &bal)) * 2.0;
        assert!((grad_kl_unified(&s, &bal) - resid).amax() < 1e-12);
    }

    #[test]
    fn distance_values_and_derivatives() {
        for d in [Distance::L2Sq, Distance::PseudoHuber { c: 0.7 }] {
            let (v, g) = distance_and_grad(d, &dvector![0.0, 0.0]);
            assert_eq!((v, g), (0.0, dvector![0.0, 0.0]));
        }
        assert_eq!(distance_and_grad(Distance::L2Sq, &dvector![3.0, 4.0]), (25.0, dvector![6.0, 8.0]));
        let h = 1e-5;
        for d in [Distance::L2Sq, Distance::PseudoHuber { c: 0.7 }, Distance::PseudoHuber { c: 3.0 }] {
            for v in [dvector![0.3, -0.2], dvector![40.0, 30.0], dvector![-2.0, 5.0]] {
                let (_, g) = distance_and_grad(d, &v);
                let hess = distance_hessian(d, &v);
                for i in 0..2 {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[i] += h;
                    vm[i] -= h;
                    let fd = (distance_and_grad(d, &vp).0 - distance_and_grad(d, &vm).0) / (2.0 * h);
                    assert!((fd - g[i]).abs() <= 1e-8 * g.norm().max(1e-3), "{d:?} {v} {fd} {}", g[i]);
                    let fdh = (distance_and_grad(d, &vp).1 - distance_and_grad(d, &vm).1) / (2.0 * h);
                    assert!((fdh - hess.column(i)).amax() <= 1e-7 * hess.amax().max(1e-3));
                }
            }
        }
    }

    fn cloud(points: &[[f64; 2]]) -> GeneratorState {
        let pts: Vec<DVector<f64>> = points.iter().map(|p| dvector![p[0], p[1]]).collect();
        GeneratorState::Particles(ParticleCloud::from_points(&pts).unwrap())
    }

    #[test]
    fn sim_vanishes_when_fake_matches_target() {
        let state = cloud(&[[3.0, 0.0]]);
        let view = ViewTransform::identity(2, Some("y".into()));
        let level = lvl(0.3);
        let target = empirical_mixture(&state, &view, &level).unwrap();
        let g = GaussianMixture::new(2, vec![(1.0, dvector![3.0, 0.0], Covariance::Isotropic(1e-9))]).unwrap();
        let b = PromptBank::new(g.clone(), BTreeMap::from([("y".to_string(), g)])).unwrap();
        let targets = Targets { bank: &b, reward: None };
        let spec = ObjectiveSpec::default();
        let fake = FakeEval::Analytic(target.clone());
        let s = StepSample::evaluate(&targets, Some("y"), &spec, Some(&fake), 0, Selector::Index(0), level, dvector![0.4, 1.0], dvector![3.0, 0.0]).unwrap();
        let (ts, tj) = target.score_and_jacobian(&s.x_t);
        for d in [DistanceKind::L2Sq, DistanceKind::PseudoHuber] {
            let spec = ObjectiveSpec { distance: d, ..spec.clone() };
            let (loss, cot) = sim_surrogate(&s, &ts, &tj, &spec);
            assert_eq!(loss, 0.0);
            assert!(cot.amax() < 1e-15);
        }
    }

    #[test]
    fn dive3d_block_weights() {
        let state = cloud(&[[1.0, 0.5], [-0.5, 0.0]]);
        let view = ViewTransform::identity(2, Some("y".into()));
        let b = bank(0.7);
        let targets = Targets { bank: &b, reward: None };
        let level = lvl(0.5);
        let fake = FakeEval::Analytic(empirical_mixture(&state, &view, &level).unwrap());
        let cdp = ObjectiveSpec { gamma: 0.0, ..Default::default() };
        let s = StepSample::evaluate(&targets, Some("y"), &cdp, Some(&fake), 0, Selector::Index(0), level, dvector![0.2, -0.7], dvector![1.0, 0.5]).unwrap();
        let (_, only_cdp) = sim_surrogate(&s, &s.s_cond, s.j_cond.as_ref().unwrap(), &cdp);
        assert_eq!(grad_dive3d(&s, &cdp).1, only_cdp);
        let sym = bank(0.5);
        let targets = Targets { bank: &sym, reward: None };
        let guided = ObjectiveSpec { gamma: 7.5, ..Default::default() };
        let s = StepSample::evaluate(&targets, Some("y"), &guided, Some(&fake), 0, Selector::Index(0), level, dvector![0.2, -0.7], dvector![1.0, 0.5]).unwrap();
        let (_, only_cdp) = sim_surrogate(&s, &s.s_cond, s.j_cond.as_ref().unwrap(), &guided);
        assert!((grad_dive3d(&s, &guided).1 - only_cdp).amax() < 1e-10);
    }

    fn frozen_rel_err(spec: &ObjectiveSpec, flip: bool, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = cloud(&[[0.5, 0.2], [-0.3, -0.4], [0.1, 0.9]]);
        let views = vec![ViewTransform::identity(2, Some("y".into()))];
        let b = bank(0.7);
        let targets = Targets { bank: &b, reward: None };
        let sched = NoiseSchedule::default();
        let batch = FrozenBatch::draw(&state, &views, &sched, n, &mut rng).unwrap();
        let g = surrogate_gradient_on_frozen(&state, &views, &batch, &targets, spec, flip).unwrap();
        let fd = frozen_finite_difference(&state, &views, &batch, &targets, spec, 1e-5).unwrap();
        relative_error(&g, &fd)
    }

    #[test]
    fn frozen_batch_gradient_matches_finite_differences() {
        for d in [DistanceKind::L2Sq, DistanceKind::PseudoHuber] {
            let spec = ObjectiveSpec { gamma: 0.0, distance: d, ..Default::default() };
            let err = frozen_rel_err(&spec, false, 40_000, 3);
            assert!(err <= 5e-2, "{d:?}: {err}");
        }
    }

    #[test]
    fn flipped_sign_fails_frozen_batch_check() {
        let spec = ObjectiveSpec { gamma: 0.0, ..Default::default() };
        let err = frozen_rel_err(&spec, true, 40_000, 3);
        assert!((err - 2.0).abs() < 0.1, "{err}");
    }

    #[test]
    fn projection_is_zero_for_one_particle() {
        let state = cloud(&[[0.7, -0.2]]);
        let view = ViewTransform::identity(2, None);
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = |x: &DVector<f64>, _: &NoiseLevel| x.map(|v| v.sin());
        let est = score_projection_check(&state, &view, &sched, None, &u, 200, &mut rng).unwrap();
        assert!(est.mean.abs() < 1e-12 && est.se < 1e-12);
    }

    #[test]
    fn projection_is_zero_for_many_particles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = GeneratorState::Particles(ParticleCloud::gaussian_blob(8, &dvector![0.0, 0.0], 1.5, &mut rng));
        let view = ViewTransform::identity(2, None);
        let sched = NoiseSchedule::default();
        let u = |_: &DVector<f64>, _: &NoiseLevel| dvector![1.0, -0.5];
        let est = score_projection_check(&state, &view, &sched, Some(0.3), &u, 100_000, &mut rng).unwrap();
        assert!(est.mean.abs() <= 4.0 * est.se, "{est:?}");
    }

    #[test]
    fn divergence_of_identical_distributions_is_zero() {
        let state = cloud(&[[1.0, 0.0], [-1.0, 0.5]]);
        let view = ViewTransform::identity(2, None);
        let target = GaussianMixture::isotropic_equal(vec![dvector![1.0, 0.0], dvector![-1.0, 0.5]], 1e-300).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = divergence_estimate(&state, &view, &target, &ObjectiveSpec::default(), &NoiseSchedule::default(), 500, &mut rng).unwrap();
        assert!(est.mean.abs() < 1e-9, "{est:?}");
    }

    #[test]
    fn divergence_gaussian_closed_form() {
        let theta = dvector![0.5, -0.5];
        let view = ViewTransform::identity(2, None);
        let spec = ObjectiveSpec::default();
        let level = lvl(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for delta in [0.0, 1.0, 2.5] {
            let mu = &theta + dvector![delta, 0.0];
            let target = GaussianMixture::new(2, vec![(1.0, mu, Covariance::Isotropic(1.0))]).unwrap();
            let state = GeneratorState::Particles(ParticleCloud::from_points(&[theta.clone()]).unwrap());
            let est = divergence_at_level(&state, &view, &target, &spec, &level, 20_000, &mut rng).unwrap();
            let (a, s2) = (level.alpha, level.sigma_sq());
            let v = a * a + s2;
            let sigma = level.sigma;
            let exact = spec.w_kind.weight(&level)
                * (a * a * delta * delta / (v * v) + 2.0 * (1.0 / sigma - sigma / v).powi(2));
            assert!((est.mean - exact).abs() <= 3.0 * est.se.max(1e-12), "{delta}: {est:?} vs {exact}");
        }
    }

    #[test]
    fn divergence_is_larger_with_a_missing_mode() {
        let view = ViewTransform::identity(2, None);
        let sched = NoiseSchedule::default();
        let spec = ObjectiveSpec::default();
        let target = bimodal(0.5);
        let both = cloud(&[[3.0, 0.0], [-3.0, 0.0]]);
        let one = cloud(&[[3.0, 0.0], [3.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = divergence_estimate(&both, &view, &target, &spec, &sched, 4000, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = divergence_estimate(&one, &view, &target, &spec, &sched, 4000, &mut rng).unwrap();
        assert!(b.mean > a.mean && a.mean >= 0.0);
    }
}
