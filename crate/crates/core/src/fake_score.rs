//! Online approximation `s_φ(x_t, c, t)` of the generator's own noisy
//! score, trained by weighted denoising score matching.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{render, GeneratorError, GeneratorState, Selector, ViewTransform};
use crate::nn::{Activation, Mlp, MlpCache};
use crate::optim::{Optimizer, OptimizerKind};
use crate::schedule::{NoiseLevel, NoiseSchedule, TimeStrategy, TimeWeighting};

#[derive(Debug, Error)]
pub enum FakeScoreError {
    #[error("non-finite DSM loss at t = {t}, sigma_t = {sigma}")]
    NonFinite { t: f64, sigma: f64 },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("invalid DSM config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsmConfig {
    pub lambda: TimeWeighting,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub updates_per_step: usize,
    /// Learning rate is multiplied by this after every update.
    pub lr_decay: f64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            lambda: TimeWeighting::SigmaSq,
            batch: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            updates_per_step: 1,
            lr_decay: 1.0,
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<(), FakeScoreError> {
        if !(self.lr >= 0.0) || self.batch == 0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(FakeScoreError::Invalid(format!(
                "need lr >= 0, batch >= 1 and lr_decay in (0, 1], got lr={} batch={} lr_decay={}",
                self.lr, self.batch, self.lr_decay
            )));
        }
        Ok(())
    }
}

/// MLP on `x_t ‖ embed(t) ‖ one-hot(view)`. The raw output `D` is read as
/// a denoised estimate, `s_φ = (α_t D − x_t)/σ_t²`, so a zero output layer
/// gives the score of `N(0, σ_t² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    dim: usize,
    n_views: usize,
    t_freqs: usize,
    mlp: Mlp,
}

pub struct ScoreEval {
    pub score: DVector<f64>,
    cache: MlpCache,
    alpha: f64,
    sigma: f64,
}

impl ScoreNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_views: usize, hidden: &[usize], t_freqs: usize, rng: &mut R) -> Self {
        let mut sizes = vec![dim + 1 + 2 * t_freqs + n_views];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let mut mlp = Mlp::random(&sizes, Activation::Silu, rng);
        mlp.zero_output_layer();
        Self {
            dim,
            n_views,
            t_freqs,
            mlp,
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    /// Sinusoidal time features `[t, sin(kπt), cos(kπt)]`.
    fn features(&self, x_t: &DVector<f64>, view: usize, level: &NoiseLevel) -> Vec<f64> {
        let t = level.t;
        let mut v: Vec<f64> = x_t.iter().copied().collect();
        v.push(t);
        for k in 1..=self.t_freqs {
            let a = k as f64 * std::f64::consts::PI * t;
            v.push(a.sin());
            v.push(a.cos());
        }
        v.extend((0..self.n_views).map(|c| if c == view { 1.0 } else { 0.0 }));
        v
    }

    pub fn eval(&self, x_t: &DVector<f64>, view: usize, level: &NoiseLevel) -> ScoreEval {
        let cache = self.mlp.forward_cached(&self.features(x_t, view, level));
        let var = level.sigma * level.sigma;
        let score = DVector::from_iterator(
            self.dim,
            cache.output().iter().zip(x_t.iter()).map(|(o, x)| (level.alpha * o - x) / var),
        );
        ScoreEval {
            score,
            cache,
            alpha: level.alpha,
            sigma: level.sigma,
        }
    }

    pub fn forward(&self, x_t: &DVector<f64>, view: usize, level: &NoiseLevel) -> DVector<f64> {
        self.eval(x_t, view, level).score
    }

    /// `∂s_φ/∂x_t`.
    pub fn input_jacobian(&self, eval: &ScoreEval) -> DMatrix<f64> {
        let j = self.mlp.input_jacobian(&eval.cache, self.dim);
        let var = eval.sigma * eval.sigma;
        (DMatrix::from_row_slice(self.dim, self.dim, &j) * eval.alpha - DMatrix::identity(self.dim, self.dim)) / var
    }

    /// Accumulates `∂(vᵀ s_φ)/∂φ`.
    fn backward(&self, eval: &ScoreEval, v: &DVector<f64>, grad: &mut [f64]) {
        let k = eval.alpha / (eval.sigma * eval.sigma);
        let g: Vec<f64> = v.iter().map(|x| x * k).collect();
        self.mlp.backward(&eval.cache, &g, grad, None);
    }
}

/// One regression example: target score is `-ε/σ_t` at `x_t`.
#[derive(Debug, Clone)]
pub struct DsmSample {
    pub x_t: DVector<f64>,
    pub eps: DVector<f64>,
    pub view: usize,
    pub level: NoiseLevel,
}

/// Mean of `λ(t) ‖s_φ(x_t) + ε/σ_t‖²` over the batch and its φ-gradient.
pub fn dsm_loss_and_grad(net: &ScoreNet, lambda: TimeWeighting, batch: &[DsmSample]) -> (f64, Vec<f64>) {
    let weights: Vec<f64> = batch.iter().map(|s| lambda.weight(&s.level)).collect();
    dsm_loss_and_grad_weighted(net, &weights, batch)
}

/// As [`dsm_loss_and_grad`] with explicit per-sample weights.
pub fn dsm_loss_and_grad_weighted(net: &ScoreNet, weights: &[f64], batch: &[DsmSample]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for (s, &w) in batch.iter().zip(weights) {
        let eval = net.eval(&s.x_t, s.view, &s.level);
        let resid = &eval.score + &s.eps / s.level.sigma;
        loss += w * resid.norm_squared() * inv_b;
        if w != 0.0 {
            net.backward(&eval, &(resid * (2.0 * w * inv_b)), &mut grad);
        }
    }
    (loss, grad)
}

pub fn dsm_loss(net: &ScoreNet, lambda: TimeWeighting, batch: &[DsmSample]) -> f64 {
    batch
        .iter()
        .map(|s| {
            let r = net.forward(&s.x_t, s.view, &s.level) + &s.eps / s.level.sigma;
            lambda.weight(&s.level) * r.norm_squared()
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Fresh renders of the current generator, noised at uniform `t`.
pub fn draw_dsm_batch<R: Rng + ?Sized>(
    state: &GeneratorState,
    views: &[ViewTransform],
    sched: &NoiseSchedule,
    n: usize,
    noise_map: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<Vec<DsmSample>, FakeScoreError> {
    let dim = state.dim();
    (0..n)
        .map(|_| {
            let view = rng.random_range(0..views.len());
            let selector = match state {
                GeneratorState::Particles(p) => Selector::Index(rng.random_range(0..p.n())),
                GeneratorState::MlpMap(m) => {
                    Selector::Latent(DVector::from_fn(m.latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
                }
            };
            let (x0, _) = render(state, &views[view], view, &selector)?;
            let t = sched.sample_t(TimeStrategy::Uniform, 0.0, 0, 1, rng);
            let level = sched.level(t).expect("sampled in range");
            let mut eps = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Some(m) = noise_map {
                eps = m * eps;
            }
            let x_t = &x0 * level.alpha + &eps * level.sigma;
            Ok(DsmSample { x_t, eps, view, level })
        })
        .collect()
}

/// Score network plus its optimizer state.
#[derive(Debug, Clone)]
pub struct FakeScore {
    pub net: ScoreNet,
    pub cfg: DsmConfig,
    opt: Optimizer,
}

impl FakeScore {
    pub fn new(net: ScoreNet, cfg: DsmConfig) -> Self {
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, net.n_params());
        Self { net, cfg, opt }
    }

    /// Runs `cfg.updates_per_step` optimizer steps; returns the last loss.
    pub fn dsm_update<R: Rng + ?Sized>(
        &mut self,
        state: &GeneratorState,
        views: &[ViewTransform],
        sched: &NoiseSchedule,
        noise_map: Option<&DMatrix<f64>>,
        rng: &mut R,
    ) -> Result<f64, FakeScoreError> {
        let mut last = f64::NAN;
        for _ in 0..self.cfg.updates_per_step {
            let batch = draw_dsm_batch(state, views, sched, self.cfg.batch, noise_map, rng)?;
            let (loss, grad) = dsm_loss_and_grad(&self.net, self.cfg.lambda, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let worst = batch
                    .iter()
                    .min_by(|a, b| a.level.sigma.total_cmp(&b.level.sigma))
                    .expect("non-empty batch");
                return Err(FakeScoreError::NonFinite {
                    t: worst.level.t,
                    sigma: worst.level.sigma,
                });
            }
            self.opt.step(self.net.params_mut(), &grad);
            if self.cfg.lr_decay != 1.0 {
                let lr = self.opt.lr() * self.cfg.lr_decay;
                self.opt.set_lr(lr);
            }
            last = loss;
        }
        Ok(last)
    }
}

/// Worst relative error between backprop and central differences of the
/// DSM loss over up to `max_params` randomly chosen parameters.
pub fn grad_check<R: Rng + ?Sized>(
    net: &ScoreNet,
    lambda: TimeWeighting,
    batch: &[DsmSample],
    max_params: usize,
    h: f64,
    rng: &mut R,
) -> f64 {
    let (_, grad) = dsm_loss_and_grad(net, lambda, batch);
    let n = net.n_params();
    let picks: Vec<usize> = if n <= max_params {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, max_params).into_vec()
    };
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in picks {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let lp = dsm_loss(&probe, lambda, batch);
        probe.params_mut()[i] = orig - h;
        let lm = dsm_loss(&probe, lambda, batch);
        probe.params_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs());
        if denom > 0.0 {
            worst = worst.max((fd - grad[i]).abs() / (denom + 1e-8));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::ParticleCloud;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(rng: &mut ChaCha8Rng) -> (GeneratorState, Vec<ViewTransform>, NoiseSchedule) {
        let state = GeneratorState::Particles(ParticleCloud::gaussian_blob(4, &dvector![0.0, 0.0], 1.0, rng));
        (state, vec![ViewTransform::identity(2, None)], NoiseSchedule::default())
    }

    fn perturbed_net(rng: &mut ChaCha8Rng) -> ScoreNet {
        let mut net = ScoreNet::new(2, 1, &[16, 16], 3, rng);
        for p in net.params_mut() {
            *p += 0.2 * rng.random_range(-1.0..1.0);
        }
        net
    }

    #[test]
    fn zero_output_layer_is_centered_gaussian_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ScoreNet::new(2, 2, &[8], 2, &mut rng);
        let level = NoiseLevel { t: 0.5, alpha: 0.8, sigma: 0.5 };
        assert_eq!(net.forward(&dvector![1.0, -3.0], 1, &level), dvector![-4.0, 12.0]);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (state, views, sched) = setup(&mut rng);
        let net = perturbed_net(&mut rng);
        let batch = draw_dsm_batch(&state, &views, &sched, 16, None, &mut rng).unwrap();
        let err = grad_check(&net, TimeWeighting::SigmaSq, &batch, 200, 1e-4, &mut rng);
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn zero_weight_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (state, views, sched) = setup(&mut rng);
        let net = perturbed_net(&mut rng);
        let batch = draw_dsm_batch(&state, &views, &sched, 8, None, &mut rng).unwrap();
        let (loss, grad) = dsm_loss_and_grad_weighted(&net, &[0.0; 8], &batch);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (state, views, sched) = setup(&mut rng);
        let net = perturbed_net(&mut rng);
        let before = net.params().to_vec();
        let mut fake = FakeScore::new(net, DsmConfig { lr: 0.0, ..DsmConfig::default() });
        let loss = fake.dsm_update(&state, &views, &sched, None, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(fake.net.params(), &before[..]);
    }

    #[test]
    fn forward_is_continuous_in_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = perturbed_net(&mut rng);
        let sched = NoiseSchedule::default();
        let x = dvector![0.3, 0.2];
        let a = net.forward(&x, 0, &sched.level(0.5).unwrap());
        let b = net.forward(&x, 0, &sched.level(0.5 + 1e-6).unwrap());
        let c = net.forward(&x, 0, &sched.level(0.5 + 1e-3).unwrap());
        let lipschitz = (&c - &a).norm() / 1e-3;
        assert!((b - a).norm() <= 2.0 * lipschitz * 1e-6 + 1e-12);
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = perturbed_net(&mut rng);
        let level = NoiseLevel { t: 0.4, alpha: 0.8, sigma: 0.6 };
        let x = dvector![0.5, -0.2];
        let j = net.input_jacobian(&net.eval(&x, 0, &level));
        let h = 1e-6;
        for c in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let fd = (net.forward(&xp, 0, &level) - net.forward(&xm, 0, &level)) / (2.0 * h);
            assert!((fd - j.column(c)).amax() < 1e-6);
        }
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let (state, views, sched) = setup(&mut rng);
            let net = ScoreNet::new(2, 1, &[16, 16], 3, &mut rng);
            let mut fake = FakeScore::new(net, DsmConfig::default());
            for _ in 0..20 {
                fake.dsm_update(&state, &views, &sched, None, &mut rng).unwrap();
            }
            fake.net.params().to_vec()
        };
        assert_eq!(run(), run());
    }
}
