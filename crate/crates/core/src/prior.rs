//! Gaussian-mixture diffusion priors with exact noisy marginals, scores,
//! score Jacobians and Tweedie denoisers.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::schedule::NoiseLevel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid mixture: {0}")]
    Invalid(String),
    #[error("unknown conditioning prompt `{0}`")]
    UnknownPrompt(String),
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub enum Covariance {
    /// `var · I`.
    Isotropic(f64),
    Full(FullCov),
}

#[derive(Debug, Clone)]
pub struct FullCov {
    matrix: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl FullCov {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, PriorError> {
        if !matrix.is_square() {
            return Err(PriorError::Invalid("covariance must be square".into()));
        }
        let scale = matrix.amax().max(1.0);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * scale {
            return Err(PriorError::Invalid("covariance must be symmetric".into()));
        }
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| PriorError::Invalid("covariance must be positive definite".into()))?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            matrix,
            chol_l,
            precision,
            log_det,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl Covariance {
    fn log_det(&self, dim: usize) -> f64 {
        match self {
            Covariance::Isotropic(v) => dim as f64 * v.ln(),
            Covariance::Full(f) => f.log_det,
        }
    }

    /// `Σ⁻¹ v`.
    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Covariance::Isotropic(var) => v / *var,
            Covariance::Full(f) => &f.precision * v,
        }
    }

    fn precision(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic(var) => DMatrix::identity(dim, dim) / *var,
            Covariance::Full(f) => f.precision.clone(),
        }
    }

    pub fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic(var) => DMatrix::identity(dim, dim) * *var,
            Covariance::Full(f) => f.matrix.clone(),
        }
    }

    /// `a² Σ + b I`, staying isotropic when possible.
    fn affine(&self, a_sq: f64, b: f64, dim: usize) -> Covariance {
        match self {
            Covariance::Isotropic(var) => Covariance::Isotropic(a_sq * var + b),
            Covariance::Full(f) => {
                let m = &f.matrix * a_sq + DMatrix::identity(dim, dim) * b;
                // a²Σ + bI with Σ SPD and b ≥ 0 stays SPD.
                Covariance::Full(FullCov::new(m).expect("affine map of SPD covariance"))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    log_weight: f64,
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl Component {
    fn log_pdf_and_residual(&self, x: &DVector<f64>, dim: usize) -> (f64, DVector<f64>) {
        let diff = x - &self.mean;
        let solved = self.cov.solve(&diff);
        let maha = diff.dot(&solved);
        let lp = -0.5 * (dim as f64 * LN_2PI + self.cov.log_det(dim) + maha);
        // Component score a_k = -Σ⁻¹(x - μ).
        (lp, -solved)
    }
}

/// Per-point quantities shared by the score and its derivatives.
struct Eval {
    log_density: f64,
    resp: Vec<f64>,
    comp_scores: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(dim: usize, parts: Vec<(f64, DVector<f64>, Covariance)>) -> Result<Self, PriorError> {
        if dim == 0 {
            return Err(PriorError::Invalid("dim must be >= 1".into()));
        }
        if parts.is_empty() {
            return Err(PriorError::Invalid("mixture needs at least one component".into()));
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(PriorError::Invalid(format!("weights sum to {total}, expected 1")));
        }
        let mut components = Vec::with_capacity(parts.len());
        for (i, (weight, mean, cov)) in parts.into_iter().enumerate() {
            if !(weight > 0.0) {
                return Err(PriorError::Invalid(format!("component {i} has non-positive weight")));
            }
            if mean.len() != dim {
                return Err(PriorError::Invalid(format!(
                    "component {i} mean has length {}, expected {dim}",
                    mean.len()
                )));
            }
            match &cov {
                Covariance::Isotropic(v) if !(*v > 0.0) => {
                    return Err(PriorError::Invalid(format!("component {i} variance must be > 0")))
                }
                Covariance::Full(f) if f.matrix.nrows() != dim => {
                    return Err(PriorError::Invalid(format!("component {i} covariance is not {dim}x{dim}")))
                }
                _ => {}
            }
            components.push(Component {
                weight,
                log_weight: weight.ln(),
                mean,
                cov,
            });
        }
        Ok(Self { dim, components })
    }

    /// Equal-weight isotropic mixture, e.g. a diffused particle cloud.
    pub fn isotropic_equal(means: Vec<DVector<f64>>, var: f64) -> Result<Self, PriorError> {
        let n = means.len();
        let dim = means.first().map(|m| m.len()).unwrap_or(0);
        let w = 1.0 / n as f64;
        let mut mix = Self::new(
            dim,
            means.into_iter().map(|m| (w, m, Covariance::Isotropic(var))).collect(),
        );
        // 1/N summed N times can miss 1 by a few ulps; renormalize exactly.
        if let Ok(ref mut m) = mix {
            for c in &mut m.components {
                c.weight = w;
                c.log_weight = -(n as f64).ln();
            }
        }
        mix
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(dim, vec![(1.0, DVector::zeros(dim), Covariance::Isotropic(1.0))]).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn evaluate(&self, x: &DVector<f64>) -> Eval {
        let mut logs = Vec::with_capacity(self.components.len());
        let mut comp_scores = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let (lp, a) = c.log_pdf_and_residual(x, self.dim);
            logs.push(c.log_weight + lp);
            comp_scores.push(a);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + sum.ln();
        let resp = logs.iter().map(|l| (l - log_density).exp()).collect();
        Eval {
            log_density,
            resp,
            comp_scores,
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.evaluate(x).log_density
    }

    /// Posterior component responsibilities at `x`.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        self.evaluate(x).resp
    }

    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let e = self.evaluate(x);
        Self::score_from(&e, self.dim)
    }

    fn score_from(e: &Eval, dim: usize) -> DVector<f64> {
        let mut s = DVector::zeros(dim);
        for (r, a) in e.resp.iter().zip(&e.comp_scores) {
            s.axpy(*r, a, 1.0);
        }
        s
    }

    /// Score and its Jacobian `∇ₓ s = Σ r_k (a_k a_kᵀ - Σ_k⁻¹) - s sᵀ`.
    pub fn score_and_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let e = self.evaluate(x);
        let s = Self::score_from(&e, self.dim);
        let mut jac = -&s * s.transpose();
        for ((r, a), c) in e.resp.iter().zip(&e.comp_scores).zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            jac += (a * a.transpose() - c.cov.precision(self.dim)) * *r;
        }
        (s, jac)
    }

    pub fn score_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.score_and_jacobian(x).1
    }

    /// Directional third derivative: `∂/∂x [H(x) g]` for fixed `g`, where
    /// `H` is the score Jacobian.
    pub fn score_jacobian_derivative(&self, x: &DVector<f64>, g: &DVector<f64>) -> DMatrix<f64> {
        let e = self.evaluate(x);
        let dim = self.dim;
        let s = Self::score_from(&e, dim);
        let mut h = -&s * s.transpose();
        let precisions: Vec<DMatrix<f64>> = self.components.iter().map(|c| c.cov.precision(dim)).collect();
        for ((r, a), p) in e.resp.iter().zip(&e.comp_scores).zip(&precisions) {
            h += (a * a.transpose() - p) * *r;
        }
        let hg = &h * g;
        let sg = s.dot(g);
        // Derivative of -s (sᵀg).
        let mut out = -(&h * sg) - &s * hg.transpose();
        for ((r, a), p) in e.resp.iter().zip(&e.comp_scores).zip(&precisions) {
            if *r == 0.0 {
                continue;
            }
            let ag = a.dot(g);
            let pg = p * g;
            let dr = (a - &s).transpose() * *r;
            // r_k a_k (a_kᵀg) term.
            out += a * &dr * ag;
            out -= p * (*r * ag);
            out -= a * pg.transpose() * *r;
            // -r_k P_k g term.
            out -= &pg * &dr;
        }
        out
    }

    /// Exact marginal of `α x₀ + σ ε` under `x₀ ~ self`.
    pub fn diffuse(&self, level: &NoiseLevel) -> GaussianMixture {
        let a = level.alpha;
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                log_weight: c.log_weight,
                mean: &c.mean * a,
                cov: c.cov.affine(a * a, level.sigma_sq(), self.dim),
            })
            .collect();
        GaussianMixture {
            dim: self.dim,
            components,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        self.sample_labeled(n, rng).into_iter().map(|(_, x)| x).collect()
    }

    /// Draws with the index of the component each draw came from.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, DVector<f64>)> {
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight)).expect("positive weights");
        (0..n)
            .map(|_| {
                let k = picker.sample(rng);
                let c = &self.components[k];
                let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = match &c.cov {
                    Covariance::Isotropic(v) => &c.mean + z * v.sqrt(),
                    Covariance::Full(f) => &c.mean + &f.chol_l * z,
                };
                (k, x)
            })
            .collect()
    }

    /// Same means and covariances (to 1e-12), possibly reordered.
    fn has_component_like(&self, other: &Component) -> bool {
        self.components.iter().any(|c| {
            (&c.mean - &other.mean).amax() <= 1e-12
                && (c.cov.to_matrix(self.dim) - other.cov.to_matrix(self.dim)).amax() <= 1e-12
        })
    }
}

/// Tweedie posterior mean `x̂₀ = (x_t + σ² s(x_t)) / α` and its Jacobian
/// `(I + σ² ∇s) / α`.
pub fn tweedie_denoise(
    mix_t0: &GaussianMixture,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let diffused = mix_t0.diffuse(level);
    let (s, h) = diffused.score_and_jacobian(x_t);
    let s2 = level.sigma_sq();
    let x0 = (x_t + s * s2) / level.alpha;
    let n = mix_t0.dim();
    let jac = (DMatrix::identity(n, n) + h * s2) / level.alpha;
    (x0, jac)
}

/// Unconditional prior plus per-prompt conditional priors.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub unconditional: GaussianMixture,
    pub conditional: BTreeMap<String, GaussianMixture>,
}

impl PromptBank {
    /// Every conditional mixture must reuse (a subset of) the unconditional
    /// components, differing only in weights.
    pub fn new(
        unconditional: GaussianMixture,
        conditional: BTreeMap<String, GaussianMixture>,
    ) -> Result<Self, PriorError> {
        for (name, mix) in &conditional {
            if mix.dim() != unconditional.dim() {
                return Err(PriorError::Invalid(format!(
                    "conditional `{name}` has dim {}, unconditional has {}",
                    mix.dim(),
                    unconditional.dim()
                )));
            }
            for (k, c) in mix.components().iter().enumerate() {
                if !unconditional.has_component_like(c) {
                    return Err(PriorError::Invalid(format!(
                        "conditional `{name}` component {k} is not an unconditional component"
                    )));
                }
            }
        }
        Ok(Self {
            unconditional,
            conditional,
        })
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    /// `None` selects the unconditional prior.
    pub fn mixture(&self, prompt: Option<&str>) -> Result<&GaussianMixture, PriorError> {
        match prompt {
            None => Ok(&self.unconditional),
            Some(y) => self
                .conditional
                .get(y)
                .ok_or_else(|| PriorError::UnknownPrompt(y.to_string())),
        }
    }
}

pub fn prior_score(
    bank: &PromptBank,
    prompt: Option<&str>,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
) -> Result<DVector<f64>, PriorError> {
    Ok(bank.mixture(prompt)?.diffuse(level).score(x_t))
}

/// Classifier-free guided score `s_c + γ (s_c - s_u)`.
pub fn cfg_score(
    bank: &PromptBank,
    prompt: Option<&str>,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
    gamma: f64,
) -> Result<DVector<f64>, PriorError> {
    let s_c = prior_score(bank, prompt, level, x_t)?;
    let s_u = prior_score(bank, None, level, x_t)?;
    Ok(&s_c + (&s_c - s_u) * gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lvl(alpha: f64) -> NoiseLevel {
        NoiseLevel {
            t: 0.3,
            alpha,
            sigma: (1.0 - alpha * alpha).sqrt(),
        }
    }

    fn bimodal(m: f64) -> GaussianMixture {
        GaussianMixture::new(
            2,
            vec![
                (0.5, dvector![m, 0.0], Covariance::Isotropic(1.0)),
                (0.5, dvector![-m, 0.0], Covariance::Isotropic(1.0)),
            ],
        )
        .unwrap()
    }

    fn random_mixture(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut parts = Vec::new();
        for (i, w) in raw.iter().enumerate() {
            let mean = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.6..0.6));
            let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.3;
            let weight = if i + 1 == k {
                1.0 - raw[..k - 1].iter().map(|r| r / total).sum::<f64>()
            } else {
                w / total
            };
            parts.push((weight, mean, Covariance::Full(FullCov::new(cov).unwrap())));
        }
        GaussianMixture::new(dim, parts).unwrap()
    }

    #[test]
    fn standard_normal_score_and_jacobian() {
        let g = GaussianMixture::standard_normal(3);
        let x = dvector![0.3, -1.2, 2.0];
        let (s, j) = g.score_and_jacobian(&x);
        assert!((s + &x).amax() < 1e-14);
        assert!((j + DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        let g = bimodal(2.5);
        assert!(g.score(&dvector![0.0, 0.0]).amax() < 1e-15);
    }

    #[test]
    fn far_probe_stays_finite() {
        let g = bimodal(3.0);
        let x = dvector![400.0, -250.0];
        assert!(g.log_density(&x).is_finite());
        let (s, j) = g.score_and_jacobian(&x);
        assert!(s.iter().all(|v| v.is_finite()) && j.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_mixtures() {
        let bad_w = GaussianMixture::new(1, vec![(0.7, dvector![0.0], Covariance::Isotropic(1.0))]);
        assert!(bad_w.is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(FullCov::new(asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(FullCov::new(indef).is_err());
    }

    #[test]
    fn score_and_jacobian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..5 {
            let g = random_mixture(&mut rng, 3, 3);
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let (s, j) = g.score_and_jacobian(&x);
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.log_density(&xp) - g.log_density(&xm)) / (2.0 * h);
                assert!((fd - s[i]).abs() <= 1e-6 * s.norm().max(1.0));
                let fd_col = (g.score(&xp) - g.score(&xm)) / (2.0 * h);
                assert!((fd_col - j.column(i)).amax() <= 1e-6 * j.amax().max(1.0));
            }
            assert!((&j - j.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn third_derivative_matches_finite_difference_of_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_mixture(&mut rng, 2, 3);
        let x = dvector![0.4, -0.7];
        let v = dvector![1.3, -0.4];
        let t = g.score_jacobian_derivative(&x, &v);
        let h = 1e-5;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (g.score_jacobian(&xp) * &v - g.score_jacobian(&xm) * &v) / (2.0 * h);
            assert!((fd - t.column(i)).amax() < 1e-6 * t.amax().max(1.0), "{t}");
        }
    }

    #[test]
    fn diffuse_unit_gaussian_keeps_unit_variance() {
        let mu = dvector![1.0, -2.0];
        let g = GaussianMixture::new(2, vec![(1.0, mu.clone(), Covariance::Isotropic(1.0))]).unwrap();
        let d = g.diffuse(&lvl(0.8));
        let c = &d.components()[0];
        assert!((&c.mean - &mu * 0.8).amax() < 1e-15);
        assert!(matches!(c.cov, Covariance::Isotropic(v) if (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn diffusion_matches_empirical_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_mixture(&mut rng, 2, 2);
        let level = lvl(0.6);
        let d = g.diffuse(&level);
        let n = 100_000;
        let xs: Vec<DVector<f64>> = g
            .sample(n, &mut rng)
            .into_iter()
            .map(|x0| {
                let e = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                x0 * level.alpha + e * level.sigma
            })
            .collect();
        let mean_emp = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / n as f64;
        let analytic_mean = d.components().iter().fold(DVector::zeros(2), |a, c| a + &c.mean * c.weight);
        assert!((&mean_emp - &analytic_mean).amax() < 0.02);
        let cov_emp = xs.iter().fold(DMatrix::zeros(2, 2), |a, x| {
            let dx = x - &mean_emp;
            a + &dx * dx.transpose()
        }) / n as f64;
        let mut cov_an = DMatrix::zeros(2, 2);
        for c in d.components() {
            let dm = &c.mean - &analytic_mean;
            cov_an += (c.cov.to_matrix(2) + &dm * dm.transpose()) * c.weight;
        }
        assert!((cov_emp - cov_an).amax() < 0.03);
    }

    #[test]
    fn sampling_fractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GaussianMixture::new(
            1,
            vec![
                (0.9, dvector![0.0], Covariance::Isotropic(1.0)),
                (0.1, dvector![5.0], Covariance::Isotropic(1.0)),
            ],
        )
        .unwrap();
        let draws = g.sample_labeled(100_000, &mut rng);
        let frac = draws.iter().filter(|(k, _)| *k == 0).count() as f64 / 1e5;
        assert!((frac - 0.9).abs() < 0.01);
    }

    #[test]
    fn tweedie_conjugate_gaussian() {
        let mu = dvector![1.5, -0.5];
        let g = GaussianMixture::new(2, vec![(1.0, mu.clone(), Covariance::Isotropic(1.0))]).unwrap();
        let level = lvl(0.8);
        let x_t = dvector![0.2, 0.9];
        let (x0, j) = tweedie_denoise(&g, &level, &x_t);
        let expected = &x_t * level.alpha + &mu * level.sigma_sq();
        assert!((x0 - expected).amax() < 1e-14);
        assert!((j - DMatrix::identity(2, 2) * level.alpha).amax() < 1e-14);
    }

    #[test]
    fn tweedie_no_noise_limit() {
        let g = bimodal(2.0);
        let level = NoiseLevel { t: 1e-9, alpha: 1.0, sigma: 1e-7 };
        let x_t = dvector![0.7, 0.1];
        let (x0, _) = tweedie_denoise(&g, &level, &x_t);
        assert!((x0 - x_t).amax() < 1e-12);
    }

    #[test]
    fn bank_lookup_and_subset_rule() {
        let u = bimodal(3.0);
        let ok = GaussianMixture::new(2, vec![(1.0, dvector![3.0, 0.0], Covariance::Isotropic(1.0))]).unwrap();
        let bad = GaussianMixture::new(2, vec![(1.0, dvector![1.0, 0.0], Covariance::Isotropic(1.0))]).unwrap();
        let bank = PromptBank::new(u.clone(), BTreeMap::from([("right".to_string(), ok)])).unwrap();
        assert!(matches!(bank.mixture(Some("left")), Err(PriorError::UnknownPrompt(_))));
        assert!(PromptBank::new(u, BTreeMap::from([("x".to_string(), bad)])).is_err());
    }

    #[test]
    fn cfg_with_degenerate_bank_is_unconditional() {
        let u = bimodal(3.0);
        let bank = PromptBank::new(u.clone(), BTreeMap::from([("same".to_string(), u)])).unwrap();
        let level = lvl(0.7);
        let x = dvector![0.4, -1.0];
        let s_u = prior_score(&bank, None, &level, &x).unwrap();
        for gamma in [0.0, 1.0, 7.5] {
            let s = cfg_score(&bank, Some("same"), &level, &x, gamma).unwrap();
            assert!((s - &s_u).amax() < 1e-14);
        }
    }
}
