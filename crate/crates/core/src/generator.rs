//! Differentiable "renderer" stand-ins: particle clouds and a small
//! latent-to-output map, viewed through rigid transforms.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::{Activation, Mlp, MlpCache};
use crate::prior::GaussianMixture;
use crate::schedule::NoiseLevel;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("selector {index} out of range for {n} particles")]
    SelectorOutOfRange { index: usize, n: usize },
    #[error("selector kind does not match generator kind")]
    SelectorKind,
    #[error("view matrix is not orthogonal (max deviation {0:e})")]
    NotOrthogonal(f64),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("{0} is only available for particle generators")]
    Unsupported(&'static str),
    #[error("particle file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    dim: usize,
    theta: Vec<f64>,
}

impl ParticleCloud {
    pub fn from_points(points: &[DVector<f64>]) -> Result<Self, GeneratorError> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| GeneratorError::Dim("no particles".into()))?;
        if points.iter().any(|p| p.len() != dim) {
            return Err(GeneratorError::Dim("particles of mixed length".into()));
        }
        Ok(Self {
            dim,
            theta: points.iter().flat_map(|p| p.iter().copied()).collect(),
        })
    }

    pub fn gaussian_blob<R: Rng + ?Sized>(n: usize, mean: &DVector<f64>, std: f64, rng: &mut R) -> Self {
        let points: Vec<DVector<f64>> = (0..n)
            .map(|_| mean + DVector::from_fn(mean.len(), |_, _| std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::from_points(&points).expect("n >= 1")
    }

    /// Regular grid on `[-extent, extent]^dim`, filled row-major up to `n`.
    pub fn grid(n: usize, dim: usize, extent: f64) -> Self {
        let per_axis = (n as f64).powf(1.0 / dim as f64).ceil().max(1.0) as usize;
        let coord = |k: usize| {
            if per_axis == 1 {
                0.0
            } else {
                -extent + 2.0 * extent * k as f64 / (per_axis - 1) as f64
            }
        };
        let points: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let mut rem = i;
                DVector::from_fn(dim, |_, _| {
                    let k = rem % per_axis;
                    rem /= per_axis;
                    coord(k)
                })
            })
            .collect();
        Self::from_points(&points).expect("n >= 1")
    }

    pub fn n(&self) -> usize {
        self.theta.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.theta[i * self.dim..(i + 1) * self.dim])
    }

    pub fn points(&self) -> Vec<DVector<f64>> {
        (0..self.n()).map(|i| self.point(i)).collect()
    }
}

/// A two-layer map from `latent ‖ one-hot(view)` to the output space.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpMap {
    pub latent_dim: usize,
    pub n_views: usize,
    pub n_particles: usize,
    net: Mlp,
}

impl MlpMap {
    pub fn random<R: Rng + ?Sized>(
        latent_dim: usize,
        n_views: usize,
        hidden: usize,
        dim: usize,
        n_particles: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            latent_dim,
            n_views,
            n_particles,
            net: Mlp::random(&[latent_dim + n_views, hidden, dim], Activation::Tanh, rng),
        }
    }

    fn input(&self, latent: &DVector<f64>, view_index: usize) -> Vec<f64> {
        let mut v: Vec<f64> = latent.iter().copied().collect();
        v.extend((0..self.n_views).map(|k| if k == view_index { 1.0 } else { 0.0 }));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorState {
    Particles(ParticleCloud),
    MlpMap(MlpMap),
}

impl GeneratorState {
    pub fn dim(&self) -> usize {
        match self {
            GeneratorState::Particles(p) => p.dim,
            GeneratorState::MlpMap(m) => m.net.output_dim(),
        }
    }

    pub fn n_particles(&self) -> usize {
        match self {
            GeneratorState::Particles(p) => p.n(),
            GeneratorState::MlpMap(m) => m.n_particles,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            GeneratorState::Particles(p) => &p.theta,
            GeneratorState::MlpMap(m) => m.net.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            GeneratorState::Particles(p) => &mut p.theta,
            GeneratorState::MlpMap(m) => m.net.params_mut(),
        }
    }

    pub fn particles(&self) -> Option<&ParticleCloud> {
        match self {
            GeneratorState::Particles(p) => Some(p),
            GeneratorState::MlpMap(_) => None,
        }
    }
}

/// Rigid view map `x ↦ R x + b` paired with the view's prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTransform {
    pub name: String,
    pub prompt: Option<String>,
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl ViewTransform {
    pub fn new(
        name: impl Into<String>,
        prompt: Option<String>,
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
    ) -> Result<Self, GeneratorError> {
        let n = matrix.nrows();
        if !matrix.is_square() || offset.len() != n {
            return Err(GeneratorError::Dim("view matrix must be square and match offset".into()));
        }
        let dev = (matrix.transpose() * &matrix - DMatrix::identity(n, n)).amax();
        if dev > 1e-10 {
            return Err(GeneratorError::NotOrthogonal(dev));
        }
        Ok(Self {
            name: name.into(),
            prompt,
            matrix,
            offset,
        })
    }

    pub fn identity(dim: usize, prompt: Option<String>) -> Self {
        Self::new("identity", prompt, DMatrix::identity(dim, dim), DVector::zeros(dim)).expect("identity")
    }

    /// Planar rotation by `angle` radians (dim 2 only).
    pub fn rotation_2d(name: impl Into<String>, prompt: Option<String>, angle: f64, offset: DVector<f64>) -> Result<Self, GeneratorError> {
        let (s, c) = angle.sin_cos();
        Self::new(name, prompt, DMatrix::from_row_slice(2, 2, &[c, -s, s, c]), offset)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }
}

#[derive(Debug, Clone)]
pub enum Selector {
    Index(usize),
    Latent(DVector<f64>),
}

/// Vector-Jacobian product `vᵀ ∂x₀/∂θ` for one render.
#[derive(Debug, Clone)]
pub enum Pullback {
    Particle { index: usize, matrix: DMatrix<f64> },
    Mlp { cache: MlpCache, matrix: DMatrix<f64> },
}

impl Pullback {
    /// Adds `scale · (∂x₀/∂θ)ᵀ v` into `grad`.
    pub fn accumulate(&self, state: &GeneratorState, v: &DVector<f64>, scale: f64, grad: &mut [f64]) {
        match (self, state) {
            (Pullback::Particle { index, matrix }, GeneratorState::Particles(p)) => {
                let back = matrix.transpose() * v;
                let slot = &mut grad[index * p.dim..(index + 1) * p.dim];
                for (g, b) in slot.iter_mut().zip(back.iter()) {
                    *g += scale * b;
                }
            }
            (Pullback::Mlp { cache, matrix }, GeneratorState::MlpMap(m)) => {
                let back: Vec<f64> = (matrix.transpose() * v * scale).iter().copied().collect();
                m.net.backward(cache, &back, grad, None);
            }
            _ => panic!("pullback applied to a different generator kind"),
        }
    }

    pub fn apply(&self, state: &GeneratorState, v: &DVector<f64>) -> Vec<f64> {
        let mut g = vec![0.0; state.params().len()];
        self.accumulate(state, v, 1.0, &mut g);
        g
    }
}

pub fn render(
    state: &GeneratorState,
    view: &ViewTransform,
    view_index: usize,
    selector: &Selector,
) -> Result<(DVector<f64>, Pullback), GeneratorError> {
    match (state, selector) {
        (GeneratorState::Particles(p), Selector::Index(i)) => {
            if *i >= p.n() {
                return Err(GeneratorError::SelectorOutOfRange { index: *i, n: p.n() });
            }
            let x0 = view.apply(&p.point(*i));
            Ok((
                x0,
                Pullback::Particle {
                    index: *i,
                    matrix: view.matrix.clone(),
                },
            ))
        }
        (GeneratorState::MlpMap(m), Selector::Latent(z)) => {
            if z.len() != m.latent_dim {
                return Err(GeneratorError::Dim(format!("latent has length {}, expected {}", z.len(), m.latent_dim)));
            }
            let cache = m.net.forward_cached(&m.input(z, view_index));
            let raw = DVector::from_column_slice(cache.output());
            Ok((
                view.apply(&raw),
                Pullback::Mlp {
                    cache,
                    matrix: view.matrix.clone(),
                },
            ))
        }
        _ => Err(GeneratorError::SelectorKind),
    }
}

/// `x_t = α x₀ + σ ε` and the conditional score `∇ log q_t(x_t|x₀) = -ε/σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub x_t: DVector<f64>,
    pub cond_score: DVector<f64>,
}

pub fn perturb(x0: &DVector<f64>, level: &NoiseLevel, eps: &DVector<f64>) -> Perturbed {
    Perturbed {
        x_t: x0 * level.alpha + eps * level.sigma,
        cond_score: -eps / level.sigma,
    }
}

/// The generator's own diffused distribution under `view`: equal-weight
/// components `N(α (R θᵢ + b), σ² I)`.
pub fn empirical_mixture(
    state: &GeneratorState,
    view: &ViewTransform,
    level: &NoiseLevel,
) -> Result<GaussianMixture, GeneratorError> {
    let cloud = state.particles().ok_or(GeneratorError::Unsupported("empirical noisy score"))?;
    let means: Vec<DVector<f64>> = cloud.points().iter().map(|p| view.apply(p) * level.alpha).collect();
    GaussianMixture::isotropic_equal(means, level.sigma_sq()).map_err(|e| GeneratorError::Dim(e.to_string()))
}

pub fn empirical_noisy_score(
    state: &GeneratorState,
    view: &ViewTransform,
    level: &NoiseLevel,
    x_t: &DVector<f64>,
) -> Result<DVector<f64>, GeneratorError> {
    Ok(empirical_mixture(state, view, level)?.score(x_t))
}

/// Renders of every particle (or of fixed latents for map generators).
pub fn rendered_points(
    state: &GeneratorState,
    view: &ViewTransform,
    view_index: usize,
    latents: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    match state {
        GeneratorState::Particles(p) => p.points().iter().map(|x| view.apply(x)).collect(),
        GeneratorState::MlpMap(_) => latents
            .iter()
            .map(|z| render(state, view, view_index, &Selector::Latent(z.clone())).expect("latent dim").0)
            .collect(),
    }
}

pub fn write_particles_csv(path: &Path, points: &[DVector<f64>]) -> Result<(), GeneratorError> {
    let io = |e: csv::Error| GeneratorError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let dim = points.first().map(|p| p.len()).unwrap_or(0);
    let mut header = vec!["index".to_string()];
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(io)?;
    for (i, p) in points.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| GeneratorError::Io(e.to_string()))
}

pub fn read_particles_csv(path: &Path) -> Result<Vec<DVector<f64>>, GeneratorError> {
    let io = |e: csv::Error| GeneratorError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let coords: Result<Vec<f64>, _> = rec.iter().skip(1).map(|f| f.trim().parse::<f64>()).collect();
        let coords = coords.map_err(|e| GeneratorError::Io(format!("{}: {e}", path.display())))?;
        out.push(DVector::from_vec(coords));
    }
    Ok(out)
}
