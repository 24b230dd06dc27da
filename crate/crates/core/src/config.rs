//! TOML experiment configuration: parsing with key diagnostics, dotted-path
//! overrides, materialized defaults and construction of an [`Experiment`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{Experiment, TrainConfig};
use crate::fake_score::{DsmConfig, FakeScore, ScoreNet};
use crate::generator::{read_particles_csv, GeneratorState, MlpMap, ParticleCloud, ViewTransform};
use crate::objectives::{FakeSource, ObjectiveSpec};
use crate::optim::OptimizerKind;
use crate::prior::{Covariance, FullCov, GaussianMixture, PromptBank};
use crate::reward::RewardModel;
use crate::schedule::{NoiseSchedule, ScheduleKind, TimeStrategy, TimeWeighting};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {message}", location(.key, .line))]
    Parse {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("override `{0}`: {1}")]
    Override(String, String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn location(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!("line {l}, key `{k}`"),
        (Some(k), None) => format!("key `{k}`"),
        (None, Some(l)) => format!("line {l}"),
        (None, None) => "config".to_string(),
    }
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_strategy: TimeStrategy,
    /// Final window width above `t_min` for `annealed_linear`.
    pub anneal_window: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            kind: s.kind,
            t_min: s.t_min,
            t_max: s.t_max,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            t_strategy: TimeStrategy::Uniform,
            anneal_window: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        let s = NoiseSchedule {
            kind: self.kind,
            t_min: self.t_min,
            t_max: self.t_max,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        };
        s.validate().map_err(invalid)?;
        if !(self.anneal_window >= 0.0) {
            return Err(invalid("schedule.anneal_window must be >= 0"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovConfig {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: CovConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub components: Vec<ComponentConfig>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(invalid(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.iter().flatten().copied()))
}

impl MixtureConfig {
    fn build(&self, dim: usize, what: &str) -> Result<GaussianMixture, ConfigError> {
        let parts = self
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let cov = match &c.cov {
                    CovConfig::Scalar(v) => Covariance::Isotropic(*v),
                    CovConfig::Matrix(rows) => {
                        let m = matrix_from_rows(rows, &format!("{what}.components.{k}.cov"))?;
                        Covariance::Full(FullCov::new(m).map_err(|e| invalid(format!("{what}.components.{k}.cov: {e}")))?)
                    }
                };
                Ok((c.weight, DVector::from_vec(c.mean.clone()), cov))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        GaussianMixture::new(dim, parts).map_err(|e| invalid(format!("{what}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub dim: usize,
    pub unconditional: MixtureConfig,
    pub conditional: BTreeMap<String, MixtureConfig>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let comp = |x: f64| ComponentConfig { weight: 0.5, mean: vec![x, 0.0], cov: CovConfig::Scalar(1.0) };
        Self {
            dim: 2,
            unconditional: MixtureConfig { components: vec![comp(3.0), comp(-3.0)] },
            conditional: BTreeMap::new(),
        }
    }
}

impl PriorConfig {
    pub fn bank(&self) -> Result<PromptBank, ConfigError> {
        let unconditional = self.unconditional.build(self.dim, "prior.unconditional")?;
        let conditional = self
            .conditional
            .iter()
            .map(|(name, m)| Ok((name.clone(), m.build(self.dim, &format!("prior.conditional.{name}"))?)))
            .collect::<Result<BTreeMap<_, _>, ConfigError>>()?;
        PromptBank::new(unconditional, conditional).map_err(invalid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Particles,
    MlpMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    GaussianBlob {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        std: f64,
    },
    Grid {
        extent: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Planar rotation angle in radians (dim 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub n_particles: usize,
    /// Map generators only.
    pub latent_dim: usize,
    pub hidden: usize,
    pub init: InitConfig,
    pub views: Vec<ViewConfig>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Particles,
            n_particles: 64,
            latent_dim: 2,
            hidden: 32,
            init: InitConfig::GaussianBlob { mean: None, std: 0.5 },
            views: vec![ViewConfig { name: "front".into(), prompt: None, rotation: None, matrix: None, offset: None }],
        }
    }
}

impl ViewConfig {
    fn build(&self, dim: usize) -> Result<ViewTransform, ConfigError> {
        let offset = DVector::from_vec(self.offset.clone().unwrap_or_else(|| vec![0.0; dim]));
        let err = |e| invalid(format!("view `{}`: {e}", self.name));
        match (self.rotation, &self.matrix) {
            (Some(_), Some(_)) => Err(invalid(format!("view `{}`: give rotation or matrix, not both", self.name))),
            (Some(angle), None) => {
                if dim != 2 {
                    return Err(invalid(format!("view `{}`: rotation angle needs dim 2", self.name)));
                }
                ViewTransform::rotation_2d(self.name.clone(), self.prompt.clone(), angle, offset).map_err(err)
            }
            (None, Some(rows)) => ViewTransform::new(
                self.name.clone(),
                self.prompt.clone(),
                matrix_from_rows(rows, &format!("view `{}` matrix", self.name))?,
                offset,
            )
            .map_err(err),
            (None, None) => ViewTransform::new(self.name.clone(), self.prompt.clone(), DMatrix::identity(dim, dim), offset).map_err(err),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FakeScoreConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub updates_per_step: usize,
    pub warmup_steps: usize,
    pub lambda_kind: TimeWeighting,
    pub t_freqs: usize,
    pub optimizer: OptimizerKind,
    pub lr_decay: f64,
}

impl Default for FakeScoreConfig {
    fn default() -> Self {
        let d = DsmConfig::default();
        Self {
            hidden: vec![64, 64],
            lr: d.lr,
            batch: d.batch,
            updates_per_step: d.updates_per_step,
            warmup_steps: 500,
            lambda_kind: d.lambda,
            t_freqs: 4,
            optimizer: d.optimizer,
            lr_decay: d.lr_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    None,
    Quadratic,
    InnerProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub f: Vec<Vec<f64>>,
    pub h: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub scale: f64,
    pub targets: BTreeMap<String, Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingConfig>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { kind: RewardKind::None, scale: 1.0, targets: BTreeMap::new(), embedding: None }
    }
}

impl RewardConfig {
    pub fn model(&self, dim: usize) -> Result<Option<RewardModel>, ConfigError> {
        match self.kind {
            RewardKind::None => Ok(None),
            RewardKind::Quadratic => {
                if self.targets.is_empty() {
                    return Err(invalid("reward.targets needs at least one prompt (or `default`)"));
                }
                if let Some((k, _)) = self.targets.iter().find(|(_, v)| v.len() != dim) {
                    return Err(invalid(format!("reward.targets.{k} must have length {dim}")));
                }
                let targets = self.targets.iter().map(|(k, v)| (k.clone(), DVector::from_vec(v.clone()))).collect();
                Ok(Some(RewardModel::quadratic(self.scale, targets).map_err(invalid)?))
            }
            RewardKind::InnerProduct => {
                let e = self.embedding.as_ref().ok_or_else(|| invalid("reward.embedding is required for inner_product"))?;
                let f = matrix_from_rows(&e.f, "reward.embedding.f")?;
                if f.ncols() != dim {
                    return Err(invalid(format!("reward.embedding.f must have {dim} columns")));
                }
                let h = e.h.iter().map(|(k, v)| (k.clone(), DVector::from_vec(v.clone()))).collect();
                Ok(Some(RewardModel::inner_product(f, h).map_err(invalid)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Negates every score-divergence cotangent.
    FlipSimSign,
    /// Uses a different guidance scale on the direct SDS path.
    PerturbGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub prior: PriorConfig,
    pub generator: GeneratorConfig,
    pub fake_score: FakeScoreConfig,
    pub reward: RewardConfig,
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: Option<&str>, e: serde_path_to_error::Error<toml::de::Error>) -> ConfigError {
    let path = e.path().to_string();
    let inner = e.into_inner();
    ConfigError::Parse {
        key: (path != ".").then_some(path),
        line: text.zip(inner.span()).map(|(t, s)| line_of(t, s.start)),
        message: inner.message().to_string(),
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.into(), "expected key=value".into()))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Parses a scalar override as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated; numeric segments index arrays, 0-based).
pub fn apply_override(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::Override(path.into(), m.into());
    let segs: Vec<&str> = path.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(err("empty key segment"));
    }
    let (last, parents) = segs.split_last().expect("non-empty");
    let mut cur: &mut toml::Value = root
        .entry(segs[0].to_string())
        .or_insert_with(|| toml::Value::Table(Default::default()));
    if parents.is_empty() {
        *cur = value;
        return Ok(());
    }
    for seg in &parents[1..] {
        cur = step_into(cur, seg).ok_or_else(|| err(&format!("cannot descend into `{seg}`")))?;
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| err("array index must be an integer"))?;
            let n = a.len();
            *a.get_mut(i).ok_or_else(|| err(&format!("index {i} out of range for length {n}")))? = value;
        }
        _ => return Err(err("parent is not a table or array")),
    }
    Ok(())
}

fn step_into<'a>(v: &'a mut toml::Value, seg: &str) -> Option<&'a mut toml::Value> {
    match v {
        toml::Value::Table(t) => Some(t.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(Default::default()))),
        toml::Value::Array(a) => a.get_mut(seg.parse::<usize>().ok()?),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Parses `text`, then applies `overrides` in order. Overrides inside
    /// `objective.alpha` start from the effective `[1 + γ, γ, λ]`.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let direct: Result<Self, _> = toml::Deserializer::parse(text)
            .map_err(|e| ConfigError::Parse {
                key: None,
                line: e.span().map(|s| line_of(text, s.start)),
                message: e.message().to_string(),
            })
            .and_then(|de| serde_path_to_error::deserialize(de).map_err(|e| parse_error(Some(text), e)));
        let cfg = direct?;
        if overrides.is_empty() {
            cfg.validate()?;
            return Ok(cfg);
        }
        let mut table: toml::Table = toml::from_str(&cfg.to_toml()).map_err(invalid)?;
        for (k, v) in overrides {
            if k.starts_with("objective.alpha.") && cfg.objective.alpha.is_none() {
                let a = cfg.objective.effective_alpha();
                apply_override(&mut table, "objective.alpha", toml::Value::Array(a.iter().map(|x| toml::Value::Float(*x)).collect()))?;
            }
            apply_override(&mut table, k, parse_value(v))?;
        }
        let cfg: Self = serde_path_to_error::deserialize(table).map_err(|e| parse_error(None, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.into(), message: e.to_string() })?;
        Self::from_toml_str(&text, overrides)
    }

    /// Cheap structural checks; `build` does the rest.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.schedule.schedule()?;
        self.objective.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        let bank = self.prior.bank()?;
        if self.generator.views.is_empty() {
            return Err(invalid("generator.views must not be empty"));
        }
        for v in &self.generator.views {
            v.build(self.prior.dim)?;
            if let Some(p) = &v.prompt {
                bank.mixture(Some(p)).map_err(|e| invalid(format!("view `{}`: {e}", v.name)))?;
            }
        }
        if self.generator.n_particles == 0 {
            return Err(invalid("generator.n_particles must be >= 1"));
        }
        self.reward.model(self.prior.dim)?;
        Ok(())
    }

    /// The materialized config, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Builds every component; relative file paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Experiment, ConfigError> {
        self.validate()?;
        let dim = self.prior.dim;
        let schedule = self.schedule.schedule()?;
        let bank = self.prior.bank()?;
        let views = self.generator.views.iter().map(|v| v.build(dim)).collect::<Result<Vec<_>, _>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let g = &self.generator;
        let (state, probe_latents) = match g.kind {
            GeneratorKind::Particles => {
                let cloud = match &g.init {
                    InitConfig::GaussianBlob { mean, std } => {
                        let mean = DVector::from_vec(mean.clone().unwrap_or_else(|| vec![0.0; dim]));
                        if mean.len() != dim {
                            return Err(invalid(format!("generator.init mean must have length {dim}")));
                        }
                        ParticleCloud::gaussian_blob(g.n_particles, &mean, *std, &mut rng)
                    }
                    InitConfig::Grid { extent } => ParticleCloud::grid(g.n_particles, dim, *extent),
                    InitConfig::File { path } => {
                        let p = base_dir.join(path);
                        let pts = read_particles_csv(&p).map_err(invalid)?;
                        if pts.iter().any(|x| x.len() != dim) {
                            return Err(invalid(format!("{}: particles must have dim {dim}", p.display())));
                        }
                        ParticleCloud::from_points(&pts).map_err(invalid)?
                    }
                };
                (GeneratorState::Particles(cloud), Vec::new())
            }
            GeneratorKind::MlpMap => {
                let map = MlpMap::random(g.latent_dim, views.len(), g.hidden, dim, g.n_particles, &mut rng);
                let latents = (0..g.n_particles)
                    .map(|_| DVector::from_fn(g.latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                (GeneratorState::MlpMap(map), latents)
            }
        };
        let fake = match self.objective.fake_source {
            FakeSource::Analytic => None,
            FakeSource::Learned => {
                let f = &self.fake_score;
                let cfg = DsmConfig {
                    lambda: f.lambda_kind,
                    batch: f.batch,
                    lr: f.lr,
                    optimizer: f.optimizer,
                    updates_per_step: f.updates_per_step,
                    lr_decay: f.lr_decay,
                };
                cfg.validate().map_err(invalid)?;
                Some(FakeScore::new(ScoreNet::new(dim, views.len(), &f.hidden, f.t_freqs, &mut rng), cfg))
            }
        };
        if matches!(g.kind, GeneratorKind::MlpMap) && fake.is_none() && self.objective.family == crate::objectives::Family::Sim {
            return Err(invalid("map generators need objective.fake_source = \"learned\" for the score-divergence family"));
        }
        Ok(Experiment {
            schedule,
            t_strategy: self.schedule.t_strategy,
            anneal_window: self.schedule.anneal_window,
            bank,
            reward: self.reward.model(dim)?,
            state,
            views,
            objective: self.objective.clone(),
            train: self.train.clone(),
            fake,
            fake_warmup_steps: self.fake_score.warmup_steps,
            noise_map: None,
            probe_latents,
            config_hash: self.hash(),
        })
    }
}
