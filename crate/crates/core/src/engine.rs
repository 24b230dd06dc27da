//! The training loop, diagnostics and run outputs.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fake_score::{FakeScore, FakeScoreError};
use crate::generator::{empirical_mixture, render, rendered_points, write_particles_csv, GeneratorError, GeneratorState, Selector, ViewTransform};
use crate::objectives::{
    divergence_estimate, grad_dive3d_blocks, grad_kl_unified, Blocks, FakeEval, Family, McEstimate, ObjectiveError, ObjectiveSpec,
    StepSample, Targets,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::plot::scatter_svg;
use crate::prior::{GaussianMixture, PromptBank};
use crate::reward::{RewardModel, DEFAULT_PROMPT};
use crate::schedule::{NoiseSchedule, TimeStrategy};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("step {step}: non-finite gradient; sample: {sample}")]
    NonFinite { step: usize, sample: String },
    #[error("step {step}: {source}")]
    Objective { step: usize, source: ObjectiveError },
    #[error("step {step}: {source}")]
    FakeScore { step: usize, source: FakeScoreError },
    #[error("step {step}: {source}")]
    Generator { step: usize, source: GeneratorError },
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("writing outputs: {0}")]
    Io(String),
}

impl EngineError {
    /// Step at which a runtime abort happened.
    pub fn step(&self) -> Option<usize> {
        match self {
            EngineError::NonFinite { step, .. }
            | EngineError::Objective { step, .. }
            | EngineError::FakeScore { step, .. }
            | EngineError::Generator { step, .. } => Some(*step),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_theta: f64,
    pub optimizer_theta: OptimizerKind,
    pub batch_per_step: usize,
    pub seed: u64,
    pub snapshot_every: usize,
    /// Draws per divergence estimate at snapshots; 0 disables.
    pub divergence_mc: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr_theta: 5e-3,
            optimizer_theta: OptimizerKind::default(),
            batch_per_step: 8,
            seed: 0,
            snapshot_every: 500,
            divergence_mc: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.steps < 1 {
            return Err(EngineError::Invalid("steps must be >= 1".into()));
        }
        if !(self.lr_theta >= 0.0) {
            return Err(EngineError::Invalid(format!("lr_theta must be >= 0, got {}", self.lr_theta)));
        }
        if self.batch_per_step < 1 {
            return Err(EngineError::Invalid("batch_per_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, fully built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub schedule: NoiseSchedule,
    pub t_strategy: TimeStrategy,
    pub anneal_window: f64,
    pub bank: PromptBank,
    pub reward: Option<RewardModel>,
    pub state: GeneratorState,
    pub views: Vec<ViewTransform>,
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
    /// Present when the fake score is learned.
    pub fake: Option<FakeScore>,
    pub fake_warmup_steps: usize,
    /// Applied to every ε draw (`ε ← M ε`); used for symmetry checks.
    pub noise_map: Option<DMatrix<f64>>,
    /// Fixed latents rendered for diagnostics of map generators.
    pub probe_latents: Vec<DVector<f64>>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub t_mean: f64,
    /// Mean surrogate value (score-divergence family only).
    pub loss: Option<f64>,
    pub grad_norm: f64,
    pub dsm_loss: Option<f64>,
    pub entropy: f64,
    pub divergence: Option<f64>,
    pub mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coverage {
    pub histogram: Vec<usize>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub step: usize,
    pub particles: Vec<Vec<f64>>,
    pub histogram: Vec<usize>,
    pub entropy: f64,
    pub divergence: Option<McEstimate>,
    pub dsm_loss: Option<f64>,
    pub mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub snapshots: Vec<Snapshot>,
    pub final_entropy: f64,
    pub final_divergence: Option<f64>,
    pub final_mean_reward: Option<f64>,
    pub wall_time_s: f64,
}

/// Assigns each point to its most responsible component of `target_t0`
/// diffused to `t_min` (evaluated at `α x`); ties go to the lowest index.
pub fn mode_coverage(points: &[DVector<f64>], target_t0: &GaussianMixture, sched: &NoiseSchedule) -> Coverage {
    let level = sched.level(sched.t_min).expect("t_min is in range");
    let diffused = target_t0.diffuse(&level);
    let mut histogram = vec![0; target_t0.len()];
    for p in points {
        let r = diffused.responsibilities(&(p * level.alpha));
        let mut best = 0;
        for (k, v) in r.iter().enumerate() {
            if *v > r[best] {
                best = k;
            }
        }
        histogram[best] += 1;
    }
    Coverage { entropy: histogram_entropy(&histogram), histogram }
}

/// Shannon entropy (nats) of a count histogram.
pub fn histogram_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = histogram
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

pub struct Engine {
    pub exp: Experiment,
    rng: ChaCha8Rng,
    opt: Optimizer,
    step: usize,
}

fn std_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

impl Engine {
    pub fn new(exp: Experiment) -> Result<Self, EngineError> {
        exp.train.validate()?;
        exp.objective.validate().map_err(|e| EngineError::Invalid(e.to_string()))?;
        if exp.views.is_empty() {
            return Err(EngineError::Invalid("at least one view is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(exp.train.seed);
        rng.set_stream(1);
        let opt = Optimizer::new(exp.train.optimizer_theta, exp.train.lr_theta, exp.state.params().len());
        Ok(Self { exp, rng, opt, step: 0 })
    }

    pub fn state(&self) -> &GeneratorState {
        &self.exp.state
    }

    /// Renders under the first view: particle positions or probe latents.
    pub fn points(&self) -> Vec<DVector<f64>> {
        rendered_points(&self.exp.state, &self.exp.views[0], 0, &self.exp.probe_latents)
    }

    pub fn coverage(&self) -> Coverage {
        mode_coverage(&self.points(), &self.exp.bank.unconditional, &self.exp.schedule)
    }

    pub fn mean_reward(&self) -> Option<f64> {
        let r = self.exp.reward.as_ref()?;
        let prompt = self.exp.views[0].prompt.as_deref().unwrap_or(DEFAULT_PROMPT);
        let pts = self.points();
        let total: f64 = pts.iter().map(|p| r.value(prompt, p).unwrap_or(f64::NAN)).sum();
        Some(total / pts.len() as f64)
    }

    /// Pre-trains the fake score on the initial generator.
    pub fn warmup(&mut self) -> Result<Option<f64>, EngineError> {
        let Some(fake) = self.exp.fake.as_mut() else {
            return Ok(None);
        };
        let mut last = None;
        for _ in 0..self.exp.fake_warmup_steps {
            let l = fake
                .dsm_update(&self.exp.state, &self.exp.views, &self.exp.schedule, self.exp.noise_map.as_ref(), &mut self.rng)
                .map_err(|source| EngineError::FakeScore { step: 0, source })?;
            last = Some(l);
        }
        Ok(last)
    }

    /// One optimizer step on θ followed by the fake-score update.
    pub fn run_step(&mut self) -> Result<StepStats, EngineError> {
        let step = self.step;
        let exp = &self.exp;
        let rng = &mut self.rng;
        let dim = exp.state.dim();
        let targets = Targets { bank: &exp.bank, reward: exp.reward.as_ref() };
        let spec = &exp.objective;
        let mut grad = vec![0.0; exp.state.params().len()];
        let scale = 1.0 / exp.train.batch_per_step as f64;
        let mut loss = 0.0;
        let mut t_sum = 0.0;
        let mut n_t = 0usize;
        let obj_err = |source| EngineError::Objective { step, source };
        for _ in 0..exp.train.batch_per_step {
            let view = rng.random_range(0..exp.views.len());
            let selector = match &exp.state {
                GeneratorState::Particles(p) => Selector::Index(rng.random_range(0..p.n())),
                GeneratorState::MlpMap(m) => Selector::Latent(std_normal(m.latent_dim, rng)),
            };
            let vt = &exp.views[view];
            let (x0, pullback) =
                render(&exp.state, vt, view, &selector).map_err(|source| EngineError::Generator { step, source })?;
            let blocks: Vec<Blocks> = match (spec.family, spec.independent_draws) {
                (Family::Sim, true) => (0..3).filter(|b| spec.effective_alpha()[*b] != 0.0).map(Blocks::Only).collect(),
                _ => vec![Blocks::All],
            };
            for block in blocks {
                let t = exp.schedule.sample_t(exp.t_strategy, exp.anneal_window, step, exp.train.steps, rng);
                let level = exp.schedule.level(t).expect("sampled in range");
                t_sum += t;
                n_t += 1;
                let mut eps = std_normal(dim, rng);
                if let Some(m) = &exp.noise_map {
                    eps = m * eps;
                }
                let fake = match (spec.family, &exp.fake) {
                    (Family::Kl, _) => None,
                    (Family::Sim, Some(f)) => Some(FakeEval::Learned { net: &f.net, view }),
                    (Family::Sim, None) => Some(FakeEval::Analytic(
                        empirical_mixture(&exp.state, vt, &level).map_err(|source| EngineError::Generator { step, source })?,
                    )),
                };
                let sample = StepSample::evaluate(
                    &targets,
                    vt.prompt.as_deref(),
                    spec,
                    fake.as_ref(),
                    view,
                    selector.clone(),
                    level,
                    eps,
                    x0.clone(),
                )
                .map_err(obj_err)?;
                let cot = match spec.family {
                    Family::Kl => grad_kl_unified(&sample, spec),
                    Family::Sim => {
                        let (l, c) = grad_dive3d_blocks(&sample, spec, block);
                        loss += l;
                        c
                    }
                };
                if cot.iter().any(|v| !v.is_finite()) {
                    return Err(EngineError::NonFinite { step, sample: format!("{sample:?}") });
                }
                pullback.accumulate(&exp.state, &cot, scale, &mut grad);
            }
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(EngineError::NonFinite { step, sample: "accumulated gradient".into() });
        }
        self.opt.step(self.exp.state.params_mut(), &grad);
        let dsm_loss = match self.exp.fake.as_mut() {
            Some(f) => Some(
                f.dsm_update(&self.exp.state, &self.exp.views, &self.exp.schedule, self.exp.noise_map.as_ref(), &mut self.rng)
                    .map_err(|source| EngineError::FakeScore { step, source })?,
            ),
            None => None,
        };
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            t_mean: t_sum / n_t as f64,
            loss: (self.exp.objective.family == Family::Sim).then_some(loss * scale),
            grad_norm,
            dsm_loss,
            entropy: self.coverage().entropy,
            divergence: None,
            mean_reward: self.mean_reward(),
        })
    }

    /// Divergence of the generator (first view) from the unconditional prior.
    pub fn divergence(&mut self) -> Option<McEstimate> {
        if self.exp.train.divergence_mc == 0 || self.exp.state.particles().is_none() {
            return None;
        }
        divergence_estimate(
            &self.exp.state,
            &self.exp.views[0],
            &self.exp.bank.unconditional,
            &self.exp.objective,
            &self.exp.schedule,
            self.exp.train.divergence_mc,
            &mut self.rng,
        )
        .ok()
    }

    fn snapshot(&mut self, dsm_loss: Option<f64>) -> Snapshot {
        let cov = self.coverage();
        Snapshot {
            step: self.step,
            particles: self.points().iter().map(|p| p.iter().copied().collect()).collect(),
            histogram: cov.histogram,
            entropy: cov.entropy,
            divergence: self.divergence(),
            dsm_loss,
            mean_reward: self.mean_reward(),
        }
    }
}

fn io<E: std::fmt::Display>(e: E) -> EngineError {
    EngineError::Io(e.to_string())
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Runs the full loop. With `out_dir`, writes `report.json`, `trace.csv`,
/// `particles_<step>.csv` per snapshot and, in 2-D, `frames/<step>.svg`.
pub fn run_experiment(exp: Experiment, out_dir: Option<&Path>) -> Result<RunReport, EngineError> {
    let started = Instant::now();
    let mut engine = Engine::new(exp)?;
    let steps = engine.exp.train.steps;
    let every = engine.exp.train.snapshot_every;
    let two_d = engine.exp.state.dim() == 2;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io)?;
        if two_d {
            fs::create_dir_all(dir.join("frames")).map_err(io)?;
        }
    }
    let warm = engine.warmup()?;
    let mut trace = csv::Writer::from_writer(Vec::new());
    trace
        .write_record(["step", "t_mean", "loss", "grad_norm", "dsm_loss", "entropy", "divergence", "mean_reward"])
        .map_err(io)?;
    let mut snapshots = vec![engine.snapshot(warm)];
    let emit = |engine: &Engine, snap: &Snapshot| -> Result<(), EngineError> {
        if let Some(dir) = out_dir {
            let pts = engine.points();
            write_particles_csv(&dir.join(format!("particles_{}.csv", snap.step)), &pts).map_err(io)?;
            if two_d {
                let svg = scatter_svg(&engine.exp.bank.unconditional, &pts, &format!("step {}", snap.step));
                fs::write(dir.join("frames").join(format!("{}.svg", snap.step)), svg).map_err(io)?;
            }
        }
        Ok(())
    };
    emit(&engine, &snapshots[0])?;
    for _ in 0..steps {
        let mut stats = engine.run_step()?;
        if (every > 0 && stats.step % every == 0) || stats.step == steps {
            let snap = engine.snapshot(stats.dsm_loss);
            stats.divergence = snap.divergence.map(|d| d.mean);
            emit(&engine, &snap)?;
            snapshots.push(snap);
        }
        trace
            .write_record([
                stats.step.to_string(),
                format!("{:?}", stats.t_mean),
                opt_field(stats.loss),
                format!("{:?}", stats.grad_norm),
                opt_field(stats.dsm_loss),
                format!("{:?}", stats.entropy),
                opt_field(stats.divergence),
                opt_field(stats.mean_reward),
            ])
            .map_err(io)?;
    }
    let last = snapshots.last().expect("at least the initial snapshot");
    let report = RunReport {
        seed: engine.exp.train.seed,
        config_hash: engine.exp.config_hash.clone(),
        steps,
        final_entropy: last.entropy,
        final_divergence: last.divergence.map(|d| d.mean),
        final_mean_reward: last.mean_reward,
        snapshots,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("trace.csv"), trace.into_inner().map_err(io)?).map_err(io)?;
        let json = serde_json::to_string_pretty(&report).map_err(io)?;
        fs::write(dir.join("report.json"), json + "\n").map_err(io)?;
    }
    Ok(report)
}
