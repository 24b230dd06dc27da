use std::collections::BTreeMap;
use std::path::Path;

use dive_desk::config::ExperimentConfig;
use dive_desk::engine::{run_experiment, Engine, Experiment};
use dive_desk::generator::{GeneratorState, ParticleCloud, Selector, ViewTransform};
use dive_desk::objectives::{grad_dive3d, Family, FakeEval, ObjectiveSpec, StepSample, Targets};
use dive_desk::prior::{GaussianMixture, PromptBank};
use dive_desk::schedule::{NoiseLevel, NoiseSchedule, ScheduleKind};
use nalgebra::{dvector, DMatrix, DVector};

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn experiment(name: &str, overrides: &[(&str, &str)]) -> Experiment {
    let ov: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    ExperimentConfig::load(&configs().join(name), &ov).unwrap().build(configs()).unwrap()
}

fn particles(exp: &Experiment) -> Vec<DVector<f64>> {
    exp.state.particles().unwrap().points()
}

fn run_to_end(exp: Experiment) -> Vec<DVector<f64>> {
    let steps = exp.train.steps;
    let mut engine = Engine::new(exp).unwrap();
    engine.warmup().unwrap();
    for _ in 0..steps {
        engine.run_step().unwrap();
    }
    engine.state().particles().unwrap().points()
}

/// Mirrored init plus `ε ← Mε` must give the mirrored trajectory. The view
/// carries no prompt so the target is the symmetric unconditional prior.
fn mirror_gap(name: &str, extra: &[(&str, &str)]) -> f64 {
    let mut ov = vec![("train.steps", "400"), ("train.divergence_mc", "0")];
    ov.extend_from_slice(extra);
    let mut a = experiment(name, &ov);
    a.views = vec![ViewTransform::identity(2, None)];
    let flip = DMatrix::from_diagonal(&dvector![-1.0, 1.0]);
    let mirrored: Vec<DVector<f64>> = particles(&a).iter().map(|p| &flip * p).collect();
    let mut b = a.clone();
    b.state = GeneratorState::Particles(ParticleCloud::from_points(&mirrored).unwrap());
    b.noise_map = Some(flip.clone());
    let fa = run_to_end(a);
    let fb = run_to_end(b);
    fa.iter().zip(&fb).map(|(p, q)| (&flip * p - q).amax()).fold(0.0, f64::max)
}

#[test]
fn mirror_symmetry_holds_for_both_families() {
    for (name, extra) in [
        ("bimodal_dive3d.toml", vec![]),
        ("bimodal_sds.toml", vec![]),
        ("bimodal_dive3d.toml", vec![("objective.distance", "\"pseudo_huber\"")]),
    ] {
        let gap = mirror_gap(name, &extra);
        assert!(gap <= 1e-10, "{name} {extra:?}: {gap:e}");
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn entropy_ordering_sds_cdp_dive3d() {
    let seeds = ["0", "1", "2", "3", "4"];
    let run = |name: &str, extra: &[(&str, &str)]| {
        median(
            seeds
                .iter()
                .map(|s| {
                    let mut ov = vec![("train.seed", *s), ("train.divergence_mc", "0")];
                    ov.extend_from_slice(extra);
                    run_experiment(experiment(name, &ov), None).unwrap().final_entropy
                })
                .collect(),
        )
    };
    let sds = run("bimodal_sds.toml", &[]);
    let cdp = run("bimodal_sds.toml", &[("objective.gamma", "0")]);
    let dive = run("bimodal_dive3d.toml", &[]);
    assert!(sds <= cdp && cdp <= dive, "medians: sds {sds} cdp {cdp} dive3d {dive}");
}

/// Gradient flow of one particle under Score-CDP with the cotangent averaged
/// over a symmetric ε set and a fixed t grid, so the only drift left is the
/// pull toward the target mean.
#[test]
fn averaged_score_cdp_flow_reaches_the_target_mean() {
    let m = dvector![1.0, -2.0];
    let target = GaussianMixture::isotropic_equal(vec![m.clone()], 1.0).unwrap();
    let bank = PromptBank::new(target, BTreeMap::new()).unwrap();
    let targets = Targets { bank: &bank, reward: None };
    let spec = ObjectiveSpec { family: Family::Sim, gamma: 0.0, lambda: 0.0, ..Default::default() };
    let sched = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
    let levels: Vec<NoiseLevel> = (0..8).map(|i| sched.level(0.1 + 0.1 * i as f64).unwrap()).collect();
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let base = [dvector![1.0, 0.0], dvector![0.0, 1.0], dvector![c, c], dvector![c, -c]];
    let eps: Vec<DVector<f64>> = base.iter().flat_map(|e| [e.clone(), -e]).collect();

    let mut theta = dvector![0.0, 0.0];
    let lr = 0.05;
    for _ in 0..4000 {
        let mut g = DVector::zeros(2);
        for level in &levels {
            let fake = FakeEval::Analytic(GaussianMixture::isotropic_equal(vec![&theta * level.alpha], level.sigma_sq()).unwrap());
            for e in &eps {
                let s = StepSample::evaluate(&targets, None, &spec, Some(&fake), 0, Selector::Index(0), *level, e.clone(), theta.clone())
                    .unwrap();
                g += grad_dive3d(&s, &spec).1;
            }
        }
        theta -= g * (lr / (levels.len() * eps.len()) as f64);
    }
    let gap = (&theta - &m).amax();
    assert!(gap <= 1e-3, "final particle {theta} is {gap:e} from the mean");
}

#[test]
fn zero_theta_lr_still_trains_the_fake_score() {
    let exp = experiment(
        "bimodal_dive3d.toml",
        &[("train.lr_theta", "0"), ("objective.fake_source", "\"learned\""), ("fake_score.warmup_steps", "0")],
    );
    let before = exp.state.params().to_vec();
    let phi_before = exp.fake.as_ref().unwrap().net.params().to_vec();
    let mut engine = Engine::new(exp).unwrap();
    for _ in 0..5 {
        let stats = engine.run_step().unwrap();
        assert!(stats.dsm_loss.unwrap().is_finite());
    }
    assert_eq!(engine.state().params(), &before[..]);
    assert_ne!(engine.exp.fake.as_ref().unwrap().net.params(), &phi_before[..]);
}
