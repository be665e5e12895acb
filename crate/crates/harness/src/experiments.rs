//! Turns an [`ExperimentConfig`] into averaged traces.

use std::collections::BTreeMap;
use std::sync::Arc;

use signopt::distributed::{distributed_run, WorkerNoise};
use signopt::objectives::{make_sum_of_squares, make_toy_pl, Logistic};
use signopt::optimizers::{run, run_repeats, summarize, RunOptions, TraceSummary};
use signopt::oracles::{gaussian_l1_sigma, minibatch_single_sample_sigma, standard_normal_vector};
use signopt::theory::{annotate_bounds, BoundKind, RateBundle};
use signopt::{
    DenseVector, Error, Execution, GradientSource, Method, Objective, Quadratic, Schedule, StochasticOracle, Trace,
};

use crate::baseline::logistic_with_baseline;
use crate::config::{
    ExperimentConfig, MethodList, ObjectiveKind, OracleKind, ScheduleKind,
};
use crate::error::{HarnessError, Result};

/// Stream used for random starting points, kept apart from oracle streams.
pub const X0_STREAM: u64 = 3;

pub const PRESETS: [&str; 9] = [
    "quadratic1d",
    "ex1",
    "adagrad-v1",
    "adagrad-v2",
    "toy",
    "quadratic",
    "logistic",
    "logistic-diminishing",
    "distributed",
];

/// Exact gradients of a shared objective.
#[derive(Clone)]
pub struct SharedExact(pub Arc<dyn Objective>);

impl GradientSource for SharedExact {
    fn objective(&self) -> &dyn Objective {
        self.0.as_ref()
    }

    fn next_gradient(&mut self, x: &DenseVector) -> signopt::Result<DenseVector> {
        self.0.gradient(x)
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

#[derive(Clone)]
pub struct BuiltObjective {
    pub objective: Arc<dyn Objective>,
    pub logistic: Option<Arc<Logistic>>,
}

impl std::fmt::Debug for BuiltObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuiltObjective")
            .field("name", &self.objective.name())
            .field("dim", &self.objective.dim())
            .finish()
    }
}

pub fn build_objective(cfg: &ExperimentConfig) -> Result<BuiltObjective> {
    let o = &cfg.objective;
    let plain = |obj: Arc<dyn Objective>| BuiltObjective {
        objective: obj,
        logistic: None,
    };
    Ok(match o.name {
        ObjectiveKind::Quadratic1d => plain(Arc::new(Quadratic::diagonal(&[2.0])?)),
        ObjectiveKind::HalfQuadratic1d => plain(Arc::new(Quadratic::diagonal(&[1.0])?)),
        ObjectiveKind::SumOfSquares => plain(Arc::new(make_sum_of_squares(o.dim)?)),
        ObjectiveKind::Diagonal => plain(Arc::new(Quadratic::diagonal(&o.diag)?)),
        ObjectiveKind::Toy => plain(Arc::new(make_toy_pl())),
        ObjectiveKind::Logistic => {
            let lg = logistic_with_baseline(o.samples, o.features, o.data_seed)?;
            BuiltObjective {
                objective: lg.clone(),
                logistic: Some(lg),
            }
        }
    })
}

/// `(mu, L)` for bound overlays: declared values first, then the objective's.
pub fn curvature(cfg: &ExperimentConfig, obj: &dyn Objective) -> (Option<f64>, Option<f64>) {
    let c = obj.constants();
    let mu = cfg.objective.mu.or(c.mu_inf()).or(c.pl_mu());
    let l = cfg.objective.l.or(c.l_inf());
    (mu, l)
}

/// Starting point for repeat `r`.
pub fn initial_point(cfg: &ExperimentConfig, dim: usize, repeat: usize) -> Result<DenseVector> {
    if cfg.method.x0_random {
        return Ok(standard_normal_vector(dim, cfg.method.seed + repeat as u64, X0_STREAM)?);
    }
    match &cfg.method.x0 {
        Some(x0) => {
            let x = DenseVector::from_slice(x0)?;
            x.expect_dim(dim)?;
            Ok(x)
        }
        None => Ok(DenseVector::filled(dim, 1.0)?),
    }
}

fn oracle_for(cfg: &ExperimentConfig, built: &BuiltObjective, repeat: usize) -> Result<Option<StochasticOracle>> {
    let seed = cfg.method.seed + repeat as u64;
    let oracle = match cfg.oracle.kind {
        OracleKind::Exact => return Ok(None),
        OracleKind::Gaussian => StochasticOracle::gaussian(built.objective.clone(), cfg.oracle.noise_std, seed)?,
        OracleKind::Minibatch => {
            let lg = built
                .logistic
                .clone()
                .ok_or_else(|| HarnessError::config("minibatch oracles need the logistic objective"))?;
            // The single-sample bound only feeds overlays; a declared sigma skips it.
            StochasticOracle::minibatch(lg, cfg.oracle.batch_size, 0.0, seed)?
        }
    };
    let oracle = match cfg.oracle.sigma {
        Some(s) => oracle.with_declared_sigma(s)?,
        None => oracle,
    };
    Ok(Some(match cfg.oracle.p_min {
        Some(p) => oracle.with_declared_p_min(p)?,
        None => oracle,
    }))
}

/// l1 noise bound used for overlays and bundles.
pub fn declared_sigma(cfg: &ExperimentConfig, built: &BuiltObjective) -> Result<f64> {
    if let Some(s) = cfg.oracle.sigma {
        return Ok(s);
    }
    let dim = built.objective.dim();
    Ok(match cfg.oracle.kind {
        OracleKind::Exact => 0.0,
        OracleKind::Gaussian => {
            let worst = cfg
                .distributed
                .worker_noise
                .as_ref()
                .filter(|_| cfg.distributed.enabled)
                .map(|levels| levels.iter().copied().fold(0.0, f64::max))
                .unwrap_or(cfg.oracle.noise_std);
            gaussian_l1_sigma(dim, worst)
        }
        OracleKind::Minibatch => {
            let lg = built.logistic.as_ref().expect("validated: minibatch uses logistic");
            let mut points = vec![initial_point(cfg, dim, 0)?];
            points.extend(lg.minimizer().cloned());
            minibatch_single_sample_sigma(lg.as_ref(), &points)? / (cfg.oracle.batch_size as f64).sqrt()
        }
    })
}

/// Step-size schedule for one method.
///
/// Under the diminishing schedule a per-method `alphas` entry is read as the
/// initial step `alpha_0`, which fixes `mu = 3 / ((2 p_min - 1) alpha_0)`.
pub fn schedule_for(cfg: &ExperimentConfig, obj: &dyn Objective, method_name: &str) -> Result<Schedule> {
    let s = &cfg.schedule;
    let schedule = match s.kind {
        ScheduleKind::Constant => Schedule::Constant(s.alpha_for(method_name)),
        ScheduleKind::Diminishing => {
            let p_min = cfg
                .oracle
                .p_min
                .ok_or_else(|| HarnessError::config("the diminishing schedule needs oracle.p_min"))?;
            let mu = match s.alphas.get(method_name) {
                Some(a0) => 3.0 / ((2.0 * p_min - 1.0) * a0),
                None => s
                    .mu
                    .or(curvature(cfg, obj).0)
                    .ok_or_else(|| HarnessError::config("the diminishing schedule needs schedule.mu"))?,
            };
            Schedule::Diminishing { mu, p_min }
        }
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Averaged result for one method (or one worker count).
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub label: String,
    pub summary: TraceSummary,
    /// Individual runs, kept only when there is a single repeat.
    pub single: Option<Trace>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodResult>,
}

impl ExperimentResult {
    pub fn get(&self, label: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.label == label)
    }
}

/// Bound that applies to this configuration, if the constants allow one.
pub fn overlay_bundle(
    cfg: &ExperimentConfig,
    built: &BuiltObjective,
    method: &Method,
    schedule: &Schedule,
    workers: Option<usize>,
) -> Result<Option<(RateBundle, BoundKind)>> {
    let (Some(mu), Some(l)) = curvature(cfg, built.objective.as_ref()) else {
        return Ok(None);
    };
    if *method != Method::ScaledSignGd || built.objective.f_star().is_none() {
        return Ok(None);
    }
    let stochastic = cfg.oracle.kind != OracleKind::Exact;
    let made = match (workers, stochastic, schedule, cfg.oracle.p_min) {
        (Some(m), true, Schedule::Constant(a), Some(p)) => {
            RateBundle::distributed(mu, l, *a, declared_sigma(cfg, built)?, p, m).map(|b| (b, BoundKind::Thm3Dist))
        }
        (None, false, Schedule::Constant(a), _) => RateBundle::deterministic(mu, l, *a).map(|b| (b, BoundKind::Thm1)),
        (None, true, Schedule::Constant(a), Some(p)) => {
            RateBundle::stochastic(mu, l, *a, declared_sigma(cfg, built)?, p).map(|b| (b, BoundKind::Thm2Const))
        }
        (None, true, Schedule::Diminishing { .. }, Some(p)) => {
            RateBundle::diminishing(mu, l, declared_sigma(cfg, built)?, p).map(|b| (b, BoundKind::Thm2Dimin))
        }
        _ => return Ok(None),
    };
    // Constants outside a theorem's range simply mean no overlay.
    Ok(made.ok())
}

/// Rate constants for checking `which` against a run of `cfg`.
pub fn bundle_for(cfg: &ExperimentConfig, built: &BuiltObjective, which: BoundKind) -> Result<RateBundle> {
    let (mu, l) = curvature(cfg, built.objective.as_ref());
    let mu = mu.ok_or_else(|| HarnessError::config("bound check needs objective.mu"))?;
    let l = l.ok_or_else(|| HarnessError::config("bound check needs objective.l"))?;
    let first = cfg.method.names.names().into_iter().next().unwrap_or_default();
    let alpha = cfg.schedule.alpha_for(&first);
    let p_min = || {
        cfg.oracle
            .p_min
            .ok_or_else(|| HarnessError::config(format!("{which} needs oracle.p_min")))
    };
    Ok(match which {
        BoundKind::Thm1 => RateBundle::deterministic(mu, l, alpha)?,
        BoundKind::Thm2Const => RateBundle::stochastic(mu, l, alpha, declared_sigma(cfg, built)?, p_min()?)?,
        BoundKind::Thm2Dimin => RateBundle::diminishing(mu, l, declared_sigma(cfg, built)?, p_min()?)?,
        BoundKind::Thm3Dist => {
            let m = *cfg
                .distributed
                .workers
                .first()
                .ok_or_else(|| HarnessError::config("thm3-dist needs distributed.workers"))?;
            RateBundle::distributed(mu, l, cfg.schedule.alpha, declared_sigma(cfg, built)?, p_min()?, m)?
        }
    })
}

fn finish(
    label: String,
    traces: Vec<Trace>,
    overlay: Option<(RateBundle, BoundKind)>,
) -> Result<MethodResult> {
    let mut summary = summarize(&traces)?;
    if let Some((bundle, which)) = overlay {
        annotate_bounds(&mut summary.mean, &bundle, which)?;
    }
    let single = if traces.len() == 1 { traces.into_iter().next() } else { None };
    Ok(MethodResult { label, summary, single })
}

/// Runs one single-node method over all repeats.
pub fn run_method(cfg: &ExperimentConfig, built: &BuiltObjective, name: &str, method: &Method) -> Result<MethodResult> {
    let schedule = schedule_for(cfg, built.objective.as_ref(), name)?;
    let dim = built.objective.dim();
    let opts = RunOptions {
        snapshot_stride: cfg.output.iterates.then_some(1),
    };
    let traces = run_repeats(Execution::default(), cfg.method.repeats, |r| {
        let x0 = initial_point(cfg, dim, r).map_err(core_error)?;
        match oracle_for(cfg, built, r).map_err(core_error)? {
            Some(mut oracle) => run(method, &mut oracle, &schedule, x0, cfg.method.iters, opts),
            None => run(method, &mut SharedExact(built.objective.clone()), &schedule, x0, cfg.method.iters, opts),
        }
    })?;
    let overlay = overlay_bundle(cfg, built, method, &schedule, None)?;
    let label = if cfg.oracle.kind == OracleKind::Exact {
        method.name()
    } else {
        method.stochastic_name()
    };
    finish(label.to_string(), traces, overlay)
}

fn core_error(e: HarnessError) -> Error {
    match e {
        HarnessError::Core(e) => e,
        other => Error::InvalidConfig(other.to_string()),
    }
}

/// Majority-vote runs for one worker count.
pub fn run_distributed(cfg: &ExperimentConfig, built: &BuiltObjective, workers: usize) -> Result<MethodResult> {
    if cfg.oracle.kind != OracleKind::Gaussian {
        return Err(HarnessError::config("distributed runs use the gaussian oracle"));
    }
    if cfg.schedule.kind != ScheduleKind::Constant {
        return Err(HarnessError::config("distributed runs use a constant schedule"));
    }
    let alpha = cfg.schedule.alpha;
    let noise = match &cfg.distributed.worker_noise {
        Some(levels) => WorkerNoise::PerWorker(levels.clone()),
        None => WorkerNoise::Uniform(cfg.oracle.noise_std),
    };
    let dim = built.objective.dim();
    let traces = run_repeats(Execution::default(), cfg.method.repeats, |r| {
        let x0 = initial_point(cfg, dim, r).map_err(core_error)?;
        distributed_run(
            built.objective.clone(),
            workers,
            &noise,
            alpha,
            x0,
            cfg.method.iters,
            cfg.method.seed + r as u64,
        )
    })?;
    let overlay = overlay_bundle(cfg, built, &Method::ScaledSignGd, &Schedule::Constant(alpha), Some(workers))?;
    finish(format!("majority_vote_m{workers}"), traces, overlay)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let built = build_objective(cfg)?;
    let mut methods = Vec::new();
    if cfg.distributed.enabled {
        for &m in &cfg.distributed.workers {
            methods.push(run_distributed(cfg, &built, m)?);
        }
    } else {
        for (name, method) in cfg.method.methods()? {
            methods.push(run_method(cfg, &built, &name, &method)?);
        }
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        methods,
    })
}

// ---------------------------------------------------------------------------
// Presets

fn names(list: &[&str]) -> MethodList {
    MethodList::Many(list.iter().map(|s| s.to_string()).collect())
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    match name {
        "quadratic1d" => {
            cfg.objective.name = ObjectiveKind::Quadratic1d;
            cfg.method.names = MethodList::One("scaled_signgd".into());
            cfg.method.iters = 40;
            cfg.method.x0 = Some(vec![1.0]);
            cfg.schedule.alpha = 0.25;
        }
        "ex1" => {
            cfg = counterexample_config("ex1", 0.1)?;
        }
        "adagrad-v1" | "adagrad-v2" => {
            cfg = counterexample_config(name, 1.0)?;
        }
        "toy" => {
            cfg.objective.name = ObjectiveKind::Toy;
            cfg.method.names = names(&["gd", "signgd", "signum", "ef_signgd", "scaled_signgd"]);
            cfg.method.iters = 200;
            cfg.method.x0 = Some(vec![3.0]);
            cfg.schedule.alpha = 0.05;
        }
        "quadratic" => {
            // Noise small enough that every sign is right with probability
            // above p_min for the whole horizon.
            cfg.objective.name = ObjectiveKind::Quadratic1d;
            cfg.objective.mu = Some(2.0);
            cfg.objective.l = Some(2.0);
            cfg.method.names = MethodList::One("scaled_signsgd".into());
            cfg.method.iters = 200;
            cfg.method.repeats = 200;
            cfg.method.x0 = Some(vec![1.0]);
            cfg.schedule.alpha = 0.2;
            cfg.oracle.kind = OracleKind::Gaussian;
            cfg.oracle.noise_std = 1e-46;
            cfg.oracle.p_min = Some(0.9);
        }
        "logistic" => {
            cfg = logistic_config()?;
        }
        "logistic-diminishing" => {
            cfg = logistic_config()?;
            cfg.schedule.kind = ScheduleKind::Diminishing;
            cfg.oracle.p_min = Some(0.75);
        }
        "distributed" => {
            cfg.objective.name = ObjectiveKind::SumOfSquares;
            cfg.objective.dim = 10;
            cfg.method.names = MethodList::One("scaled_signsgd".into());
            cfg.method.iters = 300;
            cfg.method.repeats = 20;
            cfg.method.x0_random = true;
            cfg.schedule.alpha = 0.02;
            cfg.oracle.kind = OracleKind::Gaussian;
            cfg.oracle.noise_std = 0.5;
            cfg.distributed.enabled = true;
            cfg.distributed.workers = vec![1, 3, 5, 7];
        }
        other => {
            return Err(HarnessError::config(format!(
                "unknown preset '{other}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Single-trace reproductions of the non-convergence examples. `step` is
/// `alpha` for `ex1` and `eta` for the AdaGrad variants.
pub fn counterexample_config(which: &str, step: f64) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.output.iterates = true;
    cfg.schedule.alpha = step;
    match which {
        "ex1" => {
            cfg.objective.name = ObjectiveKind::SumOfSquares;
            cfg.objective.dim = 2;
            cfg.method.names = MethodList::One("signgd".into());
            cfg.method.iters = 100;
            cfg.method.x0 = Some(vec![step / 2.0, step / 2.0]);
        }
        "adagrad-v1" => {
            cfg.objective.name = ObjectiveKind::HalfQuadratic1d;
            cfg.method.names = MethodList::One("sign_adagrad_grad".into());
            cfg.method.iters = 50;
            // Any start works as long as no iterate lands exactly on 0.
            cfg.method.x0 = Some(vec![0.7]);
        }
        "adagrad-v2" => {
            cfg.objective.name = ObjectiveKind::Quadratic1d;
            cfg.method.names = MethodList::One("sign_adagrad_sign".into());
            cfg.method.iters = 50;
            cfg.method.x0 = Some(vec![step / 2.0]);
        }
        other => {
            return Err(HarnessError::config(format!(
                "unknown counterexample '{other}' (expected ex1, adagrad-v1 or adagrad-v2)"
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Step sizes for the logistic comparison, derived from the data:
/// SGD uses `1/L2`, scaled SIGNSGD `1/(d L2)`, and the unscaled sign methods
/// the mean first step of scaled SIGNSGD, `alpha_scaled * mean |grad f(x0)|_1`.
pub fn logistic_alphas(cfg: &ExperimentConfig, lg: &Logistic) -> Result<BTreeMap<String, f64>> {
    let l2 = lg
        .smoothness_l2()
        .ok_or_else(|| Error::MissingData("logistic smoothness".into()))?;
    let d = lg.dim();
    let sgd = 1.0 / l2;
    let scaled = sgd / d as f64;
    let mut g0 = 0.0;
    for r in 0..cfg.method.repeats {
        g0 += lg.gradient(&initial_point(cfg, d, r)?)?.l1_norm();
    }
    g0 /= cfg.method.repeats as f64;
    let sign = scaled * g0;
    Ok(BTreeMap::from([
        ("sgd".to_string(), sgd),
        ("scaled_signsgd".to_string(), scaled),
        ("signsgd".to_string(), sign),
        ("ef_signsgd".to_string(), sgd),
        ("signum".to_string(), sign),
    ]))
}

fn logistic_config() -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.objective.name = ObjectiveKind::Logistic;
    cfg.method.names = names(&["sgd", "scaled_signsgd", "signsgd", "ef_signsgd", "signum"]);
    cfg.method.iters = 2000;
    cfg.method.repeats = 20;
    cfg.method.seed = 100;
    cfg.method.x0_random = true;
    cfg.oracle.kind = OracleKind::Minibatch;
    cfg.oracle.batch_size = 256;
    let built = build_objective(&cfg)?;
    let lg = built.logistic.expect("logistic objective");
    cfg.schedule.alphas = logistic_alphas(&cfg, &lg)?;
    cfg.schedule.alpha = cfg.schedule.alphas["scaled_signsgd"];
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let cfg = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.validate().unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn quadratic1d_preset_has_tight_overlay() {
        let res = run_experiment(&preset("quadratic1d").unwrap()).unwrap();
        let m = &res.methods[0];
        assert_eq!(m.label, "scaled_signgd");
        for row in &m.summary.mean.rows {
            let b = row.bound.unwrap();
            let v = row.v.unwrap();
            assert!((v - b).abs() <= 1e-12 * b.max(1e-300), "k={} v={v} b={b}", row.k);
        }
    }

    #[test]
    fn random_starts_depend_only_on_seed_and_repeat() {
        let mut cfg = ExperimentConfig::default();
        cfg.method.x0_random = true;
        cfg.method.seed = 7;
        let a = initial_point(&cfg, 4, 2).unwrap();
        cfg.method.seed = 8;
        let b = initial_point(&cfg, 4, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diminishing_alpha_entry_sets_initial_step() {
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.kind = ScheduleKind::Diminishing;
        cfg.oracle.p_min = Some(0.75);
        cfg.schedule.alphas.insert("scaled_signgd".into(), 0.4);
        let obj = Quadratic::diagonal(&[2.0]).unwrap();
        let s = schedule_for(&cfg, &obj, "scaled_signgd").unwrap();
        assert!((s.value(0).unwrap() - 0.4).abs() < 1e-15);
        assert!((s.value(3).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn distributed_needs_gaussian_oracle() {
        let mut cfg = preset("distributed").unwrap();
        cfg.method.iters = 5;
        cfg.method.repeats = 2;
        let built = build_objective(&cfg).unwrap();
        let res = run_distributed(&cfg, &built, 3).unwrap();
        assert_eq!(res.label, "majority_vote_m3");
        assert_eq!(res.summary.mean.rows.len(), 6);
        cfg.oracle.kind = OracleKind::Exact;
        assert!(run_distributed(&cfg, &built, 3).is_err());
    }
}
