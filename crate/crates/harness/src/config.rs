//! Experiment configuration: a TOML file with the sections `objective`,
//! `method`, `schedule`, `oracle`, `distributed` and `output`. Every field
//! has a default and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use signopt::optimizers::Method;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `f(x) = x^2`
    Quadratic1d,
    /// `f(x) = x^2 / 2`
    HalfQuadratic1d,
    /// `f(x) = sum_i x_i^2` in `dim` dimensions
    SumOfSquares,
    /// `f(x) = 1/2 x' diag(d) x`
    Diagonal,
    /// `f(x) = x^2 + 3 sin^2 x`
    Toy,
    /// Regularized logistic loss on synthetic data
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub name: ObjectiveKind,
    /// Dimension for `sum_of_squares`.
    pub dim: usize,
    /// Diagonal entries for `diagonal`.
    pub diag: Vec<f64>,
    /// Logistic sample count.
    pub samples: usize,
    /// Logistic feature count.
    pub features: usize,
    pub data_seed: u64,
    /// Declared strong-convexity / PL constant for bound overlays.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Declared l-infinity smoothness constant for bound overlays.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            name: ObjectiveKind::Quadratic1d,
            dim: 2,
            diag: vec![2.0, 2.0],
            samples: 2000,
            features: 50,
            data_seed: 1,
            mu: None,
            l: None,
        }
    }
}

/// A single method name or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodList {
    One(String),
    Many(Vec<String>),
}

impl MethodList {
    pub fn names(&self) -> Vec<String> {
        match self {
            MethodList::One(s) => vec![s.clone()],
            MethodList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    #[serde(alias = "name")]
    pub names: MethodList,
    pub iters: usize,
    pub repeats: usize,
    /// Repeat `r` uses seed `seed + r` for its oracle and random start.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Draw `x0 ~ N(0, I)` per repeat instead of using `x0`.
    pub x0_random: bool,
    pub signum_beta: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            names: MethodList::One("scaled_signgd".into()),
            iters: 100,
            repeats: 1,
            seed: 0,
            x0: None,
            x0_random: false,
            signum_beta: signopt::optimizers::DEFAULT_SIGNUM_BETA,
        }
    }
}

impl MethodConfig {
    pub fn methods(&self) -> Result<Vec<(String, Method)>> {
        self.names
            .names()
            .into_iter()
            .map(|n| {
                let mut m: Method = n.parse().map_err(|e: signopt::Error| HarnessError::config(e.to_string()))?;
                if let Method::Signum { beta } = &mut m {
                    *beta = self.signum_beta;
                }
                Ok((n, m))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Diminishing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Constant step (or `eta` / `lambda` for the adaptive and EF methods).
    pub alpha: f64,
    /// Per-method overrides of `alpha`, keyed by method name.
    pub alphas: BTreeMap<String, f64>,
    /// `mu` for the diminishing schedule; falls back to `objective.mu`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            alpha: 0.1,
            alphas: BTreeMap::new(),
            mu: None,
        }
    }
}

impl ScheduleConfig {
    pub fn alpha_for(&self, method_name: &str) -> f64 {
        self.alphas.get(method_name).copied().unwrap_or(self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Exact,
    Gaussian,
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub noise_std: f64,
    pub batch_size: usize,
    /// Declared l1 noise bound; defaults to the oracle's own bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Declared lower bound on sign success probability.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_min: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Exact,
            noise_std: 0.0,
            batch_size: 32,
            sigma: None,
            p_min: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistributedConfig {
    pub enabled: bool,
    /// Worker counts to sweep.
    pub workers: Vec<usize>,
    /// Per-worker noise levels; overrides `oracle.noise_std` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker_noise: Option<Vec<f64>>,
}

impl Default for DistributedConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            workers: vec![1],
            worker_noise: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Append the iterate `x_k` as columns `x1..xd`.
    pub iterates: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub objective: ObjectiveConfig,
    pub method: MethodConfig,
    pub schedule: ScheduleConfig,
    pub oracle: OracleConfig,
    pub distributed: DistributedConfig,
    pub output: OutputConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::config(e.to_string()))
    }

    /// The configuration on one line, for the first line of CSV outputs.
    pub fn fingerprint(&self) -> Result<String> {
        let text = self.to_toml()?;
        let parts: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Ok(parts.join("; "))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::config(m));
        if self.method.repeats == 0 {
            return bad("method.repeats must be at least 1".into());
        }
        if self.method.iters == 0 {
            return bad("method.iters must be at least 1".into());
        }
        let methods = self.method.methods()?;
        if methods.is_empty() {
            return bad("method.names must list at least one method".into());
        }
        for name in self.schedule.alphas.keys() {
            if !methods.iter().any(|(n, _)| n == name) {
                return bad(format!("schedule.alphas has an entry for '{name}', which is not in method.names"));
            }
        }
        for (_, m) in &methods {
            m.validate()?;
        }
        let steps = std::iter::once(self.schedule.alpha).chain(self.schedule.alphas.values().copied());
        for a in steps {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("step sizes must be positive and finite, got {a}"));
            }
        }
        if let Some(p) = self.oracle.p_min {
            if !(p > 0.5 && p <= 1.0) {
                return bad(format!("oracle.p_min must lie in (1/2, 1], got {p}"));
            }
        }
        if self.schedule.kind == ScheduleKind::Diminishing {
            if self.oracle.p_min.is_none() {
                return bad("the diminishing schedule needs oracle.p_min".into());
            }
            if self.schedule.mu.or(self.objective.mu).is_some_and(|mu| mu.is_nan() || mu <= 0.0) {
                return bad("the diminishing schedule needs mu > 0".into());
            }
        }
        if !(self.oracle.noise_std >= 0.0 && self.oracle.noise_std.is_finite()) {
            return bad(format!("oracle.noise_std must be >= 0, got {}", self.oracle.noise_std));
        }
        if self.oracle.kind == OracleKind::Minibatch {
            if self.objective.name != ObjectiveKind::Logistic {
                return bad("minibatch oracles need the logistic objective".into());
            }
            if self.oracle.batch_size == 0 || self.oracle.batch_size > self.objective.samples {
                return bad(format!(
                    "oracle.batch_size must be in 1..={}, got {}",
                    self.objective.samples, self.oracle.batch_size
                ));
            }
        }
        if self.distributed.enabled {
            if self.distributed.workers.is_empty() || self.distributed.workers.contains(&0) {
                return bad("distributed.workers must list positive worker counts".into());
            }
            if let Some(levels) = &self.distributed.worker_noise {
                if self.distributed.workers.iter().any(|&m| m != levels.len()) {
                    return bad("distributed.worker_noise needs one level per worker".into());
                }
            }
        }
        if self.objective.name == ObjectiveKind::Logistic && (self.objective.samples == 0 || self.objective.features == 0) {
            return bad("logistic objective needs samples > 0 and features > 0".into());
        }
        if self.output.iterates && self.method.repeats != 1 {
            return bad("output.iterates needs method.repeats = 1".into());
        }
        if let Some(path) = &self.output.path {
            let parent = Path::new(path).parent().filter(|p| !p.as_os_str().is_empty());
            if let Some(dir) = parent {
                if !dir.is_dir() {
                    return bad(format!("output directory {} does not exist", dir.display()));
                }
            }
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
    ExperimentConfig::from_toml(&text)
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml()?).map_err(|e| HarnessError::io(path.display().to_string(), e))
}
