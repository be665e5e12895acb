//! Update rules as pure step functions over explicit state, step-size
//! schedules, and the run loop that records a [`Trace`].

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::oracles::{ExactGradient, GradientSource};
use crate::par::{self, Execution};
use crate::vecmath::DenseVector;

/// Iterates or objective values beyond this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

/// Bits for one scalar on the wire.
pub const SCALAR_BITS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EfMode {
    /// `p = lambda grad f(x) + e`
    AtX,
    /// `p = lambda grad f(x - e) + e`; reduces to GD in `z = x - e`.
    AtXMinusE,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Gd,
    SignGd,
    ScaledSignGd,
    AdagradNorm,
    SignAdagradGradAccum,
    SignAdagradSignAccum,
    EfSignGd(EfMode),
    Signum { beta: f64 },
}

pub const DEFAULT_SIGNUM_BETA: f64 = 0.9;

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::SignGd => "signgd",
            Method::ScaledSignGd => "scaled_signgd",
            Method::AdagradNorm => "adagrad_norm",
            Method::SignAdagradGradAccum => "sign_adagrad_grad",
            Method::SignAdagradSignAccum => "sign_adagrad_sign",
            Method::EfSignGd(EfMode::AtX) => "ef_signgd",
            Method::EfSignGd(EfMode::AtXMinusE) => "ef_signgd_shifted",
            Method::Signum { .. } => "signum",
        }
    }

    /// Name used when gradients come from a stochastic oracle.
    pub fn stochastic_name(&self) -> &'static str {
        match self {
            Method::Gd => "sgd",
            Method::SignGd => "signsgd",
            Method::ScaledSignGd => "scaled_signsgd",
            Method::EfSignGd(EfMode::AtX) => "ef_signsgd",
            Method::EfSignGd(EfMode::AtXMinusE) => "ef_signsgd_shifted",
            other => other.name(),
        }
    }

    pub fn all() -> [Method; 9] {
        [
            Method::Gd,
            Method::SignGd,
            Method::ScaledSignGd,
            Method::AdagradNorm,
            Method::SignAdagradGradAccum,
            Method::SignAdagradSignAccum,
            Method::EfSignGd(EfMode::AtX),
            Method::EfSignGd(EfMode::AtXMinusE),
            Method::Signum {
                beta: DEFAULT_SIGNUM_BETA,
            },
        ]
    }

    /// Bits a single node ships per iteration for its compressed gradient.
    pub fn uplink_bits(&self, dim: usize) -> u64 {
        let d = dim as u64;
        match self {
            Method::Gd | Method::AdagradNorm => SCALAR_BITS * d,
            Method::SignGd
            | Method::SignAdagradGradAccum
            | Method::SignAdagradSignAccum
            | Method::Signum { .. } => d,
            Method::ScaledSignGd | Method::EfSignGd(_) => d + SCALAR_BITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Method::Signum { beta } = self {
            if !(0.0..1.0).contains(beta) {
                return Err(Error::OutOfRange {
                    name: "beta_m",
                    value: *beta,
                    range: "[0, 1)".into(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gd" | "sgd" => Method::Gd,
            "signgd" | "signsgd" => Method::SignGd,
            "scaled_signgd" | "scaled_signsgd" => Method::ScaledSignGd,
            "adagrad_norm" => Method::AdagradNorm,
            "sign_adagrad_grad" => Method::SignAdagradGradAccum,
            "sign_adagrad_sign" => Method::SignAdagradSignAccum,
            "ef_signgd" | "ef_signsgd" => Method::EfSignGd(EfMode::AtX),
            "ef_signgd_shifted" | "ef_signsgd_shifted" => Method::EfSignGd(EfMode::AtXMinusE),
            "signum" => Method::Signum {
                beta: DEFAULT_SIGNUM_BETA,
            },
            other => return Err(Error::config(format!("unknown method '{other}'"))),
        };
        Ok(m)
    }
}

/// Mutable per-method state; every step produces a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub x: DenseVector,
    pub k: usize,
    /// `b_k^2`. Kept squared so integer accumulations stay exact.
    accumulator_b_sq: f64,
    pub ef_residual: DenseVector,
    pub momentum: DenseVector,
    pub method: Method,
}

impl OptimizerState {
    pub fn new(method: Method, x0: DenseVector) -> Self {
        let d = x0.dim();
        Self {
            x: x0,
            k: 0,
            accumulator_b_sq: 0.0,
            ef_residual: DenseVector::zeros(d),
            momentum: DenseVector::zeros(d),
            method,
        }
    }

    /// AdaGrad accumulator `b_k`.
    pub fn accumulator_b(&self) -> f64 {
        self.accumulator_b_sq.sqrt()
    }

    pub fn with_accumulator_b(mut self, b: f64) -> Self {
        self.accumulator_b_sq = b * b;
        self
    }

    /// `z = x - e`, the error-corrected iterate.
    pub fn corrected_iterate(&self) -> Result<DenseVector> {
        self.x.sub(&self.ef_residual)
    }
}

/// One step of `method` from `state` with step size (or `eta`/`lambda`) `rate`.
pub fn advance(
    method: &Method,
    state: &OptimizerState,
    source: &mut dyn GradientSource,
    rate: f64,
) -> Result<OptimizerState> {
    advance_with(method, state, source, rate, None)
}

/// As [`advance`]; `known_gradient` (the exact gradient at `state.x`) is
/// reused instead of asking `source` when the method evaluates at `x` and the
/// source is deterministic.
fn advance_with(
    method: &Method,
    state: &OptimizerState,
    source: &mut dyn GradientSource,
    rate: f64,
    known_gradient: Option<&DenseVector>,
) -> Result<OptimizerState> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::OutOfRange {
            name: "step size",
            value: rate,
            range: "(0, inf)".into(),
        });
    }
    method.validate()?;
    let diverged = || Error::Divergence { k: state.k + 1 };
    let mut next = state.clone();
    next.k = state.k + 1;

    let eval_at_shifted = matches!(method, Method::EfSignGd(EfMode::AtXMinusE));
    let g = match known_gradient {
        Some(g) if !eval_at_shifted && !source.is_stochastic() => g.clone(),
        _ if eval_at_shifted => source.next_gradient(&state.corrected_iterate()?)?,
        _ => source.next_gradient(&state.x)?,
    };
    g.expect_dim(state.x.dim())?;

    match method {
        Method::Gd => {
            next.x = state.x.add_scaled(-rate, &g).map_err(|_| diverged())?;
        }
        Method::SignGd => {
            next.x = state.x.add_scaled(-rate, &g.sign()).map_err(|_| diverged())?;
        }
        Method::ScaledSignGd => {
            next.x = scaled_sign_update(&state.x, rate, g.l1_norm(), &g.sign())
                .map_err(|_| diverged())?;
        }
        Method::AdagradNorm | Method::SignAdagradGradAccum | Method::SignAdagradSignAccum => {
            let s = g.sign();
            let increment = match method {
                Method::SignAdagradSignAccum => s.l2_norm_squared(),
                _ => g.l2_norm_squared(),
            };
            next.accumulator_b_sq = state.accumulator_b_sq + increment;
            let b = next.accumulator_b_sq.sqrt();
            if b > 0.0 {
                let direction = if matches!(method, Method::AdagradNorm) { &g } else { &s };
                next.x = state
                    .x
                    .add_scaled(-rate / b, direction)
                    .map_err(|_| diverged())?;
            }
        }
        Method::EfSignGd(_) => {
            let p = state.ef_residual.add_scaled(rate, &g).map_err(|_| diverged())?;
            let magnitude = p.l1_norm() / p.dim() as f64;
            let s = p.sign();
            next.x = state.x.add_scaled(-magnitude, &s).map_err(|_| diverged())?;
            next.ef_residual = p.add_scaled(-magnitude, &s).map_err(|_| diverged())?;
        }
        Method::Signum { beta } => {
            let m = DenseVector::new(
                state
                    .momentum
                    .iter()
                    .zip(g.iter())
                    .map(|(m, g)| beta * m + (1.0 - beta) * g)
                    .collect(),
            )
            .map_err(|_| diverged())?;
            next.x = state.x.add_scaled(-rate, &m.sign()).map_err(|_| diverged())?;
            next.momentum = m;
        }
    }
    Ok(next)
}

/// `x - (alpha * scale) * direction`, shared by every scaled-sign update so
/// that single-node and majority-vote paths round identically.
pub(crate) fn scaled_sign_update(
    x: &DenseVector,
    alpha: f64,
    scale: f64,
    direction: &DenseVector,
) -> Result<DenseVector> {
    x.add_scaled(-(alpha * scale), direction)
}

/// `x' = x - alpha grad f(x)`.
pub fn step_gd(state: &OptimizerState, obj: &dyn Objective, alpha: f64) -> Result<OptimizerState> {
    advance(&Method::Gd, state, &mut ExactGradient::new(obj), alpha)
}

/// `x' = x - alpha sign(grad f(x))`.
pub fn step_signgd(state: &OptimizerState, obj: &dyn Objective, alpha: f64) -> Result<OptimizerState> {
    advance(&Method::SignGd, state, &mut ExactGradient::new(obj), alpha)
}

/// `x' = x - alpha |g|_1 sign(g)` with `g = grad f(x)`.
pub fn step_scaled_signgd(
    state: &OptimizerState,
    obj: &dyn Objective,
    alpha: f64,
) -> Result<OptimizerState> {
    advance(&Method::ScaledSignGd, state, &mut ExactGradient::new(obj), alpha)
}

/// Scaled sign step on one oracle draw.
pub fn step_scaled_signsgd(
    state: &OptimizerState,
    oracle: &mut dyn GradientSource,
    alpha: f64,
) -> Result<OptimizerState> {
    advance(&Method::ScaledSignGd, state, oracle, alpha)
}

/// AdaGrad-Norm: `b'^2 = b^2 + |g|^2`, `x' = x - (eta / b') g`.
pub fn step_adagrad_norm(
    state: &OptimizerState,
    obj: &dyn Objective,
    eta: f64,
) -> Result<OptimizerState> {
    advance(&Method::AdagradNorm, state, &mut ExactGradient::new(obj), eta)
}

/// `b'^2 = b^2 + |g|^2`, `x' = x - (eta / b') sign(g)`.
pub fn step_sign_adagrad_grad_accum(
    state: &OptimizerState,
    obj: &dyn Objective,
    eta: f64,
) -> Result<OptimizerState> {
    advance(&Method::SignAdagradGradAccum, state, &mut ExactGradient::new(obj), eta)
}

/// `b'^2 = b^2 + |sign(g)|^2`, `x' = x - (eta / b') sign(g)`.
pub fn step_sign_adagrad_sign_accum(
    state: &OptimizerState,
    obj: &dyn Objective,
    eta: f64,
) -> Result<OptimizerState> {
    advance(&Method::SignAdagradSignAccum, state, &mut ExactGradient::new(obj), eta)
}

/// Error-feedback sign step with compressor `(|p|_1 / d) sign(p)`.
pub fn step_ef_signgd(
    state: &OptimizerState,
    obj: &dyn Objective,
    lambda: f64,
    mode: EfMode,
) -> Result<OptimizerState> {
    advance(&Method::EfSignGd(mode), state, &mut ExactGradient::new(obj), lambda)
}

/// Sign-momentum: `m' = beta m + (1 - beta) g~`, `x' = x - alpha sign(m')`.
pub fn step_signum(
    state: &OptimizerState,
    oracle: &mut dyn GradientSource,
    alpha: f64,
    beta: f64,
) -> Result<OptimizerState> {
    advance(&Method::Signum { beta }, state, oracle, alpha)
}

// ---------------------------------------------------------------------------
// Schedules

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// `alpha_k = 3 / (mu (2 p_min - 1) (k + 1))`
    Diminishing { mu: f64, p_min: f64 },
    Custom(Vec<f64>),
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant(a) => {
                if !(*a > 0.0 && a.is_finite()) {
                    return Err(Error::config(format!("constant step must be > 0, got {a}")));
                }
            }
            Schedule::Diminishing { mu, p_min } => {
                if !(*mu > 0.0 && mu.is_finite()) {
                    return Err(Error::config(format!("diminishing schedule needs mu > 0, got {mu}")));
                }
                if !(*p_min > 0.5 && *p_min <= 1.0) {
                    return Err(Error::config(format!(
                        "diminishing schedule needs p_min in (1/2, 1], got {p_min}"
                    )));
                }
            }
            Schedule::Custom(list) => {
                if list.is_empty() || list.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return Err(Error::config("custom schedule needs positive finite entries"));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, k: usize) -> Result<f64> {
        self.validate()?;
        match self {
            Schedule::Constant(a) => Ok(*a),
            Schedule::Diminishing { mu, p_min } => {
                Ok(3.0 / (mu * (2.0 * p_min - 1.0) * (k as f64 + 1.0)))
            }
            Schedule::Custom(list) => list.get(k).copied().ok_or_else(|| {
                Error::config(format!("custom schedule has no entry for k = {k}"))
            }),
        }
    }
}

/// Step size at iteration `k`.
pub fn schedule_value(s: &Schedule, k: usize) -> Result<f64> {
    s.value(k)
}

// ---------------------------------------------------------------------------
// Traces

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub f: f64,
    /// `f(x_k) - f*`, when `f*` is known.
    pub v: Option<f64>,
    /// `|grad f(x_k)|_1` of the exact gradient.
    pub grad_l1: f64,
    /// Step size used at iteration `k`.
    pub alpha: f64,
    pub bound: Option<f64>,
    /// Cumulative bits sent worker-to-server to reach `x_k`.
    pub bits_up: u64,
    /// Cumulative bits sent server-to-worker to reach `x_k`.
    pub bits_down: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceStatus {
    Completed,
    /// Row-wise mean of this many independent runs.
    Averaged { runs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub status: TraceStatus,
    /// `(k, x_k)` at the configured stride.
    pub snapshots: Vec<(usize, DenseVector)>,
}

pub const TRACE_CSV_HEADER: &str = "k,f,V,grad_l1,alpha,bound,bits_up,bits_down";

pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

impl Trace {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            status: TraceStatus::Completed,
            snapshots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Suboptimality column; errors if any row lacks `V`.
    pub fn suboptimality(&self) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                r.v.ok_or_else(|| Error::MissingData(format!("V missing at k = {}", r.k)))
            })
            .collect()
    }

    pub fn f_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.f).collect()
    }

    /// Fills the `bound` column from `bound(k)`.
    pub fn set_bounds(&mut self, bound: impl Fn(usize) -> Option<f64>) {
        for row in &mut self.rows {
            row.bound = bound(row.k);
        }
    }

    pub fn check_contiguous(&self) -> Result<()> {
        if self.rows.iter().enumerate().any(|(i, r)| r.k != i) {
            return Err(Error::invalid("trace rows are not indexed contiguously from 0"));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{}", row_csv(r))?;
        }
        Ok(())
    }

    /// Trace CSV with the recorded iterate appended as `x1..xd` (every row
    /// needs a snapshot, i.e. stride 1).
    pub fn write_csv_with_iterates<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.snapshots.first().map_or(0, |(_, x)| x.dim());
        let have_all = self.snapshots.len() == self.rows.len()
            && self.snapshots.iter().zip(&self.rows).all(|((k, _), r)| *k == r.k);
        if !have_all {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "iterate columns need a snapshot for every row",
            ));
        }
        write!(out, "{TRACE_CSV_HEADER}")?;
        for i in 1..=dim {
            write!(out, ",x{i}")?;
        }
        writeln!(out)?;
        for (r, (_, x)) in self.rows.iter().zip(&self.snapshots) {
            write!(out, "{}", row_csv(r))?;
            for v in x.iter() {
                write!(out, ",{}", fmt_float(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

fn row_csv(r: &TraceRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.k,
        fmt_float(r.f),
        fmt_opt(r.v),
        fmt_float(r.grad_l1),
        fmt_float(r.alpha),
        fmt_opt(r.bound),
        r.bits_up,
        r.bits_down
    )
}

/// Row-wise mean and standard deviation of `V` over runs of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub mean: Trace,
    pub v_std: Vec<Option<f64>>,
}

pub fn summarize(traces: &[Trace]) -> Result<TraceSummary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::invalid("cannot average zero traces"))?;
    let len = first.len();
    if traces.iter().any(|t| t.len() != len) {
        return Err(Error::invalid("traces to average must have equal length"));
    }
    let n = traces.len() as f64;
    let mut rows = Vec::with_capacity(len);
    let mut v_std = Vec::with_capacity(len);
    for i in 0..len {
        let base = &first.rows[i];
        let f = traces.iter().map(|t| t.rows[i].f).sum::<f64>() / n;
        let grad_l1 = traces.iter().map(|t| t.rows[i].grad_l1).sum::<f64>() / n;
        let vs: Option<Vec<f64>> = traces.iter().map(|t| t.rows[i].v).collect();
        let (v, sd) = match vs {
            Some(vs) => {
                let m = vs.iter().sum::<f64>() / n;
                let var = if vs.len() > 1 {
                    vs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (Some(m), Some(var.sqrt()))
            }
            None => (None, None),
        };
        rows.push(TraceRow {
            k: base.k,
            f,
            v,
            grad_l1,
            alpha: base.alpha,
            bound: base.bound,
            bits_up: base.bits_up,
            bits_down: base.bits_down,
        });
        v_std.push(sd);
    }
    Ok(TraceSummary {
        mean: Trace {
            rows,
            status: TraceStatus::Averaged {
                runs: traces.len(),
            },
            snapshots: Vec::new(),
        },
        v_std,
    })
}

// ---------------------------------------------------------------------------
// Run loop

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record `x_k` every this many iterations (including `k = 0`).
    pub snapshot_stride: Option<usize>,
}

pub(crate) fn check_divergence(k: usize, f: f64, x: &DenseVector) -> Result<()> {
    if !f.is_finite() || f.abs() > DIVERGENCE_LIMIT || x.linf_norm() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { k });
    }
    Ok(())
}

/// `(f(x), f(x) - f*, grad f(x))` at iteration `k`, mapping evaluation
/// failures on a blown-up iterate to divergence.
pub(crate) fn evaluate(
    obj: &dyn Objective,
    x: &DenseVector,
    k: usize,
) -> Result<(f64, Option<f64>, DenseVector)> {
    let (f, g) = obj.value_and_gradient(x).map_err(|e| match e {
        Error::DimensionMismatch { .. } => e,
        _ => Error::Divergence { k },
    })?;
    check_divergence(k, f, x)?;
    let v = obj.gap_from_value(x, f)?;
    Ok((f, v, g))
}

/// Applies `method` for `iters` iterations from `x0`.
///
/// Row `k` of the trace describes `x_k` for `k = 0..=iters`. Randomness comes
/// only from `source`, so a freshly seeded source makes the run reproducible.
pub fn run(
    method: &Method,
    source: &mut dyn GradientSource,
    schedule: &Schedule,
    x0: DenseVector,
    iters: usize,
    opts: RunOptions,
) -> Result<Trace> {
    if iters == 0 {
        return Err(Error::config("iters must be at least 1"));
    }
    method.validate()?;
    schedule.validate()?;
    if opts.snapshot_stride == Some(0) {
        return Err(Error::config("snapshot stride must be positive"));
    }
    let dim = source.objective().dim();
    x0.expect_dim(dim)?;
    let per_step_bits = method.uplink_bits(dim);

    let mut state = OptimizerState::new(*method, x0);
    let mut trace = Trace::new();
    trace.rows.reserve(iters + 1);
    for k in 0..=iters {
        let (f, v, g) = evaluate(source.objective(), &state.x, k)?;
        let alpha = schedule.value(k)?;
        trace.rows.push(TraceRow {
            k,
            f,
            v,
            grad_l1: g.l1_norm(),
            alpha,
            bound: None,
            bits_up: per_step_bits * k as u64,
            bits_down: 0,
        });
        if let Some(stride) = opts.snapshot_stride {
            if k % stride == 0 {
                trace.snapshots.push((k, state.x.clone()));
            }
        }
        if k == iters {
            break;
        }
        state = advance_with(method, &state, source, alpha, Some(&g))?;
    }
    Ok(trace)
}

/// Runs `repeats` independent jobs (typically one seed each) and returns
/// their traces in repeat order.
pub fn run_repeats<F>(exec: Execution, repeats: usize, job: F) -> Result<Vec<Trace>>
where
    F: Fn(usize) -> Result<Trace> + Sync + Send,
{
    par::map_indexed(exec, repeats, job).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_sum_of_squares, Quadratic};
    use crate::oracles::StochasticOracle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::from_slice(xs).unwrap()
    }

    fn st(xs: &[f64]) -> OptimizerState {
        OptimizerState::new(Method::Gd, v(xs))
    }

    fn x_sq() -> Quadratic {
        Quadratic::diagonal(&[2.0]).unwrap()
    }

    fn half_x_sq() -> Quadratic {
        Quadratic::diagonal(&[1.0]).unwrap()
    }

    #[test]
    fn gd_examples() {
        assert_eq!(step_gd(&st(&[1.0]), &x_sq(), 0.25).unwrap().x, v(&[0.5]));
        assert_eq!(step_gd(&st(&[0.0]), &x_sq(), 0.25).unwrap().x, v(&[0.0]));
        let s = step_gd(&st(&[1.0, 2.0]), &make_sum_of_squares(2).unwrap(), 0.1).unwrap();
        assert_relative_eq!(s.x[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(s.x[1], 1.6, epsilon = 1e-15);
        assert_eq!(s.k, 1);
    }

    #[test]
    fn signgd_examples() {
        let f = make_sum_of_squares(2).unwrap();
        let alpha = 0.1;
        let s1 = step_signgd(&st(&[alpha / 2.0, alpha / 2.0]), &f, alpha).unwrap();
        assert_eq!(s1.x, v(&[-0.05, -0.05]));
        let s2 = step_signgd(&s1, &f, alpha).unwrap();
        assert_eq!(s2.x, v(&[0.05, 0.05]));
        assert_eq!(step_signgd(&st(&[0.0, 0.0]), &f, alpha).unwrap().x, v(&[0.0, 0.0]));
        assert_eq!(step_signgd(&st(&[5.0]), &x_sq(), 1.0).unwrap().x, v(&[4.0]));
    }

    #[test]
    fn scaled_signgd_examples() {
        let mut s = st(&[1.0]);
        for k in 1..=10 {
            s = step_scaled_signgd(&s, &x_sq(), 0.25).unwrap();
            assert_eq!(s.x[0], 0.5f64.powi(k));
        }
        let f = make_sum_of_squares(2).unwrap();
        let s = step_scaled_signgd(&st(&[0.05, 0.05]), &f, 0.1).unwrap();
        assert_relative_eq!(s.x[0], 0.03, epsilon = 1e-15);
        assert_relative_eq!(s.x[1], 0.03, epsilon = 1e-15);
        assert_eq!(step_scaled_signgd(&st(&[0.0]), &x_sq(), 0.1).unwrap().x, v(&[0.0]));
    }

    /// Hands out a fixed sequence of gradients.
    struct Scripted<'a> {
        obj: &'a dyn Objective,
        queue: Vec<DenseVector>,
    }

    impl GradientSource for Scripted<'_> {
        fn objective(&self) -> &dyn Objective {
            self.obj
        }
        fn next_gradient(&mut self, _x: &DenseVector) -> Result<DenseVector> {
            Ok(self.queue.remove(0))
        }
        fn is_stochastic(&self) -> bool {
            true
        }
    }

    #[test]
    fn scaled_signsgd_examples() {
        let q = x_sq();
        let mut src = Scripted { obj: &q, queue: vec![v(&[2.4])] };
        let s = step_scaled_signsgd(&st(&[1.0]), &mut src, 0.1).unwrap();
        assert_relative_eq!(s.x[0], 0.76, epsilon = 1e-15);

        let arc: Arc<dyn Objective> = Arc::new(make_sum_of_squares(3).unwrap());
        let mut noiseless = StochasticOracle::gaussian(arc.clone(), 0.0, 1).unwrap();
        let x = st(&[0.3, -0.2, 0.9]);
        assert_eq!(
            step_scaled_signsgd(&x, &mut noiseless, 0.05).unwrap().x,
            step_scaled_signgd(&x, arc.as_ref(), 0.05).unwrap().x
        );
    }

    #[test]
    fn scaled_signsgd_is_deterministic_per_seed() {
        let arc: Arc<dyn Objective> = Arc::new(make_sum_of_squares(3).unwrap());
        let path = |seed| {
            let mut o = StochasticOracle::gaussian(arc.clone(), 0.3, seed).unwrap();
            let mut s = st(&[1.0, -1.0, 0.5]);
            let mut xs = Vec::new();
            for _ in 0..100 {
                s = step_scaled_signsgd(&s, &mut o, 0.05).unwrap();
                xs.push(s.x.clone());
            }
            xs
        };
        assert_eq!(path(9), path(9));
        assert_ne!(path(9), path(10));
    }

    #[test]
    fn adagrad_norm_examples() {
        let f = half_x_sq();
        let s = step_adagrad_norm(&st(&[1.0]), &f, 1.0).unwrap();
        assert_eq!(s.accumulator_b(), 1.0);
        assert_eq!(s.x[0], 0.0);

        let s = step_adagrad_norm(&st(&[0.0]).with_accumulator_b(2.0), &f, 1.0).unwrap();
        assert_eq!(s.x[0], 0.0);
        assert_eq!(s.accumulator_b(), 2.0);

        let s1 = step_adagrad_norm(&st(&[2.0]), &f, 1.0).unwrap();
        assert_eq!(s1.accumulator_b(), 2.0);
        assert_eq!(s1.x[0], 1.0);
        let s2 = step_adagrad_norm(&s1, &f, 1.0).unwrap();
        assert_relative_eq!(s2.accumulator_b(), 5f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(s2.x[0], 1.0 - 1.0 / 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn zero_accumulator_with_zero_gradient_is_a_no_op() {
        let f = half_x_sq();
        for step in [step_adagrad_norm, step_sign_adagrad_grad_accum, step_sign_adagrad_sign_accum] {
            let s = step(&st(&[0.0]), &f, 1.0).unwrap();
            assert_eq!(s.x[0], 0.0);
            assert_eq!(s.accumulator_b(), 0.0);
        }
    }

    #[test]
    fn sign_adagrad_grad_accum_examples() {
        let f = half_x_sq();
        let s = step_sign_adagrad_grad_accum(&st(&[1.0]), &f, 0.5).unwrap();
        assert_eq!(s.accumulator_b(), 1.0);
        assert_eq!(s.x[0], 0.5);

        // per-step identity x'^2 = x^2 - (eta / b'^2)(2 b' |x| - eta)
        let eta = 0.3;
        let mut s = st(&[1.7]);
        for _ in 0..200 {
            let next = step_sign_adagrad_grad_accum(&s, &f, eta).unwrap();
            let b = next.accumulator_b();
            let rhs = s.x[0].powi(2) - eta / (b * b) * (2.0 * b * s.x[0].abs() - eta);
            assert!((next.x[0].powi(2) - rhs).abs() <= 1e-12);
            s = next;
        }
    }

    #[test]
    fn sign_adagrad_sign_accum_matches_partial_sums() {
        let f = x_sq();
        let eta = 1.0;
        let mut s = st(&[eta / 2.0]);
        let mut partial = 0.5;
        // The closed form holds while sign(x_k) alternates; x_24 < 0 ends that.
        for k in 1..=50usize {
            let prev = s.x[0];
            s = step_sign_adagrad_sign_accum(&s, &f, eta).unwrap();
            partial += (-1f64).powi(k as i32) / (k as f64).sqrt();
            let agrees = (s.x[0] - eta * partial).abs() <= 1e-12;
            assert_eq!(agrees, k <= 24, "k={k}");
            assert_eq!(s.accumulator_b(), (k as f64).sqrt());
            let gd_form = prev - eta / (k as f64).sqrt() * prev.signum();
            assert_eq!(s.x[0], gd_form);
        }
        let mut s = st(&[eta / 2.0]);
        let expected = [-0.5, 0.207107, -0.370244];
        for e in expected {
            s = step_sign_adagrad_sign_accum(&s, &f, eta).unwrap();
            assert!((s.x[0] - e).abs() < 1e-6);
        }
        let z = step_sign_adagrad_sign_accum(&st(&[0.0]).with_accumulator_b(3.0), &f, 1.0).unwrap();
        assert_eq!((z.x[0], z.accumulator_b()), (0.0, 3.0));
    }

    #[test]
    fn ef_one_dimensional_compressor_is_exact() {
        let s = step_ef_signgd(&st(&[1.0]), &x_sq(), 0.1, EfMode::AtX).unwrap();
        assert_relative_eq!(s.x[0], 0.8, epsilon = 1e-15);
        assert_eq!(s.ef_residual[0], 0.0);
        let z = step_ef_signgd(&st(&[0.0, 0.0]), &make_sum_of_squares(2).unwrap(), 0.1, EfMode::AtX)
            .unwrap();
        assert!(z.x.is_zero() && z.ef_residual.is_zero());
    }

    #[test]
    fn ef_shifted_mode_is_gd_in_corrected_coordinates() {
        let f = Quadratic::diagonal(&[2.0, 4.0]).unwrap();
        let lambda = 0.1;
        let mut ef = st(&[1.0, -0.7]);
        let mut z = ef.x.clone();
        for _ in 0..10 {
            ef = step_ef_signgd(&ef, &f, lambda, EfMode::AtXMinusE).unwrap();
            z = z.add_scaled(-lambda, &f.gradient(&z).unwrap()).unwrap();
            let zk = ef.corrected_iterate().unwrap();
            for i in 0..2 {
                assert!((zk[i] - z[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn signum_examples() {
        let q = x_sq();
        let arc: Arc<dyn Objective> = Arc::new(x_sq());
        let mut exact = StochasticOracle::gaussian(arc, 0.0, 0).unwrap();
        let s = step_signum(&st(&[1.0]), &mut exact, 0.1, 0.9).unwrap();
        assert_relative_eq!(s.x[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(s.momentum[0], 0.2, epsilon = 1e-15);

        let g = vec![v(&[0.7]), v(&[-1.2]), v(&[0.1])];
        let mut a = Scripted { obj: &q, queue: g.clone() };
        let mut b = Scripted { obj: &q, queue: g };
        let mut sa = st(&[1.0]);
        let mut sb = st(&[1.0]);
        for _ in 0..3 {
            sa = step_signum(&sa, &mut a, 0.1, 0.0).unwrap();
            sb = advance(&Method::SignGd, &sb, &mut b, 0.1).unwrap();
            assert_eq!(sa.x, sb.x);
        }

        let mut constant = Scripted { obj: &q, queue: vec![v(&[-0.5]); 200] };
        let mut s = st(&[0.0]);
        for _ in 0..200 {
            let prev = s.x[0];
            s = step_signum(&s, &mut constant, 0.01, 0.9).unwrap();
            assert!(s.x[0] > prev);
        }
        assert!((s.momentum[0] + 0.5).abs() < 1e-8);
        assert!(step_signum(&st(&[1.0]), &mut exact, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_value(&Schedule::Constant(0.05), 0).unwrap(), 0.05);
        assert_eq!(schedule_value(&Schedule::Constant(0.05), 1234).unwrap(), 0.05);
        let d = Schedule::Diminishing { mu: 2.0, p_min: 0.9 };
        assert_relative_eq!(d.value(0).unwrap(), 1.875, epsilon = 1e-15);
        assert_relative_eq!(d.value(9).unwrap(), 0.1875, epsilon = 1e-15);
        assert!(Schedule::Diminishing { mu: 2.0, p_min: 0.5 }.value(0).is_err());
        assert!(Schedule::Diminishing { mu: 2.0, p_min: 0.4 }.value(0).is_err());
        assert!(Schedule::Constant(0.0).value(0).is_err());
        let c = Schedule::Custom(vec![0.1, 0.2]);
        assert_eq!(c.value(1).unwrap(), 0.2);
        assert!(c.value(2).is_err());
    }

    #[test]
    fn run_records_exact_geometric_decay() {
        let q = x_sq();
        let trace = run(
            &Method::ScaledSignGd,
            &mut ExactGradient::new(&q),
            &Schedule::Constant(0.25),
            v(&[1.0]),
            10,
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(trace.len(), 11);
        trace.check_contiguous().unwrap();
        for r in &trace.rows {
            let expected = 0.25f64.powi(r.k as i32);
            assert!((r.v.unwrap() - expected).abs() <= 1e-12 * expected);
        }
        assert_eq!(trace.rows[3].bits_up, 3 * (1 + 64));
    }

    #[test]
    fn run_on_oscillation_example_never_decreases_f() {
        let f = make_sum_of_squares(2).unwrap();
        let alpha = 0.1;
        let trace = run(
            &Method::SignGd,
            &mut ExactGradient::new(&f),
            &Schedule::Constant(alpha),
            v(&[alpha / 2.0, alpha / 2.0]),
            20,
            RunOptions { snapshot_stride: Some(1) },
        )
        .unwrap();
        let f0 = trace.rows[0].f;
        assert!(trace.rows.iter().all(|r| r.f == f0));
        assert_eq!(trace.snapshots[1].1, v(&[-0.05, -0.05]));
        assert_eq!(trace.snapshots[2].1, v(&[0.05, 0.05]));
    }

    #[test]
    fn run_rejects_zero_iters_and_reports_divergence() {
        let q = x_sq();
        let mut src = ExactGradient::new(&q);
        assert!(run(&Method::Gd, &mut src, &Schedule::Constant(0.1), v(&[1.0]), 0, RunOptions::default()).is_err());
        // |1 - 2 alpha| = 9 per step: overflows past the limit
        let err = run(&Method::Gd, &mut src, &Schedule::Constant(5.0), v(&[1.0]), 500, RunOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { k } if k > 50 && k < 120), "{err:?}");
    }

    #[test]
    fn run_is_deterministic_given_seed() {
        let arc: Arc<dyn Objective> = Arc::new(make_sum_of_squares(4).unwrap());
        let once = || {
            let mut o = StochasticOracle::gaussian(arc.clone(), 0.2, 77).unwrap();
            run(&Method::ScaledSignGd, &mut o, &Schedule::Constant(0.05), DenseVector::filled(4, 1.0).unwrap(), 100, RunOptions::default())
                .unwrap()
                .to_csv_string()
        };
        assert_eq!(once(), once());
    }

    #[test]
    fn csv_layout() {
        let q = x_sq();
        let t = run(&Method::Gd, &mut ExactGradient::new(&q), &Schedule::Constant(0.25), v(&[1.0]), 2, RunOptions::default())
            .unwrap();
        let csv = t.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_HEADER);
        assert_eq!(
            lines[1],
            "0,1.0000000000000000e0,1.0000000000000000e0,2.0000000000000000e0,2.5000000000000000e-1,,0,0"
        );
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn summary_averages_rows() {
        let mk = |vals: &[f64]| Trace {
            rows: vals
                .iter()
                .enumerate()
                .map(|(k, &x)| TraceRow { k, f: x, v: Some(x), grad_l1: 0.0, alpha: 0.1, bound: None, bits_up: 0, bits_down: 0 })
                .collect(),
            status: TraceStatus::Completed,
            snapshots: vec![],
        };
        let s = summarize(&[mk(&[1.0, 2.0]), mk(&[3.0, 4.0])]).unwrap();
        assert_eq!(s.mean.suboptimality().unwrap(), vec![2.0, 3.0]);
        assert_eq!(s.mean.status, TraceStatus::Averaged { runs: 2 });
        assert_relative_eq!(s.v_std[0].unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(summarize(&[mk(&[1.0]), mk(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(m.stochastic_name().parse::<Method>().unwrap(), m);
        }
        assert!("adam".parse::<Method>().is_err());
    }

    fn random_pd_quadratic(seed: u64) -> Quadratic {
        use nalgebra::DMatrix;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=6);
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(d, d) * rng.random_range(0.05..1.0);
        let lin = DenseVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        Quadratic::new(a, lin).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scaled_sign_is_scale_equivariant(seed in 0u64..10_000, c in 0.1f64..10.0, frac in 0.05f64..0.95) {
            let q = random_pd_quadratic(seed);
            let scaled = Quadratic::new(q.matrix() * c, {
                let b: Vec<f64> = q.minimizer().unwrap().iter().map(|_| 0.0).collect();
                DenseVector::new(b).unwrap()
            }).unwrap();
            let base = Quadratic::new(q.matrix().clone(), DenseVector::zeros(q.dim())).unwrap();
            let alpha = frac * 2.0 / base.constants().l_inf().unwrap();
            let x0 = DenseVector::filled(q.dim(), 0.7).unwrap();
            let mut a = OptimizerState::new(Method::ScaledSignGd, x0.clone());
            let mut b = a.clone();
            for _ in 0..20 {
                a = step_scaled_signgd(&a, &base, alpha).unwrap();
                b = step_scaled_signgd(&b, &scaled, alpha / c).unwrap();
                for i in 0..q.dim() {
                    prop_assert!((a.x[i] - b.x[i]).abs() <= 1e-9 * (1.0 + a.x[i].abs()));
                }
            }
        }

        #[test]
        fn scaled_sign_descent_inequality(seed in 0u64..10_000, frac in 0.01f64..0.99) {
            let q = random_pd_quadratic(seed);
            let l = q.constants().l_inf().unwrap();
            let alpha = frac * 2.0 / l;
            let gamma = alpha * (1.0 - l * alpha / 2.0);
            let mut s = OptimizerState::new(Method::ScaledSignGd, DenseVector::filled(q.dim(), 1.5).unwrap());
            for _ in 0..30 {
                let g1 = q.gradient(&s.x).unwrap().l1_norm();
                let next = step_scaled_signgd(&s, &q, alpha).unwrap();
                let dv = q.value(&next.x).unwrap() - q.value(&s.x).unwrap();
                prop_assert!(dv <= -gamma * g1 * g1 + 1e-10);
                s = next;
            }
        }

        #[test]
        fn ef_shifted_tracks_gd(seed in 0u64..10_000, frac in 0.05f64..0.9) {
            let q = random_pd_quadratic(seed);
            let lambda = frac / q.smoothness_l2().unwrap();
            let x0 = DenseVector::filled(q.dim(), -0.4).unwrap();
            let mut ef = OptimizerState::new(Method::EfSignGd(EfMode::AtXMinusE), x0.clone());
            let mut z = x0;
            for _ in 0..100 {
                ef = step_ef_signgd(&ef, &q, lambda, EfMode::AtXMinusE).unwrap();
                z = z.add_scaled(-lambda, &q.gradient(&z).unwrap()).unwrap();
                let zk = ef.corrected_iterate().unwrap();
                for i in 0..q.dim() {
                    prop_assert!((zk[i] - z[i]).abs() <= 1e-12);
                }
            }
        }
    }
}
