//! Forward-Euler integration of the gradient flow `x' = -beta grad f(x)` and
//! the sign flow `x' = -beta sign(grad f(x))`, with checks of their
//! continuous-time rate bounds.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::optimizers::fmt_float;
use crate::vecmath::DenseVector;

/// Sign-flow coordinates with `|g_i|` at most this are held still for a step.
pub const CHATTER_THRESHOLD: f64 = 1e-9;
/// Allowed per-step increase of `f` before the step size is halved.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;
pub const MAX_HALVINGS: u32 = 20;
pub const DEFAULT_SAMPLE_DT: f64 = 0.01;
pub const DEFAULT_FLOW_SLACK: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Gradient,
    Sign,
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowKind::Gradient => "gradient-flow",
            FlowKind::Sign => "sign-flow",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub beta: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Spacing between recorded samples.
    pub sample_dt: f64,
}

impl FlowConfig {
    pub fn new(kind: FlowKind, beta: f64, dt: f64, t_end: f64) -> Result<Self> {
        let cfg = Self {
            kind,
            beta,
            dt,
            t_end,
            sample_dt: DEFAULT_SAMPLE_DT.max(dt),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_sample_dt(mut self, sample_dt: f64) -> Result<Self> {
        self.sample_dt = sample_dt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::OutOfRange {
                    name,
                    value: v,
                    range: "(0, inf)".into(),
                })
            }
        };
        positive("beta", self.beta)?;
        positive("dt", self.dt)?;
        positive("t_end", self.t_end)?;
        positive("sample_dt", self.sample_dt)?;
        if self.dt > self.t_end {
            return Err(Error::config(format!("dt = {} exceeds t_end = {}", self.dt, self.t_end)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub v: f64,
    pub grad_l2: f64,
    pub grad_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrace {
    pub kind: FlowKind,
    pub beta: f64,
    /// Step size actually used after any halvings.
    pub dt: f64,
    pub halvings: u32,
    pub samples: Vec<FlowSample>,
    pub final_x: DenseVector,
}

pub const CONTINUOUS_CSV_HEADER: &str = "t,V,grad_l2,grad_l1";

impl ContinuousTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CONTINUOUS_CSV_HEADER}")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{}",
                fmt_float(s.t),
                fmt_float(s.v),
                fmt_float(s.grad_l2),
                fmt_float(s.grad_l1)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Sample closest to time `t`.
    pub fn at(&self, t: f64) -> Option<&FlowSample> {
        self.samples
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

enum Attempt {
    Done(Vec<FlowSample>, DenseVector),
    NotMonotone,
}

fn sample(obj: &dyn Objective, f_star: f64, x: &DenseVector, t: f64) -> Result<FlowSample> {
    let g = obj.gradient(x)?;
    Ok(FlowSample {
        t,
        v: obj.value(x)? - f_star,
        grad_l2: g.l2_norm(),
        grad_l1: g.l1_norm(),
    })
}

fn attempt(cfg: &FlowConfig, dt: f64, obj: &dyn Objective, f_star: f64, x0: &DenseVector) -> Result<Attempt> {
    let steps = (cfg.t_end / dt).round() as usize;
    let stride = ((cfg.sample_dt / dt).round() as usize).max(1);
    let mut x = x0.clone();
    let mut f = obj.value(&x)?;
    let mut samples = vec![sample(obj, f_star, &x, 0.0)?];
    for k in 1..=steps {
        let g = obj.gradient(&x)?;
        let direction = match cfg.kind {
            FlowKind::Gradient => g,
            FlowKind::Sign => DenseVector::new(
                g.iter()
                    .map(|&gi| if gi.abs() <= CHATTER_THRESHOLD { 0.0 } else { gi.signum() })
                    .collect(),
            )?,
        };
        x = x.add_scaled(-cfg.beta * dt, &direction)?;
        let f_next = obj.value(&x)?;
        if !f_next.is_finite() {
            return Err(Error::Divergence { k });
        }
        if f_next > f + MONOTONE_TOLERANCE {
            return Ok(Attempt::NotMonotone);
        }
        f = f_next;
        if k % stride == 0 || k == steps {
            samples.push(sample(obj, f_star, &x, k as f64 * dt)?);
        }
    }
    Ok(Attempt::Done(samples, x))
}

/// Integrates the flow from `x0` to `cfg.t_end`. If `f` rises by more than
/// [`MONOTONE_TOLERANCE`] in a step, the whole trajectory is recomputed with
/// half the step, at most [`MAX_HALVINGS`] times.
pub fn integrate_flow(cfg: &FlowConfig, obj: &dyn Objective, x0: &DenseVector) -> Result<ContinuousTrace> {
    cfg.validate()?;
    x0.expect_dim(obj.dim())?;
    let f_star = obj
        .f_star()
        .ok_or_else(|| Error::MissingData(format!("f* unknown for {}", obj.name())))?;
    let mut dt = cfg.dt;
    for halvings in 0..=MAX_HALVINGS {
        if let Attempt::Done(samples, final_x) = attempt(cfg, dt, obj, f_star, x0)? {
            return Ok(ContinuousTrace {
                kind: cfg.kind,
                beta: cfg.beta,
                dt,
                halvings,
                samples,
                final_x,
            });
        }
        dt /= 2.0;
    }
    Err(Error::Stiffness {
        halvings: MAX_HALVINGS,
    })
}

/// Gradient-flow bound for convex `f`: `D1^2 V0 / (D1^2 + V0 beta t)`.
pub fn prop1_convex_bound(d1: f64, v0: f64, beta: f64, t: f64) -> f64 {
    let d_sq = d1 * d1;
    if d_sq == 0.0 {
        return 0.0;
    }
    d_sq * v0 / (d_sq + v0 * beta * t)
}

/// Gradient-flow bound on `min |grad f|_2` up to time `t > 0`.
pub fn prop1_nonconvex_bound(v0: f64, beta: f64, t: f64) -> f64 {
    v0.sqrt() / (beta * t).sqrt()
}

/// Sign-flow bound for convex `f`: `V0 exp(-beta t / D2)`.
pub fn prop2_convex_bound(d2: f64, v0: f64, beta: f64, t: f64) -> f64 {
    if d2 == 0.0 {
        return 0.0;
    }
    v0 * (-beta * t / d2).exp()
}

/// Sign-flow bound on `min |grad f|_1` up to time `t > 0`.
pub fn prop2_nonconvex_bound(v0: f64, beta: f64, t: f64) -> f64 {
    v0 / (beta * t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowVerdict {
    pub pass: bool,
    /// Earliest sample time at which any checked inequality fails.
    pub first_violation_t: Option<f64>,
    /// Largest `V / bound` (convex check), if it ran.
    pub max_ratio_convex: Option<f64>,
    /// Largest `min-norm / bound` (nonconvex check).
    pub max_ratio_nonconvex: f64,
}

impl fmt::Display for FlowVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "result:              {}", if self.pass { "PASS" } else { "FAIL" })?;
        if let Some(r) = self.max_ratio_convex {
            writeln!(f, "max V/bound:         {r:.6e}")?;
        }
        writeln!(f, "max min-norm/bound:  {:.6e}", self.max_ratio_nonconvex)?;
        match self.first_violation_t {
            Some(t) => write!(f, "first violation:     t = {t}"),
            None => write!(f, "first violation:     none"),
        }
    }
}

/// The diameter to check against, or `None` when the convex check is off.
fn convex_diameter(diameter: Option<f64>, convex: bool) -> Result<Option<f64>> {
    if !convex {
        return Ok(None);
    }
    let d = diameter.ok_or_else(|| Error::MissingData("sublevel-set diameter required for the convex check".into()))?;
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::invalid(format!("diameter must be finite and >= 0, got {d}")));
    }
    Ok(Some(d))
}

fn check_flow(
    trace: &ContinuousTrace,
    expected: FlowKind,
    beta: f64,
    diameter: Option<f64>,
    convex_bound: impl Fn(f64, f64, f64, f64) -> f64,
    nonconvex_bound: impl Fn(f64, f64, f64) -> f64,
    norm: impl Fn(&FlowSample) -> f64,
) -> Result<FlowVerdict> {
    if trace.kind != expected {
        return Err(Error::invalid(format!("expected a {expected} trace, got {}", trace.kind)));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::OutOfRange {
            name: "beta",
            value: beta,
            range: "(0, inf)".into(),
        });
    }
    let first = trace
        .samples
        .first()
        .ok_or_else(|| Error::MissingData("empty flow trace".into()))?;
    let v0 = first.v;
    let slack = DEFAULT_FLOW_SLACK;
    let mut verdict = FlowVerdict {
        pass: true,
        first_violation_t: None,
        max_ratio_convex: diameter.map(|_| 0.0),
        max_ratio_nonconvex: 0.0,
    };
    let mut running_min = f64::INFINITY;
    for s in &trace.samples {
        running_min = running_min.min(norm(s));
        let mut violated = false;
        if let Some(d) = diameter {
            let bound = convex_bound(d, v0, beta, s.t);
            let ratio = if bound > 0.0 { s.v / bound } else if s.v <= 0.0 { 0.0 } else { f64::INFINITY };
            verdict.max_ratio_convex = verdict.max_ratio_convex.map(|r| r.max(ratio));
            violated |= s.v > slack * bound;
        }
        if s.t > 0.0 {
            let bound = nonconvex_bound(v0, beta, s.t);
            let ratio = if bound > 0.0 { running_min / bound } else if running_min <= 0.0 { 0.0 } else { f64::INFINITY };
            verdict.max_ratio_nonconvex = verdict.max_ratio_nonconvex.max(ratio);
            violated |= running_min > slack * bound;
        }
        if violated && verdict.first_violation_t.is_none() {
            verdict.first_violation_t = Some(s.t);
            verdict.pass = false;
        }
    }
    Ok(verdict)
}

/// Checks the gradient-flow bounds at every sample. The convex bound needs
/// the l2 sublevel-set diameter `d1`.
pub fn check_prop1(trace: &ContinuousTrace, d1: Option<f64>, beta: f64, convex: bool) -> Result<FlowVerdict> {
    check_flow(
        trace,
        FlowKind::Gradient,
        beta,
        convex_diameter(d1, convex)?,
        prop1_convex_bound,
        prop1_nonconvex_bound,
        |s| s.grad_l2,
    )
}

/// Checks the sign-flow bounds at every sample. The convex bound needs the
/// l-infinity sublevel-set diameter `d2`.
pub fn check_prop2(trace: &ContinuousTrace, d2: Option<f64>, beta: f64, convex: bool) -> Result<FlowVerdict> {
    check_flow(
        trace,
        FlowKind::Sign,
        beta,
        convex_diameter(d2, convex)?,
        prop2_convex_bound,
        prop2_nonconvex_bound,
        |s| s.grad_l1,
    )
}
