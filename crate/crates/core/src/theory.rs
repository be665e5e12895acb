//! Closed-form rate constants, error floors, the regularized incomplete beta
//! function and checks of recorded traces against those bounds.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optimizers::Trace;

fn out_of_range(name: &'static str, value: f64, range: String) -> Error {
    Error::OutOfRange { name, value, range }
}

fn check_curvature(mu: f64, l: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(out_of_range("mu", mu, "(0, inf)".into()));
    }
    if !(l >= mu && l.is_finite()) {
        return Err(out_of_range("L", l, format!("[mu = {mu}, inf)")));
    }
    Ok(())
}

fn check_p_min(p_min: f64) -> Result<()> {
    if !(p_min > 0.5 && p_min <= 1.0) {
        return Err(out_of_range("p_min", p_min, "(1/2, 1]".into()));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(out_of_range("sigma", sigma, "[0, inf)".into()));
    }
    Ok(())
}

fn check_step(alpha: f64, upper: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < upper) {
        return Err(out_of_range("alpha", alpha, format!("(0, {upper})")));
    }
    Ok(())
}

/// Linear rate of scaled sign descent: `1 - 2 mu alpha (1 - L alpha / 2)`.
pub fn rate_zeta(mu: f64, l: f64, alpha: f64) -> Result<f64> {
    check_curvature(mu, l)?;
    check_step(alpha, 2.0 / l)?;
    let zeta = 1.0 - 2.0 * mu * alpha * (1.0 - l * alpha / 2.0);
    assert!((0.0..1.0).contains(&zeta), "zeta = {zeta} outside [0, 1)");
    Ok(zeta)
}

/// `gamma = alpha (1 - L alpha / 2)`, the per-step descent coefficient.
pub fn gamma(l: f64, alpha: f64) -> Result<f64> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(out_of_range("L", l, "(0, inf)".into()));
    }
    check_step(alpha, 2.0 / l)?;
    Ok(alpha * (1.0 - l * alpha / 2.0))
}

fn stochastic_rate(mu: f64, l: f64, alpha: f64, sigma: f64, q: f64) -> (f64, f64) {
    let margin = 2.0 * q - 1.0 - l * alpha;
    let zeta = 1.0 - 2.0 * mu * alpha * margin;
    let floor = l * sigma * sigma * alpha / (2.0 * mu * margin);
    (zeta, floor)
}

/// Rate and error floor of scaled sign SGD with a constant step.
pub fn rate_zeta1_and_floor(
    mu: f64,
    l: f64,
    alpha: f64,
    sigma: f64,
    p_min: f64,
) -> Result<(f64, f64)> {
    check_curvature(mu, l)?;
    check_p_min(p_min)?;
    check_sigma(sigma)?;
    check_step(alpha, (2.0 * p_min - 1.0) / l)?;
    let (zeta1, floor1) = stochastic_rate(mu, l, alpha, sigma, p_min);
    assert!((0.5..1.0).contains(&zeta1), "zeta1 = {zeta1} outside [1/2, 1)");
    Ok((zeta1, floor1))
}

/// `floor((M + 1) / 2)`, the number of agreeing workers a majority needs.
pub fn kappa(workers: usize) -> usize {
    workers.div_ceil(2)
}

/// Rate and error floor of majority-vote scaled sign SGD over `workers` nodes.
pub fn rate_zeta2_and_floor(
    mu: f64,
    l: f64,
    alpha: f64,
    sigma: f64,
    p_min: f64,
    workers: usize,
) -> Result<(f64, f64)> {
    if workers == 0 {
        return Err(Error::invalid("at least one worker is required"));
    }
    check_curvature(mu, l)?;
    check_p_min(p_min)?;
    check_sigma(sigma)?;
    let k = kappa(workers) as f64;
    let q = reg_inc_beta(p_min, k, k)?;
    check_step(alpha, (2.0 * q - 1.0) / l)?;
    let (zeta2, _) = stochastic_rate(mu, l, alpha, sigma, q);
    assert!((0.5..1.0).contains(&zeta2), "zeta2 = {zeta2} outside [1/2, 1)");
    let floor2 = l * sigma * sigma * alpha * alpha / (1.0 - zeta2);
    Ok((zeta2, floor2))
}

/// `min_l |g_l|_1^2` bound for smooth nonconvex objectives.
pub fn nonconvex_bound(f0_gap: f64, l: f64, alpha: f64, k: usize) -> Result<f64> {
    if !(f0_gap >= 0.0 && f0_gap.is_finite()) {
        return Err(out_of_range("f0_gap", f0_gap, "[0, inf)".into()));
    }
    Ok(f0_gap / (gamma(l, alpha)? * (k as f64 + 1.0)))
}

/// Expected-suboptimality bound under the diminishing schedule.
pub fn diminishing_bound(
    mu: f64,
    l: f64,
    sigma: f64,
    p_min: f64,
    f0_gap: f64,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(out_of_range("k", 0.0, "[1, inf)".into()));
    }
    check_curvature(mu, l)?;
    check_p_min(p_min)?;
    check_sigma(sigma)?;
    if !(f0_gap >= 0.0 && f0_gap.is_finite()) {
        return Err(out_of_range("f0_gap", f0_gap, "[0, inf)".into()));
    }
    let k = k as f64;
    let edge = 2.0 * p_min - 1.0;
    let noise = 9.0 * l * sigma * sigma / (mu * mu * edge * edge) * (32.0 / k + 1.0 / (k * k));
    Ok(noise + f0_gap / (k + 1.0).powi(3))
}

// ---------------------------------------------------------------------------
// Regularized incomplete beta by adaptive Gauss-Kronrod quadrature

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point
/// Gauss rule.
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, (kronrod - gauss).abs() * h)
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (value, err) = gk15(f, a, b);
    if err <= tol || depth == 0 || (b - a).abs() < 1e-15 {
        return value;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, 0.5 * tol, depth - 1) + adaptive(f, m, b, 0.5 * tol, depth - 1)
}

const QUAD_TOL: f64 = 1e-15;
const QUAD_DEPTH: u32 = 48;

/// `int_0^x t^(a-1) (1-t)^(b-1) dt` for `x <= 1/2`. For `a < 1` the
/// substitution `u = t^a` removes the endpoint singularity.
fn left_integral(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if a < 1.0 {
        let g = |u: f64| (1.0 - u.powf(1.0 / a)).powf(b - 1.0);
        adaptive(&g, 0.0, x.powf(a), QUAD_TOL, QUAD_DEPTH) / a
    } else {
        let g = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
        adaptive(&g, 0.0, x, QUAD_TOL, QUAD_DEPTH)
    }
}

/// Regularized incomplete beta `I_p(a, b)`.
pub fn reg_inc_beta(p: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(out_of_range("a", a, "(0, inf)".into()));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(out_of_range("b", b, "(0, inf)".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(out_of_range("p", p, "[0, 1]".into()));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    // Split at 1/2; the right half is the left integral of the mirrored density.
    let left_half = left_integral(0.5, a, b);
    let right_half = left_integral(0.5, b, a);
    let total = left_half + right_half;
    let value = if p <= 0.5 {
        left_integral(p, a, b) / total
    } else {
        1.0 - left_integral(1.0 - p, b, a) / total
    };
    Ok(value.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Rate bundles and trace verification

/// Rate constants for one configuration. Only the constants that apply to
/// the constructor used are populated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateBundle {
    pub mu: f64,
    pub l: f64,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub p_min: Option<f64>,
    pub workers: Option<usize>,
    pub kappa: Option<usize>,
    pub zeta: Option<f64>,
    pub gamma: Option<f64>,
    pub zeta1: Option<f64>,
    pub floor1: Option<f64>,
    pub zeta2: Option<f64>,
    pub floor2: Option<f64>,
}

impl RateBundle {
    /// Deterministic scaled sign descent with constant step.
    pub fn deterministic(mu: f64, l: f64, alpha: f64) -> Result<Self> {
        Ok(Self {
            mu,
            l,
            alpha: Some(alpha),
            zeta: Some(rate_zeta(mu, l, alpha)?),
            gamma: Some(gamma(l, alpha)?),
            ..Self::default()
        })
    }

    /// Single-node stochastic, constant step.
    pub fn stochastic(mu: f64, l: f64, alpha: f64, sigma: f64, p_min: f64) -> Result<Self> {
        let (zeta1, floor1) = rate_zeta1_and_floor(mu, l, alpha, sigma, p_min)?;
        Ok(Self {
            mu,
            l,
            alpha: Some(alpha),
            sigma: Some(sigma),
            p_min: Some(p_min),
            zeta1: Some(zeta1),
            floor1: Some(floor1),
            ..Self::default()
        })
    }

    /// Single-node stochastic under the diminishing schedule.
    pub fn diminishing(mu: f64, l: f64, sigma: f64, p_min: f64) -> Result<Self> {
        check_curvature(mu, l)?;
        check_p_min(p_min)?;
        check_sigma(sigma)?;
        Ok(Self {
            mu,
            l,
            sigma: Some(sigma),
            p_min: Some(p_min),
            ..Self::default()
        })
    }

    /// Majority vote over `workers` nodes, constant step.
    pub fn distributed(
        mu: f64,
        l: f64,
        alpha: f64,
        sigma: f64,
        p_min: f64,
        workers: usize,
    ) -> Result<Self> {
        let (zeta2, floor2) = rate_zeta2_and_floor(mu, l, alpha, sigma, p_min, workers)?;
        Ok(Self {
            mu,
            l,
            alpha: Some(alpha),
            sigma: Some(sigma),
            p_min: Some(p_min),
            workers: Some(workers),
            kappa: Some(kappa(workers)),
            zeta2: Some(zeta2),
            floor2: Some(floor2),
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundKind {
    Thm1,
    Thm2Const,
    Thm2Dimin,
    Thm3Dist,
}

impl BoundKind {
    pub fn id(&self) -> &'static str {
        match self {
            BoundKind::Thm1 => "thm1",
            BoundKind::Thm2Const => "thm2-const",
            BoundKind::Thm2Dimin => "thm2-dimin",
            BoundKind::Thm3Dist => "thm3-dist",
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "thm1" => Ok(BoundKind::Thm1),
            "thm2-const" => Ok(BoundKind::Thm2Const),
            "thm2-dimin" => Ok(BoundKind::Thm2Dimin),
            "thm3-dist" => Ok(BoundKind::Thm3Dist),
            other => Err(Error::config(format!(
                "unknown bound '{other}' (expected thm1, thm2-const, thm2-dimin or thm3-dist)"
            ))),
        }
    }
}

/// Bound value at iteration `k` given the starting gap `v0`.
pub fn bound_at(bundle: &RateBundle, which: BoundKind, v0: f64, k: usize) -> Result<Option<f64>> {
    let missing = |what: &str| Error::MissingData(format!("{what} not set for {which}"));
    let kf = k as i32;
    Ok(match which {
        BoundKind::Thm1 => Some(bundle.zeta.ok_or_else(|| missing("zeta"))?.powi(kf) * v0),
        BoundKind::Thm2Const => {
            let z = bundle.zeta1.ok_or_else(|| missing("zeta1"))?;
            let floor = bundle.floor1.ok_or_else(|| missing("floor1"))?;
            Some(z.powi(kf) * v0 + floor)
        }
        BoundKind::Thm2Dimin => {
            if k == 0 {
                None
            } else {
                let sigma = bundle.sigma.ok_or_else(|| missing("sigma"))?;
                let p = bundle.p_min.ok_or_else(|| missing("p_min"))?;
                Some(diminishing_bound(bundle.mu, bundle.l, sigma, p, v0, k)?)
            }
        }
        BoundKind::Thm3Dist => {
            let z = bundle.zeta2.ok_or_else(|| missing("zeta2"))?;
            let floor = bundle.floor2.ok_or_else(|| missing("floor2"))?;
            Some(z.powi(kf) * v0 + floor)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub which: BoundKind,
    pub pass: bool,
    pub first_violation_k: Option<usize>,
    /// Largest `V_k / bound_k` seen over the checked range.
    pub max_ratio: f64,
    pub checked: usize,
    pub slack: f64,
}

pub const VERDICT_CSV_HEADER: &str = "theorem,pass,first_violation_k,max_ratio";

impl Verdict {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.16e}",
            self.which,
            self.pass,
            self.first_violation_k.map(|k| k.to_string()).unwrap_or_default(),
            self.max_ratio
        )
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bound:            {}", self.which)?;
        writeln!(f, "result:           {}", if self.pass { "PASS" } else { "FAIL" })?;
        writeln!(f, "iterations:       {}", self.checked)?;
        writeln!(f, "slack:            {}", self.slack)?;
        writeln!(f, "max V/bound:      {:.6e}", self.max_ratio)?;
        match self.first_violation_k {
            Some(k) => write!(f, "first violation:  k = {k}"),
            None => write!(f, "first violation:  none"),
        }
    }
}

/// Which iterations to check (inclusive). Defaults to the whole trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub slack: f64,
    pub k_min: usize,
    pub k_max: Option<usize>,
}

impl VerifyOptions {
    pub fn with_slack(slack: f64) -> Self {
        Self {
            slack,
            k_min: 0,
            k_max: None,
        }
    }

    pub fn range(mut self, k_min: usize, k_max: usize) -> Self {
        self.k_min = k_min;
        self.k_max = Some(k_max);
        self
    }
}

/// Checks `V_k <= slack * bound_k`. Stochastic bounds should be checked
/// against a seed-averaged trace since they bound expectations.
pub fn verify_trace_bound(
    trace: &Trace,
    bundle: &RateBundle,
    which: BoundKind,
    slack: f64,
) -> Result<Verdict> {
    verify_trace_bound_with(trace, bundle, which, VerifyOptions::with_slack(slack))
}

pub fn verify_trace_bound_with(
    trace: &Trace,
    bundle: &RateBundle,
    which: BoundKind,
    opts: VerifyOptions,
) -> Result<Verdict> {
    if !(opts.slack >= 1.0 && opts.slack.is_finite()) {
        return Err(out_of_range("slack", opts.slack, "[1, inf)".into()));
    }
    let v = trace.suboptimality()?;
    let v0 = *v.first().ok_or_else(|| Error::MissingData("empty trace".into()))?;
    let mut verdict = Verdict {
        which,
        pass: true,
        first_violation_k: None,
        max_ratio: 0.0,
        checked: 0,
        slack: opts.slack,
    };
    let k_max = opts.k_max.unwrap_or(usize::MAX);
    for (row, vk) in trace.rows.iter().zip(&v) {
        if row.k < opts.k_min || row.k > k_max {
            continue;
        }
        let Some(bound) = bound_at(bundle, which, v0, row.k)? else {
            continue;
        };
        verdict.checked += 1;
        let ratio = if bound > 0.0 {
            vk / bound
        } else if *vk <= 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        verdict.max_ratio = verdict.max_ratio.max(ratio);
        if *vk > opts.slack * bound && verdict.first_violation_k.is_none() {
            verdict.first_violation_k = Some(row.k);
            verdict.pass = false;
        }
    }
    if verdict.checked == 0 {
        return Err(Error::MissingData("no iterations in the checked range".into()));
    }
    Ok(verdict)
}

/// Fills the trace's `bound` column for `which`.
pub fn annotate_bounds(trace: &mut Trace, bundle: &RateBundle, which: BoundKind) -> Result<()> {
    let v0 = trace.suboptimality()?[0];
    let bounds: Vec<Option<f64>> = trace
        .rows
        .iter()
        .map(|r| bound_at(bundle, which, v0, r.k))
        .collect::<Result<_>>()?;
    trace.set_bounds(|k| bounds.get(k).copied().flatten());
    Ok(())
}
