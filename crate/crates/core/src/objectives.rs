//! Test objectives with analytic gradients and the l-infinity constants that
//! drive the rate bounds.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::vecmath::DenseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant {
    pub value: f64,
    pub provenance: Provenance,
}

impl Constant {
    pub fn analytic(value: f64) -> Self {
        Self {
            value,
            provenance: Provenance::Analytic,
        }
    }

    pub fn estimated(value: f64) -> Self {
        Self {
            value,
            provenance: Provenance::Estimated,
        }
    }
}

/// Strong convexity (wrt l-inf), l-inf/l1 smoothness and PL constants.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConstantSet {
    pub mu_inf: Option<Constant>,
    pub l_inf: Option<Constant>,
    pub pl_mu: Option<Constant>,
}

impl ConstantSet {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("mu_inf", self.mu_inf), ("L_inf", self.l_inf), ("pl_mu", self.pl_mu)] {
            if let Some(c) = c {
                if !(c.value > 0.0 && c.value.is_finite()) {
                    return Err(Error::invalid(format!("{name} must be positive, got {}", c.value)));
                }
            }
        }
        if let (Some(mu), Some(l)) = (self.mu_inf, self.l_inf) {
            if mu.provenance == Provenance::Analytic
                && l.provenance == Provenance::Analytic
                && mu.value > l.value
            {
                return Err(Error::invalid(format!(
                    "mu_inf = {} exceeds L_inf = {}",
                    mu.value, l.value
                )));
            }
        }
        Ok(())
    }

    pub fn mu_inf(&self) -> Option<f64> {
        self.mu_inf.map(|c| c.value)
    }

    pub fn l_inf(&self) -> Option<f64> {
        self.l_inf.map(|c| c.value)
    }

    pub fn pl_mu(&self) -> Option<f64> {
        self.pl_mu.map(|c| c.value)
    }
}

/// A differentiable objective `f: R^d -> R`.
///
/// Implementations are immutable after construction and safe to evaluate
/// from several threads at once.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn value(&self, x: &DenseVector) -> Result<f64>;

    fn gradient(&self, x: &DenseVector) -> Result<DenseVector>;

    fn f_star(&self) -> Option<f64>;

    fn minimizer(&self) -> Option<&DenseVector> {
        None
    }

    fn constants(&self) -> &ConstantSet;

    /// `(f(x), grad f(x))`; override when one pass can produce both.
    fn value_and_gradient(&self, x: &DenseVector) -> Result<(f64, DenseVector)> {
        Ok((self.value(x)?, self.gradient(x)?))
    }

    /// Suboptimality `f(x) - f*`, when `f*` is known.
    fn gap(&self, x: &DenseVector) -> Result<Option<f64>> {
        match self.f_star() {
            Some(fs) => Ok(Some(self.value(x)? - fs)),
            None => Ok(None),
        }
    }

    /// Suboptimality given an already computed `value = f(x)`.
    fn gap_from_value(&self, x: &DenseVector, value: f64) -> Result<Option<f64>> {
        let _ = x;
        Ok(self.f_star().map(|fs| value - fs))
    }

    /// Upper bound on the Euclidean Lipschitz constant of the gradient.
    fn smoothness_l2(&self) -> Option<f64> {
        None
    }
}

impl fmt::Debug for dyn Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Objective({}, d = {})", self.name(), self.dim())
    }
}

/// Objectives of the form `f(x) = (1/n) sum_i f_i(x)`, for mini-batch oracles.
pub trait FiniteSum: Objective {
    fn num_components(&self) -> usize;

    /// Adds `grad f_i(x)` into `out`.
    fn add_component_gradient(&self, i: usize, x: &DenseVector, out: &mut [f64]);
}

// ---------------------------------------------------------------------------
// Quadratic

/// `f(x) = 1/2 x'Ax - b'x` with `A` symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DMatrix<f64>,
    b: DVector<f64>,
    f_star: Option<f64>,
    minimizer: Option<DenseVector>,
    constants: ConstantSet,
    eig_min: f64,
    eig_max: f64,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>, b: DenseVector) -> Result<Self> {
        let d = b.dim();
        if a.nrows() != a.ncols() {
            return Err(Error::invalid(format!(
                "matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: d,
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = a.clone().symmetric_eigen();
        let eig_min = eig.eigenvalues.min();
        let eig_max = eig.eigenvalues.max();
        let tol = 1e-10 * eig_max.abs().max(1.0);
        if eig_min < -tol {
            return Err(Error::invalid(format!(
                "matrix is not positive semidefinite (smallest eigenvalue {eig_min})"
            )));
        }
        let bv = DVector::from_column_slice(b.as_slice());

        let x_star = if eig_min > tol {
            a.clone()
                .cholesky()
                .map(|c| c.solve(&bv))
                .ok_or_else(|| Error::NoMinimum("Cholesky factorization failed".into()))?
        } else {
            let pinv = a
                .clone()
                .pseudo_inverse(tol)
                .map_err(|e| Error::NoMinimum(e.to_string()))?;
            let x = &pinv * &bv;
            let resid = (&a * &x - &bv).norm();
            if resid > 1e-9 * (bv.norm() + 1.0) {
                return Err(Error::NoMinimum(
                    "b is not in the range of a singular A; f is unbounded below".into(),
                ));
            }
            x
        };

        let l_inf = a.iter().map(|v| v.abs()).sum::<f64>();
        let constants = ConstantSet {
            mu_inf: (eig_min > tol).then(|| Constant::analytic(eig_min)),
            l_inf: (l_inf > 0.0).then(|| Constant::analytic(l_inf)),
            pl_mu: None,
        };
        constants.validate()?;

        let minimizer = DenseVector::new(x_star.iter().copied().collect())?;
        let mut q = Self {
            a,
            b: bv,
            f_star: None,
            minimizer: None,
            constants,
            eig_min,
            eig_max,
        };
        q.f_star = Some(q.value(&minimizer)?);
        q.minimizer = Some(minimizer);
        Ok(q)
    }

    /// `f(x) = 1/2 sum_i diag_i x_i^2`.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let d = diag.len();
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            DenseVector::zeros(d.max(1)),
        )
    }

    /// Builds from a row-major list of rows.
    pub fn from_rows(rows: &[Vec<f64>], b: &[f64]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("matrix rows must all have length n"));
        }
        let a = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Self::new(a, DenseVector::from_slice(b)?)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn smallest_eigenvalue(&self) -> f64 {
        self.eig_min
    }

    /// Largest l2 and l-inf distances from the minimizer over the sublevel
    /// set `{x : f(x) <= f(x0)}`, in closed form. Requires `A` positive
    /// definite.
    pub fn sublevel_diameters(&self, x0: &DenseVector) -> Result<(f64, f64)> {
        let mu = self
            .constants
            .mu_inf()
            .ok_or_else(|| Error::MissingData("sublevel diameters need a positive definite A".into()))?;
        let r2 = 2.0 * self.gap(x0)?.unwrap_or(0.0).max(0.0);
        let inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NoMinimum("A is singular".into()))?;
        let d1 = (r2 / mu).sqrt();
        let d2 = (0..self.dim())
            .map(|i| (r2 * inv[(i, i)]).sqrt())
            .fold(0.0, f64::max);
        Ok((d1, d2))
    }

    fn apply(&self, x: &DenseVector) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x.as_slice())
    }
}

impl Objective for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, x: &DenseVector) -> Result<f64> {
        x.expect_dim(self.dim())?;
        let ax = self.apply(x);
        let xs = x.as_slice();
        let quad: f64 = xs.iter().zip(ax.iter()).map(|(a, b)| a * b).sum();
        let lin: f64 = xs.iter().zip(self.b.iter()).map(|(a, b)| a * b).sum();
        Ok(0.5 * quad - lin)
    }

    fn gradient(&self, x: &DenseVector) -> Result<DenseVector> {
        x.expect_dim(self.dim())?;
        let g = self.apply(x) - &self.b;
        DenseVector::new(g.iter().copied().collect())
    }

    fn f_star(&self) -> Option<f64> {
        self.f_star
    }

    fn minimizer(&self) -> Option<&DenseVector> {
        self.minimizer.as_ref()
    }

    fn constants(&self) -> &ConstantSet {
        &self.constants
    }

    /// `1/2 (x - x*)'A(x - x*)`, which avoids cancellation against `f*`.
    fn gap(&self, x: &DenseVector) -> Result<Option<f64>> {
        let Some(xs) = &self.minimizer else {
            return Ok(None);
        };
        let e = x.sub(xs)?;
        let ae = self.apply(&e);
        Ok(Some(
            0.5 * e.iter().zip(ae.iter()).map(|(a, b)| a * b).sum::<f64>(),
        ))
    }

    fn gap_from_value(&self, x: &DenseVector, _value: f64) -> Result<Option<f64>> {
        self.gap(x)
    }

    fn smoothness_l2(&self) -> Option<f64> {
        Some(self.eig_max)
    }
}

/// `f(x) = x1^2 + x2^2`, the two-dimensional oscillation example.
pub fn make_sum_of_squares(dim: usize) -> Result<Quadratic> {
    Quadratic::diagonal(&vec![2.0; dim])
}

// ---------------------------------------------------------------------------
// Toy PL objective

/// `f(x) = x^2 + 3 sin^2(x)`: nonconvex but PL.
#[derive(Debug, Clone)]
pub struct ToyPl {
    minimizer: DenseVector,
    constants: ConstantSet,
}

impl ToyPl {
    pub fn new() -> Self {
        let mut toy = Self {
            minimizer: DenseVector::zeros(1),
            constants: ConstantSet {
                mu_inf: None,
                l_inf: Some(Constant::analytic(8.0)),
                pl_mu: None,
            },
        };
        let region = BoxRegion::cube(1, -10.0, 10.0).expect("valid box");
        let est = estimate_constants(&toy, &region, 20_000, 0).expect("toy objective has f*");
        toy.constants.pl_mu = est.pl_mu;
        toy
    }
}

impl Default for ToyPl {
    fn default() -> Self {
        Self::new()
    }
}

pub fn make_toy_pl() -> ToyPl {
    ToyPl::new()
}

impl Objective for ToyPl {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &DenseVector) -> Result<f64> {
        x.expect_dim(1)?;
        let t = x[0];
        let s = t.sin();
        Ok(t * t + 3.0 * s * s)
    }

    fn gradient(&self, x: &DenseVector) -> Result<DenseVector> {
        x.expect_dim(1)?;
        let t = x[0];
        DenseVector::new(vec![2.0 * t + 3.0 * (2.0 * t).sin()])
    }

    fn f_star(&self) -> Option<f64> {
        Some(0.0)
    }

    fn minimizer(&self) -> Option<&DenseVector> {
        Some(&self.minimizer)
    }

    fn constants(&self) -> &ConstantSet {
        &self.constants
    }

    fn smoothness_l2(&self) -> Option<f64> {
        Some(8.0)
    }
}

// ---------------------------------------------------------------------------
// Logistic regression

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: DenseVector,
    pub label: f64,
}

/// L2-regularized logistic loss
/// `f(x) = (1/n) sum_i log(1 + exp(-b_i a_i'x)) + |x|^2 / (2n)`.
#[derive(Debug, Clone)]
pub struct Logistic {
    n: usize,
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    f_star: Option<f64>,
    minimizer: Option<DenseVector>,
    constants: ConstantSet,
    smoothness_l2: f64,
    exec: Execution,
}

pub fn make_logistic(samples: &[Sample]) -> Result<Logistic> {
    Logistic::new(samples)
}

impl Logistic {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("logistic objective needs at least one sample"))?;
        let d = first.features.dim();
        let n = samples.len();
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            if s.features.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.features.dim(),
                });
            }
            if s.label != 1.0 && s.label != -1.0 {
                return Err(Error::invalid(format!(
                    "sample {i} has label {}, expected -1 or +1",
                    s.label
                )));
            }
            features.extend_from_slice(s.features.as_slice());
            labels.push(s.label);
        }
        let nf = n as f64;
        // |H v|_1 <= (sum_jk |H_jk|) |v|_inf with H <= (1/4n) sum a a' + I/n
        let l_inf = features
            .chunks(d)
            .map(|a| a.iter().map(|v| v.abs()).sum::<f64>().powi(2))
            .sum::<f64>()
            / (4.0 * nf)
            + d as f64 / nf;
        let constants = ConstantSet {
            mu_inf: Some(Constant::analytic(1.0 / nf)),
            l_inf: Some(Constant::analytic(l_inf)),
            pl_mu: None,
        };
        constants.validate()?;

        let design = DMatrix::from_row_slice(n, d, &features);
        let gram = design.transpose() * &design;
        let lambda_max = gram.symmetric_eigenvalues().max();
        let smoothness_l2 = lambda_max / (4.0 * nf) + 1.0 / nf;

        Ok(Self {
            n,
            d,
            features,
            labels,
            f_star: None,
            minimizer: None,
            constants,
            smoothness_l2,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Records an externally computed optimum (e.g. from a long GD run).
    pub fn set_optimum(&mut self, f_star: f64, minimizer: Option<DenseVector>) {
        self.f_star = Some(f_star);
        self.minimizer = minimizer;
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn margin(&self, i: usize, x: &[f64]) -> f64 {
        self.labels[i] * self.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logistic_fn(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Objective for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, x: &DenseVector) -> Result<f64> {
        x.expect_dim(self.d)?;
        let xs = x.as_slice();
        let loss = par::chunked_sum(self.exec, self.n, |i| softplus(-self.margin(i, xs)));
        let nf = self.n as f64;
        Ok(loss / nf + x.l2_norm_squared() / (2.0 * nf))
    }

    fn gradient(&self, x: &DenseVector) -> Result<DenseVector> {
        x.expect_dim(self.d)?;
        let xs = x.as_slice();
        let sum = par::chunked_vector_sum(self.exec, self.n, self.d, |i, acc| {
            let w = -self.labels[i] * logistic_fn(-self.margin(i, xs));
            for (o, a) in acc.iter_mut().zip(self.row(i)) {
                *o += w * a;
            }
        });
        let nf = self.n as f64;
        DenseVector::new(sum.iter().zip(xs).map(|(s, x)| (s + x) / nf).collect())
    }

    /// One pass over the data; slot `d` of the accumulator carries the loss.
    fn value_and_gradient(&self, x: &DenseVector) -> Result<(f64, DenseVector)> {
        x.expect_dim(self.d)?;
        let xs = x.as_slice();
        let d = self.d;
        let sum = par::chunked_vector_sum(self.exec, self.n, d + 1, |i, acc| {
            let m = self.margin(i, xs);
            let w = -self.labels[i] * logistic_fn(-m);
            for (o, a) in acc[..d].iter_mut().zip(self.row(i)) {
                *o += w * a;
            }
            acc[d] += softplus(-m);
        });
        let nf = self.n as f64;
        let value = sum[d] / nf + x.l2_norm_squared() / (2.0 * nf);
        let grad = DenseVector::new(sum[..d].iter().zip(xs).map(|(s, x)| (s + x) / nf).collect())?;
        Ok((value, grad))
    }

    fn f_star(&self) -> Option<f64> {
        self.f_star
    }

    fn minimizer(&self) -> Option<&DenseVector> {
        self.minimizer.as_ref()
    }

    fn constants(&self) -> &ConstantSet {
        &self.constants
    }

    fn smoothness_l2(&self) -> Option<f64> {
        Some(self.smoothness_l2)
    }
}

impl FiniteSum for Logistic {
    fn num_components(&self) -> usize {
        self.n
    }

    /// `f_i(x) = log(1 + exp(-b_i a_i'x)) + |x|^2 / (2n)`.
    fn add_component_gradient(&self, i: usize, x: &DenseVector, out: &mut [f64]) {
        let xs = x.as_slice();
        let w = -self.labels[i] * logistic_fn(-self.margin(i, xs));
        let nf = self.n as f64;
        for ((o, a), xv) in out.iter_mut().zip(self.row(i)).zip(xs) {
            *o += w * a + xv / nf;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub samples: Vec<Sample>,
    pub hidden_weights: DenseVector,
}

/// Gaussian features with labels drawn from a logistic model around hidden
/// weights `w ~ N(0, (4/d) I)`, so margins have unit-order spread.
pub fn synth_logistic_data(n: usize, d: usize, seed: u64) -> Result<SyntheticData> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("synthetic data needs n >= 1 and d >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_scale = 2.0 / (d as f64).sqrt();
    let hidden: Vec<f64> = (0..d)
        .map(|_| w_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let z: f64 = a.iter().zip(&hidden).map(|(u, v)| u * v).sum();
        let label = if rng.random::<f64>() < logistic_fn(z) { 1.0 } else { -1.0 };
        samples.push(Sample {
            features: DenseVector::new(a)?,
            label,
        });
    }
    Ok(SyntheticData {
        samples,
        hidden_weights: DenseVector::new(hidden)?,
    })
}

/// One row per sample: label, then features.
pub fn write_samples_csv<W: Write>(samples: &[Sample], mut out: W) -> std::io::Result<()> {
    for s in samples {
        write!(out, "{}", s.label)?;
        for v in s.features.iter() {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_samples_csv<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::invalid(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() < 2 {
            return Err(Error::invalid(format!("line {}: no features", lineno + 1)));
        }
        samples.push(Sample {
            label: vals[0],
            features: DenseVector::new(vals[1..].to_vec())?,
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Constant estimation

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("box bounds must be nonempty and of equal length"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
        {
            return Err(Error::invalid("box needs finite bounds with lower < upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DenseVector {
        let v = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| rng.random_range(l..u))
            .collect();
        DenseVector::new(v).expect("box points are finite")
    }
}

const PAIR_STREAM: u64 = 1;
const PL_STREAM: u64 = 2;

/// Running maximum of `|grad f(x) - grad f(y)|_1 / |x - y|_inf` over `budget`
/// uniformly sampled pairs.
pub fn estimate_l_inf(
    obj: &dyn Objective,
    region: &BoxRegion,
    budget: usize,
    seed: u64,
) -> Result<f64> {
    region_matches(obj, region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PAIR_STREAM);
    let mut best = 0.0f64;
    for _ in 0..budget {
        let x = region.sample(&mut rng);
        let y = region.sample(&mut rng);
        let dx = x.sub(&y)?.linf_norm();
        if dx < 1e-12 {
            continue;
        }
        let dg = obj.gradient(&x)?.sub(&obj.gradient(&y)?)?.l1_norm();
        best = best.max(dg / dx);
    }
    if let Some(l) = obj.constants().l_inf {
        if l.provenance == Provenance::Analytic {
            if best > l.value * (1.0 + 1e-9) {
                return Err(Error::invalid(format!(
                    "estimated L_inf {best} exceeds the analytic bound {}",
                    l.value
                )));
            }
            best = best.min(l.value);
        }
    }
    Ok(best)
}

/// Running minimum of `|grad f(x)|_1^2 / (2 (f(x) - f*))` over sampled points
/// with gap at least `1e-12`. `None` when no sampled point qualifies.
pub fn estimate_pl(
    obj: &dyn Objective,
    region: &BoxRegion,
    budget: usize,
    seed: u64,
) -> Result<Option<f64>> {
    region_matches(obj, region)?;
    if obj.f_star().is_none() {
        return Err(Error::MissingData("PL estimation needs f*".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PL_STREAM);
    let mut best: Option<f64> = None;
    for _ in 0..budget {
        let x = region.sample(&mut rng);
        let gap = obj.gap(&x)?.expect("f* checked above");
        if gap < 1e-12 {
            continue;
        }
        let g1 = obj.gradient(&x)?.l1_norm();
        let ratio = g1 * g1 / (2.0 * gap);
        best = Some(best.map_or(ratio, |b| b.min(ratio)));
    }
    Ok(best)
}

/// Sampled estimates of `L_inf` and the PL constant on `region`.
///
/// `mu_inf` is carried over from the objective unchanged.
pub fn estimate_constants(
    obj: &dyn Objective,
    region: &BoxRegion,
    budget: usize,
    seed: u64,
) -> Result<ConstantSet> {
    if obj.f_star().is_none() {
        return Err(Error::MissingData("PL estimation needs f*".into()));
    }
    let l = estimate_l_inf(obj, region, budget, seed)?;
    let pl = estimate_pl(obj, region, budget, seed)?;
    Ok(ConstantSet {
        mu_inf: obj.constants().mu_inf,
        l_inf: (l > 0.0).then(|| Constant::estimated(l)),
        pl_mu: pl.filter(|&p| p > 0.0).map(Constant::estimated),
    })
}

fn region_matches(obj: &dyn Objective, region: &BoxRegion) -> Result<()> {
    if region.dim() != obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.dim(),
            got: region.dim(),
        });
    }
    Ok(())
}

/// Largest l2 / l-inf distance to the minimizer over grid points of `region`
/// lying in the sublevel set of `x0`. For objectives without a closed form.
pub fn sublevel_diameters_grid(
    obj: &dyn Objective,
    x0: &DenseVector,
    region: &BoxRegion,
    points_per_axis: usize,
) -> Result<(f64, f64)> {
    region_matches(obj, region)?;
    let xs = obj
        .minimizer()
        .ok_or_else(|| Error::MissingData("sublevel diameter needs the minimizer".into()))?;
    let level = obj.value(x0)?;
    let d = obj.dim();
    let m = points_per_axis.max(2);
    let total = m
        .checked_pow(d as u32)
        .filter(|&t| t <= 10_000_000)
        .ok_or_else(|| Error::invalid("grid too large"))?;
    let (mut d1, mut d2) = (0.0f64, 0.0f64);
    let mut point = vec![0.0; d];
    for idx in 0..total {
        let mut rem = idx;
        for (j, p) in point.iter_mut().enumerate() {
            let t = (rem % m) as f64 / (m - 1) as f64;
            rem /= m;
            *p = region.lower[j] + t * (region.upper[j] - region.lower[j]);
        }
        let x = DenseVector::from_slice(&point)?;
        if obj.value(&x)? <= level {
            let e = x.sub(xs)?;
            d1 = d1.max(e.l2_norm());
            d2 = d2.max(e.linf_norm());
        }
    }
    Ok((d1, d2))
}
