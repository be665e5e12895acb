//! Stochastic gradient oracles: unbiased, with a declared bound on the
//! l1-variance and a declared lower bound on per-coordinate sign agreement.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::objectives::{FiniteSum, Objective};
use crate::vecmath::{signum, DenseVector};

/// Gradient coordinates with magnitude at or below this are treated as zero
/// when measuring sign agreement.
pub const SIGN_THRESHOLD: f64 = 1e-12;

/// Safety factor applied to the closed-form l1-variance bound.
pub const SIGMA_SAFETY: f64 = 1.05;

/// Anything that hands out gradients (exact or estimated) for an objective.
pub trait GradientSource {
    fn objective(&self) -> &dyn Objective;

    fn next_gradient(&mut self, x: &DenseVector) -> Result<DenseVector>;

    fn is_stochastic(&self) -> bool;
}

/// Full-gradient access.
#[derive(Clone, Copy)]
pub struct ExactGradient<'a> {
    obj: &'a dyn Objective,
}

impl<'a> ExactGradient<'a> {
    pub fn new(obj: &'a dyn Objective) -> Self {
        Self { obj }
    }
}

impl GradientSource for ExactGradient<'_> {
    fn objective(&self) -> &dyn Objective {
        self.obj
    }

    fn next_gradient(&mut self, x: &DenseVector) -> Result<DenseVector> {
        self.obj.gradient(x)
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

#[derive(Clone)]
enum Sampler {
    Gaussian { noise_std: f64 },
    Minibatch { data: Arc<dyn FiniteSum>, batch_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    AdditiveGaussian { noise_std: f64 },
    Minibatch { batch_size: usize },
}

#[derive(Clone)]
pub struct StochasticOracle {
    base: Arc<dyn Objective>,
    sampler: Sampler,
    rng: ChaCha8Rng,
    declared_sigma: f64,
    declared_p_min: Option<f64>,
}

impl std::fmt::Debug for StochasticOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StochasticOracle")
            .field("objective", &self.base.name())
            .field("kind", &self.kind())
            .field("declared_sigma", &self.declared_sigma)
            .field("declared_p_min", &self.declared_p_min)
            .finish()
    }
}

/// `sigma` with `E|xi|_1^2 <= sigma^2` for `xi ~ N(0, s^2 I_d)`.
///
/// `E|xi|_1^2 = d s^2 (1 - 2/pi) + d^2 s^2 (2/pi)`, inflated by
/// [`SIGMA_SAFETY`].
pub fn gaussian_l1_sigma(dim: usize, noise_std: f64) -> f64 {
    let d = dim as f64;
    let two_over_pi = 2.0 / std::f64::consts::PI;
    SIGMA_SAFETY * noise_std * (d * (1.0 - two_over_pi) + d * d * two_over_pi).sqrt()
}

impl StochasticOracle {
    /// `g~ = grad f(x) + N(0, noise_std^2 I)`.
    pub fn gaussian(base: Arc<dyn Objective>, noise_std: f64, seed: u64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
        }
        let declared_sigma = gaussian_l1_sigma(base.dim(), noise_std);
        Ok(Self {
            base,
            sampler: Sampler::Gaussian { noise_std },
            rng: ChaCha8Rng::seed_from_u64(seed),
            declared_sigma,
            declared_p_min: None,
        })
    }

    /// Average gradient of a batch drawn uniformly without replacement.
    ///
    /// `single_sample_sigma` bounds the l1 spread of one component gradient;
    /// the declared bound for the batch is `single_sample_sigma / sqrt(batch)`.
    pub fn minibatch<F>(
        data: Arc<F>,
        batch_size: usize,
        single_sample_sigma: f64,
        seed: u64,
    ) -> Result<Self>
    where
        F: FiniteSum + 'static,
    {
        let n = data.num_components();
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(format!(
                "batch size must be in 1..={n}, got {batch_size}"
            )));
        }
        if !(single_sample_sigma >= 0.0 && single_sample_sigma.is_finite()) {
            return Err(Error::invalid("single-sample sigma must be finite and >= 0"));
        }
        let base: Arc<dyn Objective> = data.clone();
        Ok(Self {
            base,
            sampler: Sampler::Minibatch { data, batch_size },
            rng: ChaCha8Rng::seed_from_u64(seed),
            declared_sigma: single_sample_sigma / (batch_size as f64).sqrt(),
            declared_p_min: None,
        })
    }

    /// Moves to an independent stream of the same seed.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self.rng.set_word_pos(0);
        self
    }

    pub fn with_declared_p_min(mut self, p_min: f64) -> Result<Self> {
        if !(p_min > 0.5 && p_min <= 1.0) {
            return Err(Error::OutOfRange {
                name: "p_min",
                value: p_min,
                range: "(1/2, 1]".into(),
            });
        }
        self.declared_p_min = Some(p_min);
        Ok(self)
    }

    pub fn with_declared_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("declared sigma must be finite and >= 0"));
        }
        self.declared_sigma = sigma;
        Ok(self)
    }

    pub fn kind(&self) -> OracleKind {
        match &self.sampler {
            Sampler::Gaussian { noise_std } => OracleKind::AdditiveGaussian {
                noise_std: *noise_std,
            },
            Sampler::Minibatch { batch_size, .. } => OracleKind::Minibatch {
                batch_size: *batch_size,
            },
        }
    }

    pub fn base(&self) -> &Arc<dyn Objective> {
        &self.base
    }

    pub fn declared_sigma(&self) -> f64 {
        self.declared_sigma
    }

    pub fn declared_p_min(&self) -> Option<f64> {
        self.declared_p_min
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// One gradient estimate at `x`; advances the RNG stream.
    pub fn draw(&mut self, x: &DenseVector) -> Result<DenseVector> {
        x.expect_dim(self.base.dim())?;
        match &self.sampler {
            Sampler::Gaussian { noise_std } => {
                let s = *noise_std;
                let g = self.base.gradient(x)?;
                let noisy = g
                    .iter()
                    .map(|gi| gi + s * self.rng.sample::<f64, _>(StandardNormal))
                    .collect();
                DenseVector::new(noisy)
            }
            Sampler::Minibatch { data, batch_size } => {
                let n = data.num_components();
                if *batch_size == n {
                    return self.base.gradient(x);
                }
                let mut picked = index::sample(&mut self.rng, n, *batch_size).into_vec();
                picked.sort_unstable();
                let mut acc = vec![0.0; x.dim()];
                for i in picked {
                    data.add_component_gradient(i, x, &mut acc);
                }
                let b = *batch_size as f64;
                DenseVector::new(acc.into_iter().map(|v| v / b).collect())
            }
        }
    }
}

impl GradientSource for StochasticOracle {
    fn objective(&self) -> &dyn Objective {
        self.base.as_ref()
    }

    fn next_gradient(&mut self, x: &DenseVector) -> Result<DenseVector> {
        self.draw(x)
    }

    fn is_stochastic(&self) -> bool {
        true
    }
}

/// Largest exact single-sample l1 spread `max_x E_i |grad f_i(x) - grad f(x)|_1^2`
/// over `points`, square-rooted and inflated by [`SIGMA_SAFETY`].
pub fn minibatch_single_sample_sigma<F: FiniteSum + ?Sized>(
    data: &F,
    points: &[DenseVector],
) -> Result<f64> {
    let n = data.num_components();
    let mut worst = 0.0f64;
    for x in points {
        let g = data.gradient(x)?;
        let mut second_moment = 0.0;
        for i in 0..n {
            let mut gi = vec![0.0; x.dim()];
            data.add_component_gradient(i, x, &mut gi);
            let dev: f64 = gi.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).sum();
            second_moment += dev * dev;
        }
        worst = worst.max(second_moment / n as f64);
    }
    Ok(SIGMA_SAFETY * worst.sqrt())
}

/// `N(0, I_dim)` draw from stream `stream` of `seed`.
pub fn standard_normal_vector(dim: usize, seed: u64, stream: u64) -> Result<DenseVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    DenseVector::new((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `P(sign(g + N(0, s^2)) = sign(g)) = Phi(|g| / s)`.
pub fn success_probability_gaussian(g: f64, noise_std: f64) -> Result<f64> {
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be > 0, got {noise_std}")));
    }
    if !g.is_finite() {
        return Err(Error::invalid("gradient coordinate must be finite"));
    }
    Ok(normal_cdf(g.abs() / noise_std))
}

/// Smallest empirical sign-agreement frequency over all points and all
/// coordinates whose true gradient magnitude exceeds [`SIGN_THRESHOLD`].
pub fn estimate_p_min(
    oracle: &mut StochasticOracle,
    points: &[DenseVector],
    draws_per_point: usize,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("estimate_p_min needs at least one point"));
    }
    if draws_per_point < 100 {
        return Err(Error::invalid("estimate_p_min needs at least 100 draws per point"));
    }
    let mut p_min: Option<f64> = None;
    for x in points {
        let g = oracle.base.gradient(x)?;
        let mut agree = vec![0usize; g.dim()];
        for _ in 0..draws_per_point {
            let gt = oracle.draw(x)?;
            for (i, (a, b)) in gt.iter().zip(g.iter()).enumerate() {
                if signum(*a) == signum(*b) {
                    agree[i] += 1;
                }
            }
        }
        for (i, gi) in g.iter().enumerate() {
            if gi.abs() > SIGN_THRESHOLD {
                let freq = agree[i] as f64 / draws_per_point as f64;
                p_min = Some(p_min.map_or(freq, |p| p.min(freq)));
            }
        }
    }
    p_min.ok_or(Error::UndefinedPMin)
}

/// Monte Carlo `E|g~ - g|_1^2` at `x`.
pub fn empirical_l1_variance(
    oracle: &mut StochasticOracle,
    x: &DenseVector,
    draws: usize,
) -> Result<f64> {
    let g = oracle.base.gradient(x)?;
    let mut total = 0.0;
    for _ in 0..draws {
        let dev = oracle.draw(x)?.sub(&g)?.l1_norm();
        total += dev * dev;
    }
    Ok(total / draws.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_logistic, synth_logistic_data, Quadratic};

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::from_slice(xs).unwrap()
    }

    fn x_squared() -> Arc<dyn Objective> {
        Arc::new(Quadratic::diagonal(&[2.0]).unwrap())
    }

    /// Composite Simpson on [0, z] of the standard normal density, plus 1/2.
    fn phi_by_quadrature(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(z);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn noiseless_draw_is_exact() {
        let mut o = StochasticOracle::gaussian(x_squared(), 0.0, 1).unwrap();
        assert_eq!(o.draw(&v(&[0.7])).unwrap(), v(&[1.4]));
    }

    #[test]
    fn gaussian_draws_are_unbiased() {
        let mut o = StochasticOracle::gaussian(x_squared(), 0.1, 2).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| o.draw(&v(&[1.0])).unwrap()[0]).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn unbiased_within_five_standard_errors_per_coordinate() {
        let q: Arc<dyn Objective> = Arc::new(Quadratic::diagonal(&[1.0, 3.0, 5.0]).unwrap());
        let s = 0.4;
        let mut o = StochasticOracle::gaussian(q.clone(), s, 8).unwrap();
        let x = v(&[0.5, -1.0, 0.25]);
        let g = q.gradient(&x).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            for (acc, gi) in sum.iter_mut().zip(o.draw(&x).unwrap().iter()) {
                *acc += gi;
            }
        }
        let se = s / (n as f64).sqrt();
        for i in 0..3 {
            assert!((sum[i] / n as f64 - g[i]).abs() < 5.0 * se);
        }
    }

    #[test]
    fn declared_sigma_bounds_l1_variance() {
        for d in [1usize, 2, 5, 20] {
            let q: Arc<dyn Objective> = Arc::new(Quadratic::diagonal(&vec![1.0; d]).unwrap());
            let mut o = StochasticOracle::gaussian(q, 0.3, d as u64).unwrap();
            let x = DenseVector::filled(d, 0.8).unwrap();
            let var = empirical_l1_variance(&mut o, &x, 20_000).unwrap();
            let sigma = o.declared_sigma();
            assert!(var <= sigma * sigma * 1.1, "d={d}: {var} vs {}", sigma * sigma);
            // and not wildly loose
            assert!(var >= sigma * sigma / 1.3);
        }
    }

    #[test]
    fn full_batch_is_exact_gradient() {
        let data = synth_logistic_data(30, 4, 2).unwrap();
        let lg = Arc::new(make_logistic(&data.samples).unwrap());
        let mut o = StochasticOracle::minibatch(lg.clone(), 30, 1.0, 5).unwrap();
        let x = v(&[0.1, 0.2, -0.3, 0.4]);
        assert_eq!(o.draw(&x).unwrap(), lg.gradient(&x).unwrap());
        assert!(StochasticOracle::minibatch(lg, 31, 1.0, 5).is_err());
    }

    #[test]
    fn minibatch_variance_scales_with_batch_size() {
        let data = synth_logistic_data(2000, 5, 4).unwrap();
        let lg = Arc::new(make_logistic(&data.samples).unwrap());
        let x = v(&[0.3, -0.2, 0.1, 0.0, 0.5]);
        let sigma1 = minibatch_single_sample_sigma(lg.as_ref(), std::slice::from_ref(&x)).unwrap();
        let mut o1 = StochasticOracle::minibatch(lg.clone(), 1, sigma1, 1).unwrap();
        let mut o4 = StochasticOracle::minibatch(lg.clone(), 4, sigma1, 1).unwrap();
        let v1 = empirical_l1_variance(&mut o1, &x, 10_000).unwrap();
        let v4 = empirical_l1_variance(&mut o4, &x, 10_000).unwrap();
        let ratio = v4 / (v1 / 4.0);
        assert!((0.7..=1.4).contains(&ratio), "ratio {ratio}");
        let d4 = o4.declared_sigma();
        assert!(v4 <= d4 * d4 * 1.1);
        assert!((d4 * d4 - sigma1 * sigma1 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = StochasticOracle::gaussian(x_squared(), 1.0, 42).unwrap();
        let mut b = StochasticOracle::gaussian(x_squared(), 1.0, 42).unwrap();
        let mut c = StochasticOracle::gaussian(x_squared(), 1.0, 42).unwrap().with_stream(1);
        let x = v(&[0.5]);
        let sa: Vec<f64> = (0..50).map(|_| a.draw(&x).unwrap()[0]).collect();
        let sb: Vec<f64> = (0..50).map(|_| b.draw(&x).unwrap()[0]).collect();
        let sc: Vec<f64> = (0..50).map(|_| c.draw(&x).unwrap()[0]).collect();
        assert_eq!(sa, sb);
        assert_ne!(sa, sc);
    }

    #[test]
    fn success_probability_examples() {
        assert_eq!(success_probability_gaussian(0.0, 1.0).unwrap(), 0.5);
        let p1 = success_probability_gaussian(0.3, 0.3).unwrap();
        assert!((p1 - phi_by_quadrature(1.0)).abs() < 1e-10);
        assert!((p1 - 0.841345).abs() < 1e-6);
        let p31 = success_probability_gaussian(3.1e-3, 1e-3).unwrap();
        assert!((p31 - phi_by_quadrature(3.1)).abs() < 1e-10);
        assert!(p31 >= 0.999);
        assert!(success_probability_gaussian(1.0, 0.0).is_err());
        assert!(success_probability_gaussian(1.0, -1.0).is_err());
    }

    #[test]
    fn success_probability_monotone() {
        let mut prev = 0.5;
        for i in 1..50 {
            let p = success_probability_gaussian(i as f64 * 0.05, 1.0).unwrap();
            assert!(p > prev && p >= 0.5);
            prev = p;
        }
        let mut prev = 1.0;
        for i in 1..50 {
            let p = success_probability_gaussian(-0.5, i as f64 * 0.1).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn p_min_estimates() {
        let mut exact = StochasticOracle::gaussian(x_squared(), 0.0, 3).unwrap();
        assert_eq!(estimate_p_min(&mut exact, &[v(&[1.0])], 100).unwrap(), 1.0);

        let mut small = StochasticOracle::gaussian(x_squared(), 0.1, 3).unwrap();
        let p = estimate_p_min(&mut small, &[v(&[1.0])], 10_000).unwrap();
        assert!((p - 1.0).abs() <= 0.02);

        let mut large = StochasticOracle::gaussian(x_squared(), 2.0, 3).unwrap();
        let p = estimate_p_min(&mut large, &[v(&[1.0])], 10_000).unwrap();
        assert!((p - 0.8413).abs() <= 0.02, "{p}");
    }

    #[test]
    fn p_min_errors() {
        let mut o = StochasticOracle::gaussian(x_squared(), 1.0, 3).unwrap();
        assert!(matches!(
            estimate_p_min(&mut o, &[v(&[0.0])], 200),
            Err(Error::UndefinedPMin)
        ));
        assert!(estimate_p_min(&mut o, &[], 200).is_err());
        assert!(estimate_p_min(&mut o, &[v(&[1.0])], 99).is_err());
    }

    #[test]
    fn declared_p_min_range() {
        let o = StochasticOracle::gaussian(x_squared(), 1.0, 3).unwrap();
        assert!(o.clone().with_declared_p_min(0.5).is_err());
        assert!(o.clone().with_declared_p_min(1.2).is_err());
        assert_eq!(o.with_declared_p_min(0.9).unwrap().declared_p_min(), Some(0.9));
    }

    #[test]
    fn draw_rejects_wrong_dimension() {
        let mut o = StochasticOracle::gaussian(x_squared(), 1.0, 3).unwrap();
        assert!(matches!(
            o.draw(&v(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
