//! Reference optimum for objectives whose `f*` is not known in closed form.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use signopt::objectives::{make_logistic, synth_logistic_data, Logistic};
use signopt::{DenseVector, Error, Objective};

use crate::error::Result;

pub const DEFAULT_BASELINE_TOL: f64 = 1e-10;
pub const BASELINE_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub f_star: f64,
    pub minimizer: DenseVector,
    pub iterations: usize,
}

/// Gradient descent with step `1/L` from the origin until `|grad f|_1 <= tol`.
///
/// `L` is the Euclidean smoothness bound when the objective provides one and
/// the l-infinity constant otherwise (which also bounds it).
pub fn compute_baseline_fstar(obj: &dyn Objective, tol: f64) -> Result<Baseline> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidInput(format!("baseline tolerance must be > 0, got {tol}")).into());
    }
    let l = obj
        .smoothness_l2()
        .or_else(|| obj.constants().l_inf())
        .ok_or_else(|| Error::MissingData("baseline needs a smoothness constant".into()))?;
    let step = 1.0 / l;
    let mut x = DenseVector::zeros(obj.dim());
    for it in 0..=BASELINE_MAX_ITERS {
        let (f, g) = obj.value_and_gradient(&x)?;
        if !f.is_finite() {
            return Err(Error::Divergence { k: it }.into());
        }
        if g.l1_norm() <= tol {
            return Ok(Baseline {
                f_star: f,
                minimizer: x,
                iterations: it,
            });
        }
        x = x.add_scaled(-step, &g)?;
    }
    Err(Error::NoMinimum(format!(
        "baseline did not reach |grad f|_1 <= {tol} within {BASELINE_MAX_ITERS} iterations"
    ))
    .into())
}

type LogisticKey = (usize, usize, u64);

fn logistic_cache() -> &'static Mutex<HashMap<LogisticKey, Arc<Logistic>>> {
    static CACHE: OnceLock<Mutex<HashMap<LogisticKey, Arc<Logistic>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Synthetic logistic objective with its baseline optimum recorded.
///
/// Built once per `(samples, features, data_seed)` per process; later calls
/// share the same instance.
pub fn logistic_with_baseline(samples: usize, features: usize, data_seed: u64) -> Result<Arc<Logistic>> {
    let key = (samples, features, data_seed);
    if let Some(hit) = logistic_cache().lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let data = synth_logistic_data(samples, features, data_seed)?;
    let mut obj = make_logistic(&data.samples)?;
    let base = compute_baseline_fstar(&obj, DEFAULT_BASELINE_TOL)?;
    obj.set_optimum(base.f_star, Some(base.minimizer));
    let obj = Arc::new(obj);
    let mut cache = logistic_cache().lock().expect("cache lock");
    Ok(cache.entry(key).or_insert(obj).clone())
}
