//! Synchronous parameter-server simulation of majority-vote scaled sign SGD.
//!
//! Each worker ships `(sign(g~), |g~|_1)`; the server broadcasts the vote and
//! the mean norm; every replica applies `x' = x - alpha M_k vote`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::optimizers::{check_divergence, evaluate, scaled_sign_update, Trace, TraceRow, SCALAR_BITS};
use crate::oracles::StochasticOracle;
use crate::par::{self, Execution};
use crate::vecmath::DenseVector;

/// What one worker sends the server in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMessage {
    pub signs: DenseVector,
    pub norm: f64,
}

/// Bits exchanged per round and in total.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub uplink_per_round: Vec<u64>,
    pub downlink_per_round: Vec<u64>,
    pub total_uplink: u64,
    pub total_downlink: u64,
}

impl CommLedger {
    fn credit(&mut self, up: u64, down: u64) {
        self.uplink_per_round.push(up);
        self.downlink_per_round.push(down);
        self.total_uplink += up;
        self.total_downlink += down;
    }

    pub fn rounds(&self) -> usize {
        self.uplink_per_round.len()
    }
}

/// Uplink bits per round: every worker sends `d` sign bits and one scalar.
pub fn uplink_bits_per_round(workers: usize, dim: usize) -> u64 {
    workers as u64 * (dim as u64 + SCALAR_BITS)
}

/// Downlink bits per round. With an even worker count the vote can tie at 0,
/// so each coordinate takes two bits.
pub fn downlink_bits_per_round(workers: usize, dim: usize) -> u64 {
    let d = dim as u64;
    let encoded = if workers % 2 == 1 { d } else { 2 * d };
    workers as u64 * (encoded + SCALAR_BITS)
}

/// `vote = sign(mean of sign vectors)`, `M_k = mean of norms`.
pub fn majority_vote_aggregate(messages: &[UplinkMessage]) -> Result<(DenseVector, f64)> {
    let first = messages
        .first()
        .ok_or_else(|| Error::invalid("majority vote needs at least one worker"))?;
    let dim = first.signs.dim();
    let mut tally = vec![0.0; dim];
    let mut norm_sum = 0.0;
    for msg in messages {
        msg.signs.expect_dim(dim)?;
        if msg.signs.iter().any(|s| !matches!(*s, -1.0 | 0.0 | 1.0)) {
            return Err(Error::invalid("sign vectors must have entries in {-1, 0, 1}"));
        }
        if !(msg.norm >= 0.0 && msg.norm.is_finite()) {
            return Err(Error::invalid(format!("worker norm must be finite and >= 0, got {}", msg.norm)));
        }
        for (t, s) in tally.iter_mut().zip(msg.signs.iter()) {
            *t += s;
        }
        norm_sum += msg.norm;
    }
    let m = messages.len() as f64;
    // Integer tallies: sign of the mean equals sign of the tally.
    let vote = DenseVector::new(tally)?.sign();
    Ok((vote, norm_sum / m))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkerNoise {
    Uniform(f64),
    PerWorker(Vec<f64>),
}

impl WorkerNoise {
    fn level(&self, worker: usize) -> f64 {
        match self {
            WorkerNoise::Uniform(s) => *s,
            WorkerNoise::PerWorker(levels) => levels[worker],
        }
    }
}

#[derive(Debug, Clone)]
struct Worker {
    oracle: StochasticOracle,
    replica: DenseVector,
}

/// Server state plus `M` workers, each holding a replica of the iterate.
#[derive(Debug, Clone)]
pub struct Cluster {
    workers: Vec<Worker>,
    x: DenseVector,
    round: usize,
    ledger: CommLedger,
    exec: Execution,
}

impl Cluster {
    /// Worker `m` uses stream `m` of `master_seed`, so worker 0 draws exactly
    /// what a single-node oracle seeded with `master_seed` would.
    pub fn new(
        objective: Arc<dyn Objective>,
        workers: usize,
        noise: &WorkerNoise,
        x0: DenseVector,
        master_seed: u64,
    ) -> Result<Self> {
        if workers == 0 {
            return Err(Error::invalid("at least one worker is required"));
        }
        if let WorkerNoise::PerWorker(levels) = noise {
            if levels.len() != workers {
                return Err(Error::DimensionMismatch {
                    expected: workers,
                    got: levels.len(),
                });
            }
        }
        let oracles = (0..workers)
            .map(|m| {
                StochasticOracle::gaussian(objective.clone(), noise.level(m), master_seed)
                    .map(|o| o.with_stream(m as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_oracles(oracles, x0)
    }

    /// Builds a cluster from ready-made oracles (one per worker).
    pub fn from_oracles(oracles: Vec<StochasticOracle>, x0: DenseVector) -> Result<Self> {
        let first = oracles
            .first()
            .ok_or_else(|| Error::invalid("at least one worker is required"))?;
        let base = first.base().clone();
        for o in &oracles {
            if !Arc::ptr_eq(o.base(), &base) {
                return Err(Error::invalid("all workers must share the same objective"));
            }
        }
        x0.expect_dim(base.dim())?;
        let workers = oracles
            .into_iter()
            .map(|oracle| Worker {
                oracle,
                replica: x0.clone(),
            })
            .collect();
        Ok(Self {
            workers,
            x: x0,
            round: 0,
            ledger: CommLedger::default(),
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn x(&self) -> &DenseVector {
        &self.x
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn objective(&self) -> &dyn Objective {
        self.workers[0].oracle.base().as_ref()
    }

    /// True when every worker replica equals the server iterate bit for bit.
    pub fn replicas_consistent(&self) -> bool {
        self.workers.iter().all(|w| w.replica == self.x)
    }

    /// Trace row for the current iterate.
    pub fn row(&self, alpha: f64) -> Result<TraceRow> {
        let (f, v, g) = evaluate(self.objective(), &self.x, self.round)?;
        Ok(TraceRow {
            k: self.round,
            f,
            v,
            grad_l1: g.l1_norm(),
            alpha,
            bound: None,
            bits_up: self.ledger.total_uplink,
            bits_down: self.ledger.total_downlink,
        })
    }
}

/// One synchronous round: pull, vote, broadcast, apply.
/// Returns the trace row of the new iterate.
pub fn distributed_round(cluster: &mut Cluster, alpha: f64) -> Result<TraceRow> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::OutOfRange {
            name: "alpha",
            value: alpha,
            range: "(0, inf)".into(),
        });
    }
    let k = cluster.round + 1;
    let dim = cluster.x.dim();
    let m = cluster.workers.len();

    let mut uplink: Vec<Option<Result<UplinkMessage>>> = vec![None; m];
    {
        let x = &cluster.x;
        let mut slots: Vec<(&mut Worker, &mut Option<Result<UplinkMessage>>)> =
            cluster.workers.iter_mut().zip(uplink.iter_mut()).collect();
        par::for_each_mut(cluster.exec, &mut slots, |_, (worker, slot)| {
            let msg = worker.oracle.draw(x).and_then(|g| {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { k });
                }
                Ok(UplinkMessage {
                    signs: g.sign(),
                    norm: g.l1_norm(),
                })
            });
            **slot = Some(msg);
        });
    }
    let messages = uplink
        .into_iter()
        .map(|m| m.expect("every worker reports").map_err(|_| Error::Divergence { k }))
        .collect::<Result<Vec<_>>>()?;

    let (vote, mean_norm) = majority_vote_aggregate(&messages)?;
    let next = scaled_sign_update(&cluster.x, alpha, mean_norm, &vote).map_err(|_| Error::Divergence { k })?;
    for worker in &mut cluster.workers {
        worker.replica = scaled_sign_update(&worker.replica, alpha, mean_norm, &vote)
            .map_err(|_| Error::Divergence { k })?;
    }
    cluster.x = next;
    assert!(cluster.replicas_consistent(), "replica drift after round {k}");
    check_divergence(k, 0.0, &cluster.x)?;

    cluster.round = k;
    cluster
        .ledger
        .credit(uplink_bits_per_round(m, dim), downlink_bits_per_round(m, dim));
    cluster.row(alpha)
}

/// Runs `rounds` rounds with a constant step. Row `k` describes `x_k`.
pub fn distributed_run(
    objective: Arc<dyn Objective>,
    workers: usize,
    noise: &WorkerNoise,
    alpha: f64,
    x0: DenseVector,
    rounds: usize,
    master_seed: u64,
) -> Result<Trace> {
    let cluster = Cluster::new(objective, workers, noise, x0, master_seed)?;
    run_cluster(cluster, alpha, rounds)
}

/// Drives an existing cluster for `rounds` rounds.
pub fn run_cluster(mut cluster: Cluster, alpha: f64, rounds: usize) -> Result<Trace> {
    if rounds == 0 {
        return Err(Error::config("rounds must be at least 1"));
    }
    let mut trace = Trace::new();
    trace.rows.reserve(rounds + 1);
    trace.rows.push(cluster.row(alpha)?);
    for _ in 0..rounds {
        let row = distributed_round(&mut cluster, alpha)?;
        trace.rows.push(row);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_sum_of_squares, Quadratic};
    use crate::optimizers::{run, step_scaled_signgd, step_scaled_signsgd, Method, OptimizerState, RunOptions, Schedule};
    use crate::theory::rate_zeta2_and_floor;

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::from_slice(xs).unwrap()
    }

    fn msg(signs: &[f64], norm: f64) -> UplinkMessage {
        UplinkMessage { signs: v(signs), norm }
    }

    fn quad(d: usize) -> Arc<dyn Objective> {
        Arc::new(make_sum_of_squares(d).unwrap())
    }

    #[test]
    fn aggregate_examples() {
        let (vote, mk) =
            majority_vote_aggregate(&[msg(&[1.0], 1.0), msg(&[1.0], 2.0), msg(&[-1.0], 3.0)]).unwrap();
        assert_eq!((vote, mk), (v(&[1.0]), 2.0));
        let (vote, mk) = majority_vote_aggregate(&[msg(&[1.0, -1.0, 0.0], 0.7)]).unwrap();
        assert_eq!((vote, mk), (v(&[1.0, -1.0, 0.0]), 0.7));
        let (vote, _) = majority_vote_aggregate(&[msg(&[1.0], 1.0), msg(&[-1.0], 1.0)]).unwrap();
        assert_eq!(vote, v(&[0.0]));
        assert!(majority_vote_aggregate(&[msg(&[1.0], 1.0), msg(&[1.0, 1.0], 1.0)]).is_err());
        assert!(majority_vote_aggregate(&[msg(&[0.5], 1.0)]).is_err());
        assert!(majority_vote_aggregate(&[]).is_err());
    }

    #[test]
    fn noise_free_round_is_a_scaled_sign_step() {
        let obj = quad(4);
        let x0 = v(&[0.3, -1.0, 2.0, 0.1]);
        let expected = step_scaled_signgd(&OptimizerState::new(Method::ScaledSignGd, x0.clone()), obj.as_ref(), 0.1)
            .unwrap()
            .x;
        for m in [1, 2, 3, 6] {
            let mut c = Cluster::new(obj.clone(), m, &WorkerNoise::Uniform(0.0), x0.clone(), 5).unwrap();
            distributed_round(&mut c, 0.1).unwrap();
            assert_eq!(c.x(), &expected, "M={m}");
        }
    }

    #[test]
    fn single_worker_round_matches_single_node_step() {
        let obj = quad(3);
        let x0 = v(&[1.0, -0.5, 0.25]);
        let mut c = Cluster::new(obj.clone(), 1, &WorkerNoise::Uniform(0.4), x0.clone(), 42).unwrap();
        let mut oracle = StochasticOracle::gaussian(obj, 0.4, 42).unwrap();
        let mut s = OptimizerState::new(Method::ScaledSignGd, x0);
        for _ in 0..50 {
            distributed_round(&mut c, 0.05).unwrap();
            s = step_scaled_signsgd(&s, &mut oracle, 0.05).unwrap();
            assert_eq!(c.x(), &s.x);
        }
    }

    #[test]
    fn single_worker_run_matches_single_node_trace() {
        let obj = quad(5);
        let x0 = DenseVector::filled(5, 1.0).unwrap();
        let dist = distributed_run(obj.clone(), 1, &WorkerNoise::Uniform(0.3), 0.05, x0.clone(), 100, 11).unwrap();
        let mut oracle = StochasticOracle::gaussian(obj, 0.3, 11).unwrap();
        let single = run(&Method::ScaledSignGd, &mut oracle, &Schedule::Constant(0.05), x0, 100, RunOptions::default())
            .unwrap();
        assert_eq!(dist.len(), single.len());
        for (a, b) in dist.rows.iter().zip(&single.rows) {
            assert_eq!((a.k, a.f, a.v, a.grad_l1, a.alpha, a.bits_up), (b.k, b.f, b.v, b.grad_l1, b.alpha, b.bits_up));
        }
    }

    #[test]
    fn ledger_matches_closed_form() {
        assert_eq!(uplink_bits_per_round(3, 10), 222);
        assert_eq!(downlink_bits_per_round(3, 10), 222);
        assert_eq!(downlink_bits_per_round(2, 10), 2 * (20 + 64));
        for m in 1..=6 {
            let t = distributed_run(quad(10), m, &WorkerNoise::Uniform(0.1), 0.01, DenseVector::filled(10, 1.0).unwrap(), 37, 3)
                .unwrap();
            let last = t.last().unwrap();
            assert_eq!(last.bits_up, 37 * uplink_bits_per_round(m, 10));
            assert_eq!(last.bits_down, 37 * downlink_bits_per_round(m, 10));
        }
    }

    #[test]
    fn runs_are_reproducible_and_execution_independent() {
        let go = |exec| {
            let c = Cluster::new(quad(6), 5, &WorkerNoise::Uniform(0.5), DenseVector::filled(6, 1.0).unwrap(), 8)
                .unwrap()
                .with_execution(exec);
            run_cluster(c, 0.02, 60).unwrap().to_csv_string()
        };
        let a = go(Execution::Sequential);
        assert_eq!(a, go(Execution::Sequential));
        assert_eq!(a, go(Execution::default()));
    }

    #[test]
    fn workers_draw_independent_noise() {
        let obj = quad(2);
        let x0 = v(&[1.0, 1.0]);
        let mut c = Cluster::new(obj, 3, &WorkerNoise::Uniform(1.0), x0.clone(), 1).unwrap();
        let draws: Vec<DenseVector> = c.workers.iter_mut().map(|w| w.oracle.draw(&x0).unwrap()).collect();
        assert_ne!(draws[0], draws[1]);
        assert_ne!(draws[1], draws[2]);
    }

    #[test]
    fn heterogeneous_noise_and_validation() {
        let obj = quad(2);
        let x0 = v(&[1.0, 1.0]);
        let noise = WorkerNoise::PerWorker(vec![0.0, 0.5, 2.0]);
        let mut c = Cluster::new(obj.clone(), 3, &noise, x0.clone(), 1).unwrap();
        distributed_round(&mut c, 0.1).unwrap();
        assert!(c.replicas_consistent());
        assert!(Cluster::new(obj.clone(), 2, &noise, x0.clone(), 1).is_err());
        assert!(Cluster::new(obj.clone(), 0, &WorkerNoise::Uniform(0.1), x0.clone(), 1).is_err());
        assert!(distributed_round(&mut c, 0.0).is_err());
        assert!(distributed_run(obj, 1, &WorkerNoise::Uniform(0.1), 0.1, x0, 0, 1).is_err());
    }

    #[test]
    fn mixed_objectives_rejected() {
        let a = StochasticOracle::gaussian(quad(2), 0.1, 1).unwrap();
        let b = StochasticOracle::gaussian(quad(2), 0.1, 2).unwrap();
        assert!(Cluster::from_oracles(vec![a, b], v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn vote_rate_non_increasing_in_odd_workers() {
        for p in [0.55, 0.7, 0.8, 0.9, 0.99] {
            let alpha = 0.9 * (2.0 * p - 1.0) / 2.0;
            let mut prev = f64::INFINITY;
            for m in [1, 3, 5, 7] {
                let (z, _) = rate_zeta2_and_floor(2.0, 2.0, alpha, 0.1, p, m).unwrap();
                assert!(z <= prev + 1e-15, "p={p} M={m}");
                prev = z;
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let obj: Arc<dyn Objective> = Arc::new(Quadratic::diagonal(&[1.0]).unwrap());
        let err = distributed_run(obj, 3, &WorkerNoise::Uniform(0.0), 3.0, v(&[1.0]), 2000, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }
}
