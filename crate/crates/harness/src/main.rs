use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use signopt::continuous::{check_prop1, check_prop2, integrate_flow, FlowConfig, FlowKind};
use signopt::theory::{verify_trace_bound, BoundKind, RateBundle};
use signopt::{DenseVector, Quadratic};

use signopt_harness::config::{MethodList, ScheduleKind};
use signopt_harness::experiments::{bundle_for, build_objective, counterexample_config};
use signopt_harness::output::{emit, resolve_output, write_file};
use signopt_harness::{load_config, preset, run_experiment, ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "signopt", version, about = "Sign-based gradient methods: experiments and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method on one objective.
    Run {
        #[command(flatten)]
        common: Common,
        /// Method name (overrides the config).
        #[arg(long)]
        method: Option<String>,
    },
    /// Run several methods with shared starting points and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names (overrides the config).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Reproduce a non-convergence example with iterate columns.
    Counterexample {
        #[arg(value_enum)]
        which: Counterexample,
        /// Step size (alpha for ex1, eta for the AdaGrad variants).
        #[arg(long, visible_alias = "eta")]
        alpha: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare methods on x^2 + 3 sin^2 x.
    Toy {
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        x0: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare stochastic methods on synthetic logistic regression.
    Logistic {
        #[arg(long, value_enum, default_value_t = ScheduleArg::Constant)]
        schedule: ScheduleArg,
        /// Diminishing schedule constant; shared by all methods when given.
        #[arg(long)]
        mu: Option<f64>,
        /// Lower bound on the sign success probability.
        #[arg(long, default_value_t = 0.75)]
        p_min: f64,
        /// Methods to compare (default: sgd, scaled_signsgd, signsgd, ef_signsgd, signum).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Minibatch size.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority vote with a sweep over worker counts.
    Distributed {
        /// Worker counts to sweep.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<usize>,
        /// Per-coordinate Gaussian noise std on each worker.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Declared per-worker success probability.
        #[arg(long)]
        p_min: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the rate constants for the given problem constants.
    Bounds {
        /// PL constant.
        #[arg(long)]
        mu: f64,
        /// Smoothness constant.
        #[arg(long = "L")]
        l: f64,
        /// Constant step size.
        #[arg(long)]
        alpha: Option<f64>,
        /// Oracle noise level (l1 second-moment bound).
        #[arg(long)]
        sigma: Option<f64>,
        /// Lower bound on the sign success probability.
        #[arg(long)]
        p_min: Option<f64>,
        /// Number of workers for the majority-vote rate.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Integrate the gradient or sign flow on x^2 and check its bounds.
    Ode {
        #[arg(long, value_enum, default_value_t = FlowArg::Sign)]
        flow: FlowArg,
        /// Flow gain.
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        /// Euler step.
        #[arg(long, default_value_t = 1e-4)]
        dt: f64,
        /// Integration horizon.
        #[arg(long, default_value_t = 5.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configuration and check a theorem's bound on the averaged trace.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Bound to check: thm1, thm2-const, thm2-dimin, thm3-dist.
        #[arg(long, value_parser = parse_bound)]
        theorem: BoundKind,
        /// Multiplicative tolerance on the bound.
        #[arg(long, default_value_t = 1.0 + 1e-9)]
        slack: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Built-in experiment: quadratic1d, ex1, adagrad-v1, adagrad-v2, toy,
    /// quadratic, logistic, logistic-diminishing, distributed.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Step size for every method (clears per-method step sizes).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Number of independent runs averaged.
    #[arg(long)]
    repeats: Option<usize>,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path (default: $SIGNOPT_OUT_DIR/<name>.csv, else stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Counterexample {
    Ex1,
    AdagradV1,
    AdagradV2,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Constant,
    Diminishing,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowArg {
    Gradient,
    Sign,
}

fn parse_bound(s: &str) -> std::result::Result<BoundKind, String> {
    s.parse().map_err(|e: signopt::Error| e.to_string())
}

fn set_out(cfg: &mut ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir.display().to_string(), e))?;
        }
        cfg.output.path = Some(path.display().to_string());
    }
    Ok(())
}

impl Common {
    fn resolve(self) -> Result<(ExperimentConfig, String)> {
        let (mut cfg, name) = match (&self.preset, &self.config) {
            (Some(p), _) => (preset(p)?, p.clone()),
            (None, Some(path)) => (load_config(path)?, stem(path)),
            (None, None) => return Err(HarnessError::config("pass --preset or --config")),
        };
        if let Some(a) = self.alpha {
            cfg.schedule.alpha = a;
            cfg.schedule.alphas.clear();
            if name == "ex1" {
                cfg.method.x0 = Some(vec![a / 2.0, a / 2.0]);
            }
        }
        if let Some(k) = self.iters {
            cfg.method.iters = k;
        }
        if let Some(r) = self.repeats {
            cfg.method.repeats = r;
        }
        if let Some(s) = self.seed {
            cfg.method.seed = s;
        }
        set_out(&mut cfg, self.out)?;
        Ok((cfg, name))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string()
}

fn finish_run(cfg: ExperimentConfig, name: &str) -> Result<()> {
    cfg.validate()?;
    let res = run_experiment(&cfg)?;
    if let Some(path) = emit(&res, &format!("{name}.csv"))? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn print_bundle(b: &RateBundle) {
    println!("mu = {}", b.mu);
    println!("L = {}", b.l);
    let fields = [
        ("alpha", b.alpha),
        ("sigma", b.sigma),
        ("p_min", b.p_min),
        ("zeta", b.zeta),
        ("gamma", b.gamma),
        ("zeta1", b.zeta1),
        ("floor1", b.floor1),
        ("zeta2", b.zeta2),
        ("floor2", b.floor2),
    ];
    if let Some(m) = b.workers {
        println!("workers = {m}");
    }
    if let Some(k) = b.kappa {
        println!("kappa = {k}");
    }
    for (name, v) in fields {
        if let Some(v) = v {
            println!("{name} = {v}");
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, method } => {
            let (mut cfg, name) = common.resolve()?;
            if let Some(m) = method {
                cfg.method.names = MethodList::One(m);
            }
            if cfg.method.names.names().len() != 1 {
                return Err(HarnessError::config("run takes exactly one method; use compare for several"));
            }
            finish_run(cfg, &name)
        }
        Command::Compare { common, methods } => {
            let (mut cfg, name) = common.resolve()?;
            if !methods.is_empty() {
                cfg.schedule.alphas.retain(|k, _| methods.contains(k));
                cfg.method.names = MethodList::Many(methods);
            }
            finish_run(cfg, &name)
        }
        Command::Counterexample { which, alpha, iters, out } => {
            let (id, default_step) = match which {
                Counterexample::Ex1 => ("ex1", 0.1),
                Counterexample::AdagradV1 => ("adagrad-v1", 1.0),
                Counterexample::AdagradV2 => ("adagrad-v2", 1.0),
            };
            let mut cfg = counterexample_config(id, alpha.unwrap_or(default_step))?;
            if let Some(k) = iters {
                cfg.method.iters = k;
            }
            set_out(&mut cfg, out)?;
            finish_run(cfg, id)
        }
        Command::Toy { alpha, iters, x0, out } => {
            let mut cfg = preset("toy")?;
            cfg.schedule.alpha = alpha;
            if let Some(k) = iters {
                cfg.method.iters = k;
            }
            if let Some(x) = x0 {
                cfg.method.x0 = Some(vec![x]);
            }
            set_out(&mut cfg, out)?;
            finish_run(cfg, "toy")
        }
        Command::Logistic {
            schedule,
            mu,
            p_min,
            methods,
            iters,
            repeats,
            batch,
            out,
        } => {
            let mut cfg = preset("logistic")?;
            if !methods.is_empty() {
                cfg.schedule.alphas.retain(|k, _| methods.contains(k));
                cfg.method.names = MethodList::Many(methods);
            }
            if let Some(k) = iters {
                cfg.method.iters = k;
            }
            if let Some(r) = repeats {
                cfg.method.repeats = r;
            }
            if let Some(b) = batch {
                cfg.oracle.batch_size = b;
            }
            if schedule == ScheduleArg::Diminishing {
                cfg.schedule.kind = ScheduleKind::Diminishing;
                cfg.oracle.p_min = Some(p_min);
                if let Some(mu) = mu {
                    cfg.schedule.mu = Some(mu);
                    cfg.schedule.alphas.clear();
                }
            }
            set_out(&mut cfg, out)?;
            let name = if schedule == ScheduleArg::Diminishing {
                "logistic-diminishing"
            } else {
                "logistic"
            };
            finish_run(cfg, name)
        }
        Command::Distributed {
            workers,
            noise,
            alpha,
            p_min,
            iters,
            repeats,
            out,
        } => {
            let mut cfg = preset("distributed")?;
            if !workers.is_empty() {
                cfg.distributed.workers = workers;
            }
            if let Some(s) = noise {
                cfg.oracle.noise_std = s;
            }
            if let Some(a) = alpha {
                cfg.schedule.alpha = a;
            }
            cfg.oracle.p_min = p_min.or(cfg.oracle.p_min);
            if let Some(k) = iters {
                cfg.method.iters = k;
            }
            if let Some(r) = repeats {
                cfg.method.repeats = r;
            }
            set_out(&mut cfg, out)?;
            finish_run(cfg, "distributed")
        }
        Command::Bounds {
            mu,
            l,
            alpha,
            sigma,
            p_min,
            workers,
        } => {
            let sigma = sigma.unwrap_or(0.0);
            let bundle = match (alpha, p_min, workers) {
                (Some(a), Some(p), Some(m)) => RateBundle::distributed(mu, l, a, sigma, p, m)?,
                (Some(a), Some(p), None) => RateBundle::stochastic(mu, l, a, sigma, p)?,
                (Some(a), None, None) => RateBundle::deterministic(mu, l, a)?,
                (None, Some(p), None) => RateBundle::diminishing(mu, l, sigma, p)?,
                _ => {
                    return Err(HarnessError::config(
                        "bounds needs --alpha, --p-min, or both (plus --workers for majority vote)",
                    ))
                }
            };
            print_bundle(&bundle);
            Ok(())
        }
        Command::Ode {
            flow,
            beta,
            dt,
            t_end,
            x0,
            out,
        } => {
            let kind = match flow {
                FlowArg::Gradient => FlowKind::Gradient,
                FlowArg::Sign => FlowKind::Sign,
            };
            let obj = Quadratic::diagonal(&[2.0])?;
            let x0v = DenseVector::from_slice(&[x0])?;
            let cfg = FlowConfig::new(kind, beta, dt, t_end)?;
            let trace = integrate_flow(&cfg, &obj, &x0v)?;
            let (d1, d2) = obj.sublevel_diameters(&x0v)?;
            let verdict = match kind {
                FlowKind::Gradient => check_prop1(&trace, Some(d1), beta, true)?,
                FlowKind::Sign => check_prop2(&trace, Some(d2), beta, true)?,
            };
            let text = format!(
                "# config: objective = quadratic1d; flow = {kind}; beta = {beta}; dt = {dt}; t_end = {t_end}; x0 = {x0}\n{}",
                trace.to_csv_string()
            );
            let default_name = format!("ode_{kind}.csv");
            match resolve_output(out.as_deref().and_then(Path::to_str), &default_name) {
                Some(path) => {
                    write_file(&path, &text)?;
                    eprintln!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
            eprintln!("{verdict}");
            if verdict.pass {
                Ok(())
            } else {
                Err(HarnessError::Verification(format!("{kind} bound violated")))
            }
        }
        Command::Verify { common, theorem, slack } => {
            let (cfg, _) = common.resolve()?;
            cfg.validate()?;
            let built = build_objective(&cfg)?;
            let bundle = bundle_for(&cfg, &built, theorem)?;
            let res = run_experiment(&cfg)?;
            let trace = &res.methods[0].summary.mean;
            let verdict = verify_trace_bound(trace, &bundle, theorem, slack)?;
            println!("{verdict}");
            if verdict.pass {
                Ok(())
            } else {
                Err(HarnessError::Verification(format!(
                    "{theorem} violated at k = {}",
                    verdict.first_violation_k.unwrap_or_default()
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
