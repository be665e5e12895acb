use std::path::Path;
use std::process::{Command, Output};

fn signopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signopt"))
        .args(args)
        .env_remove("SIGNOPT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn bounds_prints_rate_constants() {
    let o = signopt(&["bounds", "--mu", "2", "--L", "2", "--alpha", "0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "zeta = 0.25"), "{text}");
    assert!(text.lines().any(|l| l == "gamma = 0.1875"), "{text}");
}

#[test]
fn bounds_with_workers_prints_kappa() {
    let o = signopt(&[
        "bounds", "--mu", "2", "--L", "2", "--alpha", "0.1", "--p-min", "0.8", "--workers", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("kappa = 2"));
}

#[test]
fn ex1_iterates_alternate() {
    let o = signopt(&["counterexample", "ex1", "--alpha", "0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config:"));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let x1 = header.iter().position(|h| *h == "x1").unwrap();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').skip(x1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 101);
    for (k, r) in rows.iter().enumerate() {
        let e = if k % 2 == 0 { 0.05 } else { -0.05 };
        assert_eq!(r, &vec![e, e], "row {k}");
    }
}

#[test]
fn verify_quadratic1d_passes() {
    let o = signopt(&["verify", "--preset", "quadratic1d", "--alpha", "0.25", "--theorem", "thm1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn verify_reports_violation_with_nonzero_exit() {
    // Declaring a larger mu than the objective has makes the bound too tight.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tight.toml");
    std::fs::write(
        &cfg,
        "[objective]\nname = \"diagonal\"\ndiag = [2.0, 0.2]\nmu = 2.0\nl = 2.2\n\n[method]\nname = \"scaled_signgd\"\niters = 30\nx0 = [0.0, 1.0]\n\n[schedule]\nalpha = 0.2\n",
    )
    .unwrap();
    let o = signopt(&["verify", "--config", cfg.to_str().unwrap(), "--theorem", "thm1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(signopt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(signopt(&["bounds", "--mu", "2", "--L", "2", "--bogus"]).status.code(), Some(2));
    assert_eq!(signopt(&["verify", "--preset", "quadratic1d", "--theorem", "thm9"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_one_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[objective]\nname = \"toy\"\n\n[method]\nitres = 5\n").unwrap();
    let o = signopt(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 5") && err.contains("itres"), "{err}");
}

#[test]
fn divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.toml");
    std::fs::write(
        &cfg,
        "[objective]\nname = \"quadratic1d\"\n\n[method]\nname = \"gd\"\niters = 500\n\n[schedule]\nalpha = 5.0\n",
    )
    .unwrap();
    let o = signopt(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn out_file_is_reproducible_and_has_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs/toy.csv");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = signopt(&["toy", "--iters", "50", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(read(&out));
    }
    assert_eq!(runs[0], runs[1]);
    let summary = read(&dir.path().join("runs/toy_summary.csv"));
    assert_eq!(summary.lines().count(), 2 + 5);
}

#[test]
fn env_dir_sets_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_signopt"))
        .args(["compare", "--preset", "distributed", "--iters", "20", "--repeats", "2"])
        .env("SIGNOPT_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&dir.path().join("distributed.csv"));
    assert!(text.lines().nth(2).unwrap().starts_with("majority_vote_m1,0,"));
    assert!(text.contains("majority_vote_m7,20,"));
}

#[test]
fn ode_writes_flow_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow.csv");
    let o = signopt(&["ode", "--flow", "sign", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&out);
    assert_eq!(text.lines().nth(1).unwrap(), "t,V,grad_l2,grad_l1");
    assert!(stderr(&o).contains("PASS"));
}

#[test]
fn compare_overrides_method_list() {
    let o = signopt(&["compare", "--preset", "toy", "--methods", "gd,scaled_signgd", "--iters", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2 + 2 * 6);
    let run = signopt(&["run", "--preset", "toy"]);
    assert_eq!(run.status.code(), Some(1));
}
