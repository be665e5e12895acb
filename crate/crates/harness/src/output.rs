//! CSV emission for experiment results.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::experiments::ExperimentResult;

/// Directory used when a config has no `output.path`.
pub const OUT_DIR_ENV: &str = "SIGNOPT_OUT_DIR";

pub const COMPARE_CSV_HEADER: &str = "method,k,f,V,V_std,grad_l1,alpha,bound,bits_up,bits_down";
pub const SUMMARY_CSV_HEADER: &str = "method,iters,final_f,final_V,final_V_std,final_grad_l1,bits_up,bits_down";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn io_err(path: &str) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::io(path, e)
}

/// Merged per-iteration CSV for every method in `res`.
///
/// The first line is `# config: ` followed by the full configuration on one
/// line. With `output.iterates` the columns `x1..xd` follow.
pub fn write_compare_csv<W: Write>(res: &ExperimentResult, mut out: W) -> Result<()> {
    let w = io_err("<csv>");
    writeln!(out, "# config: {}", res.config.fingerprint()?).map_err(&w)?;
    let iterates = res.config.output.iterates;
    let dim = res
        .methods
        .iter()
        .filter_map(|m| m.single.as_ref())
        .flat_map(|t| t.snapshots.first())
        .map(|(_, x)| x.dim())
        .next()
        .unwrap_or(0);
    write!(out, "{COMPARE_CSV_HEADER}").map_err(&w)?;
    if iterates {
        for i in 1..=dim {
            write!(out, ",x{i}").map_err(&w)?;
        }
    }
    writeln!(out).map_err(&w)?;
    for m in &res.methods {
        let rows = &m.summary.mean.rows;
        let snaps = m.single.as_ref().map(|t| &t.snapshots);
        if iterates && snaps.is_none_or(|s| s.len() != rows.len()) {
            return Err(HarnessError::config("iterate columns need one snapshot per row"));
        }
        for (i, r) in rows.iter().enumerate() {
            write!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                m.label,
                r.k,
                num(r.f),
                opt(r.v),
                opt(m.summary.v_std[i]),
                num(r.grad_l1),
                num(r.alpha),
                opt(r.bound),
                r.bits_up,
                r.bits_down
            )
            .map_err(&w)?;
            if let (true, Some(s)) = (iterates, snaps) {
                for v in s[i].1.iter() {
                    write!(out, ",{}", num(*v)).map_err(&w)?;
                }
            }
            writeln!(out).map_err(&w)?;
        }
    }
    Ok(())
}

/// One row per method with the values at the last iteration.
pub fn write_summary_csv<W: Write>(res: &ExperimentResult, mut out: W) -> Result<()> {
    let w = io_err("<csv>");
    writeln!(out, "# config: {}", res.config.fingerprint()?).map_err(&w)?;
    writeln!(out, "{SUMMARY_CSV_HEADER}").map_err(&w)?;
    for m in &res.methods {
        let last = m.summary.mean.rows.len() - 1;
        let r = &m.summary.mean.rows[last];
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.label,
            r.k,
            num(r.f),
            opt(r.v),
            opt(m.summary.v_std[last]),
            num(r.grad_l1),
            r.bits_up,
            r.bits_down
        )
        .map_err(&w)?;
    }
    Ok(())
}

pub fn compare_csv_string(res: &ExperimentResult) -> Result<String> {
    let mut buf = Vec::new();
    write_compare_csv(res, &mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV output is ASCII"))
}

/// Where a run's CSV goes: `output.path`, else `$SIGNOPT_OUT_DIR/<default_name>`,
/// else `None` for stdout.
pub fn resolve_output(configured: Option<&str>, default_name: &str) -> Option<PathBuf> {
    if let Some(p) = configured {
        return Some(PathBuf::from(p));
    }
    std::env::var_os(OUT_DIR_ENV)
        .filter(|d| !d.is_empty())
        .map(|d| Path::new(&d).join(default_name))
}

/// `trace.csv` -> `trace_summary.csv`.
pub fn summary_path(main: &Path) -> PathBuf {
    let stem = main.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    main.with_file_name(format!("{stem}_summary.csv"))
}

/// Writes `text` to `path`, creating the parent directory if needed.
pub fn write_file(path: &Path, text: &str) -> Result<()> {
    let shown = path.display().to_string();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(shown.clone(), e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(shown, e))
}

/// Writes the merged CSV (and, for files, the summary next to it).
/// Returns the path written, or `None` when the CSV went to stdout.
pub fn emit(res: &ExperimentResult, default_name: &str) -> Result<Option<PathBuf>> {
    let main = compare_csv_string(res)?;
    match resolve_output(res.config.output.path.as_deref(), default_name) {
        Some(path) => {
            write_file(&path, &main)?;
            let mut summary = Vec::new();
            write_summary_csv(res, &mut summary)?;
            write_file(&summary_path(&path), &String::from_utf8(summary).expect("ASCII"))?;
            Ok(Some(path))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(main.as_bytes()).map_err(|e| HarnessError::io("<stdout>", e))?;
            Ok(None)
        }
    }
}
