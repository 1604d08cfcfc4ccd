//! Sweep execution: cartesian expansion of sweep axes × methods × seeds,
//! a cost ceiling against accidental large launches, isolated per-run
//! failure handling, and summary aggregation.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};

use masf_core::filter::Method;

use crate::config::{ExperimentSpec, RunSpec};
use crate::report::{self, SummaryRow};
use crate::runner::{execute_run, RunOutcome, RunRequest, RunStatus};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone)]
pub struct PlannedRun {
    /// Directory name under the experiment output dir.
    pub name: String,
    /// Sweep coordinates as (path, rendered value).
    pub point: Vec<(String, String)>,
    pub spec: RunSpec,
}

fn value_label(v: &toml::Value) -> String {
    let raw = match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => format!("{f}"),
        toml::Value::Boolean(b) => b.to_string(),
        other => other.to_string(),
    };
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn axis_leaf(path: &str) -> &str {
    path.rsplit('.').next().unwrap_or(path)
}

fn run_name(method: Method, point: &[(String, String)], seed: u64) -> String {
    let mut name = method.to_string();
    for (path, label) in point {
        name.push_str(&format!("_{}{}", axis_leaf(path), label));
    }
    name.push_str(&format!("_seed{seed}"));
    name
}

/// Estimated cost of one run: members × nfe × steps × dim (nfe counts 1
/// for EnKF, which integrates no reverse chain).
pub fn estimated_cost(spec: &RunSpec) -> f64 {
    let nfe = match spec.filter.method {
        Method::Masf => spec.sampler.nfe,
        Method::Enkf => 1,
    };
    spec.filter.n_members as f64
        * nfe as f64
        * spec.filter.n_steps as f64
        * spec.dynamics.dim() as f64
}

/// Expands the experiment into fully resolved runs, validating each one.
/// Axis order: later axes vary fastest; methods and seeds innermost.
pub fn expand(exp: &ExperimentSpec) -> Result<Vec<PlannedRun>> {
    exp.validate()?;
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in &exp.sweep {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for point in &points {
            for value in &axis.values {
                let mut p = point.clone();
                p.push((axis.path.clone(), value.clone()));
                next.push(p);
            }
        }
        points = next;
    }

    let mut planned = Vec::new();
    for point in &points {
        let mut swept = exp.base.clone();
        for (path, value) in point {
            swept = swept.with_override(path, value)?;
        }
        let labels: Vec<(String, String)> = point
            .iter()
            .map(|(p, v)| (p.clone(), value_label(v)))
            .collect();
        for &method in &exp.methods {
            let with_method = swept
                .with_override("filter.method", &toml::Value::String(method.to_string()))?;
            for &seed in &exp.seeds {
                let mut spec = with_method.clone();
                spec.seed = seed;
                spec.validate().with_context(|| {
                    format!("sweep point {labels:?}, method {method}, seed {seed}")
                })?;
                planned.push(PlannedRun {
                    name: run_name(method, &labels, seed),
                    point: labels.clone(),
                    spec,
                });
            }
        }
    }
    Ok(planned)
}

/// Runs the whole sweep. Individual run failures are reported and recorded
/// but never stop the sweep; the summary is written either way. Returns the
/// summary rows and whether every run completed (or was skipped).
pub fn run_sweep(
    exp: &ExperimentSpec,
    out_override: Option<&Path>,
    force: bool,
    jobs: usize,
    trace: bool,
) -> Result<(Vec<SummaryRow>, bool)> {
    let planned = expand(exp)?;
    let total_cost: f64 = planned.iter().map(|p| estimated_cost(&p.spec)).sum();
    if total_cost > exp.budget {
        bail!(
            "estimated sweep cost {total_cost:.3e} exceeds the budget {:.3e}; \
             raise `budget` in the experiment file to unlock runs this large",
            exp.budget
        );
    }

    let out_dir = out_override.unwrap_or(&exp.output_dir).to_path_buf();
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let cache_dir = out_dir.join("cache");

    let requests: Vec<RunRequest> = planned
        .iter()
        .map(|p| RunRequest {
            spec: p.spec.clone(),
            dir: out_dir.join(&p.name),
            cache_dir: Some(cache_dir.clone()),
            sweep_point: p.point.clone(),
            trace,
            force,
        })
        .collect();

    let n = requests.len();
    let outcomes: Vec<(usize, Result<RunOutcome>)> = if jobs <= 1 {
        requests
            .iter()
            .enumerate()
            .map(|(i, req)| {
                let outcome = execute_run(req);
                print_progress(i, n, &planned[i].name, &outcome);
                (i, outcome)
            })
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let collected: Mutex<Vec<(usize, Result<RunOutcome>)>> =
            Mutex::new(Vec::with_capacity(n));
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(n) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let outcome = execute_run(&requests[i]);
                    print_progress(i, n, &planned[i].name, &outcome);
                    collected.lock().unwrap().push((i, outcome));
                });
            }
        });
        let mut v = collected.into_inner().unwrap();
        v.sort_by_key(|(i, _)| *i);
        v
    };

    let mut all_ok = true;
    for (i, outcome) in &outcomes {
        match outcome {
            Ok(o) if o.status != RunStatus::Failed => {}
            Ok(o) => {
                all_ok = false;
                eprintln!(
                    "run {} failed: {}",
                    planned[*i].name,
                    o.message.as_deref().unwrap_or("unknown failure")
                );
            }
            Err(e) => {
                all_ok = false;
                eprintln!("run {} errored: {e:#}", planned[*i].name);
            }
        }
    }

    // aggregate from the manifests the runs just wrote (works for skipped
    // runs too, whose outcomes carry no records)
    let manifests: Vec<_> = requests
        .iter()
        .filter_map(|req| crate::artifacts::read_manifest(&req.dir).ok())
        .collect();
    let rows = report::summarize(&manifests);
    fs::write(out_dir.join(SUMMARY_FILE), report::render_csv(&rows))
        .context("writing summary.csv")?;
    Ok((rows, all_ok))
}

fn print_progress(i: usize, n: usize, name: &str, outcome: &Result<RunOutcome>) {
    let status = match outcome {
        Ok(o) => match (o.status, o.rmse) {
            (RunStatus::Skipped, Some(r)) => format!("skipped (rmse {r:.4})"),
            (RunStatus::Skipped, None) => "skipped".to_string(),
            (RunStatus::Complete, Some(r)) => format!("done (rmse {r:.4})"),
            (RunStatus::Complete, None) => "done".to_string(),
            (RunStatus::Failed, _) => "FAILED".to_string(),
        },
        Err(_) => "ERROR".to_string(),
    };
    eprintln!("[{}/{}] {} {}", i + 1, n, name, status);
}
