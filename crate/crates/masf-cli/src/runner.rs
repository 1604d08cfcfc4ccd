//! Executes one resolved run end to end: simulate (or fetch cached) truth,
//! synthesize measurements, run the filter, persist artifacts.
//!
//! Idempotence: a directory holding a complete manifest with the same
//! config hash is skipped unless forced. A run that fails mid-way keeps its
//! partial metrics and a `status = "failed"` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use nalgebra::DVector;

use masf_core::filter::{run_filter_traced, Method};
use masf_core::net::{checkpoint, ScoreNet};
use masf_core::rng::{stream, NoiseSource, StreamLabel};

use crate::artifacts::{self, trajectory_cache, FailureNote, Manifest, TimingsOut};
use crate::config::RunSpec;

#[derive(Debug, Clone)]
pub struct RunRequest {
    /// Fully resolved config: seed and method already set.
    pub spec: RunSpec,
    pub dir: PathBuf,
    /// Shared truth-trajectory cache; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Sweep coordinates for the manifest (empty for standalone runs).
    pub sweep_point: Vec<(String, String)>,
    pub trace: bool,
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// An identical completed run already occupies the directory.
    Skipped,
    /// The filter loop aborted; partial artifacts were written.
    Failed,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub rmse: Option<f64>,
    pub message: Option<String>,
}

/// Draws the truth initial state (standard normal) and propagates it; the
/// same stream provides any process noise, so the trajectory is a pure
/// function of (dynamics, seed, n_steps) — which is exactly the cache key.
pub fn generate_truth(spec: &RunSpec) -> Result<Vec<DVector<f64>>> {
    let mut rng = stream(spec.seed, StreamLabel::Truth, 0, 0);
    let x0 = rng.standard_normal_vec(spec.dynamics.dim());
    Ok(spec
        .dynamics
        .simulate(&x0, spec.filter.n_steps, &mut rng)
        .context("simulating the truth trajectory")?)
}

fn cached_truth(spec: &RunSpec, cache_dir: Option<&Path>) -> Result<Vec<DVector<f64>>> {
    let Some(dir) = cache_dir else {
        return generate_truth(spec);
    };
    let key = trajectory_cache::key(&spec.dynamics, spec.seed, spec.filter.n_steps);
    if let Some(rows) = trajectory_cache::load(dir, key) {
        return Ok(rows);
    }
    let rows = generate_truth(spec)?;
    trajectory_cache::store(dir, key, &rows)?;
    Ok(rows)
}

/// Measurements from the truth at every configured step, with per-step
/// noise streams so that changing the gap never shifts other draws.
pub fn synthesize_measurements(
    spec: &RunSpec,
    truth: &[DVector<f64>],
) -> Result<BTreeMap<usize, DVector<f64>>> {
    let op = spec.operator.build(spec.dynamics.dim())?;
    let mut out = BTreeMap::new();
    for s in spec.filter.measurement_step_set() {
        if s == 0 {
            continue;
        }
        let mut rng = stream(spec.seed, StreamLabel::Measurement, s as u64, 0);
        let noise = rng.standard_normal_vec(spec.dynamics.dim());
        out.insert(s, op.measure(&truth[s], &noise)?);
    }
    Ok(out)
}

/// Writes truth and measurements for inspection without running a filter.
pub fn simulate_to_dir(spec: &RunSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let truth = generate_truth(spec)?;
    let measurements = synthesize_measurements(spec, &truth)?;
    artifacts::write_truth_csv(dir, &truth)?;
    artifacts::write_measurements_csv(dir, &measurements)?;
    Ok(())
}

fn score_net_param_count(spec: &RunSpec) -> Result<usize> {
    // throwaway init: the count depends only on the architecture
    let mut rng = stream(0, StreamLabel::NetInit, 0, 0);
    Ok(ScoreNet::new(spec.dynamics.dim(), &spec.net, &mut rng)?.param_count())
}

/// Runs one experiment. Returns `Err` only for configuration and I/O
/// problems; filter-phase failures produce a `Failed` outcome with partial
/// artifacts on disk.
pub fn execute_run(req: &RunRequest) -> Result<RunOutcome> {
    let spec = &req.spec;
    let warnings = spec.validate()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let hash = artifacts::config_hash(spec);
    if !req.force {
        if let Ok(existing) = artifacts::read_manifest(&req.dir) {
            if existing.config_hash == hash && existing.is_complete() {
                return Ok(RunOutcome {
                    dir: req.dir.clone(),
                    status: RunStatus::Skipped,
                    rmse: existing.rmse,
                    message: None,
                });
            }
        }
    }
    fs::create_dir_all(&req.dir)
        .with_context(|| format!("creating {}", req.dir.display()))?;

    let truth = cached_truth(spec, req.cache_dir.as_deref())?;
    let measurements = synthesize_measurements(spec, &truth)?;
    let cfg = spec.to_filter_config();

    let started = Instant::now();
    let run = run_filter_traced(&cfg, &truth, &measurements, spec.seed, req.trace)?;
    let total_s = started.elapsed().as_secs_f64();

    artifacts::write_truth_csv(&req.dir, &truth)?;
    artifacts::write_measurements_csv(&req.dir, &measurements)?;
    artifacts::write_metrics_csv(&req.dir, &run.records)?;
    artifacts::write_estimates_csv(&req.dir, &run.records)?;
    if !run.traces.is_empty() {
        artifacts::write_trace_csv(&req.dir, &run.traces)?;
    }
    if let Some(net) = run.final_state.as_ref().and_then(|s| s.net.as_ref()) {
        checkpoint::save(net, &spec.schedule, &req.dir.join(artifacts::NET_FILE))?;
    }

    let param_count = match spec.filter.method {
        Method::Masf => Some(score_net_param_count(spec)?),
        Method::Enkf => None,
    };
    let failure = run.failure.as_ref().map(|f| FailureNote {
        step: f.step,
        message: f.message.clone(),
    });
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: spec.clone(),
        config_hash: hash,
        seed: spec.seed,
        method: spec.filter.method.to_string(),
        sweep_point: req.sweep_point.clone(),
        deviations: spec.deviations.clone(),
        param_count,
        status: if run.failure.is_none() {
            "complete"
        } else {
            "failed"
        }
        .to_string(),
        failure,
        rmse: run.rmse_overall,
        timings: TimingsOut::from_phases(&run.timings, total_s),
        n_records: run.records.len(),
    };
    artifacts::write_manifest(&req.dir, &manifest)?;

    Ok(RunOutcome {
        dir: req.dir.clone(),
        status: if run.failure.is_none() {
            RunStatus::Complete
        } else {
            RunStatus::Failed
        },
        rmse: run.rmse_overall,
        message: run
            .failure
            .map(|f| format!("step {}: {}", f.step, f.message)),
    })
}
