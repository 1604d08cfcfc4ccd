//! On-disk artifacts of a run: manifest, metric/estimate CSVs, sampler
//! traces, net checkpoints, and a binary cache for truth trajectories.
//!
//! CSV files are written with plain `Display` formatting (shortest exact
//! round-trip for floats), so re-running a run with the same config and
//! seed reproduces every artifact byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use masf_core::filter::{PhaseTimings, StepRecord};
use masf_core::hashing;
use masf_core::sampler::StepTrace;

use crate::config::RunSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const NET_FILE: &str = "net.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureNote {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimingsOut {
    pub time_update_s: f64,
    pub training_s: f64,
    pub sampling_s: f64,
    pub total_s: f64,
}

impl TimingsOut {
    pub fn from_phases(phases: &PhaseTimings, total_s: f64) -> Self {
        TimingsOut {
            time_update_s: phases.time_update_s,
            training_s: phases.training_s,
            sampling_s: phases.sampling_s,
            total_s,
        }
    }
}

/// Everything needed to re-execute and audit a run in isolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    /// Fully resolved run config (seed and method included).
    pub config: RunSpec,
    /// FNV-1a hash of the resolved config; the idempotence key.
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    /// Sweep coordinates of this run (path, rendered value), empty for
    /// standalone runs. Lets `report` group runs without parsing paths.
    #[serde(default)]
    pub sweep_point: Vec<(String, String)>,
    /// Declared departures from reference settings.
    #[serde(default)]
    pub deviations: Vec<String>,
    /// Score-net parameter count (absent for EnKF runs).
    pub param_count: Option<usize>,
    /// "complete" or "failed".
    pub status: String,
    pub failure: Option<FailureNote>,
    /// Mean RMSE over the evaluation window (absent if the run failed).
    pub rmse: Option<f64>,
    pub timings: TimingsOut,
    pub n_records: usize,
}

impl Manifest {
    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }
}

pub fn config_hash(spec: &RunSpec) -> String {
    format!("{:016x}", hashing::hash_value(spec))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")
        .with_context(|| format!("writing manifest in {}", dir.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_metrics_csv(dir: &Path, records: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,rmse,ensemble_spread,is_measurement_step\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            r.rmse,
            r.spread,
            u8::from(r.is_measurement)
        ));
    }
    fs::write(dir.join(METRICS_FILE), out).context("writing metrics.csv")
}

fn state_header(prefix: &str, dim: usize) -> String {
    let mut header = String::from("step");
    for i in 0..dim {
        header.push_str(&format!(",{prefix}{i}"));
    }
    header.push('\n');
    header
}

fn push_state_row(out: &mut String, step: usize, state: &DVector<f64>) {
    out.push_str(&step.to_string());
    for v in state.iter() {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
}

pub fn write_estimates_csv(dir: &Path, records: &[StepRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.estimate.len());
    let mut out = state_header("x", dim);
    for r in records {
        push_state_row(&mut out, r.step, &r.estimate);
    }
    fs::write(dir.join(ESTIMATES_FILE), out).context("writing estimates.csv")
}

pub fn write_truth_csv(dir: &Path, truth: &[DVector<f64>]) -> Result<()> {
    let dim = truth.first().map_or(0, |x| x.len());
    let mut out = state_header("x", dim);
    for (step, x) in truth.iter().enumerate() {
        push_state_row(&mut out, step, x);
    }
    fs::write(dir.join(TRUTH_FILE), out).context("writing truth.csv")
}

pub fn write_measurements_csv(
    dir: &Path,
    measurements: &std::collections::BTreeMap<usize, DVector<f64>>,
) -> Result<()> {
    let dim = measurements.values().next().map_or(0, |z| z.len());
    let mut out = state_header("z", dim);
    for (&step, z) in measurements {
        push_state_row(&mut out, step, z);
    }
    fs::write(dir.join(MEASUREMENTS_FILE), out).context("writing measurements.csv")
}

pub fn write_trace_csv(dir: &Path, traces: &[(usize, Vec<StepTrace>)]) -> Result<()> {
    let mut out = String::from("step,sampler_step,t,mean_score_norm,mean_guidance_norm\n");
    for (filter_step, rows) in traces {
        for tr in rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                filter_step, tr.step, tr.t, tr.score_norm, tr.guidance_norm
            ));
        }
    }
    fs::write(dir.join(TRACE_FILE), out).context("writing trace.csv")
}

/// Binary cache of simulated truth trajectories, keyed by the hash of
/// (dynamics config, seed, n_steps). Corrupt or mismatched entries are
/// treated as absent and regenerated.
pub mod trajectory_cache {
    use super::*;
    use masf_core::dynamics::DynamicsModel;

    const MAGIC: &[u8; 8] = b"MASFTRAJ";
    const VERSION: u32 = 1;

    pub fn key(dynamics: &DynamicsModel, seed: u64, n_steps: usize) -> u64 {
        hashing::hash_value(&(dynamics, seed, n_steps as u64))
    }

    pub fn entry_path(dir: &Path, key: u64) -> PathBuf {
        dir.join(format!("{key:016x}.traj"))
    }

    pub fn store(dir: &Path, key: u64, rows: &[DVector<f64>]) -> Result<()> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating cache dir {}", dir.display()))?;
        let dim = rows.first().map_or(0, |x| x.len());
        let mut buf =
            Vec::with_capacity(8 + 4 + 16 + rows.len() * dim * std::mem::size_of::<f64>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
        for row in rows {
            for v in row.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = entry_path(dir, key);
        let mut file = fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        file.write_all(&buf)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(dir: &Path, key: u64) -> Option<Vec<DVector<f64>>> {
        let mut buf = Vec::new();
        fs::File::open(entry_path(dir, key))
            .ok()?
            .read_to_end(&mut buf)
            .ok()?;
        parse(&buf)
    }

    fn parse(buf: &[u8]) -> Option<Vec<DVector<f64>>> {
        let take = |range: std::ops::Range<usize>| buf.get(range);
        if take(0..8)? != MAGIC {
            return None;
        }
        if u32::from_le_bytes(take(8..12)?.try_into().ok()?) != VERSION {
            return None;
        }
        let n_rows = u64::from_le_bytes(take(12..20)?.try_into().ok()?) as usize;
        let dim = u64::from_le_bytes(take(20..28)?.try_into().ok()?) as usize;
        let expected = 28 + n_rows.checked_mul(dim)?.checked_mul(8)?;
        if buf.len() != expected {
            return None;
        }
        let mut rows = Vec::with_capacity(n_rows);
        let mut offset = 28;
        for _ in 0..n_rows {
            let mut row = DVector::zeros(dim);
            for i in 0..dim {
                row[i] = f64::from_le_bytes(buf[offset..offset + 8].try_into().ok()?);
                offset += 8;
            }
            rows.push(row);
        }
        Some(rows)
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn roundtrip_and_corruption_handling() {
            let dir = tempfile::tempdir().unwrap();
            let rows = vec![
                DVector::from_vec(vec![1.0, -2.5]),
                DVector::from_vec(vec![0.25, f64::MIN_POSITIVE]),
            ];
            let model = DynamicsModel::lorenz63(0.01).unwrap();
            let key = key(&model, 7, 1);
            store(dir.path(), key, &rows).unwrap();
            assert_eq!(load(dir.path(), key).unwrap(), rows);
            assert!(load(dir.path(), key + 1).is_none());

            // truncated file is treated as a miss
            let path = entry_path(dir.path(), key);
            let bytes = fs::read(&path).unwrap();
            fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
            assert!(load(dir.path(), key).is_none());

            // different dynamics produce a different key
            let other = DynamicsModel::lorenz63(0.02).unwrap();
            assert_ne!(key, super::key(&other, 7, 1));
        }
    }
}
