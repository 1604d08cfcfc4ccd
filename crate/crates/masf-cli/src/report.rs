//! Aggregates run manifests into summary rows and renders them as CSV,
//! JSON, or a markdown table grouped by sweep point. Floats are rounded to
//! four significant digits in every format; the run with the lowest mean
//! RMSE at each sweep point is flagged as the winner.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::artifacts::{Manifest, MANIFEST_FILE};

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: String,
    /// Sweep coordinates as (path, rendered value), empty when no sweep.
    pub params: Vec<(String, String)>,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    /// Completed seeds contributing to the mean.
    pub n_seeds: usize,
    /// Lowest mean RMSE among the methods at this sweep point.
    pub winner: bool,
}

/// Rounds to four significant digits (report contract).
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(3 - mag);
    (x * factor).round() / factor
}

/// Renders a four-significant-digit number compactly.
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=6).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{:.*}", decimals, round_sig(x))
}

/// Collects every manifest under `root` (recursively), in sorted path order
/// so aggregation is deterministic.
pub fn collect_manifests(root: &Path) -> Result<Vec<Manifest>> {
    let mut paths = Vec::new();
    walk(root, &mut paths)?;
    paths.sort();
    let mut manifests = Vec::with_capacity(paths.len());
    for dir in paths {
        manifests.push(crate::artifacts::read_manifest(&dir)?);
    }
    Ok(manifests)
}

fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(MANIFEST_FILE).is_file() {
        found.push(dir.to_path_buf());
    }
    let entries =
        fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, found)?;
        }
    }
    Ok(())
}

/// Groups manifests by (sweep point, method) and reduces seed RMSEs to
/// mean/std. Failed runs are excluded from the statistics but reported via
/// a reduced `n_seeds`. Row order follows first appearance.
pub fn summarize(manifests: &[Manifest]) -> Vec<SummaryRow> {
    let mut order: Vec<(Vec<(String, String)>, String)> = Vec::new();
    let mut rmses: Vec<Vec<f64>> = Vec::new();
    for m in manifests {
        let key = (m.sweep_point.clone(), m.method.clone());
        let idx = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                rmses.push(Vec::new());
                order.len() - 1
            }
        };
        if m.is_complete() {
            if let Some(r) = m.rmse {
                rmses[idx].push(r);
            }
        }
    }

    let mut rows: Vec<SummaryRow> = order
        .into_iter()
        .zip(rmses)
        .map(|((params, method), values)| {
            let n = values.len();
            let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
            let std = (n > 1).then(|| {
                let m = mean.unwrap();
                (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64)
                    .sqrt()
            });
            SummaryRow {
                method,
                params,
                rmse_mean: mean.map(round_sig),
                rmse_std: std.map(round_sig),
                n_seeds: n,
                winner: false,
            }
        })
        .collect();

    // flag the lowest mean RMSE within each sweep point
    let points: Vec<Vec<(String, String)>> = rows
        .iter()
        .map(|r| r.params.clone())
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Vec::new(), |mut acc, p| {
            if !acc.contains(&p) {
                acc.push(p);
            }
            acc
        });
    for point in points {
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.params == point)
            .filter_map(|(i, r)| r.rmse_mean.map(|m| (i, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            rows[i].winner = true;
        }
    }
    rows
}

/// Axis paths in first-appearance order (the shared CSV/markdown columns).
fn axis_paths(rows: &[SummaryRow]) -> Vec<String> {
    let mut axes = Vec::new();
    for row in rows {
        for (path, _) in &row.params {
            if !axes.iter().any(|a| a == path) {
                axes.push(path.clone());
            }
        }
    }
    axes
}

fn axis_leaf(path: &str) -> &str {
    path.rsplit('.').next().unwrap_or(path)
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig).unwrap_or_default()
}

pub fn render_csv(rows: &[SummaryRow]) -> String {
    let axes = axis_paths(rows);
    let mut out = String::from("method");
    for a in &axes {
        out.push_str(&format!(",{}", axis_leaf(a)));
    }
    out.push_str(",rmse_mean,rmse_std,n_seeds,winner\n");
    for row in rows {
        out.push_str(&row.method);
        for a in &axes {
            let v = row
                .params
                .iter()
                .find(|(p, _)| p == a)
                .map(|(_, v)| v.as_str())
                .unwrap_or("");
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            opt(row.rmse_mean),
            opt(row.rmse_std),
            row.n_seeds,
            u8::from(row.winner)
        ));
    }
    out
}

pub fn render_json(rows: &[SummaryRow]) -> String {
    #[derive(Serialize)]
    struct JsonRow<'a> {
        method: &'a str,
        params: serde_json::Map<String, serde_json::Value>,
        rmse_mean: Option<f64>,
        rmse_std: Option<f64>,
        n_seeds: usize,
        winner: bool,
    }
    let out: Vec<JsonRow> = rows
        .iter()
        .map(|r| JsonRow {
            method: &r.method,
            params: r
                .params
                .iter()
                .map(|(p, v)| (p.clone(), serde_json::Value::String(v.clone())))
                .collect(),
            rmse_mean: r.rmse_mean,
            rmse_std: r.rmse_std,
            n_seeds: r.n_seeds,
            winner: r.winner,
        })
        .collect();
    serde_json::to_string_pretty(&out).expect("summary rows serialize") + "\n"
}

pub fn render_markdown(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut points: Vec<Vec<(String, String)>> = Vec::new();
    for row in rows {
        if !points.contains(&row.params) {
            points.push(row.params.clone());
        }
    }
    for point in points {
        let title = if point.is_empty() {
            "all runs".to_string()
        } else {
            point
                .iter()
                .map(|(p, v)| format!("{} = {v}", axis_leaf(p)))
                .collect::<Vec<_>>()
                .join(", ")
        };
        out.push_str(&format!("## {title}\n\n"));
        out.push_str("| method | rmse_mean | rmse_std | n_seeds | best |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in rows.iter().filter(|r| r.params == point) {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                row.method,
                opt(row.rmse_mean),
                opt(row.rmse_std),
                row.n_seeds,
                if row.winner { "*" } else { "" }
            ));
        }
        out.push('\n');
    }
    out
}

pub fn render(rows: &[SummaryRow], format: &str) -> Result<String> {
    match format {
        "csv" => Ok(render_csv(rows)),
        "json" => Ok(render_json(rows)),
        "markdown" => Ok(render_markdown(rows)),
        other => bail!("unknown report format '{other}' (expected csv, json or markdown)"),
    }
}
