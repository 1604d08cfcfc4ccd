//! Self-checks over the closed-form machinery, shared between the `verify`
//! subcommand (quick configurations) and the acceptance suite (pinned ones).
//! Every check is deterministic given its seed and returns `Ok(detail)` on
//! pass or `Err(detail)` on failure, with the measured margins in the detail
//! string either way.
//!
//! The reference quantities here are computed independently of the library
//! under test: the interpolation coefficient, transition moments, and
//! log-densities are rebuilt from their definitions with plain dense
//! linear algebra.

use nalgebra::{DMatrix, DVector};

use masf_core::measurement::MeasurementOperator;
use masf_core::net::{
    dsm_loss_prepared, prepare_dsm_batch, LossWeighting, NetConfig, ScoreNet,
};
use masf_core::oracle::{random_psd_matrix, sample_moments, GaussianMarginalScore, GaussianPrior};
use masf_core::rng::{stream, NoiseSource, StreamLabel};
use masf_core::sampler::{sample_posterior_ensemble, SamplerConfig};
use masf_core::schedule::Schedule;
use masf_core::ForwardProcess;
use rand::Rng;

use crate::runner::{execute_run, RunRequest, RunStatus};

pub type CheckResult = std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub outcome: CheckResult,
}

/// Interpolation coefficient of the cosine schedule, written out here so the
/// reference computations do not lean on the code under test.
fn ref_alpha(t: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * t).cos()
}

/// Operators cycled through the randomized checks: identity, a coordinate
/// projection (half the components observed), and a dense PSD matrix with
/// spectrum inside the unit interval.
fn nth_operator(
    dim: usize,
    sigma: f64,
    which: usize,
    rng: &mut (impl Rng + NoiseSource),
) -> MeasurementOperator {
    match which % 3 {
        0 => MeasurementOperator::identity(dim, sigma).expect("identity operator"),
        1 => {
            let mask: Vec<bool> = (0..dim).map(|i| i < dim.div_ceil(2)).collect();
            MeasurementOperator::grid_mask(&mask, sigma).expect("mask operator")
        }
        _ => {
            let m = random_psd_matrix(dim, 0.05, 0.95, rng);
            MeasurementOperator::dense(m, sigma).expect("dense operator")
        }
    }
}

/// Transition kernels must compose across an intermediate time: the mean
/// maps multiply and the noise covariances accumulate under the mean map.
/// Both forward and reverse orderings are exercised.
pub fn transition_composition(
    n_triples: usize,
    tol_mean: f64,
    tol_cov: f64,
    seed: u64,
) -> CheckResult {
    let mut rng = stream(seed, StreamLabel::Sampling, 0, 0);
    let schedule = Schedule::cosine();
    let hi = schedule.t_terminal();
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for i in 0..n_triples {
        let dim = 1 + i % 3;
        let sigma = if i % 2 == 0 { 1.0 } else { 0.5 };
        let op = nth_operator(dim, sigma, i, &mut rng);
        let fp = ForwardProcess::new(op, schedule.clone());
        let mut times = [0.0f64; 3];
        loop {
            for v in &mut times {
                *v = rng.random_range(0.02..hi);
            }
            times.sort_by(f64::total_cmp);
            if times[1] - times[0] > 1e-3 && times[2] - times[1] > 1e-3 {
                break;
            }
        }
        let (s, u, t) = if i % 2 == 0 {
            (times[0], times[1], times[2])
        } else {
            (times[2], times[1], times[0])
        };
        let k_su = fp.transition(s, u).map_err(|e| format!("kernel {s}->{u}: {e}"))?;
        let k_ut = fp.transition(u, t).map_err(|e| format!("kernel {u}->{t}: {e}"))?;
        let k_st = fp.transition(s, t).map_err(|e| format!("kernel {s}->{t}: {e}"))?;
        let m_su = k_su.mean_map().to_dense();
        let m_ut = k_ut.mean_map().to_dense();
        let m_st = k_st.mean_map().to_dense();
        let mean_err = (&m_ut * &m_su - &m_st).abs().max();
        let c_su = k_su.noise_cov().to_dense();
        let c_ut = k_ut.noise_cov().to_dense();
        let c_st = k_st.noise_cov().to_dense();
        let cov_err = (&m_ut * c_su * m_ut.transpose() + c_ut - c_st).abs().max();
        worst_mean = worst_mean.max(mean_err);
        worst_cov = worst_cov.max(cov_err);
    }
    let detail = format!(
        "{n_triples} triples: worst mean-map error {worst_mean:.2e} (tol {tol_mean:.0e}), \
         worst covariance error {worst_cov:.2e} (tol {tol_cov:.0e})"
    );
    if worst_mean <= tol_mean && worst_cov <= tol_cov {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// The closed-form measurement-likelihood score must match a central finite
/// difference of the transition log-density `log N(z; M x, S)`, with `M` and
/// `S` rebuilt here from the definitions.
pub fn likelihood_score_fd(n_triples: usize, tol: f64, seed: u64) -> CheckResult {
    let mut rng = stream(seed, StreamLabel::Sampling, 1, 0);
    let schedule = Schedule::cosine();
    let t_hi = 0.9 * schedule.t_terminal();
    let mut worst = 0.0f64;
    for i in 0..n_triples {
        let dim = 1 + i % 3;
        let sigma = if i % 2 == 0 { 1.0 } else { 0.5 };
        let op = nth_operator(dim, sigma, i, &mut rng);
        let a = op.op().to_dense();
        let fp = ForwardProcess::new(op, schedule.clone());
        let t = rng.random_range(0.05..t_hi);
        let x: DVector<f64> = rng.standard_normal_vec(dim) * 1.5;
        let z: DVector<f64> = rng.standard_normal_vec(dim) * 1.5;

        let alpha = ref_alpha(t);
        let gamma_sq = 1.0 - alpha * alpha;
        let a_t = &a * (1.0 - alpha) + DMatrix::identity(dim, dim) * alpha;
        let lu = a_t.lu();
        // A and A(t) commute, so M = A A(t)^{-1} = (A(t)^{-1} A)^T
        let m = lu
            .solve(&a)
            .ok_or_else(|| format!("reference A(t) singular at t = {t}"))?
            .transpose();
        let s_cov = DMatrix::identity(dim, dim) * (sigma * sigma)
            - &m * m.transpose() * (sigma * sigma * gamma_sq);
        let s_cov = (&s_cov + s_cov.transpose()) * 0.5;
        let chol = s_cov
            .cholesky()
            .ok_or_else(|| format!("reference S not PSD at t = {t}"))?;
        let logp = |x: &DVector<f64>| -> f64 {
            let r = &z - &m * x;
            -0.5 * r.dot(&chol.solve(&r))
        };

        let analytic = fp
            .likelihood_score(&z, &x, t)
            .map_err(|e| format!("likelihood score at t = {t}: {e}"))?;
        let mut fd = DVector::zeros(dim);
        for j in 0..dim {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            fd[j] = (logp(&xp) - logp(&xm)) / (2.0 * h);
        }
        let rel = (&analytic - &fd).norm() / analytic.norm().max(1e-12);
        worst = worst.max(rel);
    }
    let detail =
        format!("{n_triples} triples: worst relative score error {worst:.2e} (tol {tol:.0e})");
    if worst <= tol {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Backpropagated gradients of the denoising score-matching loss must match
/// central finite differences for every parameter of a small network.
pub fn dsm_gradients_fd(
    dim: usize,
    cfg: &NetConfig,
    weighting: LossWeighting,
    tol: f64,
    seed: u64,
) -> CheckResult {
    let mut rng = stream(seed, StreamLabel::NetInit, 0, 0);
    let mut net = ScoreNet::new(dim, cfg, &mut rng).map_err(|e| format!("net init: {e}"))?;
    // the zero-initialized head would hide gradient errors in earlier layers;
    // randomize it like the rest
    {
        let mut layers = net.layers().to_vec();
        let last = layers.len() - 1;
        for v in layers[last].weight.iter_mut() {
            *v = rng.standard_normal() * 0.4;
        }
        for v in layers[last].bias.iter_mut() {
            *v = rng.standard_normal() * 0.1;
        }
        net = ScoreNet::from_layers(layers, dim, cfg.time_embed_width)
            .map_err(|e| format!("net rebuild: {e}"))?;
    }
    let op = MeasurementOperator::identity(dim, 1.0).expect("identity operator");
    let fp = ForwardProcess::new(op, Schedule::cosine());
    let batch: Vec<DVector<f64>> = (0..5).map(|_| rng.standard_normal_vec(dim)).collect();
    let examples = prepare_dsm_batch(&batch, &fp, 0.37, weighting, &mut rng)
        .map_err(|e| format!("batch preparation: {e}"))?;
    let (_, grads) =
        dsm_loss_prepared(&net, &examples).map_err(|e| format!("loss evaluation: {e}"))?;

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut n_params = 0usize;
    let loss_at = |layers: Vec<masf_core::net::Layer>| -> Result<f64, String> {
        let perturbed = ScoreNet::from_layers(layers, dim, cfg.time_embed_width)
            .map_err(|e| format!("perturbed net: {e}"))?;
        Ok(dsm_loss_prepared(&perturbed, &examples)
            .map_err(|e| format!("perturbed loss: {e}"))?
            .0)
    };
    for l in 0..net.layers().len() {
        let rows = net.layers()[l].weight.nrows();
        let cols = net.layers()[l].weight.ncols();
        for i in 0..rows {
            for j in 0..cols {
                let mut plus = net.layers().to_vec();
                plus[l].weight[(i, j)] += h;
                let mut minus = net.layers().to_vec();
                minus[l].weight[(i, j)] -= h;
                let fd = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
                let an = grads.layers[l].weight[(i, j)];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
                n_params += 1;
            }
            let mut plus = net.layers().to_vec();
            plus[l].bias[i] += h;
            let mut minus = net.layers().to_vec();
            minus[l].bias[i] -= h;
            let fd = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
            let an = grads.layers[l].bias[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            n_params += 1;
        }
    }
    let detail = format!(
        "{n_params} parameters: worst relative gradient error {worst:.2e} (tol {tol:.0e})"
    );
    if worst <= tol {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct MomentCase {
    label: &'static str,
    op: MeasurementOperator,
}

/// Euler-Maruyama integration of the moment-matched SDE
/// `dX = F(t) X dt + G(t) dB` from a point mass must reproduce the
/// closed-form marginal mean `A(t) x0` and covariance `sigma^2 gamma^2(t) I`
/// at t in {0.25, 0.5, 0.75}, within 3 standard errors of the path count.
pub fn moment_matching(n_paths: usize, seed: u64) -> CheckResult {
    let mut setup_rng = stream(seed, StreamLabel::Sampling, 2, 0);
    let cases = [
        MomentCase {
            label: "d=4 dense psd, sigma=0.7",
            op: MeasurementOperator::dense(
                random_psd_matrix(4, 0.1, 0.9, &mut setup_rng),
                0.7,
            )
            .expect("dense operator"),
        },
        MomentCase {
            label: "d=2 projection, sigma=1",
            op: MeasurementOperator::grid_mask(&[true, false], 1.0).expect("mask operator"),
        },
    ];
    let dt: f64 = 2.5e-4;
    let steps_per_check = 1000; // 0.25 / dt
    let checks = [0.25, 0.5, 0.75];
    let mut worst_ratio = 0.0f64;
    let mut detail = String::new();
    for (ci, case) in cases.iter().enumerate() {
        let dim = case.op.dim();
        let sigma = case.op.sigma();
        let a = case.op.op().to_dense();
        let fp = ForwardProcess::new(case.op.clone(), Schedule::cosine());
        let x0 = stream(seed, StreamLabel::Truth, ci as u64, 0).standard_normal_vec(dim);

        // one column per path
        let mut x = DMatrix::zeros(dim, n_paths);
        for p in 0..n_paths {
            x.column_mut(p).copy_from(&x0);
        }
        let mut noise_rng = stream(seed, StreamLabel::Sampling, 3, ci as u64);
        let sqrt_dt = dt.sqrt();
        for k in 0..steps_per_check * checks.len() {
            let t = k as f64 * dt;
            let f = fp
                .drift_matrix(t)
                .map_err(|e| format!("drift at t = {t}: {e}"))?
                .to_dense();
            let g = fp
                .diffusion_sq(t)
                .map_err(|e| format!("diffusion at t = {t}: {e}"))?
                .sqrt_psd("diffusion")
                .map_err(|e| format!("diffusion sqrt at t = {t}: {e}"))?
                .to_dense();
            let xi = DMatrix::from_fn(dim, n_paths, |_, _| noise_rng.standard_normal());
            let increment = (&f * &x) * dt + (&g * xi) * sqrt_dt;
            x += increment;

            let t_next = (k + 1) as f64 * dt;
            if (k + 1) % steps_per_check == 0 {
                let alpha = ref_alpha(t_next);
                let mean_ref = (&a * (1.0 - alpha)
                    + DMatrix::identity(dim, dim) * alpha)
                    * &x0;
                let var_ref = sigma * sigma * (1.0 - alpha * alpha);
                let cols: Vec<DVector<f64>> =
                    (0..n_paths).map(|p| x.column(p).into_owned()).collect();
                let (mean_hat, cov_hat) = sample_moments(&cols);
                for i in 0..dim {
                    let se = (var_ref / n_paths as f64).sqrt();
                    let ratio = (mean_hat[i] - mean_ref[i]).abs() / (3.0 * se);
                    worst_ratio = worst_ratio.max(ratio);
                    for j in 0..dim {
                        let cov_ref = if i == j { var_ref } else { 0.0 };
                        let se_cov = ((var_ref * var_ref
                            + if i == j { var_ref * var_ref } else { 0.0 })
                            / n_paths as f64)
                            .sqrt();
                        let ratio = (cov_hat[(i, j)] - cov_ref).abs() / (3.0 * se_cov);
                        worst_ratio = worst_ratio.max(ratio);
                    }
                }
            }
        }
        detail.push_str(&format!("[{}] ", case.label));
    }
    detail.push_str(&format!(
        "{n_paths} paths, dt {dt}: worst |error| / (3 SE) = {worst_ratio:.3}"
    ));
    if worst_ratio <= 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Compact linear-Gaussian posterior check: with the analytic prior score,
/// posterior sampling must reproduce the conjugate posterior moments.
pub fn linear_gaussian_quick(
    nfe: usize,
    n_members: usize,
    mean_se_factor: f64,
    cov_rel_tol: f64,
    seed: u64,
) -> CheckResult {
    let mut rng = stream(seed, StreamLabel::EnsembleInit, 0, 0);
    let schedule = Schedule::cosine();
    let cases: Vec<(&str, GaussianPrior, MeasurementOperator)> = vec![
        (
            "d=2 identity, sigma=1",
            GaussianPrior::new(
                DVector::from_vec(vec![0.3, -0.5]),
                random_psd_matrix(2, 0.5, 1.5, &mut rng),
            )
            .expect("prior"),
            MeasurementOperator::identity(2, 1.0).expect("operator"),
        ),
        (
            "d=2 dense psd, sigma=0.5",
            GaussianPrior::standard(2),
            MeasurementOperator::dense(random_psd_matrix(2, 0.1, 0.9, &mut rng), 0.5)
                .expect("operator"),
        ),
    ];
    let mut detail = String::new();
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for (ci, (label, prior, op)) in cases.into_iter().enumerate() {
        let dim = op.dim();
        let fp = ForwardProcess::new(op.clone(), schedule.clone());
        let truth = prior.sample(&mut rng).map_err(|e| format!("prior draw: {e}"))?;
        let z = op
            .measure(&truth, &rng.standard_normal_vec(dim))
            .map_err(|e| format!("measurement: {e}"))?;
        let (post_mean, post_cov) = prior
            .kalman_posterior(&op, &z)
            .map_err(|e| format!("conjugate posterior: {e}"))?;
        let members: Vec<DVector<f64>> = (0..n_members)
            .map(|_| prior.sample(&mut rng))
            .collect::<masf_core::Result<_>>()
            .map_err(|e| format!("member draws: {e}"))?;
        let score =
            GaussianMarginalScore::new(prior, fp.clone()).map_err(|e| format!("score: {e}"))?;
        let cfg = SamplerConfig {
            nfe,
            ..SamplerConfig::default()
        };
        let (samples, _) = sample_posterior_ensemble(
            &score,
            &fp,
            &members,
            &z,
            &cfg,
            |m| stream(seed, StreamLabel::Sampling, 10 + ci as u64, m as u64),
            false,
        )
        .map_err(|e| format!("posterior sampling: {e}"))?;
        let (mean_hat, cov_hat) = sample_moments(&samples);
        let mean_ratio = (0..dim)
            .map(|i| {
                (mean_hat[i] - post_mean[i]).abs()
                    / (mean_se_factor * (post_cov[(i, i)] / n_members as f64).sqrt())
            })
            .fold(0.0f64, f64::max);
        let cov_rel = (&cov_hat - &post_cov).norm() / post_cov.norm();
        worst_mean = worst_mean.max(mean_ratio);
        worst_cov = worst_cov.max(cov_rel);
        detail.push_str(&format!("[{label}] "));
    }
    detail.push_str(&format!(
        "nfe {nfe}, {n_members} members: worst mean |error| / ({mean_se_factor} SE) = \
         {worst_mean:.3}, worst covariance rel error {worst_cov:.4} (tol {cov_rel_tol})"
    ));
    if worst_mean <= 1.0 && worst_cov <= cov_rel_tol {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Config for a small but complete filtering run (both measurement updates
/// exercised, a real training pass, short reverse chains).
fn tiny_run_spec(seed: u64) -> crate::config::RunSpec {
    let mut spec: crate::config::RunSpec = toml::from_str(
        r#"
        [filter]
        n_steps = 30
        gap = 15
        n_members = 8
        method = "masf"

        [dynamics]
        kind = "lorenz63"

        [net]
        hidden_width = 16
        depth = 2
        time_embed_width = 4

        [train]
        epochs = 5
        batch_size = 8

        [sampler]
        nfe = 10
        "#,
    )
    .expect("tiny spec parses");
    spec.seed = seed;
    spec
}

/// Two runs of the same config and seed must produce byte-identical metrics.
pub fn run_determinism(seed: u64) -> CheckResult {
    let tmp = tempfile::tempdir().map_err(|e| format!("temp dir: {e}"))?;
    let spec = tiny_run_spec(seed);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let req = RunRequest {
            spec: spec.clone(),
            dir: tmp.path().join(name),
            cache_dir: None,
            sweep_point: Vec::new(),
            trace: false,
            force: false,
        };
        let outcome = execute_run(&req).map_err(|e| format!("run {name}: {e:#}"))?;
        if outcome.status == RunStatus::Failed {
            return Err(format!(
                "run {name} failed: {}",
                outcome.message.unwrap_or_default()
            ));
        }
        bytes.push(
            std::fs::read(req.dir.join(crate::artifacts::METRICS_FILE))
                .map_err(|e| format!("reading metrics of run {name}: {e}"))?,
        );
    }
    if bytes[0] == bytes[1] {
        Ok(format!(
            "two identical runs: metrics byte-identical ({} bytes)",
            bytes[0].len()
        ))
    } else {
        Err("two identical runs produced different metrics files".to_string())
    }
}

/// Quick configuration of every check, for the `verify` subcommand.
pub fn run_all() -> Vec<Check> {
    vec![
        Check {
            name: "kernel-composition",
            outcome: transition_composition(60, 1e-10, 1e-8, 11),
        },
        Check {
            name: "likelihood-score-fd",
            outcome: likelihood_score_fd(40, 1e-5, 12),
        },
        Check {
            name: "dsm-gradients-fd",
            outcome: dsm_gradients_fd(
                3,
                &NetConfig {
                    hidden_width: 6,
                    depth: 2,
                    time_embed_width: 4,
                },
                LossWeighting::Score,
                1e-4,
                13,
            ),
        },
        Check {
            name: "sde-moment-matching",
            outcome: moment_matching(4000, 14),
        },
        Check {
            name: "linear-gaussian-posterior",
            outcome: linear_gaussian_quick(150, 1500, 4.0, 0.075, 15),
        },
        Check {
            name: "run-determinism",
            outcome: run_determinism(16),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_check_passes() {
        transition_composition(30, 1e-10, 1e-8, 21).unwrap();
    }

    #[test]
    fn likelihood_fd_check_passes() {
        likelihood_score_fd(20, 1e-5, 22).unwrap();
    }

    #[test]
    fn gradient_fd_check_passes() {
        let cfg = NetConfig {
            hidden_width: 6,
            depth: 2,
            time_embed_width: 4,
        };
        dsm_gradients_fd(3, &cfg, LossWeighting::Score, 1e-4, 23).unwrap();
    }

    #[test]
    fn moment_matching_check_passes() {
        moment_matching(2000, 24).unwrap();
    }
}
