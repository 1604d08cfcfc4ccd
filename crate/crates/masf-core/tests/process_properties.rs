//! Independent numerical checks of the forward process: the moment-matched
//! SDE, the fundamental matrix, the Lyapunov equation, and the transition
//! kernel algebra. These deliberately avoid the closed forms in the crate
//! and integrate the SDE / ODE directly.

use masf_core::linalg::OpMatrix;
use masf_core::measurement::{ForwardProcess, MeasurementOperator};
use masf_core::oracle::{random_psd_matrix, sample_moments};
use masf_core::rng::{stream, NoiseSource, StreamLabel};
use masf_core::schedule::{Schedule, ScheduleKind};

use nalgebra::{DMatrix, DVector};

fn fp_with(op: MeasurementOperator, kind: ScheduleKind) -> ForwardProcess {
    ForwardProcess::new(op, Schedule::new(kind, 0.992).unwrap())
}

fn random_operator(dim: usize, sigma: f64, seed: u64) -> MeasurementOperator {
    let mut rng = stream(seed, StreamLabel::Truth, 0, 0);
    let m = random_psd_matrix(dim, 0.0, 1.0, &mut rng);
    MeasurementOperator::dense(m, sigma).unwrap()
}

/// Euler–Maruyama on dX = F(t) X dt + G(t) dW must reproduce the closed-form
/// marginal N(A(t) x0, Sigma(t)) — the moment-matching property that defines
/// the SDE. 20k paths, mean within 3 standard errors, variance within 5%.
#[test]
fn euler_maruyama_matches_closed_form_marginals() {
    let d = 4;
    let fp = fp_with(random_operator(d, 0.8, 41), ScheduleKind::Cosine);
    let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let n_paths = 20_000;
    let dt: f64 = 1.0 / 400.0;

    for &t_end in &[0.25, 0.5, 0.75] {
        let n_steps = (t_end / dt).round() as usize;
        let mut rng = stream(42, StreamLabel::Sampling, (t_end * 100.0) as u64, 0);
        let mut samples = Vec::with_capacity(n_paths);
        // precompute per-step drift and diffusion at the left endpoints
        let mut drifts = Vec::with_capacity(n_steps);
        let mut diff_sqrts = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let t = k as f64 * dt;
            drifts.push(fp.drift_matrix(t).unwrap());
            diff_sqrts.push(fp.diffusion_sq(t).unwrap().sqrt_psd("diffusion").unwrap());
        }
        for _ in 0..n_paths {
            let mut x = x0.clone();
            for k in 0..n_steps {
                let dw = rng.standard_normal_vec(d) * dt.sqrt();
                x = &x
                    + drifts[k].matvec(&x).unwrap() * dt
                    + diff_sqrts[k].matvec(&dw).unwrap();
            }
            samples.push(x);
        }
        let (mean, cov) = sample_moments(&samples);

        let want_mean = fp.interp_operator(t_end).unwrap().matvec(&x0).unwrap();
        let g2 = fp.schedule().gamma_sq(t_end).unwrap();
        let sigma_sq = 0.8 * 0.8 * g2;

        for i in 0..d {
            // var of the marginal is sigma^2 gamma^2 on every axis
            let se = (sigma_sq / n_paths as f64).sqrt();
            let err = (mean[i] - want_mean[i]).abs();
            assert!(
                err < 3.5 * se + 2.0 * dt, // discretization bias ~ O(dt)
                "t = {t_end}, axis {i}: mean err {err:.2e} vs se {se:.2e}"
            );
            let rel = (cov[(i, i)] - sigma_sq).abs() / sigma_sq;
            assert!(rel < 0.05, "t = {t_end}, axis {i}: var rel err {rel:.3}");
        }
    }
}

/// The fundamental matrix of dPhi/dt = F(t) Phi, Phi(0) = I, is A(t) by
/// construction of the drift. RK4 with a fine grid, d <= 8.
#[test]
fn fundamental_matrix_is_the_interpolated_operator() {
    for (seed, d) in [(1u64, 2usize), (2, 5), (3, 8)] {
        let fp = fp_with(random_operator(d, 1.0, seed), ScheduleKind::Cosine);
        let n = 2000;
        let t_end = 0.95;
        let h = t_end / n as f64;
        let mut phi = DMatrix::<f64>::identity(d, d);
        let f_at = |t: f64| fp.drift_matrix(t).unwrap().to_dense();
        for k in 0..n {
            let t = k as f64 * h;
            let k1 = f_at(t) * &phi;
            let k2 = f_at(t + 0.5 * h) * (&phi + &k1 * (0.5 * h));
            let k3 = f_at(t + 0.5 * h) * (&phi + &k2 * (0.5 * h));
            let k4 = f_at(t + h) * (&phi + &k3 * h);
            phi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let want = fp.interp_operator(t_end).unwrap().to_dense();
        let err = (&phi - &want).norm() / want.norm();
        assert!(err < 1e-4, "d = {d}: fundamental matrix err {err:.2e}");
    }
}

/// Sigma(t) solves the Lyapunov equation
/// dSigma/dt = F Sigma + Sigma F^T + G G^T. Residual check on a grid.
#[test]
fn marginal_covariance_satisfies_lyapunov() {
    let d = 3;
    let fp = fp_with(random_operator(d, 1.2, 9), ScheduleKind::Cosine);
    let sched = fp.schedule();
    let sig = 1.2 * 1.2;
    for k in 1..32 {
        let t = 0.97 * k as f64 / 32.0;
        let f = fp.drift_matrix(t).unwrap().to_dense();
        let ggt = fp.diffusion_sq(t).unwrap().to_dense();
        let sigma_t = DMatrix::<f64>::identity(d, d) * (sig * sched.gamma_sq(t).unwrap());
        let lhs = DMatrix::<f64>::identity(d, d) * (sig * sched.gamma_sq_dot(t).unwrap());
        let rhs = &f * &sigma_t + &sigma_t * f.transpose() + &ggt;
        let resid = (lhs - rhs).norm();
        assert!(resid < 1e-8, "t = {t}: Lyapunov residual {resid:.2e}");
    }
}

/// Kernel composition: M_{s->u} = M_{t->u} M_{s->t} and the covariance
/// Chapman–Kolmogorov identity, on random operators and time triples.
#[test]
fn transition_kernels_compose() {
    let mut times_rng = stream(77, StreamLabel::Truth, 1, 0);
    for trial in 0..200 {
        let d = 1 + (trial % 4);
        let op = if trial % 3 == 0 {
            MeasurementOperator::identity(d, 1.0).unwrap()
        } else {
            random_operator(d, 0.5 + 0.01 * trial as f64, 100 + trial as u64)
        };
        let fp = fp_with(op, ScheduleKind::Cosine);
        // draw 0 < s < t < u <= 0.99 (forward order; composition must hold
        // regardless of which direction each kernel is used in)
        let mut draws: Vec<f64> = (0..3)
            .map(|_| 0.01 + 0.98 * (times_rng.standard_normal().abs() % 1.0))
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (s, t, u) = (draws[0], draws[1], draws[2]);
        if t - s < 1e-3 || u - t < 1e-3 {
            continue;
        }
        let k_st = fp.transition(s, t).unwrap();
        let k_tu = fp.transition(t, u).unwrap();
        let k_su = fp.transition(s, u).unwrap();

        let m_comp = k_tu.mean_map().to_dense() * k_st.mean_map().to_dense();
        let m_direct = k_su.mean_map().to_dense();
        assert!(
            (&m_comp - &m_direct).norm() < 1e-10,
            "trial {trial}: mean map composition err {:.2e}",
            (&m_comp - &m_direct).norm()
        );

        // cov: C_{s->u} = M_{t->u} C_{s->t} M_{t->u}^T + C_{t->u}
        let m_tu = k_tu.mean_map().to_dense();
        let c_comp =
            &m_tu * k_st.noise_cov().to_dense() * m_tu.transpose() + k_tu.noise_cov().to_dense();
        let c_direct = k_su.noise_cov().to_dense();
        assert!(
            (&c_comp - &c_direct).norm() < 1e-8,
            "trial {trial}: cov composition err {:.2e}",
            (&c_comp - &c_direct).norm()
        );
    }
}

/// At the terminal time the forward marginal of the likelihood kernel must
/// agree with the measurement model up to the analytic widening:
/// M_{t->1} A(t) = A and S(t) + M Sigma(t) M^T = sigma^2 I.
#[test]
fn likelihood_kernel_consistency_at_the_measurement() {
    let d = 3;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let fp = fp_with(random_operator(d, 0.7, 55), kind);
        let a = fp.operator().op().to_dense();
        for k in 1..16 {
            let t = 0.99 * k as f64 / 16.0;
            let kernel = fp.transition_to_measurement(t).unwrap();
            let m = kernel.mean_map().to_dense();
            let a_t = fp.interp_operator(t).unwrap().to_dense();
            assert!(
                (&m * &a_t - &a).norm() < 1e-10,
                "t = {t}: M A(t) != A"
            );
            let g2 = fp.schedule().gamma_sq(t).unwrap();
            let sig = 0.7 * 0.7;
            let total = kernel.noise_cov().to_dense() + &m * m.transpose() * (sig * g2);
            let want = DMatrix::<f64>::identity(d, d) * sig;
            assert!(
                (&total - &want).norm() < 1e-8,
                "t = {t}: terminal covariance mismatch {:.2e}",
                (&total - &want).norm()
            );
        }
    }
}

/// Grid-mask operators keep the interpolate's spectrum within [a(t), 1], so
/// every kernel stays well conditioned all the way to t = 0.999.
#[test]
fn grid_mask_interpolates_stay_invertible() {
    let mask = [true, false, true, false, false, true];
    let op = MeasurementOperator::grid_mask(&mask, 1.0).unwrap();
    let fp = fp_with(op, ScheduleKind::Cosine);
    for k in 0..=64 {
        let t = 0.999 * k as f64 / 64.0;
        let a_t = fp.interp_operator(t).unwrap();
        let a = fp.schedule().alpha(t).unwrap();
        match a_t {
            OpMatrix::Diag(dv) => {
                for v in dv.iter() {
                    assert!(*v >= a - 1e-15 && *v <= 1.0 + 1e-15);
                }
            }
            OpMatrix::Dense(_) => panic!("grid mask should interpolate diagonally"),
        }
    }
}

/// Forward perturbation through the kernel equals perturbation through the
/// marginal closed form when starting at t = 0.
#[test]
fn kernel_propagation_matches_marginal_at_zero() {
    let d = 2;
    let fp = fp_with(random_operator(d, 1.0, 13), ScheduleKind::Cosine);
    let x0 = DVector::from_vec(vec![0.4, -1.1]);
    let mut rng = stream(14, StreamLabel::Sampling, 0, 0);
    for &t in &[0.3, 0.6, 0.9] {
        let kernel = fp.transition(0.0, t).unwrap();
        let noise = rng.standard_normal_vec(d);
        let via_kernel = kernel.propagate(&x0, &noise).unwrap();
        let via_marginal = fp.forward_perturb(&x0, t, &noise).unwrap();
        assert!(
            (via_kernel - via_marginal).norm() < 1e-10,
            "t = {t}: kernel/marginal mismatch"
        );
    }
}
