//! Measurement operators and the measurement-aware forward process.
//!
//! The forward process interpolates between the state (t = 0) and the
//! measurement side (t = 1):
//!
//! ```text
//! X_t = A(t) X_0 + Sigma(t)^{1/2} eps,   A(t) = (1 - a(t)) A + a(t) I,
//!                                        Sigma(t) = sigma^2 gamma^2(t) I,
//! ```
//!
//! with `a` from [`Schedule`](crate::schedule::Schedule) and `A` the
//! measurement operator, so `X_1 = A X_0 + sigma eps` is exactly a noisy
//! measurement. Because the marginals are Gaussian with commuting maps, the
//! transition kernels between any two times, the drift/diffusion of the
//! matched SDE, and the likelihood score given a measurement are all closed
//! form. Nothing here is learned; the only learned object in the crate is
//! the prior score network.
//!
//! Operators must have real spectrum in [0, 1]: nonnegativity keeps `A(t)`
//! invertible for t < 1, and eigenvalues above 1 make the matched diffusion
//! and the reverse-time noise covariances indefinite (such pairings surface
//! as not-PSD errors from the affected operations rather than being silently
//! accepted).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{OpMatrix, JITTER, NEG_EIG_TOL};
use crate::schedule::Schedule;

fn default_operator_kind() -> String {
    "identity".to_string()
}

fn default_sigma() -> f64 {
    1.0
}

/// On-disk description of a measurement operator. The state dimension is
/// supplied by the dynamics at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    /// "identity", "grid-mask" or "dense".
    #[serde(default = "default_operator_kind")]
    pub kind: String,
    /// Measurement noise standard deviation.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Observed-axis mask for "grid-mask".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    /// Row-major matrix for "dense".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        OperatorSpec {
            kind: default_operator_kind(),
            sigma: default_sigma(),
            mask: None,
            matrix: None,
        }
    }
}

impl OperatorSpec {
    pub fn build(&self, dim: usize) -> Result<MeasurementOperator> {
        match self.kind.as_str() {
            "identity" => {
                if self.mask.is_some() || self.matrix.is_some() {
                    return Err(Error::invalid_config(
                        "identity operator takes neither mask nor matrix",
                    ));
                }
                MeasurementOperator::identity(dim, self.sigma)
            }
            "grid-mask" => {
                let mask = self.mask.as_ref().ok_or_else(|| {
                    Error::invalid_config("grid-mask operator requires a mask")
                })?;
                if self.matrix.is_some() {
                    return Err(Error::invalid_config(
                        "grid-mask operator takes no matrix",
                    ));
                }
                check_dim(dim, mask.len())?;
                MeasurementOperator::grid_mask(mask, self.sigma)
            }
            "dense" => {
                let rows = self.matrix.as_ref().ok_or_else(|| {
                    Error::invalid_config("dense operator requires a matrix")
                })?;
                check_dim(dim, rows.len())?;
                let mut m = DMatrix::zeros(dim, dim);
                for (i, row) in rows.iter().enumerate() {
                    check_dim(dim, row.len())?;
                    for (j, v) in row.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                MeasurementOperator::dense(m, self.sigma)
            }
            other => Err(Error::invalid_config(format!(
                "unknown operator kind '{other}' (expected identity, grid-mask or dense)"
            ))),
        }
    }
}

/// A linear measurement `z = A x + sigma eps` with `A` square and with real
/// nonnegative spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    op: OpMatrix,
    sigma: f64,
}

impl MeasurementOperator {
    fn validate_sigma(sigma: f64) -> Result<()> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid_config(format!(
                "measurement noise sigma must be positive and finite, got {sigma}"
            )))
        }
    }

    pub fn identity(dim: usize, sigma: f64) -> Result<Self> {
        Self::validate_sigma(sigma)?;
        if dim == 0 {
            return Err(Error::invalid_config("operator dimension must be >= 1"));
        }
        Ok(MeasurementOperator {
            op: OpMatrix::identity(dim),
            sigma,
        })
    }

    /// Diagonal 0/1 operator observing the axes where `mask` is true.
    pub fn grid_mask(mask: &[bool], sigma: f64) -> Result<Self> {
        Self::validate_sigma(sigma)?;
        if mask.is_empty() {
            return Err(Error::invalid_config("grid mask must be non-empty"));
        }
        let diag = DVector::from_iterator(
            mask.len(),
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }),
        );
        Ok(MeasurementOperator {
            op: OpMatrix::from_diag(diag),
            sigma,
        })
    }

    /// General square operator. Rejects non-finite entries and spectra with
    /// negative or non-real eigenvalues.
    pub fn dense(m: DMatrix<f64>, sigma: f64) -> Result<Self> {
        Self::validate_sigma(sigma)?;
        check_dim(m.nrows(), m.ncols())?;
        if m.nrows() == 0 {
            return Err(Error::invalid_config("operator dimension must be >= 1"));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid_config("operator has non-finite entries"));
        }
        for ev in m.complex_eigenvalues().iter() {
            if ev.im.abs() > 1e-9 {
                return Err(Error::invalid_config(format!(
                    "operator spectrum must be real, found eigenvalue {:.3e}+{:.3e}i",
                    ev.re, ev.im
                )));
            }
            if ev.re < -NEG_EIG_TOL {
                return Err(Error::invalid_config(format!(
                    "operator spectrum must be nonnegative, found eigenvalue {:.3e}",
                    ev.re
                )));
            }
        }
        Ok(MeasurementOperator {
            op: OpMatrix::Dense(m),
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn op(&self) -> &OpMatrix {
        &self.op
    }

    /// Noise-free measurement map `A x`.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.op.matvec(x)
    }

    /// Noisy measurement `A x + sigma * noise` for standard-normal `noise`.
    pub fn measure(&self, x: &DVector<f64>, noise: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), noise.len())?;
        Ok(self.apply(x)? + noise * self.sigma)
    }
}

/// Gaussian transition kernel `X_t | X_s = x ~ N(M x, S)` between two times
/// of the forward process, also used in reverse (`t < s`) where `S` is the
/// matched reverse-time noise covariance.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    s: f64,
    t: f64,
    mean_map: OpMatrix,
    noise_cov: OpMatrix,
    noise_cov_sqrt: OpMatrix,
}

impl TransitionKernel {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn mean_map(&self) -> &OpMatrix {
        &self.mean_map
    }

    pub fn noise_cov(&self) -> &OpMatrix {
        &self.noise_cov
    }

    pub fn noise_cov_sqrt(&self) -> &OpMatrix {
        &self.noise_cov_sqrt
    }

    /// One kernel draw: `M x + S^{1/2} noise`.
    pub fn propagate(&self, x: &DVector<f64>, noise: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.mean_map.matvec(x)? + self.noise_cov_sqrt.matvec(noise)?)
    }

    /// `M^T S^{-1} (z - M x)`: the measurement-likelihood score when `self`
    /// is a kernel onto the measurement endpoint.
    pub fn likelihood_score(&self, z: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let residual = z - self.mean_map.matvec(x)?;
        let weighted = self.noise_cov.solve_vec(&residual, "likelihood covariance")?;
        self.mean_map.tr_matvec(&weighted)
    }

    /// Row-major JSON debug form.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "s": self.s,
            "t": self.t,
            "mean_map": self.mean_map.to_json(),
            "noise_cov": self.noise_cov.to_json(),
        })
    }
}

/// The forward perturbation process for one operator/schedule pairing,
/// with its transition kernels and closed-form scores.
#[derive(Debug, Clone)]
pub struct ForwardProcess {
    operator: MeasurementOperator,
    schedule: Schedule,
}

impl ForwardProcess {
    pub fn new(operator: MeasurementOperator, schedule: Schedule) -> Self {
        ForwardProcess { operator, schedule }
    }

    pub fn operator(&self) -> &MeasurementOperator {
        &self.operator
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    /// Interpolated operator `A(t) = (1 - a(t)) A + a(t) I`.
    pub fn interp_operator(&self, t: f64) -> Result<OpMatrix> {
        let a = self.schedule.alpha(t)?;
        let eye = OpMatrix::identity(self.dim());
        self.operator.op().scale(1.0 - a).add(&eye.scale(a))
    }

    /// Marginal noise standard deviation `sigma * gamma(t)` (the marginal
    /// covariance is isotropic by construction).
    pub fn marginal_std(&self, t: f64) -> Result<f64> {
        Ok(self.operator.sigma() * self.schedule.gamma(t)?)
    }

    /// Draws from the marginal: `A(t) x0 + sigma gamma(t) noise`.
    pub fn forward_perturb(
        &self,
        x0: &DVector<f64>,
        t: f64,
        noise: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim(self.dim(), x0.len())?;
        check_dim(self.dim(), noise.len())?;
        let mean = self.interp_operator(t)?.matvec(x0)?;
        Ok(mean + noise * self.marginal_std(t)?)
    }

    /// Drift matrix `F(t) = A'(t) A(t)^{-1}` of the moment-matched SDE,
    /// where `A'(t) = a'(t) (I - A)`.
    pub fn drift_matrix(&self, t: f64) -> Result<OpMatrix> {
        let a_dot = self.schedule.alpha_dot(t)?;
        let at = self.interp_operator(t)?;
        // A'(t) = a'(t) (I - A)
        let eye = OpMatrix::identity(self.dim());
        let a_prime = eye.sub(self.operator.op())?.scale(a_dot);
        match (&at, &a_prime) {
            (OpMatrix::Diag(d), OpMatrix::Diag(n)) => {
                if d.iter().any(|x| x.abs() < 1e-300)
                    || at.condition() > crate::linalg::COND_LIMIT
                {
                    return Err(Error::Singular(format!(
                        "A(t) not invertible at t = {t}"
                    )));
                }
                Ok(OpMatrix::Diag(n.component_div(d)))
            }
            _ => {
                if at.condition() > crate::linalg::COND_LIMIT {
                    return Err(Error::Singular(format!("A(t) not invertible at t = {t}")));
                }
                // A(t) and A'(t) are polynomials in A, so they commute and
                // F = A(t)^{-1} A'(t) = A'(t) A(t)^{-1}.
                let lu = at.to_dense().lu();
                let f = lu.solve(&a_prime.to_dense()).ok_or_else(|| {
                    Error::Singular(format!("A(t) not invertible at t = {t}"))
                })?;
                Ok(OpMatrix::Dense(f))
            }
        }
    }

    /// Diffusion `G(t) G(t)^T = Sigma'(t) - F(t) Sigma(t) - Sigma(t) F(t)^T`
    /// of the moment-matched SDE, symmetrized with roundoff-negative
    /// eigenvalues clamped to zero.
    pub fn diffusion_sq(&self, t: f64) -> Result<OpMatrix> {
        let sig2 = self.operator.sigma().powi(2);
        let g2 = self.schedule.gamma_sq(t)?;
        let g2_dot = self.schedule.gamma_sq_dot(t)?;
        let f = self.drift_matrix(t)?;
        // Sigma(t) is isotropic, so F Sigma + Sigma F^T = sigma^2 g2 (F + F^T)
        let sym = f.add(&f.transpose())?.scale(sig2 * g2);
        let eye = OpMatrix::identity(self.dim());
        eye.scale(sig2 * g2_dot).sub(&sym)?.psd_clamp("diffusion_sq")
    }

    /// Transition kernel between `s` and `t`. Forward (`t > s`) kernels are
    /// the conditionals of the forward process; reverse (`t < s`) kernels
    /// carry the matched reverse-time noise covariance
    /// `D = M Sigma(s) M^T - Sigma(t)` used by the posterior sampler.
    ///
    /// Construction is pure; the sampler memoizes one kernel per grid step
    /// in an immutable table shared across member threads.
    pub fn transition(&self, s: f64, t: f64) -> Result<TransitionKernel> {
        if s == t {
            return Err(Error::domain(format!("transition requires s != t, got {s}")));
        }
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!(
                "transition times must lie in [0, 1], got s = {s}, t = {t}"
            )));
        }
        if s == 1.0 {
            // A(1) = A may be singular; kernels never condition on t = 1.
            return Err(Error::domain(
                "transition from s = 1 is not defined (A(1) may be singular)",
            ));
        }
        let a_s = self.interp_operator(s)?;
        let a_t = self.interp_operator(t)?;
        let mean_map = match (&a_s, &a_t) {
            (OpMatrix::Diag(ds), OpMatrix::Diag(dt)) => {
                if a_s.condition() > crate::linalg::COND_LIMIT {
                    return Err(Error::Singular(format!("A(s) not invertible at s = {s}")));
                }
                OpMatrix::Diag(dt.component_div(ds))
            }
            _ => {
                if a_s.condition() > crate::linalg::COND_LIMIT {
                    return Err(Error::Singular(format!("A(s) not invertible at s = {s}")));
                }
                // M = A(t) A(s)^{-1}; the interpolates commute, so the
                // left solve A(s)^{-1} A(t) gives the same matrix.
                let lu = a_s.to_dense().lu();
                let m = lu
                    .solve(&a_t.to_dense())
                    .ok_or_else(|| Error::Singular(format!("A(s) not invertible at s = {s}")))?;
                OpMatrix::Dense(m)
            }
        };
        let sig2 = self.operator.sigma().powi(2);
        let eye = OpMatrix::identity(self.dim());
        // Sigma(t) - M Sigma(s) M^T, with Sigma isotropic
        let carried = mean_map
            .sandwich(&eye)?
            .scale(sig2 * self.schedule.gamma_sq(s)?);
        let target = eye.scale(sig2 * self.schedule.gamma_sq(t)?);
        let raw = if t > s {
            target.sub(&carried)?
        } else {
            carried.sub(&target)?
        };
        let noise_cov = raw.psd_clamp("transition noise covariance")?;
        let noise_cov_sqrt = noise_cov.sqrt_psd("transition noise covariance")?;
        Ok(TransitionKernel {
            s,
            t,
            mean_map,
            noise_cov,
            noise_cov_sqrt,
        })
    }

    /// Score of the measurement likelihood at diffusion time `t`:
    ///
    /// ```text
    /// grad_x log p(z | x_t) = M^T S^{-1} (z - M x_t),
    /// M = A A(t)^{-1},  S = sigma^2 I - M Sigma(t) M^T  (jittered when
    /// its smallest eigenvalue falls below 1e-12).
    /// ```
    pub fn likelihood_score(
        &self,
        z: &DVector<f64>,
        x_t: &DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.dim(), x_t.len())?;
        let t_terminal = self.schedule.t_terminal();
        if !(0.0..=t_terminal).contains(&t) {
            return Err(Error::domain(format!(
                "likelihood score defined on [0, {t_terminal}], got t = {t}"
            )));
        }
        self.transition_to_measurement(t)?.likelihood_score(z, x_t)
    }

    /// Kernel from `t` to the measurement endpoint, with the jitter policy
    /// applied to the covariance. Errors when the covariance is genuinely
    /// indefinite (operator spectrum above 1).
    pub fn transition_to_measurement(&self, t: f64) -> Result<TransitionKernel> {
        let a_t = self.interp_operator(t)?;
        let mean_map = match (self.operator.op(), &a_t) {
            (OpMatrix::Diag(m), OpMatrix::Diag(dt)) => {
                if a_t.condition() > crate::linalg::COND_LIMIT {
                    return Err(Error::Singular(format!("A(t) not invertible at t = {t}")));
                }
                OpMatrix::Diag(m.component_div(dt))
            }
            (op, _) => {
                if a_t.condition() > crate::linalg::COND_LIMIT {
                    return Err(Error::Singular(format!("A(t) not invertible at t = {t}")));
                }
                let lu = a_t.to_dense().lu();
                let m = lu
                    .solve(&op.to_dense())
                    .ok_or_else(|| Error::Singular(format!("A(t) not invertible at t = {t}")))?;
                OpMatrix::Dense(m)
            }
        };
        let sig2 = self.operator.sigma().powi(2);
        let eye = OpMatrix::identity(self.dim());
        let carried = mean_map
            .sandwich(&eye)?
            .scale(sig2 * self.schedule.gamma_sq(t)?);
        let mut cov = eye.scale(sig2).sub(&carried)?.psd_clamp("likelihood covariance")?;
        if cov.min_sym_eigenvalue() < JITTER {
            cov = cov.add(&OpMatrix::identity(self.dim()).scale(JITTER))?;
        }
        let noise_cov_sqrt = cov.sqrt_psd("likelihood covariance")?;
        Ok(TransitionKernel {
            s: t,
            t: 1.0,
            mean_map,
            noise_cov: cov,
            noise_cov_sqrt,
        })
    }

    /// Score of the forward conditional `X_t | X_0 = x0`:
    /// `-(x_t - A(t) x0) / (sigma^2 gamma^2(t))`. Defined for t in (0, 1].
    pub fn conditional_score(
        &self,
        x_t: &DVector<f64>,
        x0: &DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>> {
        check_dim(self.dim(), x_t.len())?;
        check_dim(self.dim(), x0.len())?;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::domain(format!(
                "conditional score defined on (0, 1], got t = {t}"
            )));
        }
        let var = self.operator.sigma().powi(2) * self.schedule.gamma_sq(t)?;
        let mean = self.interp_operator(t)?.matvec(x0)?;
        Ok((x_t - mean) / -var)
    }
}
