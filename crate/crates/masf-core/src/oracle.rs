//! Closed-form Gaussian reference quantities used to validate the sampler,
//! filters and score training. Nothing in this module is called from the
//! implementation paths — it exists so the tests have an independent
//! source of truth computed with plain dense linear algebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::measurement::{ForwardProcess, MeasurementOperator};
use crate::net::PriorScore;
use crate::rng::NoiseSource;

/// A Gaussian prior N(mean, cov) over the state.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn standard(dim: usize) -> Self {
        GaussianPrior {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(cov.nrows(), cov.ncols())?;
        Ok(GaussianPrior { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Cholesky-based draw.
    pub fn sample(&self, rng: &mut impl NoiseSource) -> Result<DVector<f64>> {
        let chol = self.cov.clone().cholesky().ok_or_else(|| {
            Error::NotPsd("prior covariance has no Cholesky factor".into())
        })?;
        Ok(&self.mean + chol.l() * rng.standard_normal_vec(self.dim()))
    }

    /// Marginal law of the forward process at time t when X_0 follows this
    /// prior: N(A(t) mean, A(t) cov A(t)^T + sigma^2 gamma^2(t) I).
    pub fn marginal_at(&self, fp: &ForwardProcess, t: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim(fp.dim(), self.dim())?;
        let at = fp.interp_operator(t)?.to_dense();
        let mean = &at * &self.mean;
        let var = fp.marginal_std(t)?.powi(2);
        let cov = &at * &self.cov * at.transpose() + DMatrix::identity(self.dim(), self.dim()) * var;
        Ok((mean, cov))
    }

    /// Exact Bayes posterior for the measurement z = A x + sigma eps:
    /// mean + K (z - A mean), (I - K A) cov, with the Kalman gain
    /// K = cov A^T (A cov A^T + sigma^2 I)^{-1}.
    pub fn kalman_posterior(
        &self,
        op: &MeasurementOperator,
        z: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim(self.dim(), op.dim())?;
        check_dim(self.dim(), z.len())?;
        let a = op.op().to_dense();
        let d = self.dim();
        let innovation =
            &a * &self.cov * a.transpose() + DMatrix::identity(d, d) * op.sigma().powi(2);
        let chol = innovation
            .cholesky()
            .ok_or_else(|| Error::NotPsd("innovation covariance not PD".into()))?;
        // K^T = innovation^{-1} A cov
        let k = (chol.solve(&(&a * &self.cov))).transpose();
        let mean = &self.mean + &k * (z - &a * &self.mean);
        let cov = (DMatrix::identity(d, d) - &k * &a) * &self.cov;
        Ok((mean, cov))
    }
}

/// Analytic marginal prior score for a Gaussian prior pushed through the
/// forward process: grad_x log N(x; A(t) mu, A(t) P A(t)^T + Sigma(t)).
/// Substituted for the trained net in the sampler's oracle tests.
#[derive(Debug, Clone)]
pub struct GaussianMarginalScore {
    prior: GaussianPrior,
    fp: ForwardProcess,
}

impl GaussianMarginalScore {
    pub fn new(prior: GaussianPrior, fp: ForwardProcess) -> Result<Self> {
        check_dim(fp.dim(), prior.dim())?;
        Ok(GaussianMarginalScore { prior, fp })
    }
}

impl PriorScore for GaussianMarginalScore {
    fn prior_score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let (mean, cov) = self.prior.marginal_at(&self.fp, t)?;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::NotPsd(format!("marginal covariance not PD at t = {t}")))?;
        Ok(-chol.solve(&(x - mean)))
    }
}

/// Random symmetric PSD matrix with eigenvalues drawn uniformly from
/// `[lo, hi]`, built as Q diag(lambda) Q^T with a Haar-ish Q from QR of a
/// Gaussian matrix. Operators for the forward process should use
/// eigenvalues in [0, 1] (above 1 the matched diffusion goes indefinite).
pub fn random_psd_matrix(
    dim: usize,
    lo: f64,
    hi: f64,
    rng: &mut (impl Rng + NoiseSource),
) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.standard_normal());
    let q = g.qr().q();
    let lambda = DVector::from_fn(dim, |_, _| rng.random_range(lo..=hi));
    &q * DMatrix::from_diagonal(&lambda) * q.transpose()
}

/// Empirical mean and covariance of a sample cloud.
pub fn sample_moments(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamLabel};
    use crate::schedule::Schedule;
    use approx::assert_relative_eq;

    #[test]
    fn kalman_identity_operator_halves_standard_prior() {
        // N(0, I) prior, z through identity with sigma = 1:
        // posterior N(z/2, I/2)
        let prior = GaussianPrior::standard(2);
        let op = MeasurementOperator::identity(2, 1.0).unwrap();
        let z = DVector::from_vec(vec![2.0, -4.0]);
        let (mean, cov) = prior.kalman_posterior(&op, &z).unwrap();
        assert_relative_eq!(mean, z / 2.0, epsilon = 1e-12);
        assert_relative_eq!(cov, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kalman_masked_axis_keeps_prior() {
        let prior = GaussianPrior::standard(2);
        let op = MeasurementOperator::grid_mask(&[true, false], 0.5).unwrap();
        let z = DVector::from_vec(vec![1.0, 99.0]);
        let (mean, cov) = prior.kalman_posterior(&op, &z).unwrap();
        // masked axis untouched
        assert_relative_eq!(mean[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(1, 1)], 1.0, epsilon = 1e-12);
        // observed axis shrinks: K = 1/(1+0.25)
        assert_relative_eq!(mean[0], 1.0 / 1.25, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 0)], 1.0 - 1.0 / 1.25, epsilon = 1e-12);
    }

    #[test]
    fn marginal_score_matches_density_gradient() {
        let mut rng = stream(21, StreamLabel::Truth, 0, 0);
        let p_raw = random_psd_matrix(3, 0.5, 2.0, &mut rng);
        let prior = GaussianPrior::new(rng.standard_normal_vec(3), p_raw).unwrap();
        let op_m = random_psd_matrix(3, 0.1, 1.0, &mut rng);
        let op = MeasurementOperator::dense(op_m, 0.7).unwrap();
        let fp = ForwardProcess::new(op, Schedule::cosine());
        let oracle = GaussianMarginalScore::new(prior.clone(), fp.clone()).unwrap();

        let t = 0.55;
        let x = rng.standard_normal_vec(3);
        let score = oracle.prior_score(&x, t).unwrap();

        let (mean, cov) = prior.marginal_at(&fp, t).unwrap();
        let chol = cov.cholesky().unwrap();
        let logp = |x: &DVector<f64>| {
            let r = x - &mean;
            -0.5 * r.dot(&chol.solve(&r))
        };
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
            assert_relative_eq!(score[i], fd, max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn random_psd_has_bounded_spectrum() {
        let mut rng = stream(22, StreamLabel::Truth, 0, 0);
        for _ in 0..10 {
            let m = random_psd_matrix(4, 0.0, 1.0, &mut rng);
            assert_relative_eq!(m.clone(), m.transpose(), epsilon = 1e-12);
            let eig = m.symmetric_eigen().eigenvalues;
            for l in eig.iter() {
                assert!((-1e-12..=1.0 + 1e-12).contains(l), "eigenvalue {l}");
            }
        }
    }

    #[test]
    fn sample_moments_recover_prior() {
        let mut rng = stream(23, StreamLabel::Truth, 0, 0);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let prior = GaussianPrior::new(DVector::from_vec(vec![1.0, -2.0]), cov.clone()).unwrap();
        let samples: Vec<_> = (0..20_000).map(|_| prior.sample(&mut rng).unwrap()).collect();
        let (mean, est) = sample_moments(&samples);
        assert_relative_eq!(mean, prior.mean, epsilon = 0.05);
        assert_relative_eq!(est, cov, epsilon = 0.1);
    }
}
