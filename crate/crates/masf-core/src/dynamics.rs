//! Ground-truth state equations and Euler–Maruyama propagation.
//!
//! Two chaotic benchmark systems: Lorenz-63 (d = 3) and Lorenz-96
//! (configurable d >= 4, cyclic). Both are deterministic ODEs; an optional
//! `process_noise` adds a small isotropic diffusion, in which case the
//! explicit Euler step becomes Euler–Maruyama.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::NoiseSource;

fn default_dt() -> f64 {
    0.01
}

/// Flat on-disk form (strict, cross-field checks in `try_from`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsRaw {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forcing: Option<f64>,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default)]
    process_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DynamicsRaw", into = "DynamicsRaw")]
pub enum DynamicsModel {
    Lorenz63 {
        sigma: f64,
        rho: f64,
        beta: f64,
        dt: f64,
        process_noise: f64,
    },
    Lorenz96 {
        dim: usize,
        forcing: f64,
        dt: f64,
        process_noise: f64,
    },
}

impl TryFrom<DynamicsRaw> for DynamicsModel {
    type Error = Error;

    fn try_from(raw: DynamicsRaw) -> Result<Self> {
        let model = match raw.kind.as_str() {
            "lorenz63" => {
                if raw.dim.is_some() || raw.forcing.is_some() {
                    return Err(Error::invalid_config(
                        "lorenz63 takes neither dim nor forcing",
                    ));
                }
                DynamicsModel::Lorenz63 {
                    sigma: raw.sigma.unwrap_or(10.0),
                    rho: raw.rho.unwrap_or(28.0),
                    beta: raw.beta.unwrap_or(8.0 / 3.0),
                    dt: raw.dt,
                    process_noise: raw.process_noise,
                }
            }
            "lorenz96" => {
                if raw.sigma.is_some() || raw.rho.is_some() || raw.beta.is_some() {
                    return Err(Error::invalid_config(
                        "lorenz96 takes dim/forcing, not sigma/rho/beta",
                    ));
                }
                let dim = raw.dim.ok_or_else(|| {
                    Error::invalid_config("lorenz96 requires an explicit dim")
                })?;
                DynamicsModel::Lorenz96 {
                    dim,
                    forcing: raw.forcing.unwrap_or(8.0),
                    dt: raw.dt,
                    process_noise: raw.process_noise,
                }
            }
            other => {
                return Err(Error::invalid_config(format!(
                    "unknown dynamics kind '{other}' (expected lorenz63 or lorenz96)"
                )))
            }
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<DynamicsModel> for DynamicsRaw {
    fn from(m: DynamicsModel) -> Self {
        match m {
            DynamicsModel::Lorenz63 {
                sigma,
                rho,
                beta,
                dt,
                process_noise,
            } => DynamicsRaw {
                kind: "lorenz63".to_string(),
                sigma: Some(sigma),
                rho: Some(rho),
                beta: Some(beta),
                dim: None,
                forcing: None,
                dt,
                process_noise,
            },
            DynamicsModel::Lorenz96 {
                dim,
                forcing,
                dt,
                process_noise,
            } => DynamicsRaw {
                kind: "lorenz96".to_string(),
                sigma: None,
                rho: None,
                beta: None,
                dim: Some(dim),
                forcing: Some(forcing),
                dt,
                process_noise,
            },
        }
    }
}

impl DynamicsModel {
    /// Lorenz-63 with the standard chaotic parameters.
    pub fn lorenz63(dt: f64) -> Result<Self> {
        let m = DynamicsModel::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt,
            process_noise: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn lorenz96(dim: usize, forcing: f64, dt: f64) -> Result<Self> {
        let m = DynamicsModel::Lorenz96 {
            dim,
            forcing,
            dt,
            process_noise: 0.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (dt, q) = (self.dt(), self.process_noise());
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid_config(format!("dt must be positive, got {dt}")));
        }
        if !(q.is_finite() && q >= 0.0) {
            return Err(Error::invalid_config(format!(
                "process_noise must be >= 0, got {q}"
            )));
        }
        if let DynamicsModel::Lorenz96 { dim, .. } = self {
            // the (i-2, i-1, i, i+1) stencil needs at least 4 sites
            if *dim < 4 {
                return Err(Error::invalid_config(format!(
                    "lorenz96 requires dim >= 4, got {dim}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            DynamicsModel::Lorenz63 { .. } => 3,
            DynamicsModel::Lorenz96 { dim, .. } => *dim,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            DynamicsModel::Lorenz63 { dt, .. } | DynamicsModel::Lorenz96 { dt, .. } => *dt,
        }
    }

    pub fn process_noise(&self) -> f64 {
        match self {
            DynamicsModel::Lorenz63 { process_noise, .. }
            | DynamicsModel::Lorenz96 { process_noise, .. } => *process_noise,
        }
    }

    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            DynamicsModel::Lorenz63 {
                sigma, rho, beta, ..
            } => DVector::from_vec(vec![
                sigma * (x[1] - x[0]),
                x[0] * (rho - x[2]) - x[1],
                x[0] * x[1] - beta * x[2],
            ]),
            DynamicsModel::Lorenz96 { dim, forcing, .. } => {
                let d = *dim;
                DVector::from_fn(d, |i, _| {
                    let ip1 = (i + 1) % d;
                    let im1 = (i + d - 1) % d;
                    let im2 = (i + d - 2) % d;
                    (x[ip1] - x[im2]) * x[im1] - x[i] + forcing
                })
            }
        })
    }

    /// One Euler–Maruyama step: `x + f(x) dt + q sqrt(dt) eps`. No noise is
    /// drawn when `process_noise` is zero, so the step is then a plain
    /// deterministic Euler step.
    pub fn step(&self, x: &DVector<f64>, rng: &mut impl NoiseSource) -> Result<DVector<f64>> {
        let dt = self.dt();
        let mut next = x + self.drift(x)? * dt;
        let q = self.process_noise();
        if q > 0.0 {
            next += rng.standard_normal_vec(self.dim()) * (q * dt.sqrt());
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("integrator step left f64 range".into()));
        }
        Ok(next)
    }

    /// Simulates `n_steps` steps from `x0`, returning the full trajectory
    /// (`n_steps + 1` rows, row 0 = `x0`).
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        n_steps: usize,
        rng: &mut impl NoiseSource,
    ) -> Result<Vec<DVector<f64>>> {
        check_dim(self.dim(), x0.len())?;
        let mut out = Vec::with_capacity(n_steps + 1);
        out.push(x0.clone());
        for r in 0..n_steps {
            let next = self.step(&out[r], rng).map_err(|_| Error::Divergence {
                step: r + 1,
                context: "trajectory left f64 range".into(),
            })?;
            out.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamLabel};
    use approx::assert_relative_eq;

    struct NoNoise;
    impl NoiseSource for NoNoise {
        fn standard_normal(&mut self) -> f64 {
            panic!("deterministic dynamics must not draw noise")
        }
    }

    #[test]
    fn lorenz63_drift_known_values() {
        let m = DynamicsModel::lorenz63(0.01).unwrap();
        let at_origin = m.drift(&DVector::zeros(3)).unwrap();
        assert_eq!(at_origin, DVector::zeros(3));
        let d = m.drift(&DVector::from_element(3, 1.0)).unwrap();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 26.0);
        assert_relative_eq!(d[2], -5.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lorenz63_single_euler_step() {
        let m = DynamicsModel::lorenz63(0.01).unwrap();
        let x = m.step(&DVector::from_element(3, 1.0), &mut NoNoise).unwrap();
        assert_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 1.26, epsilon = 1e-15);
        assert_relative_eq!(x[2], 1.0 - 0.01 * 5.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lorenz96_uniform_state_is_equilibrium() {
        for d in [4, 5, 17, 64] {
            let m = DynamicsModel::lorenz96(d, 8.0, 0.01).unwrap();
            let drift = m.drift(&DVector::from_element(d, 8.0)).unwrap();
            assert_eq!(drift, DVector::zeros(d), "d = {d}");
        }
    }

    #[test]
    fn lorenz96_step_from_origin() {
        let m = DynamicsModel::lorenz96(5, 8.0, 0.01).unwrap();
        let x = m.step(&DVector::zeros(5), &mut NoNoise).unwrap();
        for i in 0..5 {
            assert_relative_eq!(x[i], 0.08, epsilon = 1e-15);
        }
    }

    #[test]
    fn simulate_shape_and_determinism() {
        let m = DynamicsModel::lorenz63(0.01).unwrap();
        let mut r1 = stream(9, StreamLabel::Truth, 0, 0);
        let x0 = r1.standard_normal_vec(3);
        let a = m.simulate(&x0, 50, &mut stream(9, StreamLabel::Dynamics, 0, 0)).unwrap();
        let b = m.simulate(&x0, 50, &mut stream(9, StreamLabel::Dynamics, 0, 0)).unwrap();
        assert_eq!(a.len(), 51);
        assert_eq!(a[0], x0);
        assert_eq!(a, b);
        let single = m.simulate(&x0, 0, &mut NoNoise).unwrap();
        assert_eq!(single, vec![x0]);
    }

    #[test]
    fn lorenz63_stays_bounded() {
        let m = DynamicsModel::lorenz63(0.01).unwrap();
        let mut r = stream(3, StreamLabel::Truth, 0, 0);
        let x0 = r.standard_normal_vec(3);
        let traj = m.simulate(&x0, 5000, &mut NoNoise).unwrap();
        let sup = traj
            .iter()
            .flat_map(|x| x.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(sup < 100.0, "|x|_inf = {sup}");
    }

    #[test]
    fn process_noise_changes_trajectories_reproducibly() {
        let m: DynamicsModel =
            toml::from_str("kind = \"lorenz63\"\nprocess_noise = 0.1\n").unwrap();
        let x0 = DVector::from_element(3, 1.0);
        let a = m.simulate(&x0, 10, &mut stream(1, StreamLabel::Dynamics, 0, 0)).unwrap();
        let b = m.simulate(&x0, 10, &mut stream(1, StreamLabel::Dynamics, 0, 0)).unwrap();
        let c = m.simulate(&x0, 10, &mut stream(2, StreamLabel::Dynamics, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn divergence_reports_step_index() {
        // huge dt blows up Lorenz-63 quickly
        let m = DynamicsModel::lorenz63(10.0).unwrap();
        let x0 = DVector::from_element(3, 10.0);
        match m.simulate(&x0, 100, &mut NoNoise) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(toml::from_str::<DynamicsModel>("kind = \"lorenz96\"\n").is_err()); // dim required
        assert!(toml::from_str::<DynamicsModel>("kind = \"lorenz96\"\ndim = 3\n").is_err());
        assert!(toml::from_str::<DynamicsModel>("kind = \"lorenz63\"\ndt = -0.01\n").is_err());
        assert!(toml::from_str::<DynamicsModel>("kind = \"lorenz63\"\ndim = 5\n").is_err());
        assert!(toml::from_str::<DynamicsModel>("kind = \"hmm\"\n").is_err());
        assert!(toml::from_str::<DynamicsModel>("kind = \"lorenz63\"\nunknown = 1\n").is_err());

        let m: DynamicsModel = toml::from_str("kind = \"lorenz96\"\ndim = 64\n").unwrap();
        assert_eq!(m.dim(), 64);
        assert_eq!(m.dt(), 0.01);
        let text = toml::to_string(&m).unwrap();
        let back: DynamicsModel = toml::from_str(&text).unwrap();
        assert_eq!(m, back);
    }
}
