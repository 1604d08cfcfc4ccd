//! Interpolation schedules for the measurement-aware forward process.
//!
//! A schedule is a strictly decreasing coefficient `a(t)` on [0, 1] with
//! `a(0) = 1`, together with the induced noise profile
//! `gamma^2(t) = 1 - a(t)^2`. At `t = 0` the process sits on the state, at
//! `t = 1` on the (noisier) measurement side. Three kinds are provided:
//!
//! * `cosine` — `a(t) = cos(pi t / 2)` (default),
//! * `linear` — `a(t) = 1 - t`,
//! * `vp-beta` — `a(t) = exp(-1/2 \int_0^t beta(u) du)` with linearly
//!   increasing `beta`; `a(1)` must not exceed 1e-4 so the endpoint still
//!   behaves like a pure measurement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible `a(1)` for the vp-beta kind.
const VP_BETA_ALPHA_ONE_MAX: f64 = 1e-4;

fn default_t_terminal() -> f64 {
    0.992
}

fn default_kind() -> String {
    "cosine".to_string()
}

/// Flat on-disk form (strict: unknown keys are rejected).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRaw {
    #[serde(default = "default_kind")]
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_max: Option<f64>,
    #[serde(default = "default_t_terminal")]
    t_terminal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
    /// `beta(t) = beta_min + t (beta_max - beta_min)`.
    VpBeta { beta_min: f64, beta_max: f64 },
}

impl ScheduleKind {
    /// vp-beta defaults; chosen so that `a(1) ~ 4.4e-5` stays below the
    /// 1e-4 endpoint requirement (the usual (0.1, 20) pair would not).
    pub fn vp_beta_default() -> Self {
        ScheduleKind::VpBeta {
            beta_min: 0.1,
            beta_max: 40.0,
        }
    }
}

/// A validated schedule plus the last time at which the likelihood score
/// may be evaluated (`t_terminal`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRaw", into = "ScheduleRaw")]
pub struct Schedule {
    kind: ScheduleKind,
    t_terminal: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::new(ScheduleKind::Cosine, default_t_terminal()).expect("default is valid")
    }
}

impl TryFrom<ScheduleRaw> for Schedule {
    type Error = Error;

    fn try_from(raw: ScheduleRaw) -> Result<Self> {
        let kind = match raw.kind.as_str() {
            "cosine" | "linear" => {
                if raw.beta_min.is_some() || raw.beta_max.is_some() {
                    return Err(Error::invalid_config(format!(
                        "schedule kind '{}' takes no beta parameters",
                        raw.kind
                    )));
                }
                if raw.kind == "cosine" {
                    ScheduleKind::Cosine
                } else {
                    ScheduleKind::Linear
                }
            }
            "vp-beta" => {
                let ScheduleKind::VpBeta { beta_min, beta_max } = ScheduleKind::vp_beta_default()
                else {
                    unreachable!()
                };
                ScheduleKind::VpBeta {
                    beta_min: raw.beta_min.unwrap_or(beta_min),
                    beta_max: raw.beta_max.unwrap_or(beta_max),
                }
            }
            other => {
                return Err(Error::invalid_config(format!(
                    "unknown schedule kind '{other}' (expected cosine, linear or vp-beta)"
                )))
            }
        };
        Schedule::new(kind, raw.t_terminal)
    }
}

impl From<Schedule> for ScheduleRaw {
    fn from(s: Schedule) -> Self {
        let (kind, beta_min, beta_max) = match s.kind {
            ScheduleKind::Cosine => ("cosine", None, None),
            ScheduleKind::Linear => ("linear", None, None),
            ScheduleKind::VpBeta { beta_min, beta_max } => {
                ("vp-beta", Some(beta_min), Some(beta_max))
            }
        };
        ScheduleRaw {
            kind: kind.to_string(),
            beta_min,
            beta_max,
            t_terminal: s.t_terminal,
        }
    }
}

impl Schedule {
    pub fn new(kind: ScheduleKind, t_terminal: f64) -> Result<Self> {
        if !(t_terminal > 0.0 && t_terminal < 1.0) {
            return Err(Error::invalid_config(format!(
                "t_terminal must lie in (0, 1), got {t_terminal}"
            )));
        }
        if let ScheduleKind::VpBeta { beta_min, beta_max } = kind {
            if !(beta_min > 0.0) || !(beta_max > beta_min) {
                return Err(Error::invalid_config(format!(
                    "vp-beta requires 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
                )));
            }
            // a(1) = exp(-(beta_min + beta_max) / 4)
            let alpha_one = (-(beta_min + beta_max) / 4.0).exp();
            if alpha_one > VP_BETA_ALPHA_ONE_MAX {
                return Err(Error::invalid_config(format!(
                    "vp-beta endpoint a(1) = {alpha_one:.3e} exceeds {VP_BETA_ALPHA_ONE_MAX:.0e}; \
                     increase beta_max"
                )));
            }
        }
        Ok(Schedule { kind, t_terminal })
    }

    pub fn cosine() -> Self {
        Schedule::default()
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn t_terminal(&self) -> f64 {
        self.t_terminal
    }

    fn check_unit(&self, t: f64, closed: bool) -> Result<()> {
        let ok = if closed {
            (0.0..=1.0).contains(&t)
        } else {
            (0.0..1.0).contains(&t)
        };
        if ok {
            Ok(())
        } else {
            let upper = if closed { "1]" } else { "1)" };
            Err(Error::domain(format!("t = {t} outside [0, {upper}")))
        }
    }

    /// Interpolation coefficient `a(t)` on [0, 1].
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_unit(t, true)?;
        Ok(match &self.kind {
            ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::VpBeta { beta_min, beta_max } => {
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                (-0.5 * integral).exp()
            }
        })
    }

    /// `da/dt` on [0, 1).
    pub fn alpha_dot(&self, t: f64) -> Result<f64> {
        self.check_unit(t, false)?;
        Ok(match &self.kind {
            ScheduleKind::Cosine => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
            }
            ScheduleKind::Linear => -1.0,
            ScheduleKind::VpBeta { beta_min, beta_max } => {
                let beta = beta_min + t * (beta_max - beta_min);
                -0.5 * beta * self.alpha(t)?
            }
        })
    }

    /// Relative noise level `gamma^2(t) = 1 - a(t)^2`.
    pub fn gamma_sq(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        Ok(1.0 - a * a)
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        Ok(self.gamma_sq(t)?.sqrt())
    }

    /// `d(gamma^2)/dt = -2 a(t) da/dt`, positive for decreasing schedules.
    pub fn gamma_sq_dot(&self, t: f64) -> Result<f64> {
        Ok(-2.0 * self.alpha(t)? * self.alpha_dot(t)?)
    }

    /// Instantaneous noise growth rate `beta(t) = -2 (da/dt) / a(t)`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        if a == 0.0 {
            return Err(Error::domain(format!("beta(t) undefined where a(t)=0, t={t}")));
        }
        Ok(-2.0 * self.alpha_dot(t)? / a)
    }
}
