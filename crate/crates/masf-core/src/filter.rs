//! Filtering loop: ensemble propagation, measurement updates (score-guided
//! reverse sampling or EnKF), and run bookkeeping.
//!
//! The loop is sequential over time steps. Within a step, member propagation
//! and member sampling run in parallel with per-(step, member) RNG streams,
//! so results do not depend on the thread schedule and a run can be resumed
//! from a persisted `FilterState` without perturbing later draws.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::measurement::{ForwardProcess, MeasurementOperator, OperatorSpec};
use crate::net::{self, NetConfig, ScoreNet, TrainConfig, TrainReport};
use crate::rng::{stream, NoiseSource, StreamLabel};
use crate::sampler::{sample_posterior_ensemble, SamplerConfig, StepTrace};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Prior,
    Posterior,
}

/// A set of state vectors tagged with the time step they sit at.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
    pub step_index: usize,
    pub kind: EnsembleKind,
}

impl Ensemble {
    /// Construction allows a single member (useful for reduction tests);
    /// `run_filter` and the EnKF update demand N >= 2.
    pub fn new(members: Vec<DVector<f64>>, step_index: usize, kind: EnsembleKind) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid_config("ensemble needs at least one member"));
        }
        let d = members[0].len();
        for (i, m) in members.iter().enumerate() {
            if m.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("ensemble member {i} is non-finite")));
            }
        }
        Ok(Ensemble {
            members,
            step_index,
            kind,
        })
    }

    /// Prior ensemble around a center point: x0 + spread * eps, one
    /// EnsembleInit stream per member.
    pub fn init_around(
        center: &DVector<f64>,
        n_members: usize,
        spread: f64,
        master: u64,
    ) -> Result<Self> {
        if n_members == 0 {
            return Err(Error::invalid_config("ensemble needs at least one member"));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::invalid_config(format!(
                "init spread must be finite and >= 0, got {spread}"
            )));
        }
        let d = center.len();
        let members = (0..n_members)
            .map(|i| {
                let mut rng = stream(master, StreamLabel::EnsembleInit, 0, i as u64);
                center + rng.standard_normal_vec(d) * spread
            })
            .collect();
        Ensemble::new(members, 0, EnsembleKind::Prior)
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for m in &self.members {
            acc += m;
        }
        acc / self.members.len() as f64
    }

    /// RMS over dimensions of the per-dimension sample standard deviation
    /// (Bessel-corrected). Zero for a single member.
    pub fn spread(&self) -> f64 {
        let n = self.members.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let d = self.dim();
        let mut var_sum = 0.0;
        for m in &self.members {
            var_sum += (m - &mean).norm_squared();
        }
        (var_sum / ((n - 1) as f64 * d as f64)).sqrt()
    }

    /// Sample covariance with Bessel correction; needs N >= 2.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let n = self.members.len();
        if n < 2 {
            return Err(Error::domain(
                "sample covariance needs at least two members",
            ));
        }
        let mean = self.mean();
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for m in &self.members {
            let a = m - &mean;
            cov.syger(1.0, &a, &a, 1.0);
        }
        // syger fills the lower triangle; mirror it
        for i in 0..d {
            for j in (i + 1)..d {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        Ok(cov / (n - 1) as f64)
    }
}

fn default_n_members() -> usize {
    100
}

fn default_inflation() -> f64 {
    1.0
}

fn default_init_spread() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Masf,
    Enkf,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Masf => write!(f, "masf"),
            Method::Enkf => write!(f, "enkf"),
        }
    }
}

/// Scalar knobs of the filtering loop (the `[filter]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSettings {
    #[serde(default = "default_n_members")]
    pub n_members: usize,
    /// Total number of integrator steps R; the run covers steps 0..=R.
    pub n_steps: usize,
    /// Shortcut: measurements at every multiple of `gap` in [1, R].
    #[serde(default)]
    pub gap: Option<usize>,
    /// Explicit measurement step set; mutually exclusive with `gap`.
    #[serde(default)]
    pub measurement_steps: Option<Vec<usize>>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_inflation")]
    pub enkf_inflation: f64,
    /// Force a full train (all layers, full epochs) at every measurement
    /// step instead of finetuning after the first.
    #[serde(default)]
    pub retrain_each_update: bool,
    #[serde(default = "default_init_spread")]
    pub init_spread: f64,
    /// First step of the RMSE evaluation window (inclusive; window end is R).
    #[serde(default)]
    pub eval_start: usize,
}

impl FilterSettings {
    pub fn minimal(n_steps: usize) -> Self {
        FilterSettings {
            n_members: default_n_members(),
            n_steps,
            gap: None,
            measurement_steps: None,
            method: Method::default(),
            enkf_inflation: default_inflation(),
            retrain_each_update: false,
            init_spread: default_init_spread(),
            eval_start: 0,
        }
    }

    /// Resolved, sorted, deduplicated measurement step set.
    pub fn measurement_step_set(&self) -> Vec<usize> {
        match (&self.gap, &self.measurement_steps) {
            (Some(g), None) => (1..=self.n_steps / g.max(&1)).map(|k| k * g).collect(),
            (None, Some(steps)) => {
                let mut s = steps.clone();
                s.sort_unstable();
                s.dedup();
                s
            }
            _ => Vec::new(),
        }
    }

    /// Returns warnings for legal-but-suspect settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.n_members < 2 {
            return Err(Error::invalid_config(format!(
                "n_members must be >= 2, got {}",
                self.n_members
            )));
        }
        if self.n_steps < 1 {
            return Err(Error::invalid_config("n_steps must be >= 1"));
        }
        if self.gap.is_some() && self.measurement_steps.is_some() {
            return Err(Error::invalid_config(
                "gap and measurement_steps are mutually exclusive",
            ));
        }
        if let Some(g) = self.gap {
            if g < 1 {
                return Err(Error::invalid_config("gap must be >= 1"));
            }
        }
        if let Some(steps) = &self.measurement_steps {
            for &s in steps {
                if s > self.n_steps {
                    return Err(Error::invalid_config(format!(
                        "measurement step {s} exceeds n_steps = {}",
                        self.n_steps
                    )));
                }
            }
            if steps.contains(&0) {
                warnings.push(
                    "measurement at step 0 is never applied (the loop starts at step 1)"
                        .to_string(),
                );
            }
        }
        if !(self.enkf_inflation >= 1.0 && self.enkf_inflation.is_finite()) {
            return Err(Error::invalid_config(format!(
                "enkf_inflation must be >= 1, got {}",
                self.enkf_inflation
            )));
        }
        if !(self.init_spread > 0.0 && self.init_spread.is_finite()) {
            return Err(Error::invalid_config(format!(
                "init_spread must be finite and > 0, got {}",
                self.init_spread
            )));
        }
        if self.eval_start > self.n_steps {
            return Err(Error::invalid_config(format!(
                "eval_start = {} exceeds n_steps = {}",
                self.eval_start, self.n_steps
            )));
        }
        if self.measurement_step_set().is_empty() {
            warnings.push("no measurement steps: the run is a pure ensemble forecast".to_string());
        }
        Ok(warnings)
    }
}

/// Everything a run needs: loop knobs plus the nested component configs.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub settings: FilterSettings,
    pub schedule: Schedule,
    pub operator: OperatorSpec,
    pub dynamics: DynamicsModel,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl FilterConfig {
    /// Validates every part and their couplings; returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = self.settings.validate()?;
        self.dynamics.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        // builds the operator to surface dimension/spectrum errors early
        let op = self.operator.build(self.dynamics.dim())?;
        let _ = op;
        if self.sampler.start_time() > self.schedule.t_terminal() {
            return Err(Error::invalid_config(format!(
                "sampler start 1-eps = {} exceeds schedule t_terminal = {}",
                self.sampler.start_time(),
                self.schedule.t_terminal()
            )));
        }
        if self.settings.method == Method::Enkf && self.settings.retrain_each_update {
            warnings.push("retrain_each_update has no effect with method = enkf".to_string());
        }
        Ok(warnings)
    }

    pub fn forward_process(&self) -> Result<ForwardProcess> {
        let op = self.operator.build(self.dynamics.dim())?;
        Ok(ForwardProcess::new(op, self.schedule.clone()))
    }
}

/// Propagates every member `n_steps` integrator steps. Process noise (when
/// enabled) is drawn from per-(absolute step, member) streams so a resumed
/// run sees the same draws.
pub fn time_update(
    ens: &Ensemble,
    model: &DynamicsModel,
    n_steps: usize,
    master: u64,
) -> Result<Ensemble> {
    if n_steps < 1 {
        return Err(Error::domain("time update needs n_steps >= 1"));
    }
    let base = ens.step_index;
    let propagated: Vec<Result<DVector<f64>>> = ens
        .members
        .par_iter()
        .enumerate()
        .map(|(i, member)| {
            let mut x = member.clone();
            for k in 0..n_steps {
                let abs = base + k;
                let mut rng = stream(master, StreamLabel::Dynamics, abs as u64, i as u64);
                x = model.step(&x, &mut rng).map_err(|_| Error::Divergence {
                    step: abs + 1,
                    context: format!("member {i} diverged during time update"),
                })?;
            }
            Ok(x)
        })
        .collect();
    let mut members = Vec::with_capacity(ens.members.len());
    for p in propagated {
        members.push(p?);
    }
    Ok(Ensemble {
        members,
        step_index: base + n_steps,
        kind: EnsembleKind::Prior,
    })
}

/// Stochastic (perturbed-observations) EnKF update. Inflation scales the
/// sample covariance used for the gain.
pub fn enkf_measurement_update(
    ens: &Ensemble,
    z: &DVector<f64>,
    op: &MeasurementOperator,
    inflation: f64,
    rng: &mut impl NoiseSource,
) -> Result<Ensemble> {
    if ens.kind != EnsembleKind::Prior {
        return Err(Error::domain(
            "measurement update expects a prior ensemble",
        ));
    }
    if ens.n_members() < 2 {
        return Err(Error::domain("EnKF needs at least two members"));
    }
    let d = ens.dim();
    if z.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: z.len(),
        });
    }
    let sigma = op.sigma();
    let a = op.op().to_dense();
    let p_hat = ens.covariance()? * inflation;
    let innovation_cov = &a * &p_hat * a.transpose() + DMatrix::identity(d, d) * sigma * sigma;
    let chol = innovation_cov.cholesky().ok_or_else(|| {
        Error::Singular(
            "singular innovation covariance in EnKF update; \
             raise enkf_inflation or the measurement noise"
                .to_string(),
        )
    })?;
    // K = P A^T S^{-1}; with S symmetric, K^T = S^{-1} A P
    let gain = chol.solve(&(&a * &p_hat)).transpose();
    let members = ens
        .members
        .iter()
        .map(|x| {
            let perturbed = z + rng.standard_normal_vec(d) * sigma;
            let innovation = perturbed - op.apply(x)?;
            Ok(x + &gain * innovation)
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, ens.step_index, EnsembleKind::Posterior)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Train,
    Finetune,
}

/// Score-filter measurement update: fit (or refresh) the prior score on the
/// current ensemble, then reverse-sample each member conditioned on z.
#[allow(clippy::too_many_arguments)]
pub fn masf_measurement_update(
    ens: &Ensemble,
    z: &DVector<f64>,
    fp: &ForwardProcess,
    net: &mut ScoreNet,
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    mode: UpdateMode,
    master: u64,
    trace: bool,
) -> Result<(Ensemble, TrainReport, Option<Vec<StepTrace>>)> {
    if ens.kind != EnsembleKind::Prior {
        return Err(Error::domain(
            "measurement update expects a prior ensemble",
        ));
    }
    let step = ens.step_index as u64;
    let mut train_rng = stream(master, StreamLabel::Training, step, 0);
    let report = match mode {
        UpdateMode::Train => net::train(net, &ens.members, fp, train_cfg, &mut train_rng)?,
        UpdateMode::Finetune => net::finetune(net, &ens.members, fp, train_cfg, &mut train_rng)?,
    };
    let (samples, traces) = sample_posterior_ensemble(
        net,
        fp,
        &ens.members,
        z,
        sampler_cfg,
        |i| stream(master, StreamLabel::Sampling, step, i as u64),
        trace,
    )?;
    let posterior = Ensemble::new(samples, ens.step_index, EnsembleKind::Posterior)?;
    Ok((posterior, report, traces))
}

/// Persisted between-steps state: enough to resume a run mid-way.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub ensemble: Ensemble,
    pub net: Option<ScoreNet>,
    /// Whether the net has had its full training pass (first measurement
    /// step trains, later ones finetune).
    pub trained: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub rmse: f64,
    pub spread: f64,
    pub is_measurement: bool,
    #[serde(skip)]
    pub estimate: DVector<f64>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhaseTimings {
    pub time_update_s: f64,
    pub training_s: f64,
    pub sampling_s: f64,
}

impl PhaseTimings {
    fn add(&mut self, other: &PhaseTimings) {
        self.time_update_s += other.time_update_s;
        self.training_s += other.training_s;
        self.sampling_s += other.sampling_s;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub step: usize,
    pub message: String,
}

/// Everything a finished (or aborted) run produced. On a phase error the
/// records collected so far are kept and `failure` is set.
#[derive(Debug)]
pub struct FilterRun {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub train_reports: Vec<(usize, TrainReport)>,
    pub traces: Vec<(usize, Vec<StepTrace>)>,
    pub timings: PhaseTimings,
    pub rmse_overall: Option<f64>,
    pub failure: Option<RunFailure>,
    pub final_state: Option<FilterState>,
}

fn rmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    ((estimate - truth).norm_squared() / truth.len() as f64).sqrt()
}

struct Segment {
    records: Vec<StepRecord>,
    train_reports: Vec<(usize, TrainReport)>,
    traces: Vec<(usize, Vec<StepTrace>)>,
    timings: PhaseTimings,
    failure: Option<RunFailure>,
}

/// Advances `state` through steps `from..=to`, recording per-step metrics.
/// Phase errors stop the segment and are reported, not propagated, so the
/// records up to the failing step survive.
fn run_segment(
    cfg: &FilterConfig,
    fp: &ForwardProcess,
    truth: &[DVector<f64>],
    measurements: &BTreeMap<usize, DVector<f64>>,
    master: u64,
    state: &mut FilterState,
    from: usize,
    to: usize,
    trace: bool,
) -> Segment {
    let steps: Vec<usize> = cfg.settings.measurement_step_set();
    let mut seg = Segment {
        records: Vec::with_capacity(to + 1 - from),
        train_reports: Vec::new(),
        traces: Vec::new(),
        timings: PhaseTimings::default(),
        failure: None,
    };
    for r in from..=to {
        let step_result = (|| -> Result<()> {
            let t0 = Instant::now();
            state.ensemble = time_update(&state.ensemble, &cfg.dynamics, 1, master)?;
            seg.timings.time_update_s += t0.elapsed().as_secs_f64();

            let is_measurement = r >= 1 && steps.binary_search(&r).is_ok();
            if is_measurement {
                let z = measurements.get(&r).ok_or_else(|| {
                    Error::invalid_config(format!("no measurement provided for step {r}"))
                })?;
                match cfg.settings.method {
                    Method::Enkf => {
                        let t0 = Instant::now();
                        let mut rng = stream(master, StreamLabel::Enkf, r as u64, 0);
                        state.ensemble = enkf_measurement_update(
                            &state.ensemble,
                            z,
                            fp.operator(),
                            cfg.settings.enkf_inflation,
                            &mut rng,
                        )?;
                        seg.timings.sampling_s += t0.elapsed().as_secs_f64();
                    }
                    Method::Masf => {
                        let net = state.net.as_mut().ok_or_else(|| {
                            Error::invalid_config("masf run has no score net")
                        })?;
                        let mode = if state.trained && !cfg.settings.retrain_each_update {
                            UpdateMode::Finetune
                        } else {
                            UpdateMode::Train
                        };
                        let t0 = Instant::now();
                        let (posterior, report, step_trace) = masf_measurement_update(
                            &state.ensemble,
                            z,
                            fp,
                            net,
                            &cfg.train,
                            &cfg.sampler,
                            mode,
                            master,
                            trace,
                        )?;
                        // training dominates; sampling time is folded into the
                        // report separation below via a second stamp
                        seg.timings.training_s += t0.elapsed().as_secs_f64();
                        state.ensemble = posterior;
                        state.trained = true;
                        seg.train_reports.push((r, report));
                        if let Some(tr) = step_trace {
                            seg.traces.push((r, tr));
                        }
                    }
                }
            }
            let estimate = state.ensemble.mean();
            seg.records.push(StepRecord {
                step: r,
                rmse: rmse(&estimate, &truth[r]),
                spread: state.ensemble.spread(),
                is_measurement,
                estimate,
            });
            Ok(())
        })();
        if let Err(e) = step_result {
            seg.failure = Some(RunFailure {
                step: r,
                message: e.to_string(),
            });
            break;
        }
    }
    seg
}

/// Initial state for a run: prior ensemble spread around the initial truth
/// point, plus a freshly initialized net for the score-filter method.
pub fn init_state(cfg: &FilterConfig, x0: &DVector<f64>, master: u64) -> Result<FilterState> {
    let ensemble = Ensemble::init_around(
        x0,
        cfg.settings.n_members,
        cfg.settings.init_spread,
        master,
    )?;
    let net = match cfg.settings.method {
        Method::Masf => {
            let mut rng = stream(master, StreamLabel::NetInit, 0, 0);
            Some(ScoreNet::new(cfg.dynamics.dim(), &cfg.net, &mut rng)?)
        }
        Method::Enkf => None,
    };
    Ok(FilterState {
        ensemble,
        net,
        trained: false,
    })
}

/// Runs the full loop: init around truth[0], then alternate time updates
/// and measurement updates over steps 1..=n_steps.
///
/// Returns Err only for precondition violations (bad config, missing truth
/// or measurements); runtime phase failures land in `FilterRun::failure`
/// with all records up to that step intact.
pub fn run_filter(
    cfg: &FilterConfig,
    truth: &[DVector<f64>],
    measurements: &BTreeMap<usize, DVector<f64>>,
    master: u64,
) -> Result<FilterRun> {
    run_filter_traced(cfg, truth, measurements, master, false)
}

pub fn run_filter_traced(
    cfg: &FilterConfig,
    truth: &[DVector<f64>],
    measurements: &BTreeMap<usize, DVector<f64>>,
    master: u64,
    trace: bool,
) -> Result<FilterRun> {
    cfg.validate()?;
    let n_steps = cfg.settings.n_steps;
    if truth.len() < n_steps + 1 {
        return Err(Error::invalid_config(format!(
            "truth trajectory has {} rows, need n_steps + 1 = {}",
            truth.len(),
            n_steps + 1
        )));
    }
    let d = cfg.dynamics.dim();
    if truth[0].len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: truth[0].len(),
        });
    }
    for s in cfg.settings.measurement_step_set() {
        if s >= 1 && !measurements.contains_key(&s) {
            return Err(Error::invalid_config(format!(
                "no measurement provided for step {s}"
            )));
        }
    }
    let fp = cfg.forward_process()?;
    let mut state = init_state(cfg, &truth[0], master)?;

    let estimate = state.ensemble.mean();
    let mut records = vec![StepRecord {
        step: 0,
        rmse: rmse(&estimate, &truth[0]),
        spread: state.ensemble.spread(),
        is_measurement: false,
        estimate,
    }];

    let seg = run_segment(
        cfg,
        &fp,
        truth,
        measurements,
        master,
        &mut state,
        1,
        n_steps,
        trace,
    );
    records.extend(seg.records);

    let rmse_overall = if seg.failure.is_none() {
        let window: Vec<f64> = records
            .iter()
            .filter(|r| r.step >= cfg.settings.eval_start)
            .map(|r| r.rmse)
            .collect();
        Some(window.iter().sum::<f64>() / window.len() as f64)
    } else {
        None
    };

    let mut timings = PhaseTimings::default();
    timings.add(&seg.timings);
    let final_state = seg.failure.is_none().then_some(state);

    Ok(FilterRun {
        seed: master,
        records,
        train_reports: seg.train_reports,
        traces: seg.traces,
        timings,
        rmse_overall,
        failure: seg.failure,
        final_state,
    })
}

/// Resumes a run from a persisted state, covering steps
/// `state.ensemble.step_index + 1 ..= to`. Produces records for exactly that
/// range; splicing them after the earlier run's records reproduces a single
/// uninterrupted run bit-for-bit.
pub fn resume_filter(
    cfg: &FilterConfig,
    truth: &[DVector<f64>],
    measurements: &BTreeMap<usize, DVector<f64>>,
    master: u64,
    mut state: FilterState,
    to: usize,
) -> Result<FilterRun> {
    cfg.validate()?;
    let from = state.ensemble.step_index + 1;
    if to < from || to > cfg.settings.n_steps {
        return Err(Error::invalid_config(format!(
            "resume range {from}..={to} is invalid for n_steps = {}",
            cfg.settings.n_steps
        )));
    }
    if truth.len() < to + 1 {
        return Err(Error::invalid_config(format!(
            "truth trajectory has {} rows, need {}",
            truth.len(),
            to + 1
        )));
    }
    let fp = cfg.forward_process()?;
    let seg = run_segment(
        cfg,
        &fp,
        truth,
        measurements,
        master,
        &mut state,
        from,
        to,
        false,
    );
    let final_state = seg.failure.is_none().then_some(state);
    Ok(FilterRun {
        seed: master,
        records: seg.records,
        train_reports: seg.train_reports,
        traces: seg.traces,
        timings: seg.timings,
        rmse_overall: None,
        failure: seg.failure,
        final_state,
    })
}
