//! Measurement-aware score-based filtering.
//!
//! The core idea: build a forward noising process directly from the
//! measurement equation `z = A x + sigma eps` by interpolating the state
//! toward its measured image, `X_t = A(t) X_0 + Sigma(t)^{1/2} eps` with
//! `A(t) = (1 - a(t)) A + a(t) I`. Because the terminal distribution of
//! that process *is* the measurement likelihood up to known Gaussian
//! widening, the likelihood score along the reverse-time SDE has a closed
//! form, and only the prior score needs to be learned (by denoising score
//! matching on the forecast ensemble). Filtering then alternates ensemble
//! propagation through the dynamics with reverse-time posterior sampling.
//!
//! Modules:
//! - [`schedule`]: interpolation coefficient a(t) and its derived quantities
//! - [`measurement`]: operators, the forward process, transition kernels,
//!   and the closed-form likelihood score
//! - [`net`]: score MLP, reverse-mode gradients, Adam, DSM training
//! - [`sampler`]: reverse-time posterior sampling on a uniform grid
//! - [`dynamics`]: Lorenz-63/96 test systems
//! - [`filter`]: the filtering loop and the EnKF baseline
//! - [`oracle`]: closed-form Gaussian references used by tests and `verify`
//! - [`rng`]: labeled, splittable random streams for reproducibility

pub mod dynamics;
pub mod error;
pub mod filter;
pub mod hashing;
pub mod linalg;
pub mod measurement;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use dynamics::DynamicsModel;
pub use error::{Error, Result};
pub use filter::{
    enkf_measurement_update, init_state, masf_measurement_update, resume_filter, run_filter,
    run_filter_traced, time_update, Ensemble, EnsembleKind, FilterConfig, FilterRun,
    FilterSettings, FilterState, Method, StepRecord,
};
pub use measurement::{ForwardProcess, MeasurementOperator, OperatorSpec, TransitionKernel};
pub use net::{
    checkpoint, dsm_loss, finetune, train, FinetuneMask, LossWeighting, NetConfig, PriorScore,
    ScoreNet, TrainConfig, TrainReport,
};
pub use rng::{stream, NoiseSource, StreamLabel};
pub use sampler::{
    posterior_score, reverse_step, sample_posterior, sample_posterior_ensemble, ReverseGrid,
    SamplerConfig, StepTrace,
};
pub use schedule::{Schedule, ScheduleKind};
