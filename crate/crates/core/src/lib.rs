//! Sharpness-aware training of small classifiers together with
//! training-data attribution for the trained models.
//!
//! Three influence estimators are provided: a Hessian-based one at the
//! perturbed optimum ([`influence::sam_if_fast`]), a variant that also
//! propagates how the worst-case perturbation moves with the parameters
//! ([`influence::sam_hif`]), and a trajectory-based one summing
//! learning-rate-weighted gradients over recorded checkpoints
//! ([`influence::sam_gif`]). The [`oracle`] module retrains without a point
//! to measure what the estimators predict.

pub mod error;
pub mod influence;
pub mod model;
pub mod numcore;
pub mod oracle;
pub mod samtrain;
pub mod stats;

pub use error::{Error, Result};
pub use model::{Activation, Dataset, LossKind, ModelKind, ModelSpec, Split};
pub use numcore::{ParamVector, SamplingMode};
pub use samtrain::{LrSchedule, SamConfig, Trajectory};
