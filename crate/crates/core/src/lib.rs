//! Multi-group CIRCE: estimation of (log-)Gaussian multiplicative
//! uncertainty factors from linearized code-versus-experiment data.
//!
//! The crate covers the data model and likelihood ([`model`]), the ECME
//! estimators ([`estimator`]), Fisher-information based diagnostics
//! ([`diagnostics`]), hypothesis tests ([`hypothesis`]) and a synthetic data
//! generator with a replication harness ([`synthetic`]).

pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod hypothesis;
pub mod model;
pub mod stats;
pub mod synthetic;

pub use error::{CirceError, Result};
pub use estimator::{
    closed_form_mle, ecme_step_multigroup, fit_multigroup, fit_regular, initial_params, EcmeConfig,
    EcmeStep, FitResult, StartMode,
};
pub use model::{
    log_likelihood, log_likelihood_floored, predictive_moments, validate_dataset, Dataset,
    ModelParams, PredictiveMoments, RawDataset, VARIANCE_FLOOR,
};
