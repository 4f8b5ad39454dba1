//! Simulation designs for the closed-form variance-component estimators and
//! the replication studies built on them.
//!
//! Every random draw comes from a ChaCha20 stream keyed by
//! `(seed, replication, cluster)`, so results do not depend on how work is
//! scheduled across threads.

pub mod scenario;
pub mod study;

pub use scenario::{generate, generate_with_latent, Scenario, ScenarioConfig};
pub use study::{
    run_bias_study, run_coverage_study, run_imp_study, run_mse_study, run_mse_study_with, BiasStudy, ImpTable,
    Method, MseTable, WeightSource,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] recov::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{method}: {failed} of {replications} replications failed, at or above the 5% limit (first failure: {first})")]
    TooManyFailures {
        method: String,
        failed: usize,
        replications: usize,
        first: String,
    },
    #[error("writing table: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
