use thiserror::Error;

/// Errors raised by ingestion and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid bandwidth {0}: must be positive and finite")]
    InvalidBandwidth(f64),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("no observation within the kernel window at u = {u} (h = {h})")]
    EmptyWindow { u: f64, h: f64 },
    #[error("evaluation point u = {u} lies outside the observed range [{lo}, {hi}]")]
    OutOfRange { u: f64, lo: f64, hi: f64 },
    #[error("singular local moment matrix at u = {u}")]
    SingularWindow { u: f64 },
    #[error("cluster `{cluster}`: {reason}")]
    Cluster { cluster: String, reason: String },
    #[error("not enough degrees of freedom: n = {n}, q*m = {qm}")]
    DegreesOfFreedom { n: usize, qm: usize },
    #[error("need at least {needed} clusters, have {have}")]
    TooFewClusters { needed: usize, have: usize },
    #[error("degenerate kernel: mu0*mu2 - mu1^2 = {0}")]
    DegenerateKernel(f64),
    #[error("spline design is rank deficient ({0}); try fewer knots")]
    RankDeficient(String),
    #[error("covariance of cluster `{cluster}` is singular")]
    SingularCovariance { cluster: String },
    #[error("objective is not finite at any initial simplex vertex")]
    NonFiniteStart,
    #[error("at u = {u}: {source}")]
    AtPoint {
        u: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_point(u: f64, source: Error) -> Self {
        Error::AtPoint {
            u,
            source: Box::new(source),
        }
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Innermost error once stage and point wrappers are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtPoint { source, .. } | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
