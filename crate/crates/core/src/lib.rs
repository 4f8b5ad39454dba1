//! Estimation of variance components in time-varying coefficient mixed
//! models: local linear smoothing of the coefficient functions, closed-form
//! random-effect covariance estimates, their plug-in asymptotics, and a
//! spline/REML comparison baseline.
//!
//! Everything is generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`). The unsuffixed aliases at the crate root fix `f64`.

pub mod asymptotics;
pub mod data;
mod error;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod reml;
mod scalar;
pub mod smoother;
pub mod spline;
pub mod variance;

pub use asymptotics::{diagnostics, AsymptoticDiagnostics, Curvature};
pub use data::{load_csv, write_csv, Cluster, LongitudinalDataset, Observation, Schema, ValidationReport};
pub use error::{Error, Result};
pub use kernel::{kernel_moments, KernelKind, KernelMoments, KernelSpec};
pub use linalg::{DuplicationMap, SymMatrix};
pub use optim::{nelder_mead, NelderMeadOptions, NelderMeadResult};
pub use reml::{fit_reml, reml_negloglik, RemlFit, RemlParams};
pub use scalar::Real;
pub use smoother::{fit_curve, local_linear_fit, CoefficientCurve, EvalMode, SmootherOptions};
pub use spline::{fit_wi, fit_wls, imp, mise, SplineFit, SplineSpec};
pub use variance::{fit_pipeline, ClusterPolicy, PipelineFit, VarianceComponents};

pub type Dataset = LongitudinalDataset<f64>;
pub type Kernel = KernelSpec<f64>;
pub type Components = VarianceComponents<f64>;
pub type Fit = PipelineFit<f64>;
pub type Diagnostics = AsymptoticDiagnostics<f64>;
pub type Spline = SplineSpec<f64>;
pub type Reml = RemlFit<f64>;

pub type Dataset32 = LongitudinalDataset<f32>;
pub type Kernel32 = KernelSpec<f32>;
pub type Components32 = VarianceComponents<f32>;
pub type Fit32 = PipelineFit<f32>;
