//! Replication studies: MSE tables, MISE improvement tables, and bias and
//! coverage tracking of the closed-form estimators.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use recov::asymptotics::{bias_terms, eta};
use recov::spline::SplineSpec;
use recov::{
    diagnostics, fit_pipeline, fit_reml, fit_wi, fit_wls, imp, kernel_moments, mise, ClusterPolicy, Components,
    Curvature, Dataset, Kernel, NelderMeadOptions, SmootherOptions,
};
use serde::Serialize;

use crate::scenario::{coefficient, coefficient_second_derivative, generate, ScenarioConfig, P};
use crate::{Result, SimError};

/// Share of failed replications at which a study is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Points of the trapezoid grid used for MISE.
pub const MISE_GRID: usize = 401;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    ClosedForm,
    /// Cubic-spline REML with this many interior knots.
    Reml { knots: usize },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::ClosedForm => "closed_form".into(),
            Method::Reml { knots } => format!("reml_k{knots}"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = SimError;

    /// `closed_form` or `reml@K`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "closed_form" {
            return Ok(Method::ClosedForm);
        }
        s.strip_prefix("reml@")
            .and_then(|k| k.parse().ok())
            .map(|knots| Method::Reml { knots })
            .ok_or_else(|| SimError::Config(format!("unknown method `{s}` (expected closed_form or reml@K)")))
    }
}

fn estimand_names(q: usize) -> Vec<String> {
    let mut names = Vec::new();
    for c in 0..q {
        for r in c..q {
            names.push(format!("sigma{}{}", c + 1, r + 1));
        }
    }
    names.push("sigma2".into());
    names
}

/// `vech(Sigma)` followed by `sigma2`.
fn estimand_vector(sigma: &recov::SymMatrix<f64>, sigma2: f64) -> Vec<f64> {
    let mut v: Vec<f64> = sigma.vech().iter().copied().collect();
    v.push(sigma2);
    v
}

fn kernel(cfg: &ScenarioConfig) -> Result<Kernel> {
    Ok(Kernel::epanechnikov(cfg.bandwidth)?)
}

fn closed_form(ds: &Dataset, cfg: &ScenarioConfig) -> Result<recov::Fit> {
    Ok(fit_pipeline(ds, &kernel(cfg)?, SmootherOptions::default(), ClusterPolicy::Exclude)?)
}

/// Spline space on the support of `U` in the designs.
pub fn design_spline(knots: usize) -> Result<SplineSpec<f64>> {
    Ok(SplineSpec::new(3, knots, 0.0, 1.0)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub method: String,
    pub replication: usize,
    pub message: String,
}

struct Estimate {
    values: Vec<f64>,
    converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MseTable {
    pub estimands: Vec<String>,
    pub methods: Vec<String>,
    /// `estimands x methods`
    #[serde(skip)]
    pub mse: DMatrix<f64>,
    /// Monte-Carlo standard errors of `mse`.
    #[serde(skip)]
    pub se: DMatrix<f64>,
    pub replications: usize,
    pub first_replication: usize,
    pub used: Vec<usize>,
    pub nonconverged: Vec<usize>,
    pub failures: Vec<Failure>,
    /// `[method][replication]`: squared error per estimand, `None` when the
    /// replication failed.
    #[serde(skip)]
    pub squared_errors: Vec<Vec<Option<Vec<f64>>>>,
}

impl MseTable {
    pub fn excluded(&self) -> usize {
        self.failures.len()
    }

    /// Median over replications of the squared error of one estimand.
    pub fn median_squared_error(&self, method: usize, estimand: usize) -> f64 {
        let mut v: Vec<f64> = self.squared_errors[method].iter().flatten().map(|e| e[estimand]).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    fn write_matrix<W: Write>(&self, values: &DMatrix<f64>, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["estimand".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header)?;
        for (r, name) in self.estimands.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(values.row(r).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows are estimands, columns methods.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        self.write_matrix(&self.mse, sink)
    }

    pub fn write_se_csv<W: Write>(&self, sink: W) -> Result<()> {
        self.write_matrix(&self.se, sink)
    }
}

fn check_failures(method: &str, failed: usize, replications: usize, first: Option<&str>) -> Result<()> {
    if failed as f64 >= MAX_FAILURE_RATE * replications as f64 && failed > 0 {
        return Err(SimError::TooManyFailures {
            method: method.to_string(),
            failed,
            replications,
            first: first.unwrap_or_default().to_string(),
        });
    }
    Ok(())
}

fn replication_range(cfg: &ScenarioConfig, min: usize) -> Result<std::ops::Range<usize>> {
    cfg.validate()?;
    if cfg.replications < min {
        return Err(SimError::Config(format!("at least {min} replications are needed")));
    }
    Ok(cfg.first_replication..cfg.first_replication + cfg.replications)
}

/// Squared errors of each method against the configured truth.
pub fn run_mse_study(cfg: &ScenarioConfig, methods: &[Method]) -> Result<MseTable> {
    run_mse_study_with(cfg, methods, &NelderMeadOptions::default())
}

pub fn run_mse_study_with(cfg: &ScenarioConfig, methods: &[Method], opts: &NelderMeadOptions) -> Result<MseTable> {
    let reps = replication_range(cfg, 2)?;
    if methods.is_empty() {
        return Err(SimError::Config("no methods requested".into()));
    }
    let truth = estimand_vector(&cfg.sigma, cfg.sigma2);
    let per_rep: Vec<Vec<std::result::Result<Estimate, String>>> = reps
        .clone()
        .into_par_iter()
        .map(|rep| {
            let ds = match generate(cfg, rep) {
                Ok(ds) => ds,
                Err(e) => return methods.iter().map(|_| Err(e.to_string())).collect(),
            };
            let cf = closed_form(&ds, cfg);
            methods
                .iter()
                .map(|method| match method {
                    Method::ClosedForm => cf
                        .as_ref()
                        .map(|fit| Estimate {
                            values: estimand_vector(&fit.components.sigma_raw, fit.components.sigma2),
                            converged: true,
                        })
                        .map_err(|e| e.to_string()),
                    Method::Reml { knots } => {
                        let init = cf.as_ref().ok().map(|f| &f.components);
                        design_spline(*knots)
                            .and_then(|spec| Ok(fit_reml(&ds, &spec, init, opts)?))
                            .map(|fit| Estimate {
                                values: estimand_vector(&fit.sigma, fit.sigma2),
                                converged: fit.converged,
                            })
                            .map_err(|e| e.to_string())
                    }
                })
                .collect()
        })
        .collect();

    let k = truth.len();
    let mut mse = DMatrix::zeros(k, methods.len());
    let mut se = DMatrix::zeros(k, methods.len());
    let mut used = Vec::new();
    let mut nonconverged = Vec::new();
    let mut failures = Vec::new();
    let mut squared_errors = Vec::new();
    for (j, method) in methods.iter().enumerate() {
        let mut errors = Vec::with_capacity(cfg.replications);
        let mut method_failures = Vec::new();
        let mut nc = 0;
        for (rep, results) in reps.clone().zip(&per_rep) {
            match &results[j] {
                Ok(est) => {
                    nc += usize::from(!est.converged);
                    errors.push(Some(est.values.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<f64>>()));
                }
                Err(message) => {
                    errors.push(None);
                    method_failures.push(Failure {
                        method: method.name(),
                        replication: rep,
                        message: message.clone(),
                    });
                }
            }
        }
        check_failures(
            &method.name(),
            method_failures.len(),
            cfg.replications,
            method_failures.first().map(|f| f.message.as_str()),
        )?;
        let ok: Vec<&Vec<f64>> = errors.iter().flatten().collect();
        let count = ok.len() as f64;
        for e in 0..k {
            let mean = ok.iter().map(|v| v[e]).sum::<f64>() / count;
            let var = ok.iter().map(|v| (v[e] - mean).powi(2)).sum::<f64>() / (count - 1.0);
            mse[(e, j)] = mean;
            se[(e, j)] = (var / count).sqrt();
        }
        used.push(ok.len());
        nonconverged.push(nc);
        failures.extend(method_failures);
        squared_errors.push(errors);
    }
    Ok(MseTable {
        estimands: estimand_names(cfg.q()),
        methods: methods.iter().map(Method::name).collect(),
        mse,
        se,
        replications: cfg.replications,
        first_replication: cfg.first_replication,
        used,
        nonconverged,
        failures,
        squared_errors,
    })
}

/// Covariance used for the weighted spline fits of an IMP study.
#[derive(Debug, Clone)]
pub enum WeightSource {
    /// The replication's closed-form estimates.
    Estimated,
    /// `Sigma` replaced by zero, keeping the estimated `sigma2`.
    ZeroSigma,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImpTable {
    pub knots: Vec<usize>,
    pub coefficients: Vec<String>,
    /// `knots x coefficients`, averaged over replications
    #[serde(skip)]
    pub mise_wi: DMatrix<f64>,
    #[serde(skip)]
    pub mise_wls: DMatrix<f64>,
    /// NaN where the weighted MISE is zero.
    #[serde(skip)]
    pub imp: DMatrix<f64>,
    pub replications: usize,
    pub used: usize,
    pub failures: Vec<Failure>,
}

impl ImpTable {
    /// One row per knot count: IMP per coefficient, then both MISEs.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["knots".to_string()];
        for prefix in ["imp", "mise_wi", "mise_wls"] {
            header.extend(self.coefficients.iter().map(|c| format!("{prefix}_{c}")));
        }
        w.write_record(&header)?;
        for (r, k) in self.knots.iter().enumerate() {
            let mut row = vec![k.to_string()];
            for m in [&self.imp, &self.mise_wi, &self.mise_wls] {
                row.extend(m.row(r).iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn unit_grid(points: usize) -> Vec<f64> {
    (0..points).map(|k| k as f64 / (points - 1) as f64).collect()
}

/// MISE of working-independence and weighted spline fits across knot counts.
pub fn run_imp_study(cfg: &ScenarioConfig, knots: &[usize], weights: WeightSource) -> Result<ImpTable> {
    let reps = replication_range(cfg, 1)?;
    if knots.is_empty() {
        return Err(SimError::Config("empty knot range".into()));
    }
    let grid = unit_grid(MISE_GRID);
    let truth: Vec<Vec<f64>> = (0..P).map(|l| grid.iter().map(|&u| coefficient(u)[l]).collect()).collect();
    // per replication: [knot][coefficient] -> (wi, wls)
    let per_rep: Vec<std::result::Result<Vec<Vec<(f64, f64)>>, String>> = reps
        .clone()
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<Vec<Vec<(f64, f64)>>> {
                let ds = generate(cfg, rep)?;
                let fitted = closed_form(&ds, cfg)?.components;
                let vc = match weights {
                    WeightSource::Estimated => fitted,
                    WeightSource::ZeroSigma => Components::fixed(recov::SymMatrix::zeros(cfg.q()), fitted.sigma2),
                };
                knots
                    .iter()
                    .map(|&k| {
                        let spec = design_spline(k)?;
                        let wi = fit_wi(&ds, &spec)?;
                        let wls = fit_wls(&ds, &spec, &vc)?;
                        (0..P)
                            .map(|l| {
                                let m1 = mise(&grid, &wi.curve(&grid, l)?, &truth[l])?;
                                let m2 = mise(&grid, &wls.curve(&grid, l)?, &truth[l])?;
                                Ok((m1, m2))
                            })
                            .collect()
                    })
                    .collect()
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (rep, r) in reps.zip(per_rep) {
        match r {
            Ok(v) => ok.push(v),
            Err(message) => failures.push(Failure {
                method: "spline".into(),
                replication: rep,
                message,
            }),
        }
    }
    check_failures("spline", failures.len(), cfg.replications, failures.first().map(|f| f.message.as_str()))?;
    let count = ok.len() as f64;
    let mut mise_wi = DMatrix::zeros(knots.len(), P);
    let mut mise_wls = DMatrix::zeros(knots.len(), P);
    for rep in &ok {
        for (r, row) in rep.iter().enumerate() {
            for (l, &(m1, m2)) in row.iter().enumerate() {
                mise_wi[(r, l)] += m1;
                mise_wls[(r, l)] += m2;
            }
        }
    }
    mise_wi /= count;
    mise_wls /= count;
    let imp_values = mise_wi.zip_map(&mise_wls, |a, b| imp(a, b).unwrap_or(f64::NAN));
    Ok(ImpTable {
        knots: knots.to_vec(),
        coefficients: (1..=P).map(|l| format!("a{l}")).collect(),
        mise_wi,
        mise_wls,
        imp: imp_values,
        replications: cfg.replications,
        used: ok.len(),
        failures,
    })
}

/// Empirical bias of `sigma2_hat` against the leading-order prediction
/// computed with the true second derivatives.
#[derive(Debug, Clone, Serialize)]
pub struct BiasStudy {
    pub bandwidth: f64,
    pub replications: usize,
    pub used: usize,
    /// Mean of `sigma2_hat - sigma2`.
    pub empirical_bias: f64,
    /// Its Monte-Carlo standard error.
    pub empirical_se: f64,
    /// Mean over replications of `h^4 ratio^2 b / 4`.
    pub predicted_bias: f64,
}

pub fn run_bias_study(cfg: &ScenarioConfig) -> Result<BiasStudy> {
    let reps = replication_range(cfg, 2)?;
    let k = kernel(cfg)?;
    let ratio = kernel_moments::<f64>(&k.kind)?.bias_ratio()?;
    let factor = 0.25 * cfg.bandwidth.powi(4) * ratio * ratio;
    let per_rep: Vec<std::result::Result<(f64, f64), String>> = reps
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<(f64, f64)> {
                let ds = generate(cfg, rep)?;
                let fit = closed_form(&ds, cfg)?;
                let etas = eta(&ds, |u| Ok(coefficient_second_derivative(u)))?;
                let b = bias_terms(&fit.projections, &etas)?.b;
                Ok((fit.components.sigma2 - cfg.sigma2, factor * b))
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let failed = per_rep.iter().filter(|r| r.is_err()).count();
    let first = per_rep.iter().find_map(|r| r.as_ref().err().cloned());
    check_failures("closed_form", failed, cfg.replications, first.as_deref())?;
    let ok: Vec<(f64, f64)> = per_rep.into_iter().flatten().collect();
    let n = ok.len() as f64;
    let mean = ok.iter().map(|r| r.0).sum::<f64>() / n;
    let var = ok.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BiasStudy {
        bandwidth: cfg.bandwidth,
        replications: cfg.replications,
        used: ok.len(),
        empirical_bias: mean,
        empirical_se: (var / n).sqrt(),
        predicted_bias: ok.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

/// Share of replications whose `estimate +- 1.96 se` interval covers the
/// true `vech(Sigma)` entry, using the plug-in standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageStudy {
    pub estimands: Vec<String>,
    pub coverage: Vec<f64>,
    pub used: usize,
}

pub fn run_coverage_study(cfg: &ScenarioConfig) -> Result<CoverageStudy> {
    let reps = replication_range(cfg, 2)?;
    let k = kernel(cfg)?;
    let truth = cfg.sigma.vech();
    let per_rep: Vec<std::result::Result<Vec<bool>, String>> = reps
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<Vec<bool>> {
                let ds = generate(cfg, rep)?;
                let fit = closed_form(&ds, cfg)?;
                let curvature = |u: f64| coefficient_second_derivative(u);
                let diag = diagnostics(&ds, &fit, &k, Curvature::Supplied(&curvature))?;
                let est = fit.components.sigma_raw.vech();
                Ok((0..truth.len())
                    .map(|e| (est[e] - truth[e]).abs() <= 1.96 * diag.se_sigma[e])
                    .collect())
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let failed = per_rep.iter().filter(|r| r.is_err()).count();
    let first = per_rep.iter().find_map(|r| r.as_ref().err().cloned());
    check_failures("closed_form", failed, cfg.replications, first.as_deref())?;
    let ok: Vec<Vec<bool>> = per_rep.into_iter().flatten().collect();
    let mut names = estimand_names(cfg.q());
    names.pop();
    let coverage = (0..truth.len())
        .map(|e| ok.iter().filter(|r| r[e]).count() as f64 / ok.len() as f64)
        .collect();
    Ok(CoverageStudy {
        estimands: names,
        coverage,
        used: ok.len(),
    })
}

/// Truth vector matching the rows of an [`MseTable`].
pub fn truth_vector(cfg: &ScenarioConfig) -> DVector<f64> {
    DVector::from_vec(estimand_vector(&cfg.sigma, cfg.sigma2))
}
