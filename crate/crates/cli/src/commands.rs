use std::path::Path;

use recov::{
    diagnostics, fit_pipeline, kernel_moments, load_csv, ClusterPolicy, Curvature, Dataset, EvalMode, KernelKind,
    Kernel, Schema, SmootherOptions,
};
use recov_sim::{run_imp_study, run_mse_study, Method, MseTable, Scenario, ScenarioConfig, WeightSource};
use serde::Serialize;

use crate::manifest::Run;
use crate::{BenchArgs, CliError, DesignArgs, FitArgs, MomentsArgs, SimulateArgs};

pub struct Context {
    pub arguments: Vec<String>,
    pub threads: Option<usize>,
}

fn start<A: Serialize>(command: &str, args: &A, out: &Path, ctx: Context) -> Result<Run, CliError> {
    let config = serde_json::to_value(args).map_err(|e| CliError::io(e.to_string()))?;
    let mut run = Run::new(command, ctx.arguments, config, out)?;
    run.manifest.threads = ctx.threads;
    Ok(run)
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::io(e.to_string())
}

fn parse_kernel(name: &str) -> Result<KernelKind, CliError> {
    name.parse::<KernelKind>().map_err(|e| CliError::usage(e.to_string()))
}

pub fn fit(args: &FitArgs, ctx: Context) -> Result<(), CliError> {
    let mut run = start("fit", args, &args.out, ctx)?;
    let kind = parse_kernel(&args.kernel)?;
    let kernel = Kernel::new(kind, args.bandwidth)?;
    let eval_mode = match args.eval_mode.as_str() {
        "grid" if args.grid_size < 2 => return Err(CliError::usage("--grid-size must be at least 2".into())),
        "grid" => EvalMode::Grid(args.grid_size),
        _ => EvalMode::Exact,
    };
    let schema = Schema {
        cluster: args.cluster_col.clone(),
        u: args.u_col.clone(),
        y: args.y_col.clone(),
        x: args.x_cols.clone().unwrap_or_else(|| Schema::standard(args.p, args.q).x),
        z: args.z_cols.clone().unwrap_or_else(|| Schema::standard(args.p, args.q).z),
    };

    let bytes = std::fs::read(&args.data)
        .map_err(|e| CliError::data(format!("cannot read `{}`: {e}", args.data.display())))?;
    run.add_input(&args.data, &bytes);
    let ds: Dataset = load_csv(bytes.as_slice(), &schema)?;

    let report = ds.validate();
    for flag in &report.flags {
        let reasons: Vec<String> = flag.reasons.iter().map(|r| r.to_string()).collect();
        let message = format!("cluster `{}` (n = {}): {}", flag.cluster, flag.n, reasons.join(", "));
        if args.strict {
            return Err(CliError::data(format!("validation failed: {message}")));
        }
        run.warn(format!("{message}; excluded from variance estimation"));
    }

    let policy = if args.strict { ClusterPolicy::Strict } else { ClusterPolicy::Exclude };
    let options = SmootherOptions {
        ridge: args.ridge,
        eval_mode,
    };
    let fit = fit_pipeline(&ds, &kernel, options, policy)?;
    if !fit.curve.ridged_points().is_empty() {
        run.warn(format!(
            "ridge regularization used at {} of {} evaluation points",
            fit.curve.ridged_points().len(),
            fit.curve.len()
        ));
    }
    if fit.components.sigma_raw.min_eigenvalue() < 0.0 {
        run.warn("raw Sigma estimate is indefinite; sigma_psd holds its projection".into());
    }
    let diag = diagnostics(&ds, &fit, &kernel, Curvature::Estimated)?;

    run.write_output("curve.csv", |w| fit.curve.write_csv(w).map_err(csv_err))?;
    run.write_json("variance_components.json", &fit.components)?;
    run.write_output("effects.csv", |w| fit.effects.write_csv(w).map_err(csv_err))?;
    run.write_json("diagnostics.json", &diag)?;
    run.finish()
}

fn scenario_config(scenario: Scenario, d: &DesignArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::with_q(scenario, d.seed, d.q)?;
    cfg.m = d.m;
    cfg.bandwidth = d.bandwidth;
    cfg.sigma2 = d.sigma2;
    cfg.replications = d.reps;
    cfg.first_replication = d.first_rep;
    cfg.validate()?;
    Ok(cfg)
}

/// `a:b`, `a..b`, `a..=b` (all inclusive), `a,b,c`, or `a`.
pub fn parse_knots(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::usage(format!("invalid knot specification `{s}`"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let range = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .or_else(|| s.split_once(':'));
    let knots: Vec<usize> = match range {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(bad());
            }
            (a..=b).collect()
        }
        None => s.split(',').map(num).collect::<Result<_, _>>()?,
    };
    if knots.is_empty() {
        return Err(bad());
    }
    Ok(knots)
}

fn record_mse(run: &mut Run, table: &MseTable) {
    run.manifest.excluded_replications = table.excluded();
    run.manifest.nonconverged_replications = table.nonconverged.iter().sum();
    for f in &table.failures {
        run.warn(format!("{} replication {} excluded: {}", f.method, f.replication, f.message));
    }
    for (method, &nc) in table.methods.iter().zip(&table.nonconverged) {
        if nc > 0 {
            run.warn(format!("{method}: {nc} of {} replications did not converge", table.replications));
        }
    }
}

fn write_mse(run: &mut Run, prefix: &str, table: &MseTable) -> Result<(), CliError> {
    run.write_output(&format!("{prefix}.csv"), |w| table.write_csv(w).map_err(csv_err))?;
    run.write_output(&format!("{prefix}_se.csv"), |w| table.write_se_csv(w).map_err(csv_err))
}

pub fn simulate(args: &SimulateArgs, ctx: Context) -> Result<(), CliError> {
    let mut run = start("simulate", args, &args.out, ctx)?;
    run.manifest.seed = Some(args.design.seed);
    if args.scenario == "imp" {
        let cfg = scenario_config(Scenario::Gaussian, &args.design)?;
        let knots = parse_knots(&args.knots)?;
        let table = run_imp_study(&cfg, &knots, WeightSource::Estimated)?;
        run.manifest.excluded_replications = table.failures.len();
        for f in &table.failures {
            run.warn(format!("replication {} excluded: {}", f.replication, f.message));
        }
        for (r, k) in table.knots.iter().enumerate() {
            if table.imp.row(r).iter().any(|v| v.is_nan()) {
                run.warn(format!("knots = {k}: weighted MISE is zero, IMP undefined"));
            }
        }
        run.write_output("imp_table.csv", |w| table.write_csv(w).map_err(csv_err))?;
        return run.finish();
    }
    let scenario: Scenario = args.scenario.parse()?;
    let cfg = scenario_config(scenario, &args.design)?;
    let methods = args
        .methods
        .split(',')
        .map(|m| m.trim().parse::<Method>())
        .collect::<Result<Vec<_>, _>>()?;
    let table = run_mse_study(&cfg, &methods)?;
    record_mse(&mut run, &table);
    write_mse(&mut run, "mse_table", &table)?;
    run.finish()
}

pub fn bench_reml(args: &BenchArgs, ctx: Context) -> Result<(), CliError> {
    if args.design.q > 3 && !args.force {
        return Err(CliError::usage(format!(
            "q = {} > 3: the simplex search for the REML covariance becomes unreliable with this many \
             parameters; pass --force to run anyway",
            args.design.q
        )));
    }
    let mut run = start("bench-reml", args, &args.out, ctx)?;
    run.manifest.seed = Some(args.design.seed);
    let cfg = scenario_config(args.scenario.parse()?, &args.design)?;
    let mut methods: Vec<Method> = parse_knots(&args.knots)?
        .into_iter()
        .map(|knots| Method::Reml { knots })
        .collect();
    methods.push(Method::ClosedForm);
    let table = run_mse_study(&cfg, &methods)?;
    record_mse(&mut run, &table);
    write_mse(&mut run, "bench_reml", &table)?;
    run.finish()
}

#[derive(Serialize)]
struct MomentReport {
    kernel: String,
    mu0: f64,
    mu1: f64,
    mu2: f64,
    mu3: f64,
    determinant: f64,
    bias_ratio: Option<f64>,
}

pub fn moments(args: &MomentsArgs, ctx: Context) -> Result<(), CliError> {
    let kind = parse_kernel(&args.kernel)?;
    let mut run = start("moments", args, &args.out, ctx)?;
    let m = kernel_moments::<f64>(&kind)?;
    let report = MomentReport {
        kernel: kind.name().to_string(),
        mu0: m.mu0,
        mu1: m.mu1,
        mu2: m.mu2,
        mu3: m.mu3,
        determinant: m.determinant(),
        bias_ratio: m.bias_ratio().ok(),
    };
    run.write_json("moments.json", &report)?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_specifications() {
        assert_eq!(parse_knots("7:15").unwrap(), (7..=15).collect::<Vec<_>>());
        assert_eq!(parse_knots("6..10").unwrap(), vec![6, 7, 8, 9, 10]);
        assert_eq!(parse_knots("6..=7").unwrap(), vec![6, 7]);
        assert_eq!(parse_knots("8").unwrap(), vec![8]);
        assert_eq!(parse_knots("8, 10").unwrap(), vec![8, 10]);
        assert!(parse_knots("10:6").is_err());
        assert!(parse_knots("a").is_err());
    }
}
