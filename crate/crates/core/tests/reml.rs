mod common;

use common::*;
use recov::reml::RemlParams;
use recov::{fit_pipeline, fit_reml, reml_negloglik, ClusterPolicy, Kernel, NelderMeadOptions, Observation, SmootherOptions, Spline, SymMatrix};

fn closed_form(ds: &recov::Dataset) -> recov::Components {
    fit_pipeline(ds, &Kernel::epanechnikov(0.15).unwrap(), SmootherOptions::default(), ClusterPolicy::Exclude)
        .unwrap()
        .components
}

#[test]
fn fit_descends_from_closed_form_start() {
    let design = Design { m: 60, sigma: vec![2.0, 1.5, 1.5, 2.0], ..Default::default() };
    for seed in 0..3 {
        let ds = simulate(&design, seed);
        let spec = Spline::cubic_for(&ds, 8).unwrap();
        let init = closed_form(&ds);
        let fit = fit_reml(&ds, &spec, Some(&init), &NelderMeadOptions::default()).unwrap();
        let start = RemlParams::encode(&init.sigma_psd, init.sigma2).unwrap();
        let at_init = reml_negloglik(&start, &ds, &spec).unwrap();
        assert_eq!(fit.initial_neg_loglik, at_init);
        assert!(fit.neg_loglik <= at_init);
        if fit.converged {
            assert!(fit.simplex_spread <= 1e-8);
        }
        assert!(fit.warnings.is_empty());
    }
}

#[test]
fn objective_ignores_shifts_absorbed_by_the_spline() {
    // with an intercept column the spline space contains the constants
    let design = Design { m: 10, intercept: true, ..Default::default() };
    let ds = simulate(&design, 4);
    let shifted = ds.map_observations(|o| Observation { y: o.y + 37.5, ..o.clone() }).unwrap();
    let spec = Spline::cubic_for(&ds, 4).unwrap();
    let params = RemlParams::encode(&SymMatrix::identity(2), 0.8).unwrap();
    let a = reml_negloglik(&params, &ds, &spec).unwrap();
    let b = reml_negloglik(&params, &shifted, &spec).unwrap();
    assert!(rel_err(a, b) < 1e-9, "{a} vs {b}");
}

#[test]
fn fit_is_deterministic() {
    let ds = simulate(&Design { m: 30, ..Default::default() }, 9);
    let spec = Spline::cubic_for(&ds, 6).unwrap();
    let a = fit_reml(&ds, &spec, None, &NelderMeadOptions::default()).unwrap();
    let b = fit_reml(&ds, &spec, None, &NelderMeadOptions::default()).unwrap();
    assert_eq!(a.sigma, b.sigma);
    assert_eq!(a.sigma2, b.sigma2);
    assert_eq!(a.spline_coefficients, b.spline_coefficients);
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn zero_covariance_is_shrunk_toward_zero() {
    let design = Design { m: 100, sizes: 6..=10, sigma: vec![1e-300, 0.0, 0.0, 1e-300], ..Default::default() };
    let mut entries: [Vec<f64>; 3] = Default::default();
    for seed in 0..20 {
        let ds = simulate(&design, 1000 + seed);
        let spec = Spline::cubic_for(&ds, 8).unwrap();
        let fit = fit_reml(&ds, &spec, Some(&closed_form(&ds)), &NelderMeadOptions::default()).unwrap();
        for (k, (a, b)) in [(0, 0), (1, 0), (1, 1)].into_iter().enumerate() {
            entries[k].push(fit.sigma.get(a, b).abs());
        }
    }
    for mut e in entries {
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (e[9] + e[10]);
        assert!(median < 0.2, "median |sigma_kl| = {median}");
    }
}

#[test]
fn wide_random_effects_are_flagged() {
    let q = 4;
    let sigma = nalgebra::DMatrix::<f64>::identity(q, q);
    let design = Design { m: 12, q, sizes: 8..=10, sigma: sigma.as_slice().to_vec(), ..Default::default() };
    let ds = simulate(&design, 2);
    let spec = Spline::cubic_for(&ds, 2).unwrap();
    let opts = NelderMeadOptions { max_iter: Some(50), restarts: 0, ..Default::default() };
    let fit = fit_reml(&ds, &spec, None, &opts).unwrap();
    assert_eq!(fit.warnings.len(), 1);
    assert!(!fit.converged);
}
