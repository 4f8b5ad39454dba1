//! Downhill simplex (Nelder-Mead) minimization.

use nalgebra::DVector;

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Stop once `f(worst) - f(best)` over the simplex falls below this.
    pub tol: f64,
    /// Iteration cap per run; `None` means `2000 * dim`.
    pub max_iter: Option<usize>,
    /// Fresh simplices built around the best point after a converged run.
    pub restarts: usize,
    /// Offset of the initial vertices along each coordinate.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            restarts: 2,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult<T: Real> {
    pub x: DVector<T>,
    pub value: T,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Value spread of the final simplex.
    pub spread: T,
    /// Best vertex value after every iteration.
    pub best_history: Vec<T>,
}

struct Vertex<T: Real> {
    x: DVector<T>,
    f: T,
}

/// Minimizes `objective` from `x0`. Non-finite objective values are treated
/// as `+inf` so the simplex moves away from them.
pub fn nelder_mead<T: Real>(
    mut objective: impl FnMut(&DVector<T>) -> T,
    x0: &DVector<T>,
    opts: &NelderMeadOptions,
) -> Result<NelderMeadResult<T>> {
    let dim = x0.len();
    if dim == 0 {
        return Err(Error::ZeroDimension);
    }
    let max_iter = opts.max_iter.unwrap_or(2000 * dim);
    let tol = T::of(opts.tol);
    let inf = T::max_value().unwrap();
    let mut evaluations = 0usize;
    let mut eval = |x: &DVector<T>| {
        evaluations += 1;
        let f = objective(x);
        if f.finite() {
            f
        } else {
            inf
        }
    };

    let mut start = x0.clone();
    let mut iterations = 0usize;
    let mut history = Vec::new();
    let mut best_so_far: Option<Vertex<T>> = None;
    let mut converged = false;
    let mut spread = inf;
    let (half, two) = (T::of(0.5), T::of(2.0));

    for run in 0..=opts.restarts {
        let mut simplex: Vec<Vertex<T>> = Vec::with_capacity(dim + 1);
        let f0 = match &best_so_far {
            Some(b) if b.x == start => b.f,
            _ => eval(&start),
        };
        simplex.push(Vertex { x: start.clone(), f: f0 });
        for k in 0..dim {
            let mut x = start.clone();
            x[k] += T::of(opts.initial_step);
            let f = eval(&x);
            simplex.push(Vertex { x, f });
        }
        if run == 0 && simplex.iter().all(|v| v.f == inf) {
            return Err(Error::NonFiniteStart);
        }

        converged = false;
        let mut run_iter = 0usize;
        loop {
            simplex.sort_by(|a, b| a.f.partial_cmp(&b.f).unwrap());
            spread = simplex[dim].f - simplex[0].f;
            if spread <= tol {
                converged = true;
                break;
            }
            if run_iter >= max_iter {
                break;
            }
            run_iter += 1;
            iterations += 1;

            let centroid = simplex[..dim]
                .iter()
                .fold(DVector::zeros(dim), |acc, v| acc + &v.x)
                / T::of_usize(dim);
            let worst = &simplex[dim];
            let reflected = &centroid + (&centroid - &worst.x);
            let fr = eval(&reflected);
            if fr < simplex[0].f {
                let expanded = &centroid + (&reflected - &centroid) * two;
                let fe = eval(&expanded);
                simplex[dim] = if fe < fr {
                    Vertex { x: expanded, f: fe }
                } else {
                    Vertex { x: reflected, f: fr }
                };
            } else if fr < simplex[dim - 1].f {
                simplex[dim] = Vertex { x: reflected, f: fr };
            } else {
                let (candidate, fc) = if fr < worst.f {
                    // outside contraction
                    let c = &centroid + (&reflected - &centroid) * half;
                    let f = eval(&c);
                    (c, f)
                } else {
                    // inside contraction
                    let c = &centroid + (&worst.x - &centroid) * half;
                    let f = eval(&c);
                    (c, f)
                };
                if fc < fr.min(worst.f) {
                    simplex[dim] = Vertex { x: candidate, f: fc };
                } else {
                    let best = simplex[0].x.clone();
                    for v in simplex.iter_mut().skip(1) {
                        v.x = &best + (&v.x - &best) * half;
                        v.f = eval(&v.x);
                    }
                }
            }
            let best = simplex.iter().map(|v| v.f).fold(inf, |a, b| a.min(b));
            history.push(best);
        }

        simplex.sort_by(|a, b| a.f.partial_cmp(&b.f).unwrap());
        let best = simplex.swap_remove(0);
        let improved = best_so_far.as_ref().map_or(true, |b| best.f < b.f);
        let prev_best = best_so_far.as_ref().map(|b| b.f);
        if improved {
            start = best.x.clone();
            best_so_far = Some(best);
        }
        // a restart that gains less than tol is the end of the road
        if !converged || prev_best.is_some_and(|p| p - best_so_far.as_ref().unwrap().f <= tol) {
            break;
        }
    }

    let best = best_so_far.expect("at least one run");
    Ok(NelderMeadResult {
        x: best.x,
        value: best.f,
        converged,
        iterations,
        evaluations,
        spread,
        best_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_quadratic() {
        let opts = NelderMeadOptions { tol: 1e-16, ..Default::default() };
        let r = nelder_mead(|x: &DVector<f64>| (x[0] - 3.0).powi(2), &DVector::from_vec(vec![0.0]), &opts).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_with_restarts() {
        let f = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NelderMeadOptions { tol: 1e-14, ..Default::default() };
        let r = nelder_mead(f, &DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r.x);
        // monotone best value
        assert!(r.best_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn iteration_cap() {
        let opts = NelderMeadOptions { max_iter: Some(1), ..Default::default() };
        let r = nelder_mead(|x: &DVector<f64>| x.norm_squared(), &DVector::from_vec(vec![5.0, -4.0]), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn non_finite_start() {
        let r = nelder_mead(|_: &DVector<f64>| f64::NAN, &DVector::from_vec(vec![0.0, 0.0]), &NelderMeadOptions::default());
        assert!(matches!(r, Err(Error::NonFiniteStart)));
    }

    #[test]
    fn recovers_from_infeasible_region() {
        // infinite for x < 0, minimum at 0.5
        let f = |x: &DVector<f64>| if x[0] < 0.0 { f64::INFINITY } else { (x[0] - 0.5).powi(2) };
        let opts = NelderMeadOptions { tol: 1e-14, ..Default::default() };
        let r = nelder_mead(f, &DVector::from_vec(vec![0.0]), &opts).unwrap();
        assert!((r.x[0] - 0.5).abs() < 1e-5);
    }
}
