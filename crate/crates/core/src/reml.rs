//! Restricted maximum likelihood for the variance components with B-spline
//! coefficient functions, maximized by the downhill simplex.
//!
//! `Sigma` is parameterized by its Cholesky factor with log-diagonal, so any
//! parameter vector decodes to a PSD matrix; `sigma^2` is on the log scale.
//! Spline coefficients are profiled out by GLS at every evaluation.

use nalgebra::{DMatrix, DVector};

use crate::data::LongitudinalDataset;
use crate::linalg::{vech_len, SymMatrix};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::spline::{spline_design, SplineSpec};
use crate::variance::VarianceComponents;
use crate::{Error, Real, Result};

/// Value returned where the likelihood is undefined.
pub const PENALTY: f64 = 1e100;

/// Unconstrained REML parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RemlParams<T: Real> {
    pub q: usize,
    /// Lower triangle of the Cholesky factor in vech order with the
    /// diagonal on the log scale, followed by `log sigma^2`.
    pub theta: DVector<T>,
}

impl<T: Real> RemlParams<T> {
    pub fn from_vector(q: usize, theta: DVector<T>) -> Result<Self> {
        if theta.len() != vech_len(q) + 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} REML parameters for q = {q}, got {}",
                vech_len(q) + 1,
                theta.len()
            )));
        }
        Ok(Self { q, theta })
    }

    /// Encodes a positive definite `Sigma` (a small ridge is added when it
    /// is only semidefinite) and a positive `sigma2`.
    pub fn encode(sigma: &SymMatrix<T>, sigma2: T) -> Result<Self> {
        let q = sigma.dim();
        let mut a = sigma.matrix().clone();
        let chol = match a.clone().cholesky() {
            Some(c) => c,
            None => {
                let ridge = (a.trace() / T::of_usize(q)).max(T::one()) * T::of(1e-4);
                for k in 0..q {
                    a[(k, k)] += ridge;
                }
                a.cholesky().ok_or_else(|| {
                    Error::InvalidData("initial covariance is not positive semidefinite".into())
                })?
            }
        };
        let l = chol.l();
        let mut theta = Vec::with_capacity(vech_len(q) + 1);
        for c in 0..q {
            for r in c..q {
                theta.push(if r == c { l[(r, c)].ln() } else { l[(r, c)] });
            }
        }
        let s2 = if sigma2 > T::zero() { sigma2 } else { T::of(1e-6) };
        theta.push(s2.ln());
        Ok(Self {
            q,
            theta: DVector::from_vec(theta),
        })
    }

    /// `(Sigma, sigma2)`.
    pub fn decode(&self) -> (SymMatrix<T>, T) {
        let q = self.q;
        let mut l = DMatrix::zeros(q, q);
        let mut k = 0;
        for c in 0..q {
            for r in c..q {
                l[(r, c)] = if r == c { self.theta[k].exp() } else { self.theta[k] };
                k += 1;
            }
        }
        let sigma = SymMatrix::from_symmetric(&l * l.transpose());
        (sigma, self.theta[k].exp())
    }
}

/// Data prepared for repeated likelihood evaluation.
pub struct RemlProblem<T: Real> {
    q: usize,
    p: usize,
    spec: SplineSpec<T>,
    z: Vec<DMatrix<T>>,
    b: Vec<DMatrix<T>>,
    y: Vec<DVector<T>>,
}

/// Likelihood pieces at one parameter value.
pub struct RemlEvaluation<T: Real> {
    pub neg_loglik: T,
    pub beta: DVector<T>,
}

impl<T: Real> RemlProblem<T> {
    pub fn new(ds: &LongitudinalDataset<T>, spec: &SplineSpec<T>) -> Result<Self> {
        let b = spline_design(ds, spec)?;
        let cols = spec.dim() * ds.p();
        if ds.n() <= cols {
            return Err(Error::RankDeficient(format!(
                "{cols} spline columns but only {} observations",
                ds.n()
            )));
        }
        Ok(Self {
            q: ds.q(),
            p: ds.p(),
            spec: spec.clone(),
            z: ds.clusters().iter().map(|c| c.z_matrix()).collect(),
            b,
            y: ds.clusters().iter().map(|c| c.y_vector()).collect(),
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// `sum log|V_i| + log|B^T V^-1 B| + r^T V^-1 r` with `r` the GLS residual,
    /// or `None` when some matrix is not positive definite.
    pub fn evaluate(&self, sigma: &DMatrix<T>, sigma2: T) -> Option<RemlEvaluation<T>> {
        let cols = self.b[0].ncols();
        let mut logdet = T::zero();
        let mut gram = DMatrix::<T>::zeros(cols, cols);
        let mut rhs = DVector::<T>::zeros(cols);
        let mut chols = Vec::with_capacity(self.z.len());
        for ((z, b), y) in self.z.iter().zip(&self.b).zip(&self.y) {
            let n = z.nrows();
            let v = z * sigma * z.transpose() + DMatrix::identity(n, n) * sigma2;
            let chol = v.cholesky()?;
            let l = chol.l_dirty();
            for k in 0..n {
                logdet += l[(k, k)].ln();
            }
            let wb = chol.solve(b);
            gram += b.transpose() * &wb;
            rhs += wb.transpose() * y;
            chols.push(chol);
        }
        logdet *= T::of(2.0);
        let gram = (&gram + gram.transpose()) * T::of(0.5);
        let gchol = gram.cholesky()?;
        let beta = gchol.solve(&rhs);
        let lg = gchol.l_dirty();
        let mut logdet_gram = T::zero();
        for k in 0..cols {
            logdet_gram += lg[(k, k)].ln();
        }
        logdet_gram *= T::of(2.0);
        let mut quad = T::zero();
        for ((chol, b), y) in chols.iter().zip(&self.b).zip(&self.y) {
            let r = y - b * &beta;
            quad += r.dot(&chol.solve(&r));
        }
        let value = logdet + logdet_gram + quad;
        value.finite().then_some(RemlEvaluation {
            neg_loglik: value,
            beta,
        })
    }

    /// Objective on the unconstrained parameters; undefined points map to
    /// [`PENALTY`].
    pub fn objective(&self, theta: &DVector<T>) -> T {
        let params = RemlParams {
            q: self.q,
            theta: theta.clone(),
        };
        let (sigma, sigma2) = params.decode();
        self.evaluate(sigma.matrix(), sigma2)
            .map_or(T::of(PENALTY), |e| e.neg_loglik)
    }
}

/// `-2` times the restricted log-likelihood (constants dropped).
pub fn reml_negloglik<T: Real>(
    params: &RemlParams<T>,
    ds: &LongitudinalDataset<T>,
    spec: &SplineSpec<T>,
) -> Result<T> {
    let problem = RemlProblem::new(ds, spec)?;
    Ok(problem.objective(&params.theta))
}

#[derive(Debug, Clone)]
pub struct RemlFit<T: Real> {
    pub sigma: SymMatrix<T>,
    pub sigma2: T,
    /// `dim x p`
    pub spline_coefficients: DMatrix<T>,
    pub neg_loglik: T,
    /// Objective at the starting point.
    pub initial_neg_loglik: T,
    pub converged: bool,
    pub iterations: usize,
    pub simplex_spread: T,
    pub warnings: Vec<String>,
}

/// Maximizes the restricted likelihood starting from `init` (typically the
/// closed-form estimates) or from `Sigma = I`, `sigma2 = var(y)`.
pub fn fit_reml<T: Real>(
    ds: &LongitudinalDataset<T>,
    spec: &SplineSpec<T>,
    init: Option<&VarianceComponents<T>>,
    opts: &NelderMeadOptions,
) -> Result<RemlFit<T>> {
    let q = ds.q();
    let mut warnings = Vec::new();
    if q > 3 {
        warnings.push(format!(
            "q = {q}: simplex REML is unreliable beyond three random effects"
        ));
    }
    let problem = RemlProblem::new(ds, spec)?;
    let start = match init {
        Some(vc) => RemlParams::encode(&vc.sigma_psd, vc.sigma2)?,
        None => {
            let n = T::of_usize(ds.n());
            let mean = ds.observations().map(|o| o.y).sum::<T>() / n;
            let var = ds.observations().map(|o| (o.y - mean) * (o.y - mean)).sum::<T>() / (n - T::one());
            RemlParams::encode(&SymMatrix::identity(q), var)?
        }
    };
    let initial = problem.objective(&start.theta);
    let result = nelder_mead(|x| problem.objective(x), &start.theta, opts)?;
    let params = RemlParams {
        q,
        theta: result.x.clone(),
    };
    let (sigma, sigma2) = params.decode();
    let eval = problem
        .evaluate(sigma.matrix(), sigma2)
        .ok_or_else(|| Error::InvalidData("REML optimum is not a valid covariance".into()))?;
    let dim = problem.spec.dim();
    let coefficients = DMatrix::from_fn(dim, problem.p, |k, l| eval.beta[l * dim + k]);
    Ok(RemlFit {
        sigma,
        sigma2,
        spline_coefficients: coefficients,
        neg_loglik: eval.neg_loglik,
        initial_neg_loglik: initial,
        converged: result.converged,
        iterations: result.iterations,
        simplex_spread: result.spread,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_is_psd_and_encode_inverts() {
        let sigma = SymMatrix::new(DMatrix::<f64>::from_row_slice(2, 2, &[2.0, 1.5, 1.5, 2.0])).unwrap();
        let p = RemlParams::encode(&sigma, 0.7).unwrap();
        let (s, s2) = p.decode();
        assert!((s.matrix() - sigma.matrix()).amax() < 1e-12);
        assert!((s2 - 0.7).abs() < 1e-12);
        let any = RemlParams::from_vector(3, DVector::from_vec(vec![-3.0, 5.0, -2.0, 4.0, 0.1, 9.0, -1.0])).unwrap();
        assert!(any.decode().0.min_eigenvalue() >= -1e-9);
        assert!(RemlParams::<f64>::from_vector(2, DVector::zeros(3)).is_err());
    }

    #[test]
    fn semidefinite_start_is_ridged() {
        let sigma = SymMatrix::new(DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let p = RemlParams::encode(&sigma, 1.0).unwrap();
        assert!((p.decode().0.matrix() - sigma.matrix()).amax() < 1e-3);
    }
}
