//! Cubic B-spline estimation of the coefficient functions, under working
//! independence (ordinary least squares) or weighted by the estimated
//! within-cluster covariance (generalized least squares).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::LongitudinalDataset;
use crate::linalg::{solve_checked, SymMatrix};
use crate::variance::VarianceComponents;
use crate::{Error, Real, Result};

/// Clamped B-spline basis with equally spaced interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSpec<T: Real> {
    pub degree: usize,
    pub n_interior_knots: usize,
    pub lo: T,
    pub hi: T,
    knots: Vec<T>,
}

impl<T: Real> SplineSpec<T> {
    pub fn new(degree: usize, n_interior_knots: usize, lo: T, hi: T) -> Result<Self> {
        if !(lo < hi) || !lo.finite() || !hi.finite() {
            return Err(Error::InvalidData(format!(
                "spline interval [{lo}, {hi}] is empty or not finite"
            )));
        }
        let mut knots = vec![lo; degree + 1];
        let step = (hi - lo) / T::of_usize(n_interior_knots + 1);
        knots.extend((1..=n_interior_knots).map(|k| lo + step * T::of_usize(k)));
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self {
            degree,
            n_interior_knots,
            lo,
            hi,
            knots,
        })
    }

    /// Cubic spline over `[min U, max U]` of the dataset.
    pub fn cubic_for(ds: &LongitudinalDataset<T>, n_interior_knots: usize) -> Result<Self> {
        let (lo, hi) = ds.u_range();
        Self::new(3, n_interior_knots, lo, hi)
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.n_interior_knots + self.degree + 1
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Values of all basis functions at `u` by the Cox-de Boor recursion.
    pub fn basis(&self, u: T) -> Result<DVector<T>> {
        if u < self.lo || u > self.hi || !u.finite() {
            return Err(Error::OutOfRange {
                u: u.to_f64_lossy(),
                lo: self.lo.to_f64_lossy(),
                hi: self.hi.to_f64_lossy(),
            });
        }
        let d = self.degree;
        let t = &self.knots;
        // knot span with t[span] <= u < t[span + 1]; the right end uses the last span
        let last = self.dim() - 1;
        let span = if u >= self.hi {
            last
        } else {
            t.partition_point(|&k| k <= u) - 1
        };
        let mut n = vec![T::zero(); d + 1];
        let mut left = vec![T::zero(); d + 1];
        let mut right = vec![T::zero(); d + 1];
        n[0] = T::one();
        for j in 1..=d {
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = DVector::zeros(self.dim());
        for (k, v) in n.into_iter().enumerate() {
            out[span - d + k] = v;
        }
        Ok(out)
    }
}

/// Per-cluster design matrices with rows `(x_1 B(u), ..., x_p B(u))`.
pub fn spline_design<T: Real>(ds: &LongitudinalDataset<T>, spec: &SplineSpec<T>) -> Result<Vec<DMatrix<T>>> {
    let dim = spec.dim();
    let p = ds.p();
    ds.clusters()
        .iter()
        .map(|c| {
            let mut b = DMatrix::zeros(c.len(), p * dim);
            for (j, o) in c.observations.iter().enumerate() {
                let basis = spec.basis(o.u)?;
                for (l, &x) in o.x.iter().enumerate() {
                    for k in 0..dim {
                        b[(j, l * dim + k)] = x * basis[k];
                    }
                }
            }
            Ok(b)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitMode {
    /// Working independence.
    #[serde(rename = "WI")]
    WorkingIndependence,
    /// Weighted by `V_i = Z_i Sigma Z_i^T + sigma^2 I`.
    #[serde(rename = "WLS")]
    Weighted,
}

#[derive(Debug, Clone)]
pub struct Weighting<T: Real> {
    pub sigma: SymMatrix<T>,
    pub sigma2: T,
    /// Clusters whose `V_i` needed diagonal jitter.
    pub jittered: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SplineFit<T: Real> {
    pub spec: SplineSpec<T>,
    /// `dim x p`, column `l` holds the spline coefficients of `a_l`.
    pub coefficients: DMatrix<T>,
    pub mode: FitMode,
    pub weighting: Option<Weighting<T>>,
}

impl<T: Real> SplineFit<T> {
    pub fn evaluate(&self, u: T) -> Result<DVector<T>> {
        let b = self.spec.basis(u)?;
        Ok(self.coefficients.transpose() * b)
    }

    /// `a_l` on a grid.
    pub fn curve(&self, grid: &[T], l: usize) -> Result<Vec<T>> {
        grid.iter().map(|&u| Ok(self.evaluate(u)?[l])).collect()
    }

    /// CSV `u,a1..ap` on the given grid.
    pub fn write_csv<W: Write>(&self, grid: &[T], sink: W) -> Result<()> {
        let p = self.coefficients.ncols();
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["u".to_string()];
        header.extend((1..=p).map(|k| format!("a{k}")));
        w.write_record(&header)?;
        for &u in grid {
            let mut rec = vec![u.to_string()];
            rec.extend(self.evaluate(u)?.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn unstack<T: Real>(theta: &DVector<T>, dim: usize, p: usize) -> DMatrix<T> {
    DMatrix::from_fn(dim, p, |k, l| theta[l * dim + k])
}

/// Solves the normal equations accumulated over clusters.
fn solve_normal<T: Real>(gram: &DMatrix<T>, rhs: &DVector<T>, what: &str) -> Result<DVector<T>> {
    solve_checked(gram, rhs).ok_or_else(|| {
        Error::RankDeficient(format!("{what}: {} columns", gram.ncols()))
    })
}

/// Ordinary least squares over all observations, ignoring clustering.
pub fn fit_wi<T: Real>(ds: &LongitudinalDataset<T>, spec: &SplineSpec<T>) -> Result<SplineFit<T>> {
    let design = spline_design(ds, spec)?;
    let cols = spec.dim() * ds.p();
    if ds.n() < cols {
        return Err(Error::RankDeficient(format!(
            "{cols} spline columns but only {} observations",
            ds.n()
        )));
    }
    let mut gram = DMatrix::zeros(cols, cols);
    let mut rhs = DVector::zeros(cols);
    for (b, c) in design.iter().zip(ds.clusters()) {
        gram += b.transpose() * b;
        rhs += b.transpose() * c.y_vector();
    }
    let theta = solve_normal(&gram, &rhs, "working-independence design")?;
    Ok(SplineFit {
        spec: spec.clone(),
        coefficients: unstack(&theta, spec.dim(), ds.p()),
        mode: FitMode::WorkingIndependence,
        weighting: None,
    })
}

/// `V_i^-1` for `V_i = Z_i Sigma Z_i^T + sigma2 I`, retrying once with
/// `1e-8 tr(V_i)/n_i` added to the diagonal. Returns the inverse and whether
/// jitter was needed.
pub(crate) fn cluster_precision<T: Real>(
    z: &DMatrix<T>,
    sigma: &DMatrix<T>,
    sigma2: T,
) -> Option<(DMatrix<T>, bool)> {
    let n = z.nrows();
    let v = z * sigma * z.transpose() + DMatrix::identity(n, n) * sigma2;
    if let Some(chol) = v.clone().cholesky() {
        return Some((chol.inverse(), false));
    }
    let jitter = T::of(1e-8) * v.trace() / T::of_usize(n);
    let vj = v + DMatrix::identity(n, n) * jitter;
    vj.cholesky().map(|c| (c.inverse(), true))
}

/// Generalized least squares with block-diagonal weight `V_i^-1`, using the
/// PSD-projected covariance estimate.
pub fn fit_wls<T: Real>(
    ds: &LongitudinalDataset<T>,
    spec: &SplineSpec<T>,
    vc: &VarianceComponents<T>,
) -> Result<SplineFit<T>> {
    if vc.q() != ds.q() {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{} but q = {}",
            vc.q(),
            vc.q(),
            ds.q()
        )));
    }
    let design = spline_design(ds, spec)?;
    let cols = spec.dim() * ds.p();
    let sigma = vc.sigma_psd.matrix();
    let mut gram = DMatrix::zeros(cols, cols);
    let mut rhs = DVector::zeros(cols);
    let mut jittered = Vec::new();
    for (b, c) in design.iter().zip(ds.clusters()) {
        let (w, jit) = cluster_precision(&c.z_matrix(), sigma, vc.sigma2).ok_or_else(|| {
            Error::SingularCovariance {
                cluster: c.id.clone(),
            }
        })?;
        if jit {
            jittered.push(c.id.clone());
        }
        let btw = b.transpose() * w;
        gram += &btw * b;
        rhs += btw * c.y_vector();
    }
    let gram = (&gram + gram.transpose()) * T::of(0.5);
    let theta = solve_normal(&gram, &rhs, "weighted design")?;
    Ok(SplineFit {
        spec: spec.clone(),
        coefficients: unstack(&theta, spec.dim(), ds.p()),
        mode: FitMode::Weighted,
        weighting: Some(Weighting {
            sigma: vc.sigma_psd.clone(),
            sigma2: vc.sigma2,
            jittered,
        }),
    })
}

/// Integrated squared difference by the trapezoid rule on `grid`.
pub fn mise<T: Real>(grid: &[T], estimate: &[T], truth: &[T]) -> Result<T> {
    if grid.len() != estimate.len() || grid.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} points, estimate {}, truth {}",
            grid.len(),
            estimate.len(),
            truth.len()
        )));
    }
    if grid.len() < 2 {
        return Err(Error::InvalidData("integration grid needs two points".into()));
    }
    let sq: Vec<T> = estimate.iter().zip(truth).map(|(&a, &b)| (a - b) * (a - b)).collect();
    let half = T::of(0.5);
    Ok(grid
        .windows(2)
        .zip(sq.windows(2))
        .map(|(u, s)| (u[1] - u[0]) * (s[0] + s[1]) * half)
        .sum())
}

/// Relative improvement `(mise_wi - mise_wls) / mise_wls`; `None` when
/// `mise_wls` is zero.
pub fn imp<T: Real>(mise_wi: T, mise_wls: T) -> Option<T> {
    (mise_wls != T::zero()).then(|| (mise_wi - mise_wls) / mise_wls)
}
