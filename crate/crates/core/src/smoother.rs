//! Local polynomial kernel estimation of the coefficient functions `a(u)`
//! under working independence, and the residuals `r_ij = y_ij - X_ij^T a(U_ij)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::kernel::KernelSpec;
use crate::linalg::solve_checked;
use crate::{Error, LongitudinalDataset, Real, Result};

/// How `a(U_ij)` is obtained when computing residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Fit at every distinct observed `U_ij`.
    #[default]
    Exact,
    /// Fit on an equally spaced grid of the given size over the observed
    /// range and interpolate linearly.
    Grid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SmootherOptions {
    /// Add `1e-8 * trace / dim` to the diagonal of a singular local moment
    /// matrix instead of failing.
    pub ridge: bool,
    pub eval_mode: EvalMode,
}

/// Result of one local fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit<T: Real> {
    /// `coefficients[k]` estimates `a^(k)(u) / k!`.
    pub coefficients: Vec<DVector<T>>,
    pub ridged: bool,
}

impl<T: Real> LocalFit<T> {
    pub fn value(&self) -> &DVector<T> {
        &self.coefficients[0]
    }

    pub fn slope(&self) -> &DVector<T> {
        &self.coefficients[1]
    }
}

/// Dataset flattened and sorted by `u` for window queries.
#[derive(Debug, Clone)]
pub struct Smoother<T: Real> {
    p: usize,
    u: Vec<T>,
    y: Vec<T>,
    x: Vec<T>,
    lo: T,
    hi: T,
}

impl<T: Real> Smoother<T> {
    pub fn new(ds: &LongitudinalDataset<T>) -> Self {
        let p = ds.p();
        let mut rows: Vec<(T, T, &[T])> = ds.observations().map(|o| (o.u, o.y, o.x.as_slice())).collect();
        // stable sort keeps file order among ties so sums are reproducible
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (lo, hi) = ds.u_range();
        Self {
            p,
            u: rows.iter().map(|r| r.0).collect(),
            y: rows.iter().map(|r| r.1).collect(),
            x: rows.iter().flat_map(|r| r.2.iter().copied()).collect(),
            lo,
            hi,
        }
    }

    pub fn range(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    /// Weighted least squares of `y` on `X ⊗ (1, t, ..., t^degree)` with
    /// `t = U - u`, weights `K_h(t)`.
    pub fn fit_polynomial(
        &self,
        u: T,
        kernel: &KernelSpec<T>,
        degree: usize,
        ridge: bool,
    ) -> Result<LocalFit<T>> {
        if u < self.lo || u > self.hi {
            return Err(Error::OutOfRange {
                u: u.to_f64_lossy(),
                lo: self.lo.to_f64_lossy(),
                hi: self.hi.to_f64_lossy(),
            });
        }
        let h = kernel.bandwidth;
        let p = self.p;
        let dim = p * (degree + 1);
        let start = self.u.partition_point(|&v| v < u - h);
        let end = self.u.partition_point(|&v| v <= u + h);

        // powers of the scaled offset s = t/h keep the system well conditioned
        let mut gram = DMatrix::<T>::zeros(dim, dim);
        let mut rhs = DVector::<T>::zeros(dim);
        let mut row = vec![T::zero(); dim];
        let mut support = 0usize;
        for k in start..end {
            let t = self.u[k] - u;
            let w = kernel.weight(t);
            if w <= T::zero() {
                continue;
            }
            support += 1;
            let s = t / h;
            let xk = &self.x[k * p..(k + 1) * p];
            let mut pow = T::one();
            for d in 0..=degree {
                for (j, &xv) in xk.iter().enumerate() {
                    row[d * p + j] = xv * pow;
                }
                pow *= s;
            }
            for a in 0..dim {
                let wa = w * row[a];
                rhs[a] += wa * self.y[k];
                for b in 0..=a {
                    gram[(a, b)] += wa * row[b];
                }
            }
        }
        if support == 0 {
            return Err(Error::EmptyWindow {
                u: u.to_f64_lossy(),
                h: h.to_f64_lossy(),
            });
        }
        for a in 0..dim {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        let (theta, ridged) = match solve_checked(&gram, &rhs) {
            Some(theta) => (theta, false),
            None if ridge => {
                let eps = T::of(1e-8) * gram.trace() / T::of_usize(dim);
                let mut g = gram.clone();
                for a in 0..dim {
                    g[(a, a)] += eps;
                }
                match solve_checked(&g, &rhs) {
                    Some(theta) => (theta, true),
                    None => return Err(Error::SingularWindow { u: u.to_f64_lossy() }),
                }
            }
            None => return Err(Error::SingularWindow { u: u.to_f64_lossy() }),
        };
        let mut scale = T::one();
        let coefficients = (0..=degree)
            .map(|d| {
                let c = DVector::from_iterator(p, (0..p).map(|j| theta[d * p + j] / scale));
                scale *= h;
                c
            })
            .collect();
        Ok(LocalFit {
            coefficients,
            ridged,
        })
    }

    /// Local linear fit at `u`: returns `(a_hat, b_hat)`.
    pub fn fit_at(&self, u: T, kernel: &KernelSpec<T>, ridge: bool) -> Result<LocalFit<T>> {
        self.fit_polynomial(u, kernel, 1, ridge)
    }

    /// Local fits at each point (in parallel), reporting the first failure
    /// in point order.
    pub(crate) fn fit_many(
        &self,
        points: &[T],
        kernel: &KernelSpec<T>,
        degree: usize,
        ridge: bool,
    ) -> Result<Vec<LocalFit<T>>> {
        let fits: Vec<Result<LocalFit<T>>> = points
            .par_iter()
            .map(|&u| {
                self.fit_polynomial(u, kernel, degree, ridge)
                    .map_err(|e| Error::at_point(u.to_f64_lossy(), e))
            })
            .collect();
        fits.into_iter().collect()
    }
}

/// Local linear estimate `(a_hat(u), b_hat(u))` minimizing the kernel-weighted
/// squared error over all observations.
pub fn local_linear_fit<T: Real>(
    ds: &LongitudinalDataset<T>,
    u: T,
    kernel: &KernelSpec<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let fit = Smoother::new(ds).fit_at(u, kernel, false)?;
    let mut c = fit.coefficients.into_iter();
    Ok((c.next().unwrap(), c.next().unwrap()))
}

/// Estimated coefficient functions and first derivatives on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientCurve<T: Real> {
    eval_points: Vec<T>,
    /// `points x p`
    values: DMatrix<T>,
    /// `points x p`
    slopes: DMatrix<T>,
    /// Indices of points where the ridge fallback was used.
    ridged: Vec<usize>,
}

impl<T: Real> CoefficientCurve<T> {
    pub fn eval_points(&self) -> &[T] {
        &self.eval_points
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn slopes(&self) -> &DMatrix<T> {
        &self.slopes
    }

    pub fn ridged_points(&self) -> &[usize] {
        &self.ridged
    }

    pub fn len(&self) -> usize {
        self.eval_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval_points.is_empty()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    /// `a_hat(u)`: the stored value when `u` is an evaluation point, linear
    /// interpolation between neighbours otherwise.
    pub fn value_at(&self, u: T) -> Result<DVector<T>> {
        let pts = &self.eval_points;
        let (lo, hi) = (pts[0], pts[pts.len() - 1]);
        if u < lo || u > hi {
            return Err(Error::OutOfRange {
                u: u.to_f64_lossy(),
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
        let k = pts.partition_point(|&v| v < u);
        if pts[k] == u {
            return Ok(self.values.row(k).transpose());
        }
        let (u0, u1) = (pts[k - 1], pts[k]);
        let w = (u - u0) / (u1 - u0);
        Ok(self.values.row(k - 1).transpose() * (T::one() - w) + self.values.row(k).transpose() * w)
    }

    /// CSV with columns `u,a1..ap,b1..bp`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let p = self.p();
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["u".to_string()];
        header.extend((1..=p).map(|k| format!("a{k}")));
        header.extend((1..=p).map(|k| format!("b{k}")));
        w.write_record(&header)?;
        for (i, u) in self.eval_points.iter().enumerate() {
            let mut rec = vec![u.to_string()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            rec.extend(self.slopes.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the local linear estimate at each point; `None` means every
/// distinct observed `u`. Points are sorted and deduplicated.
pub fn fit_curve<T: Real>(
    ds: &LongitudinalDataset<T>,
    kernel: &KernelSpec<T>,
    eval_points: Option<&[T]>,
    options: SmootherOptions,
) -> Result<CoefficientCurve<T>> {
    let smoother = Smoother::new(ds);
    let points = match eval_points {
        Some(pts) => {
            if pts.iter().any(|v| !v.finite()) {
                return Err(Error::InvalidData("evaluation points must be finite".into()));
            }
            let mut pts = pts.to_vec();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            pts
        }
        None => ds.distinct_u(),
    };
    curve_on(&smoother, kernel, points, options.ridge)
}

fn curve_on<T: Real>(
    smoother: &Smoother<T>,
    kernel: &KernelSpec<T>,
    points: Vec<T>,
    ridge: bool,
) -> Result<CoefficientCurve<T>> {
    let p = smoother.p;
    let fits = smoother.fit_many(&points, kernel, 1, ridge)?;
    let mut values = DMatrix::zeros(points.len(), p);
    let mut slopes = DMatrix::zeros(points.len(), p);
    let mut ridged = Vec::new();
    for (i, fit) in fits.iter().enumerate() {
        values.row_mut(i).copy_from(&fit.value().transpose());
        slopes.row_mut(i).copy_from(&fit.slope().transpose());
        if fit.ridged {
            ridged.push(i);
        }
    }
    Ok(CoefficientCurve {
        eval_points: points,
        values,
        slopes,
        ridged,
    })
}

/// Equally spaced grid of `size` points covering `[lo, hi]`.
pub fn uniform_grid<T: Real>(lo: T, hi: T, size: usize) -> Vec<T> {
    match size {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / T::of_usize(size - 1);
            (0..size)
                .map(|k| if k + 1 == size { hi } else { lo + step * T::of_usize(k) })
                .collect()
        }
    }
}

/// Curve used for residuals: every distinct observed `u` in exact mode, an
/// equally spaced grid over the observed range otherwise.
pub fn residual_curve<T: Real>(
    ds: &LongitudinalDataset<T>,
    kernel: &KernelSpec<T>,
    options: SmootherOptions,
) -> Result<CoefficientCurve<T>> {
    let smoother = Smoother::new(ds);
    let points = match options.eval_mode {
        EvalMode::Exact => ds.distinct_u(),
        EvalMode::Grid(size) => {
            if size < 2 {
                return Err(Error::InvalidData("grid size must be at least 2".into()));
            }
            let (lo, hi) = smoother.range();
            uniform_grid(lo, hi, size)
        }
    };
    curve_on(&smoother, kernel, points, options.ridge)
}

/// Per-cluster residual vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet<T: Real> {
    pub per_cluster: Vec<DVector<T>>,
}

impl<T: Real> ResidualSet<T> {
    pub fn scale(&self, c: T) -> Self {
        Self {
            per_cluster: self.per_cluster.iter().map(|r| r * c).collect(),
        }
    }
}

/// `r_ij = y_ij - X_ij^T a_hat(U_ij)` with `a_hat` read off the curve.
pub fn residuals<T: Real>(
    ds: &LongitudinalDataset<T>,
    curve: &CoefficientCurve<T>,
) -> Result<ResidualSet<T>> {
    residuals_with(ds, |u| curve.value_at(u))
}

/// Residuals against an arbitrary coefficient function, e.g. the truth.
pub fn residuals_with<T: Real>(
    ds: &LongitudinalDataset<T>,
    a: impl Fn(T) -> Result<DVector<T>>,
) -> Result<ResidualSet<T>> {
    let per_cluster = ds
        .clusters()
        .iter()
        .map(|c| {
            c.observations
                .iter()
                .map(|o| {
                    let av = a(o.u)?;
                    Ok(o.y - o.x.iter().zip(av.iter()).map(|(&x, &a)| x * a).sum::<T>())
                })
                .collect::<Result<Vec<T>>>()
                .map(DVector::from_vec)
        })
        .collect::<Result<_>>()?;
    Ok(ResidualSet { per_cluster })
}
