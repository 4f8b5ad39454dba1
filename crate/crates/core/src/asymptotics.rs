//! Plug-in versions of the leading bias and asymptotic variance of the
//! closed-form estimators, usable as diagnostics and approximate standard errors.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::LongitudinalDataset;
use crate::kernel::{kernel_moments, KernelMoments, KernelSpec};
use crate::linalg::{vec as vec_of, DuplicationMap, SymMatrix};
use crate::smoother::Smoother;
use crate::variance::{within_residuals, EffectEstimates, PipelineFit, ProjectionSet, VarianceComponents};
use crate::{Error, Real, Result};

/// Estimated `a''` on the distinct observed `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureCurve<T: Real> {
    points: Vec<T>,
    /// `points x p`
    values: DMatrix<T>,
}

impl<T: Real> CurvatureCurve<T> {
    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn value_at(&self, u: T) -> Result<DVector<T>> {
        let k = self.points.partition_point(|&v| v < u);
        match self.points.get(k) {
            Some(&v) if v == u => Ok(self.values.row(k).transpose()),
            _ => Err(Error::OutOfRange {
                u: u.to_f64_lossy(),
                lo: self.points.first().map_or(f64::NAN, |v| v.to_f64_lossy()),
                hi: self.points.last().map_or(f64::NAN, |v| v.to_f64_lossy()),
            }),
        }
    }
}

/// Local cubic fit with the same kernel at bandwidth `2h` at every distinct
/// observed `u`; `a''` is twice the quadratic coefficient.
pub fn second_derivative_curve<T: Real>(
    ds: &LongitudinalDataset<T>,
    kernel: &KernelSpec<T>,
) -> Result<CurvatureCurve<T>> {
    let wide = kernel.with_bandwidth(kernel.bandwidth * T::of(2.0))?;
    let smoother = Smoother::new(ds);
    let points = ds.distinct_u();
    let p = ds.p();
    let h = wide.bandwidth;
    // a cubic in each of the p coefficients needs at least 4p points
    let mut sorted: Vec<T> = ds.observations().map(|o| o.u).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &u in &points {
        let inside = sorted.partition_point(|&v| v < u + h) - sorted.partition_point(|&v| v <= u - h);
        if inside < 4 * p {
            return Err(Error::at_point(
                u.to_f64_lossy(),
                Error::InvalidData(format!(
                    "local cubic needs {} observations within {} but found {inside}",
                    4 * p,
                    h
                )),
            ));
        }
    }
    let fits = smoother.fit_many(&points, &wide, 3, false)?;
    let mut values = DMatrix::zeros(points.len(), p);
    for (i, fit) in fits.iter().enumerate() {
        values.row_mut(i).copy_from(&(&fit.coefficients[2] * T::of(2.0)).transpose());
    }
    Ok(CurvatureCurve { points, values })
}

/// `eta_i = (X_i1^T a''(U_i1), ..., X_in_i^T a''(U_in_i))` for every cluster.
pub fn eta<T: Real>(
    ds: &LongitudinalDataset<T>,
    a_dd: impl Fn(T) -> Result<DVector<T>>,
) -> Result<Vec<DVector<T>>> {
    ds.clusters()
        .iter()
        .map(|c| {
            c.observations
                .iter()
                .map(|o| {
                    let a = a_dd(o.u)?;
                    Ok(o.x.iter().zip(a.iter()).map(|(&x, &v)| x * v).sum())
                })
                .collect::<Result<Vec<T>>>()
                .map(DVector::from_vec)
        })
        .collect()
}

/// Curvature-driven bias quantities.
#[derive(Debug, Clone, Serialize)]
pub struct BiasTerms<T: Real> {
    /// `(n - qm)^-1 sum eta_i^T Q_i eta_i`
    pub b: T,
    /// `m^-1 sum (Z_i^T Z_i)^-1`
    #[serde(rename = "B1")]
    pub b1: SymMatrix<T>,
    /// `m^-1 sum G_i Z_i^T eta_i eta_i^T Z_i G_i` with `G_i = (Z_i^T Z_i)^-1`
    #[serde(rename = "B2")]
    pub b2: SymMatrix<T>,
}

/// `eta` is indexed by dataset cluster, as returned by [`eta`].
pub fn bias_terms<T: Real>(proj: &ProjectionSet<T>, eta: &[DVector<T>]) -> Result<BiasTerms<T>> {
    let q = proj.q;
    let mut quad = T::zero();
    let mut b2 = DMatrix::<T>::zeros(q, q);
    for c in &proj.clusters {
        let e = eta.get(c.index).filter(|e| e.len() == c.n()).ok_or_else(|| {
            Error::DimensionMismatch(format!("eta does not match cluster `{}`", c.id))
        })?;
        let qe = &c.annihilator * e;
        quad += qe.norm_squared();
        let g = &c.gram_inv * (c.z.transpose() * e);
        b2 += &g * g.transpose();
    }
    Ok(BiasTerms {
        b: quad / T::of_usize(proj.residual_df()),
        b1: SymMatrix::from_symmetric(proj.mean_gram_inverse()),
        b2: SymMatrix::from_symmetric(b2 / T::of_usize(proj.m())),
    })
}

/// Design constants of the limiting variances.
#[derive(Debug, Clone, Serialize)]
pub struct DesignConstants<T: Real> {
    pub gamma_hat: T,
    /// `n / (n - qm)`
    pub c1: T,
    /// `n / m`
    pub c2: T,
    /// `m^-1 sum (Z_i^T Z_i)^-1`
    #[serde(rename = "Gamma_hat")]
    pub gamma_matrix: SymMatrix<T>,
}

/// Sample analogues of `gamma`, `c1`, `c2` and `Gamma`.
pub fn gamma_c_constants<T: Real>(proj: &ProjectionSet<T>) -> DesignConstants<T> {
    let n = T::of_usize(proj.n());
    let m = T::of_usize(proj.m());
    let df = T::of_usize(proj.residual_df());
    let q = T::of_usize(proj.q);
    let lev2: T = proj
        .clusters
        .iter()
        .flat_map(|c| c.leverages().iter().map(|&l| l * l).collect::<Vec<_>>())
        .sum();
    let c1 = n / df;
    let c2 = n / m;
    DesignConstants {
        gamma_hat: lev2 / df - c1 * q / c2 + T::one(),
        c1,
        c2,
        gamma_matrix: SymMatrix::from_symmetric(proj.mean_gram_inverse()),
    }
}

/// Variance of squared within-cluster residuals `(Q_i r_i)_j^2` around
/// `sigma2`, normalized by `n - qm`.
pub fn squared_residual_variance<T: Real>(
    res: &crate::smoother::ResidualSet<T>,
    proj: &ProjectionSet<T>,
    sigma2: T,
) -> Result<T> {
    let within = within_residuals(res, proj)?;
    let ss: T = within
        .iter()
        .flat_map(|e| e.iter().map(|&v| (v * v - sigma2) * (v * v - sigma2)).collect::<Vec<_>>())
        .sum();
    Ok(ss / T::of_usize(proj.residual_df()))
}

/// `1/4 h^4 ((mu1 mu3 - mu2^2) / (mu0 mu2 - mu1^2))^2`.
fn bias_factor<T: Real>(moments: &KernelMoments<T>, h: T) -> Result<T> {
    let ratio = moments.bias_ratio()?;
    Ok(T::of(0.25) * h.powi(4) * ratio * ratio)
}

/// Leading bias and plug-in standard error of `sigma2`.
pub fn sigma2_inference<T: Real>(
    sigma2: T,
    bias: &BiasTerms<T>,
    consts: &DesignConstants<T>,
    moments: &KernelMoments<T>,
    h: T,
    var_eps2: T,
    n: usize,
) -> Result<(T, T)> {
    let bias_sigma2 = bias_factor(moments, h)? * bias.b;
    let g = consts.gamma_hat;
    let two = T::of(2.0);
    let avar = two * sigma2 * sigma2 * (T::one() + g) * consts.c1 + var_eps2 * g * consts.c1;
    Ok((bias_sigma2, (avar / T::of_usize(n)).max(T::zero()).sqrt()))
}

/// Leading bias of `vech(Sigma)` and plug-in standard errors from the
/// sandwich `(R^T R)^-1 R^T Delta R (R^T R)^-1 c2 / n`.
pub struct SigmaInference<T: Real> {
    pub bias: DVector<T>,
    pub se: DVector<T>,
    /// `q^2 x q^2` plug-in `Delta`.
    pub delta: DMatrix<T>,
    /// Covariance of `vech(Sigma_hat)`.
    pub covariance: DMatrix<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn sigma_inference<T: Real>(
    vc: &VarianceComponents<T>,
    eff: &EffectEstimates<T>,
    proj: &ProjectionSet<T>,
    bias: &BiasTerms<T>,
    consts: &DesignConstants<T>,
    moments: &KernelMoments<T>,
    h: T,
    var_eps2: T,
) -> Result<SigmaInference<T>> {
    let q = proj.q;
    let qq = q * q;
    let m = T::of_usize(proj.m());
    let n = proj.n();
    let factor = bias_factor(moments, h)?;
    let bias_vec = (bias.b2.vech() - bias.b1.vech() * bias.b) * factor;

    let sigma = vc.sigma_raw.matrix();
    let gamma = consts.gamma_matrix.matrix();
    let s2 = vc.sigma2;
    let two = T::of(2.0);

    // fourth moments of the effects, with estimated effects plugged in
    let mut e4 = DMatrix::<T>::zeros(qq, qq);
    for e in &eff.effects {
        let ee = e * e.transpose();
        e4 += ee.kronecker(&ee);
    }
    e4 /= m;
    let vs = vec_of(sigma);
    let vg = vec_of(gamma);

    // Delta_1: block row r is Sigma ⊗ Gamma_(r) + Gamma ⊗ Sigma_(r)
    let mut delta1 = DMatrix::<T>::zeros(qq, qq);
    for r in 0..q {
        let block = sigma.kronecker(&gamma.row(r)) + gamma.kronecker(&sigma.row(r));
        delta1.view_mut((r * q, 0), (q, qq)).copy_from(&block);
    }

    let mut delta2 = DMatrix::<T>::zeros(qq, qq);
    let mut delta3 = DMatrix::<T>::zeros(qq, qq);
    for c in &proj.clusters {
        let vgi = vec_of(&c.gram_inv);
        delta2 += &vgi * vgi.transpose();
        for j in 0..c.n() {
            let a = &c.gram_inv * c.z.row(j).transpose();
            let v = vec_of(&(&a * a.transpose()));
            delta3 += &v * v.transpose();
        }
    }
    delta2 /= m;
    delta3 /= m;

    let ratio = consts.c1 / consts.c2;
    let g = consts.gamma_hat;
    let gg = &vg * vg.transpose();
    let delta = e4 - &vs * vs.transpose()
        + (sigma.kronecker(gamma) + gamma.kronecker(sigma) + delta1) * s2
        + (delta2 - &delta3 + &gg * (ratio * (T::one() + g))) * (two * s2 * s2)
        + (delta3 + gg * (ratio * g)) * var_eps2;
    let delta = (&delta + delta.transpose()) * T::of(0.5);

    let dup = DuplicationMap::<T>::new(q)?;
    let left = dup.left_inverse();
    let covariance = &left * &delta * left.transpose() * (consts.c2 / T::of_usize(n));
    let se = covariance.diagonal().map(|v| v.max(T::zero()).sqrt());
    Ok(SigmaInference {
        bias: bias_vec,
        se,
        delta,
        covariance,
    })
}

/// Where `a''` comes from.
pub enum Curvature<'a, T: Real> {
    /// Local cubic estimate.
    Estimated,
    /// A known second derivative (simulation studies).
    Supplied(&'a dyn Fn(T) -> DVector<T>),
}

/// All diagnostics for a fitted pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticDiagnostics<T: Real> {
    pub mu: [T; 4],
    pub b: T,
    #[serde(rename = "B1")]
    pub b1: SymMatrix<T>,
    #[serde(rename = "B2")]
    pub b2: SymMatrix<T>,
    pub gamma_hat: T,
    pub c1: T,
    pub c2: T,
    #[serde(rename = "Gamma_hat")]
    pub gamma_matrix: SymMatrix<T>,
    pub var_eps2: T,
    pub bias_sigma2: T,
    pub se_sigma2: T,
    #[serde(rename = "bias_Sigma", serialize_with = "ser_vec")]
    pub bias_sigma: DVector<T>,
    #[serde(rename = "se_Sigma", serialize_with = "ser_vec")]
    pub se_sigma: DVector<T>,
}

fn ser_vec<T: Real, S: serde::Serializer>(v: &DVector<T>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let out: Vec<f64> = v.iter().map(|x| x.to_f64_lossy()).collect();
    out.serialize(s)
}

pub fn diagnostics<T: Real>(
    ds: &LongitudinalDataset<T>,
    fit: &PipelineFit<T>,
    kernel: &KernelSpec<T>,
    curvature: Curvature<'_, T>,
) -> Result<AsymptoticDiagnostics<T>> {
    let moments = kernel_moments::<T>(&kernel.kind)?;
    let etas = match curvature {
        Curvature::Estimated => {
            let curve = second_derivative_curve(ds, kernel)?;
            eta(ds, |u| curve.value_at(u))?
        }
        Curvature::Supplied(f) => eta(ds, |u| Ok(f(u)))?,
    };
    let proj = &fit.projections;
    let bias = bias_terms(proj, &etas)?;
    let consts = gamma_c_constants(proj);
    let vc = &fit.components;
    let var_eps2 = squared_residual_variance(&fit.residuals, proj, vc.sigma2)?;
    let h = kernel.bandwidth;
    let (bias_sigma2, se_sigma2) =
        sigma2_inference(vc.sigma2, &bias, &consts, &moments, h, var_eps2, proj.n())?;
    let inf = sigma_inference(vc, &fit.effects, proj, &bias, &consts, &moments, h, var_eps2)?;
    Ok(AsymptoticDiagnostics {
        mu: [moments.mu0, moments.mu1, moments.mu2, moments.mu3],
        b: bias.b,
        b1: bias.b1,
        b2: bias.b2,
        gamma_hat: consts.gamma_hat,
        c1: consts.c1,
        c2: consts.c2,
        gamma_matrix: consts.gamma_matrix,
        var_eps2,
        bias_sigma2,
        se_sigma2,
        bias_sigma: inf.bias,
        se_sigma: inf.se,
    })
}
