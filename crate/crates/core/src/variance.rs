//! Closed-form estimation of the noise variance `sigma^2` and the random-effect
//! covariance `Sigma` from working-independence residuals.
//!
//! Each cluster's residuals follow the synthetic regression `r_i = Z_i e_i + eps_i`.
//! Pooling the within-cluster residual sums of squares gives
//! `sigma2 = sum_i r_i^T Q_i r_i / (n - q m)`. The per-cluster least-squares
//! effects then give
//! `Sigma = m^-1 sum_i e_i e_i^T - m^-1 sigma2 sum_i (Z_i^T Z_i)^-1`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{FlagReason, LongitudinalDataset};
use crate::kernel::KernelSpec;
use crate::linalg::{rank, spd_inverse, SymMatrix};
use crate::smoother::{residual_curve, residuals, CoefficientCurve, ResidualSet, SmootherOptions};
use crate::{Error, Real, Result};

/// Per-cluster projection onto the column space of `Z_i`.
#[derive(Debug, Clone)]
pub struct ClusterProjection<T: Real> {
    /// Position of the cluster in the dataset.
    pub index: usize,
    pub id: String,
    pub z: DMatrix<T>,
    /// `Z_i^T Z_i`
    pub gram: DMatrix<T>,
    pub gram_inv: DMatrix<T>,
    /// `P_i = Z_i (Z_i^T Z_i)^-1 Z_i^T`
    pub hat: DMatrix<T>,
    /// `Q_i = I - P_i`
    pub annihilator: DMatrix<T>,
}

impl<T: Real> ClusterProjection<T> {
    fn new(index: usize, id: &str, z: DMatrix<T>) -> Option<Self> {
        let gram = z.transpose() * &z;
        let gram_inv = spd_inverse(&gram)?;
        let hat = &z * &gram_inv * z.transpose();
        let hat = (&hat + hat.transpose()) * T::of(0.5);
        let n = z.nrows();
        let annihilator = DMatrix::identity(n, n) - &hat;
        Some(Self {
            index,
            id: id.to_string(),
            z,
            gram,
            gram_inv,
            hat,
            annihilator,
        })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// Leverages `Z_ij^T (Z_i^T Z_i)^-1 Z_ij`, the diagonal of `P_i`.
    pub fn leverages(&self) -> DVector<T> {
        self.hat.diagonal()
    }
}

/// What to do with clusters that fail `n_i > q` or `rank(Z_i) = q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterPolicy {
    /// Fail naming the first offending cluster.
    Strict,
    /// Drop them from variance-component estimation and record them.
    #[default]
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedCluster {
    pub index: usize,
    pub cluster: String,
    pub reason: FlagReason,
}

/// Projections for every usable cluster.
#[derive(Debug, Clone)]
pub struct ProjectionSet<T: Real> {
    pub q: usize,
    pub clusters: Vec<ClusterProjection<T>>,
    pub excluded: Vec<ExcludedCluster>,
}

impl<T: Real> ProjectionSet<T> {
    /// Number of clusters used.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    /// Observations in the clusters used.
    pub fn n(&self) -> usize {
        self.clusters.iter().map(ClusterProjection::n).sum()
    }

    /// `n - q m`, the pooled synthetic degrees of freedom.
    pub fn residual_df(&self) -> usize {
        self.n() - self.q * self.m()
    }

    /// `m^-1 sum_i (Z_i^T Z_i)^-1`.
    pub fn mean_gram_inverse(&self) -> DMatrix<T> {
        let mut acc = DMatrix::zeros(self.q, self.q);
        for c in &self.clusters {
            acc += &c.gram_inv;
        }
        acc / T::of_usize(self.m())
    }
}

/// Builds `Z_i^T Z_i`, its inverse, `P_i` and `Q_i` for each cluster.
pub fn cluster_projections<T: Real>(
    ds: &LongitudinalDataset<T>,
    policy: ClusterPolicy,
) -> Result<ProjectionSet<T>> {
    let q = ds.q();
    let mut clusters = Vec::with_capacity(ds.m());
    let mut excluded = Vec::new();
    for (index, c) in ds.clusters().iter().enumerate() {
        let z = c.z_matrix();
        let reason = if c.len() <= q {
            Some(FlagReason::TooFewObservations)
        } else if rank(&z) < q {
            Some(FlagReason::RankDeficient)
        } else {
            None
        };
        let built = match reason {
            None => ClusterProjection::new(index, &c.id, z),
            Some(_) => None,
        };
        match built {
            Some(proj) => clusters.push(proj),
            None => {
                let reason = reason.unwrap_or(FlagReason::RankDeficient);
                if policy == ClusterPolicy::Strict {
                    return Err(Error::Cluster {
                        cluster: c.id.clone(),
                        reason: reason.to_string(),
                    });
                }
                excluded.push(ExcludedCluster {
                    index,
                    cluster: c.id.clone(),
                    reason,
                });
            }
        }
    }
    if clusters.is_empty() {
        return Err(Error::InvalidData(
            "no cluster satisfies n_i > q with full-rank Z_i".into(),
        ));
    }
    Ok(ProjectionSet {
        q,
        clusters,
        excluded,
    })
}

fn residual_for<'a, T: Real>(res: &'a ResidualSet<T>, c: &ClusterProjection<T>) -> Result<&'a DVector<T>> {
    let r = res.per_cluster.get(c.index).ok_or_else(|| {
        Error::DimensionMismatch(format!("no residuals for cluster `{}`", c.id))
    })?;
    if r.len() != c.n() {
        return Err(Error::DimensionMismatch(format!(
            "cluster `{}` has {} observations but {} residuals",
            c.id,
            c.n(),
            r.len()
        )));
    }
    Ok(r)
}

/// Within-cluster residuals `Q_i r_i` for each used cluster.
pub fn within_residuals<T: Real>(res: &ResidualSet<T>, proj: &ProjectionSet<T>) -> Result<Vec<DVector<T>>> {
    proj.clusters
        .iter()
        .map(|c| {
            let r = residual_for(res, c)?;
            Ok(&c.annihilator * r)
        })
        .collect()
}

/// `sigma2 = (n - q m)^-1 sum_i r_i^T Q_i r_i`.
pub fn estimate_sigma2<T: Real>(res: &ResidualSet<T>, proj: &ProjectionSet<T>) -> Result<T> {
    let (n, qm) = (proj.n(), proj.q * proj.m());
    if n <= qm {
        return Err(Error::DegreesOfFreedom { n, qm });
    }
    // r^T Q r = |Q r|^2 since Q is a symmetric idempotent
    let rss: T = within_residuals(res, proj)?
        .iter()
        .map(|e| e.norm_squared())
        .sum();
    Ok(rss / T::of_usize(n - qm))
}

/// Least-squares random effects `e_i = (Z_i^T Z_i)^-1 Z_i^T r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimates<T: Real> {
    pub ids: Vec<String>,
    pub effects: Vec<DVector<T>>,
}

impl<T: Real> EffectEstimates<T> {
    /// CSV keyed by cluster id: `cluster,e1..eq`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let q = self.effects.first().map_or(0, |e| e.len());
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["cluster".to_string()];
        header.extend((1..=q).map(|k| format!("e{k}")));
        w.write_record(&header)?;
        for (id, e) in self.ids.iter().zip(&self.effects) {
            let mut rec = vec![id.clone()];
            rec.extend(e.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn estimate_effects<T: Real>(res: &ResidualSet<T>, proj: &ProjectionSet<T>) -> Result<EffectEstimates<T>> {
    let mut ids = Vec::with_capacity(proj.m());
    let mut effects = Vec::with_capacity(proj.m());
    for c in &proj.clusters {
        let r = residual_for(res, c)?;
        ids.push(c.id.clone());
        effects.push(&c.gram_inv * (c.z.transpose() * r));
    }
    Ok(EffectEstimates { ids, effects })
}

/// Estimated variance components.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceComponents<T: Real> {
    /// `max(sigma2_raw, 0)`
    pub sigma2: T,
    pub sigma2_raw: T,
    /// The moment-corrected estimate; may be indefinite.
    pub sigma_raw: SymMatrix<T>,
    /// Eigenvalue-clipped projection of `sigma_raw`.
    pub sigma_psd: SymMatrix<T>,
    /// Correlations from `sigma_psd`; NaN (null in JSON) where a variance vanishes.
    pub correlation: SymMatrix<T>,
    pub excluded_clusters: Vec<String>,
}

impl<T: Real> VarianceComponents<T> {
    /// Components fixed by hand, e.g. for identity weighting in spline WLS.
    pub fn fixed(sigma: SymMatrix<T>, sigma2: T) -> Self {
        let sigma_psd = sigma.psd_projection();
        Self {
            sigma2,
            sigma2_raw: sigma2,
            correlation: sigma_psd.correlation(),
            sigma_raw: sigma,
            sigma_psd,
            excluded_clusters: Vec::new(),
        }
    }

    pub fn q(&self) -> usize {
        self.sigma_raw.dim()
    }
}

/// `Sigma = m^-1 sum e_i e_i^T - m^-1 sigma2 sum (Z_i^T Z_i)^-1`.
pub fn estimate_sigma<T: Real>(
    eff: &EffectEstimates<T>,
    sigma2: T,
    proj: &ProjectionSet<T>,
) -> Result<VarianceComponents<T>> {
    let m = proj.m();
    if m < 2 {
        return Err(Error::TooFewClusters { needed: 2, have: m });
    }
    if eff.effects.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} effect estimates for {m} clusters",
            eff.effects.len()
        )));
    }
    let q = proj.q;
    let mut moment = DMatrix::<T>::zeros(q, q);
    for e in &eff.effects {
        moment += e * e.transpose();
    }
    let moment = moment / T::of_usize(m);
    let raw = moment - proj.mean_gram_inverse() * sigma2;
    let sigma_raw = SymMatrix::from_symmetric(raw);
    let sigma_psd = sigma_raw.psd_projection();
    Ok(VarianceComponents {
        sigma2: sigma2.max(T::zero()),
        sigma2_raw: sigma2,
        correlation: sigma_psd.correlation(),
        sigma_raw,
        sigma_psd,
        excluded_clusters: proj.excluded.iter().map(|e| e.cluster.clone()).collect(),
    })
}

/// Variance components from a given residual set.
pub fn components_from_residuals<T: Real>(
    res: &ResidualSet<T>,
    proj: &ProjectionSet<T>,
) -> Result<(VarianceComponents<T>, EffectEstimates<T>)> {
    let sigma2 = estimate_sigma2(res, proj).map_err(|e| Error::stage("sigma2", e))?;
    let effects = estimate_effects(res, proj).map_err(|e| Error::stage("effects", e))?;
    let vc = estimate_sigma(&effects, sigma2, proj).map_err(|e| Error::stage("Sigma", e))?;
    Ok((vc, effects))
}

/// Everything produced by [`fit_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineFit<T: Real> {
    pub curve: CoefficientCurve<T>,
    pub residuals: ResidualSet<T>,
    pub projections: ProjectionSet<T>,
    pub effects: EffectEstimates<T>,
    pub components: VarianceComponents<T>,
}

/// Smooth under working independence, then estimate `sigma^2`, then `Sigma`.
pub fn fit_pipeline<T: Real>(
    ds: &LongitudinalDataset<T>,
    kernel: &KernelSpec<T>,
    options: SmootherOptions,
    policy: ClusterPolicy,
) -> Result<PipelineFit<T>> {
    let projections = cluster_projections(ds, policy).map_err(|e| Error::stage("projections", e))?;
    let curve = residual_curve(ds, kernel, options).map_err(|e| Error::stage("smoothing", e))?;
    let res = residuals(ds, &curve).map_err(|e| Error::stage("residuals", e))?;
    let (components, effects) = components_from_residuals(&res, &projections)?;
    Ok(PipelineFit {
        curve,
        residuals: res,
        projections,
        effects,
        components,
    })
}
