//! Longitudinal observations grouped into clusters, CSV ingestion and the
//! feasibility report used before variance-component estimation.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linalg::rank;
use crate::{Error, Real, Result};

/// One row: index variable `u`, response `y`, fixed covariates `x` (length p)
/// and random-effect covariates `z` (length q).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T: Real> {
    pub u: T,
    pub y: T,
    pub x: Vec<T>,
    pub z: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<T: Real> {
    pub id: String,
    pub observations: Vec<Observation<T>>,
}

impl<T: Real> Cluster<T> {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// `n_i x q` matrix stacking the `z` rows.
    pub fn z_matrix(&self) -> DMatrix<T> {
        let q = self.observations.first().map_or(0, |o| o.z.len());
        DMatrix::from_fn(self.len(), q, |r, c| self.observations[r].z[c])
    }

    /// `n_i x p` matrix stacking the `x` rows.
    pub fn x_matrix(&self) -> DMatrix<T> {
        let p = self.observations.first().map_or(0, |o| o.x.len());
        DMatrix::from_fn(self.len(), p, |r, c| self.observations[r].x[c])
    }

    pub fn y_vector(&self) -> DVector<T> {
        DVector::from_iterator(self.len(), self.observations.iter().map(|o| o.y))
    }
}

/// Clusters of observations with uniform covariate dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset<T: Real> {
    clusters: Vec<Cluster<T>>,
    p: usize,
    q: usize,
}

impl<T: Real> LongitudinalDataset<T> {
    /// Builds a dataset, checking that every cluster is non-empty, that `x`
    /// and `z` have lengths `p` and `q` everywhere and that all entries are
    /// finite.
    pub fn new(clusters: Vec<Cluster<T>>, p: usize, q: usize) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if p == 0 {
            return Err(Error::Schema("at least one x column is required".into()));
        }
        if q == 0 {
            return Err(Error::Schema("at least one z column is required".into()));
        }
        for c in &clusters {
            if c.is_empty() {
                return Err(Error::InvalidData(format!("cluster `{}` is empty", c.id)));
            }
            for (j, o) in c.observations.iter().enumerate() {
                if o.x.len() != p || o.z.len() != q {
                    return Err(Error::DimensionMismatch(format!(
                        "cluster `{}` observation {j}: expected p={p}, q={q}, got {}, {}",
                        c.id,
                        o.x.len(),
                        o.z.len()
                    )));
                }
                let finite = o.u.finite()
                    && o.y.finite()
                    && o.x.iter().all(|v| v.finite())
                    && o.z.iter().all(|v| v.finite());
                if !finite {
                    return Err(Error::InvalidData(format!(
                        "cluster `{}` observation {j} has a non-finite entry",
                        c.id
                    )));
                }
            }
        }
        Ok(Self { clusters, p, q })
    }

    pub fn clusters(&self) -> &[Cluster<T>] {
        &self.clusters
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of clusters.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations.
    pub fn n(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation<T>> {
        self.clusters.iter().flat_map(|c| c.observations.iter())
    }

    /// Smallest and largest observed `u`.
    pub fn u_range(&self) -> (T, T) {
        self.observations().fold(
            (T::max_value().unwrap(), T::min_value().unwrap()),
            |(lo, hi), o| (lo.min(o.u), hi.max(o.u)),
        )
    }

    /// Distinct observed `u` values in increasing order.
    pub fn distinct_u(&self) -> Vec<T> {
        let mut us: Vec<T> = self.observations().map(|o| o.u).collect();
        us.sort_by(|a, b| a.partial_cmp(b).unwrap());
        us.dedup();
        us
    }

    /// Same design with the responses replaced cluster by cluster.
    pub fn with_responses(&self, y: &[Vec<T>]) -> Result<Self> {
        if y.len() != self.m() || y.iter().zip(&self.clusters).any(|(v, c)| v.len() != c.len()) {
            return Err(Error::DimensionMismatch(
                "response vectors must match cluster sizes".into(),
            ));
        }
        let clusters = self
            .clusters
            .iter()
            .zip(y)
            .map(|(c, ys)| Cluster {
                id: c.id.clone(),
                observations: c
                    .observations
                    .iter()
                    .zip(ys)
                    .map(|(o, &y)| Observation { y, ..o.clone() })
                    .collect(),
            })
            .collect();
        Self::new(clusters, self.p, self.q)
    }

    /// Applies `f` to every observation, keeping the design otherwise intact.
    pub fn map_observations(&self, mut f: impl FnMut(&Observation<T>) -> Observation<T>) -> Result<Self> {
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                id: c.id.clone(),
                observations: c.observations.iter().map(&mut f).collect(),
            })
            .collect();
        Self::new(clusters, self.p, self.q)
    }

    /// Checks the per-cluster conditions needed for variance-component
    /// estimation: `n_i > q` and `rank(Z_i) = q`.
    pub fn validate(&self) -> ValidationReport {
        let q = self.q;
        let mut clusters = Vec::with_capacity(self.m());
        let mut flags = Vec::new();
        for (index, c) in self.clusters.iter().enumerate() {
            let z_rank = rank(&c.z_matrix());
            let mut reasons = Vec::new();
            if c.len() <= q {
                reasons.push(FlagReason::TooFewObservations);
            }
            if z_rank < q {
                reasons.push(FlagReason::RankDeficient);
            }
            if !reasons.is_empty() {
                flags.push(ValidationFlag {
                    index,
                    cluster: c.id.clone(),
                    n: c.len(),
                    reasons,
                });
            }
            clusters.push(ClusterSummary {
                cluster: c.id.clone(),
                n: c.len(),
                z_rank,
            });
        }
        ValidationReport { q, clusters, flags }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    /// `n_i <= q`: no residual degrees of freedom in the per-cluster regression.
    TooFewObservations,
    /// `Z_i^T Z_i` is singular.
    RankDeficient,
}

impl std::fmt::Display for FlagReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlagReason::TooFewObservations => f.write_str("n_i <= q"),
            FlagReason::RankDeficient => f.write_str("Z_i^T Z_i is rank deficient"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationFlag {
    pub index: usize,
    pub cluster: String,
    pub n: usize,
    pub reasons: Vec<FlagReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterSummary {
    pub cluster: String,
    pub n: usize,
    pub z_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub q: usize,
    pub clusters: Vec<ClusterSummary>,
    pub flags: Vec<ValidationFlag>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flagged_indices(&self) -> Vec<usize> {
        self.flags.iter().map(|f| f.index).collect()
    }
}

/// Column names used to read a dataset from CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schema {
    pub cluster: String,
    pub u: String,
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
}

impl Schema {
    /// `cluster,u,y,x1..xp,z1..zq`.
    pub fn standard(p: usize, q: usize) -> Self {
        Self {
            cluster: "cluster".into(),
            u: "u".into(),
            y: "y".into(),
            x: (1..=p).map(|k| format!("x{k}")).collect(),
            z: (1..=q).map(|k| format!("z{k}")).collect(),
        }
    }
}

/// Reads a CSV with a header row. Rows are grouped by the cluster column;
/// clusters appear in order of first appearance and keep file order inside.
pub fn load_csv<T: Real, R: Read>(source: R, schema: &Schema) -> Result<LongitudinalDataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let cluster_col = find(&schema.cluster)?;
    let u_col = find(&schema.u)?;
    let y_col = find(&schema.y)?;
    let x_cols = schema.x.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = schema.z.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut clusters: Vec<Cluster<T>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = record.position().map_or(k + 2, |p| p.line() as usize);
        let cell = |col: usize| -> Result<T> {
            let raw = record.get(col).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[col].to_string(),
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: format!("`{raw}` is not finite"),
                });
            }
            Ok(T::of(v))
        };
        let obs = Observation {
            u: cell(u_col)?,
            y: cell(y_col)?,
            x: x_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?,
            z: z_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?,
        };
        let id = record.get(cluster_col).unwrap_or("").to_string();
        let idx = *by_id.entry(id.clone()).or_insert_with(|| {
            clusters.push(Cluster {
                id,
                observations: Vec::new(),
            });
            clusters.len() - 1
        });
        clusters[idx].observations.push(obs);
    }
    if clusters.is_empty() {
        return Err(Error::EmptyDataset);
    }
    LongitudinalDataset::new(clusters, schema.x.len(), schema.z.len())
}

/// Writes the dataset in the column layout of `schema`. Values use the
/// shortest representation that parses back to the same number.
pub fn write_csv<T: Real, W: Write>(
    ds: &LongitudinalDataset<T>,
    schema: &Schema,
    sink: W,
) -> Result<()> {
    if schema.x.len() != ds.p() || schema.z.len() != ds.q() {
        return Err(Error::Schema(format!(
            "schema has {} x and {} z columns, dataset has p={}, q={}",
            schema.x.len(),
            schema.z.len(),
            ds.p(),
            ds.q()
        )));
    }
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![schema.cluster.clone(), schema.u.clone(), schema.y.clone()];
    header.extend(schema.x.iter().cloned());
    header.extend(schema.z.iter().cloned());
    w.write_record(&header)?;
    for c in ds.clusters() {
        for o in &c.observations {
            let mut rec = vec![c.id.clone(), o.u.to_string(), o.y.to_string()];
            rec.extend(o.x.iter().map(|v| v.to_string()));
            rec.extend(o.z.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
