//! Data-generating processes of the simulation designs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use recov::{Cluster, Dataset, Observation, SymMatrix};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Gaussian,
    /// Errors uniform on `(-sqrt(3) sigma, sqrt(3) sigma)`.
    UniformNoise,
    /// The random-effect design enters through `g(z) = z + 0.1 sin z` while
    /// the recorded covariates stay `z`.
    Misspecified,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Gaussian => "gaussian",
            Scenario::UniformNoise => "uniform_noise",
            Scenario::Misspecified => "misspecified",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Scenario::Gaussian),
            "uniform_noise" | "uniform" => Ok(Scenario::UniformNoise),
            "misspecified" => Ok(Scenario::Misspecified),
            other => Err(SimError::Config(format!(
                "unknown scenario `{other}` (expected gaussian, uniform_noise or misspecified)"
            ))),
        }
    }
}

/// `a_1(u) = sin(2 pi u)`, `a_2(u) = cos(2 pi u)`.
pub fn coefficient(u: f64) -> DVector<f64> {
    let t = 2.0 * PI * u;
    DVector::from_vec(vec![t.sin(), t.cos()])
}

pub fn coefficient_second_derivative(u: f64) -> DVector<f64> {
    coefficient(u) * (-4.0 * PI * PI)
}

/// Number of coefficient functions in the designs.
pub const P: usize = 2;

/// Random stream words reserved per cluster. Far more than any cluster uses.
const CLUSTER_WORDS: u128 = 1 << 40;

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub m: usize,
    pub sigma2: f64,
    #[serde(rename = "Sigma")]
    pub sigma: SymMatrix<f64>,
    pub bandwidth: f64,
    pub seed: u64,
    pub replications: usize,
    /// Index of the first replication; studies cover
    /// `first_replication..first_replication + replications`.
    pub first_replication: usize,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self::with_q(scenario, seed, 2).expect("q = 2 is valid")
    }

    /// Defaults with `q` random effects; the covariance keeps variances 2 and
    /// covariances 1.5.
    pub fn with_q(scenario: Scenario, seed: u64, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(SimError::Config("q must be at least 1".into()));
        }
        let sigma = DMatrix::from_fn(q, q, |r, c| if r == c { 2.0 } else { 1.5 });
        Ok(Self {
            scenario,
            m: 100,
            sigma2: 1.0,
            sigma: SymMatrix::new(sigma)?,
            bandwidth: 0.15,
            seed,
            replications: 100,
            first_replication: 0,
        })
    }

    pub fn q(&self) -> usize {
        self.sigma.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(SimError::Config("at least two clusters are needed".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(SimError::Config("sigma2 must be positive".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(SimError::Config("bandwidth must be positive".into()));
        }
        if self.sigma.min_eigenvalue() < 0.0 {
            return Err(SimError::Config("Sigma must be positive semidefinite".into()));
        }
        Ok(())
    }

    /// `L` with `L L^T = Sigma`; semidefinite matrices factor through their
    /// eigendecomposition.
    fn sigma_root(&self) -> DMatrix<f64> {
        let eig = self.sigma.matrix().clone().symmetric_eigen();
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
    }

    /// One draw of the measurement error.
    pub fn noise(&self, rng: &mut ChaCha20Rng) -> f64 {
        let sd = self.sigma2.sqrt();
        match self.scenario {
            Scenario::Gaussian | Scenario::Misspecified => sd * standard_normal(rng),
            Scenario::UniformNoise => {
                let u: f64 = rng.sample(Open01);
                (2.0 * u - 1.0) * 3f64.sqrt() * sd
            }
        }
    }
}

/// Stream for one cluster of one replication; independent of the order in
/// which clusters or replications are generated.
pub fn cluster_rng(seed: u64, replication: usize, cluster: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng.set_word_pos(cluster as u128 * CLUSTER_WORDS);
    rng
}

/// Standard normal by inversion of the CDF.
pub fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    Normal::standard().inverse_cdf(u)
}

/// `floor(|theta|) + 6` with `theta ~ N(0, 4)`.
pub fn cluster_size(rng: &mut ChaCha20Rng) -> usize {
    (2.0 * standard_normal(rng)).abs().floor() as usize + 6
}

fn link(z: f64) -> f64 {
    z + 0.1 * z.sin()
}

/// Unobserved quantities behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub effects: Vec<DVector<f64>>,
    pub noise: Vec<Vec<f64>>,
}

pub fn generate(cfg: &ScenarioConfig, replication: usize) -> Result<Dataset> {
    generate_with_latent(cfg, replication).map(|(ds, _)| ds)
}

pub fn generate_with_latent(cfg: &ScenarioConfig, replication: usize) -> Result<(Dataset, Latent)> {
    cfg.validate()?;
    let q = cfg.q();
    let root = cfg.sigma_root();
    let mut effects = Vec::with_capacity(cfg.m);
    let mut noise = Vec::with_capacity(cfg.m);
    let clusters = (0..cfg.m)
        .map(|i| {
            let mut rng = cluster_rng(cfg.seed, replication, i);
            let n = cluster_size(&mut rng);
            let e = &root * DVector::from_fn(q, |_, _| standard_normal(&mut rng));
            let mut eps = Vec::with_capacity(n);
            let observations = (0..n)
                .map(|_| {
                    let u: f64 = rng.sample(Open01);
                    let x: Vec<f64> = (0..P).map(|_| standard_normal(&mut rng)).collect();
                    let z: Vec<f64> = (0..q).map(|_| standard_normal(&mut rng)).collect();
                    let err = cfg.noise(&mut rng);
                    let a = coefficient(u);
                    let mean: f64 = x.iter().zip(a.iter()).map(|(x, a)| x * a).sum();
                    let random: f64 = match cfg.scenario {
                        Scenario::Misspecified => z.iter().zip(e.iter()).map(|(z, e)| link(*z) * e).sum(),
                        _ => z.iter().zip(e.iter()).map(|(z, e)| z * e).sum(),
                    };
                    eps.push(err);
                    Observation { u, y: mean + random + err, x, z }
                })
                .collect();
            effects.push(e);
            noise.push(eps);
            Cluster {
                id: format!("{}", i + 1),
                observations,
            }
        })
        .collect();
    let ds = Dataset::new(clusters, P, q)?;
    Ok((ds, Latent { effects, noise }))
}
