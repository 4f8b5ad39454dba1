#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use recov::{Cluster, Dataset, Observation};

pub struct Design {
    pub m: usize,
    pub sizes: std::ops::RangeInclusive<usize>,
    pub p: usize,
    pub q: usize,
    /// First column of `x` is the constant 1.
    pub intercept: bool,
    pub sigma: Vec<f64>,
    pub noise_sd: f64,
}

impl Default for Design {
    fn default() -> Self {
        Self {
            m: 30,
            sizes: 4..=9,
            p: 2,
            q: 2,
            intercept: false,
            sigma: vec![1.0, 0.5, 0.5, 1.0],
            noise_sd: 1.0,
        }
    }
}

pub fn truth(u: f64) -> [f64; 3] {
    let t = 2.0 * std::f64::consts::PI * u;
    [t.sin(), t.cos(), 0.5 + u * u]
}

/// Draws a dataset from the mixed model with `a` taken from [`truth`].
pub fn simulate(design: &Design, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let q = design.q;
    let l = DMatrix::from_row_slice(q, q, &design.sigma)
        .cholesky()
        .expect("design covariance must be positive definite")
        .l();
    let clusters = (0..design.m)
        .map(|i| {
            let n = rng.gen_range(design.sizes.clone());
            let e = &l * DVector::from_fn(q, |_, _| normal(&mut rng));
            let observations = (0..n)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let x: Vec<f64> = (0..design.p)
                        .map(|k| if k == 0 && design.intercept { 1.0 } else { normal(&mut rng) })
                        .collect();
                    let z: Vec<f64> = (0..q).map(|_| normal(&mut rng)).collect();
                    let a = truth(u);
                    let mean: f64 = x.iter().enumerate().map(|(k, xk)| xk * a[k % 3]).sum();
                    let re: f64 = z.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
                    let y = mean + re + design.noise_sd * normal(&mut rng);
                    Observation { u, y, x, z }
                })
                .collect();
            Cluster {
                id: format!("c{i}"),
                observations,
            }
        })
        .collect();
    Dataset::new(clusters, design.p, q).unwrap()
}

/// Block-diagonal stacking of per-cluster matrices.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, blocks[0].ncols());
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
    }
    out
}

pub fn stacked_y(ds: &Dataset) -> DVector<f64> {
    DVector::from_iterator(ds.n(), ds.observations().map(|o| o.y))
}

/// Dense inverse by LU, independent of the Cholesky paths in the library.
pub fn lu_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().lu().try_inverse().expect("oracle matrix must be invertible")
}

/// Relative error, falling back to absolute error for magnitudes below 1.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
