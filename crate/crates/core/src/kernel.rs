//! Kernels supported on `[-1, 1]` and their moments `mu_i = int t^i K(t) dt`.

use serde::Serialize;

use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    /// `0.75 (1 - t^2)_+`
    Epanechnikov,
    /// `1/2` on `[-1, 1]`
    Uniform,
    /// `(1 - |t|)_+`
    Triangular,
    /// Values on an equally spaced grid over `[-1, 1]` (first value at -1,
    /// last at 1), linearly interpolated.
    Tabulated(Vec<f64>),
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Uniform => "uniform",
            KernelKind::Triangular => "triangular",
            KernelKind::Tabulated(_) => "tabulated",
        }
    }

    /// `K(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let a = t.abs();
        match self {
            KernelKind::Epanechnikov => {
                if a < 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
            KernelKind::Uniform => {
                if a <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelKind::Triangular => (1.0 - a).max(0.0),
            KernelKind::Tabulated(values) => {
                if a > 1.0 || values.len() < 2 {
                    return 0.0;
                }
                let step = 2.0 / (values.len() - 1) as f64;
                let pos = (t + 1.0) / step;
                let k = (pos.floor() as usize).min(values.len() - 2);
                let w = pos - k as f64;
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }

    fn closed_form_moments(&self) -> Option<[f64; 4]> {
        match self {
            KernelKind::Epanechnikov => Some([1.0, 0.0, 0.2, 0.0]),
            KernelKind::Uniform => Some([1.0, 0.0, 1.0 / 3.0, 0.0]),
            KernelKind::Triangular => Some([1.0, 0.0, 1.0 / 6.0, 0.0]),
            KernelKind::Tabulated(_) => None,
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(KernelKind::Epanechnikov),
            "uniform" | "box" => Ok(KernelKind::Uniform),
            "triangular" | "triangle" => Ok(KernelKind::Triangular),
            other => Err(Error::InvalidKernel(format!(
                "unknown kernel `{other}` (tabulated kernels are built from a value table)"
            ))),
        }
    }
}

/// A kernel together with its bandwidth; weights are `K_h(d) = K(d/h)/h`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<T: Real> {
    pub kind: KernelKind,
    pub bandwidth: T,
}

impl<T: Real> KernelSpec<T> {
    pub fn new(kind: KernelKind, bandwidth: T) -> Result<Self> {
        let h = bandwidth.to_f64_lossy();
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidBandwidth(h));
        }
        if let KernelKind::Tabulated(v) = &kind {
            if v.len() < 2 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidKernel(
                    "a tabulated kernel needs at least two finite values".into(),
                ));
            }
        }
        Ok(Self { kind, bandwidth })
    }

    pub fn epanechnikov(bandwidth: T) -> Result<Self> {
        Self::new(KernelKind::Epanechnikov, bandwidth)
    }

    /// Bandwidth from the rate rule `h = c * n^(-1/8)`.
    pub fn from_rate_rule(kind: KernelKind, c: f64, n: usize) -> Result<Self> {
        Self::new(kind, T::of(c * (n as f64).powf(-0.125)))
    }

    pub fn with_bandwidth(&self, bandwidth: T) -> Result<Self> {
        Self::new(self.kind.clone(), bandwidth)
    }

    /// `K_h(d)`.
    #[inline]
    pub fn weight(&self, d: T) -> T {
        let h = self.bandwidth;
        T::of(self.kind.eval((d / h).to_f64_lossy())) / h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelMoments<T: Real> {
    pub mu0: T,
    pub mu1: T,
    pub mu2: T,
    pub mu3: T,
}

impl<T: Real> KernelMoments<T> {
    /// `mu0 mu2 - mu1^2`.
    pub fn determinant(&self) -> T {
        self.mu0 * self.mu2 - self.mu1 * self.mu1
    }

    /// `(mu1 mu3 - mu2^2) / (mu0 mu2 - mu1^2)`, the constant in the leading
    /// bias of the local-linear residual variance.
    pub fn bias_ratio(&self) -> Result<T> {
        let det = self.determinant();
        if det <= T::zero() {
            return Err(Error::DegenerateKernel(det.to_f64_lossy()));
        }
        Ok((self.mu1 * self.mu3 - self.mu2 * self.mu2) / det)
    }
}

/// Kernel moments `mu_0..mu_3`, closed form for the named kernels and by
/// adaptive Simpson quadrature (tolerance 1e-12) for tabulated ones.
pub fn kernel_moments<T: Real>(kind: &KernelKind) -> Result<KernelMoments<T>> {
    let mu = match kind.closed_form_moments() {
        Some(mu) => mu,
        None => {
            let KernelKind::Tabulated(values) = kind else {
                unreachable!()
            };
            // integrate segment by segment: the integrand is smooth on each
            let nodes = values.len() - 1;
            let step = 2.0 / nodes as f64;
            let mut mu = [0.0; 4];
            for (i, m) in mu.iter_mut().enumerate() {
                *m = (0..nodes)
                    .map(|k| {
                        let a = -1.0 + k as f64 * step;
                        let b = if k + 1 == nodes { 1.0 } else { a + step };
                        adaptive_simpson(&|t: f64| t.powi(i as i32) * kind.eval(t), a, b, 1e-12)
                    })
                    .sum();
            }
            mu
        }
    };
    if (mu[0] - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidKernel(format!(
            "kernel integrates to {} instead of 1",
            mu[0]
        )));
    }
    let m = KernelMoments {
        mu0: T::of(mu[0]),
        mu1: T::of(mu[1]),
        mu2: T::of(mu[2]),
        mu3: T::of(mu[3]),
    };
    if m.determinant() <= T::zero() {
        return Err(Error::DegenerateKernel(m.determinant().to_f64_lossy()));
    }
    Ok(m)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: composite Gauss-Legendre (5 points) on many panels.
    fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let nodes = [
            (0.0, 128.0 / 225.0),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        let w = (b - a) / panels as f64;
        (0..panels)
            .map(|k| {
                let lo = a + k as f64 * w;
                nodes
                    .iter()
                    .map(|(x, wt)| wt * f(lo + 0.5 * w * (x + 1.0)))
                    .sum::<f64>()
                    * 0.5
                    * w
            })
            .sum()
    }

    #[test]
    fn epanechnikov_moments() {
        let m = kernel_moments::<f64>(&KernelKind::Epanechnikov).unwrap();
        assert_eq!((m.mu0, m.mu1, m.mu3), (1.0, 0.0, 0.0));
        let oracle = gauss_legendre(|t| t * t * 0.75 * (1.0 - t * t), -1.0, 1.0, 64);
        assert!((oracle - 0.2).abs() < 1e-12);
        assert!((m.mu2 - oracle).abs() < 1e-10);
    }

    #[test]
    fn uniform_and_triangular_moments() {
        let u = kernel_moments::<f64>(&KernelKind::Uniform).unwrap();
        let oracle = gauss_legendre(|t| t * t * 0.5, -1.0, 1.0, 8);
        assert!((u.mu2 - oracle).abs() < 1e-12);
        assert!((u.mu2 - 1.0 / 3.0).abs() < 1e-15);
        let tri = kernel_moments::<f64>(&KernelKind::Triangular).unwrap();
        let oracle = gauss_legendre(|t| t * t * (1.0 - t.abs()), -1.0, 1.0, 64);
        assert!((tri.mu2 - oracle).abs() < 1e-12);
    }

    #[test]
    fn tabulated_kernel_moments_by_quadrature() {
        let grid: Vec<f64> = (0..=400)
            .map(|k| {
                let t = -1.0 + k as f64 / 200.0;
                0.75 * (1.0 - t * t)
            })
            .collect();
        // linear interpolation loses mass; the raw table is not a density
        assert!(kernel_moments::<f64>(&KernelKind::Tabulated(grid.clone())).is_err());
        // the trapezoid rule is exact for the interpolant
        let mass = (grid.iter().sum::<f64>() - 0.5 * (grid[0] + grid[400])) / 200.0;
        let kind = KernelKind::Tabulated(grid.iter().map(|v| v / mass).collect());
        let m = kernel_moments::<f64>(&kind).unwrap();
        let oracle: Vec<f64> = (0..4)
            .map(|i| gauss_legendre(|t| t.powi(i) * kind.eval(t), -1.0, 1.0, 4000))
            .collect();
        for (got, want) in [m.mu0, m.mu1, m.mu2, m.mu3].iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        // symmetric table: odd moments vanish
        assert!(m.mu1.abs() < 1e-10 && m.mu3.abs() < 1e-10);
        // interpolation of the parabola is close to the exact kernel
        assert!((m.mu2 - 0.2).abs() < 1e-4);
    }

    #[test]
    fn unnormalized_table_rejected() {
        let kind = KernelKind::Tabulated(vec![1.0, 1.0, 1.0]);
        assert!(matches!(
            kernel_moments::<f64>(&kind),
            Err(Error::InvalidKernel(_))
        ));
    }

    #[test]
    fn epanechnikov_vanishes_at_edge() {
        assert_eq!(KernelKind::Epanechnikov.eval(1.0), 0.0);
        assert_eq!(KernelKind::Epanechnikov.eval(-1.0), 0.0);
        assert_eq!(KernelKind::Epanechnikov.eval(0.0), 0.75);
        let k = KernelSpec::epanechnikov(0.5).unwrap();
        assert_eq!(k.weight(0.0), 1.5);
    }

    #[test]
    fn bandwidth_validation_and_rule() {
        assert!(KernelSpec::<f64>::epanechnikov(0.0).is_err());
        assert!(KernelSpec::<f64>::epanechnikov(f64::NAN).is_err());
        let k = KernelSpec::<f64>::from_rate_rule(KernelKind::Epanechnikov, 1.0, 256).unwrap();
        assert!((k.bandwidth - 0.5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_kernel_ratio() {
        let m = kernel_moments::<f64>(&KernelKind::Epanechnikov).unwrap();
        assert!((m.bias_ratio().unwrap() + 0.2).abs() < 1e-15);
    }
}
