//! Clamped B-spline bases with a curvature penalty.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotRule {
    /// Interior knots at quantiles of the pooled observation times.
    Quantile,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Number of basis functions per smooth.
    pub dim: usize,
    pub degree: usize,
    pub knots: KnotRule,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            dim: 10,
            degree: 3,
            knots: KnotRule::Quantile,
        }
    }
}

impl BasisSpec {
    pub fn check(&self) -> Result<()> {
        if self.dim < self.degree + 1 {
            return Err(Error::Config(alloc::format!(
                "basis dimension {} below degree + 1 = {}",
                self.dim,
                self.degree + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    /// Full clamped knot vector, length `dim + degree + 1`.
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Builds the basis over the range of `times`.
    pub fn new(spec: &BasisSpec, times: &[f64]) -> Result<Self> {
        spec.check()?;
        let mut sorted: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
        if sorted.is_empty() {
            return Err(Error::InvalidData("no finite observation times".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return Err(Error::InvalidData(
                "observation times span a single point".into(),
            ));
        }
        let n_interior = spec.dim - spec.degree - 1;
        let uniform = |k: usize| lo + (hi - lo) * k as f64 / (n_interior + 1) as f64;
        let mut interior: Vec<f64> = match spec.knots {
            KnotRule::Uniform => (1..=n_interior).map(uniform).collect(),
            KnotRule::Quantile => (1..=n_interior)
                .map(|k| quantile(&sorted, k as f64 / (n_interior + 1) as f64))
                .collect(),
        };
        let strictly_inside =
            interior.windows(2).all(|w| w[0] < w[1]) && interior.iter().all(|&k| k > lo && k < hi);
        if !strictly_inside {
            interior = (1..=n_interior).map(uniform).collect();
        }
        Ok(Self::from_interior(spec.degree, lo, hi, &interior))
    }

    pub fn from_interior(degree: usize, lo: f64, hi: f64, interior: &[f64]) -> Self {
        let mut knots = vec![lo; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(core::iter::repeat_n(hi, degree + 1));
        BSplineBasis { degree, knots }
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_range(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.range();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutsideRange { time: t, lo, hi });
        }
        Ok(())
    }

    /// All basis function values at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.check_range(t)?;
        Ok(self.values(self.degree, t))
    }

    /// Derivative of order `order` of every basis function at `t`.
    pub fn eval_derivative(&self, t: f64, order: usize) -> Result<Vec<f64>> {
        self.check_range(t)?;
        Ok(self.derivative(self.degree, order, t))
    }

    fn span(&self, t: f64) -> usize {
        let k = &self.knots;
        let (_, hi) = self.range();
        if t >= hi {
            // last non-degenerate interval
            let mut s = k.len() - 2;
            while k[s] >= k[s + 1] {
                s -= 1;
            }
            return s;
        }
        let mut s = 0;
        for i in 0..k.len() - 1 {
            if k[i] <= t && t < k[i + 1] {
                s = i;
                break;
            }
        }
        s
    }

    /// Cox-de Boor values of all degree-`deg` functions on this knot vector.
    fn values(&self, deg: usize, t: f64) -> Vec<f64> {
        let k = &self.knots;
        let mut b = vec![0.0; k.len() - 1];
        b[self.span(t)] = 1.0;
        for d in 1..=deg {
            let count = k.len() - d - 1;
            let mut next = vec![0.0; count];
            for (u, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let den1 = k[u + d] - k[u];
                if den1 > 0.0 {
                    v += (t - k[u]) / den1 * b[u];
                }
                let den2 = k[u + d + 1] - k[u + 1];
                if den2 > 0.0 {
                    v += (k[u + d + 1] - t) / den2 * b[u + 1];
                }
                *slot = v;
            }
            b = next;
        }
        b
    }

    fn derivative(&self, deg: usize, order: usize, t: f64) -> Vec<f64> {
        if order == 0 {
            return self.values(deg, t);
        }
        let count = self.knots.len() - deg - 1;
        if deg == 0 {
            return vec![0.0; count];
        }
        let lower = self.derivative(deg - 1, order - 1, t);
        let k = &self.knots;
        (0..count)
            .map(|u| {
                let mut v = 0.0;
                let den1 = k[u + deg] - k[u];
                if den1 > 0.0 {
                    v += deg as f64 / den1 * lower[u];
                }
                let den2 = k[u + deg + 1] - k[u + 1];
                if den2 > 0.0 {
                    v -= deg as f64 / den2 * lower[u + 1];
                }
                v
            })
            .collect()
    }

    /// Roughness penalty `S`.
    ///
    /// For degree >= 2 this is the exact integrated squared second derivative,
    /// whose null space is the straight lines. Lower degrees fall back to a
    /// second-difference penalty on the coefficients (zero when dim < 3).
    pub fn penalty(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut s = DMatrix::zeros(dim, dim);
        if self.degree >= 2 {
            // 3-point Gauss-Legendre is exact for the degree-2(p-2) integrand up to p = 4.
            let nodes = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
            let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
            let extra = self.degree.saturating_sub(4);
            let k = &self.knots;
            for i in 0..k.len() - 1 {
                let (a, b) = (k[i], k[i + 1]);
                if b <= a {
                    continue;
                }
                let sub = 1 + extra;
                for piece in 0..sub {
                    let pa = a + (b - a) * piece as f64 / sub as f64;
                    let pb = a + (b - a) * (piece + 1) as f64 / sub as f64;
                    let half = 0.5 * (pb - pa);
                    let mid = 0.5 * (pa + pb);
                    for (x, w) in nodes.iter().zip(weights) {
                        let t = mid + half * x;
                        let d2 = self.derivative(self.degree, 2, t);
                        for u in 0..dim {
                            if d2[u] == 0.0 {
                                continue;
                            }
                            for v in 0..dim {
                                s[(u, v)] += w * half * d2[u] * d2[v];
                            }
                        }
                    }
                }
            }
        } else if dim >= 3 {
            for r in 0..dim - 2 {
                let d = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
                for &(u, a) in &d {
                    for &(v, b) in &d {
                        s[(u, v)] += a * b;
                    }
                }
            }
        }
        s
    }
}

/// Linear-interpolation (type 7) quantile of sorted data.
fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Factor `P` with `S = P Pᵀ`, dropping numerically null directions.
pub fn penalty_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    if max <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * max)
        .collect();
    let mut p = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let scale = libm::sqrt(eig.eigenvalues[i]);
        for r in 0..n {
            p[(r, c)] = eig.eigenvectors[(r, i)] * scale;
        }
    }
    p
}
