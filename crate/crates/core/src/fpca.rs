//! Error covariance estimation by pooled smoothing and functional PCA.
//!
//! Raw within-subject cross-products `Y*_ij Y*_ik` (`j ≠ k`) are pooled over
//! subjects, aggregated by location, and smoothed onto a regular grid with a
//! product-Epanechnikov local-linear smoother. The diagonal products feed a
//! separate one-dimensional smooth of the variance; the gap between the two
//! on the diagonal is the white-noise variance `σ̂²`. The surface is
//! eigendecomposed under trapezoidal quadrature weights and truncated at the
//! smallest `ζ` whose cumulative proportion of variance reaches the
//! threshold.
//!
//! Per-subject covariance blocks `R̂_i = Φ_i Λ Φ_iᵀ + σ̂² I` then follow by
//! interpolating the eigenfunctions at each subject's times.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::NaturalCubic;
use crate::smoother::ResidualDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Smallest bandwidth giving every grid cell `min_pairs` raw pairs,
    /// but never below `min_fraction` of the time range.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceConfig {
    pub grid_size: usize,
    pub pve: f64,
    pub bandwidth: Bandwidth,
    pub min_pairs: usize,
    pub min_fraction: f64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig {
            grid_size: 51,
            pve: 0.95,
            bandwidth: Bandwidth::Auto,
            min_pairs: 5,
            min_fraction: 0.05,
        }
    }
}

impl CovarianceConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(
                "covariance grid needs at least 2 points".into(),
            ));
        }
        if !(self.pve > 0.0 && self.pve <= 1.0) {
            return Err(Error::Config(format!(
                "pve threshold {} not in (0, 1]",
                self.pve
            )));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!(
                    "covariance bandwidth {h} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Truncated Karhunen-Loève description of the error process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub grid: Vec<f64>,
    /// Trapezoidal quadrature weights on `grid`.
    pub weights: Vec<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Retained eigenfunctions on `grid`, orthonormal under `weights`.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub sigma2_floor: f64,
    /// Cumulative proportion of variance explained by the retained components.
    pub pve: f64,
    /// All positive eigenvalues of the smoothed surface.
    pub spectrum: Vec<f64>,
    pub bandwidth: f64,
}

impl CovarianceModel {
    pub fn zeta(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Keeps only the leading `k` components.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.zeta());
        let mut out = self.clone();
        out.eigenvalues.truncate(k);
        out.eigenfunctions.truncate(k);
        let total: f64 = self.spectrum.iter().sum();
        out.pve = if total > 0.0 {
            out.eigenvalues.iter().sum::<f64>() / total
        } else {
            0.0
        };
        out
    }

    /// `Σ_v λ_v φ_v(s) φ_v(t)` on the grid.
    pub fn low_rank_surface(&self) -> DMatrix<f64> {
        let g = self.grid.len();
        DMatrix::from_fn(g, g, |a, b| {
            self.eigenvalues
                .iter()
                .zip(&self.eigenfunctions)
                .map(|(l, f)| l * f[a] * f[b])
                .sum()
        })
    }

    fn interpolants(&self) -> Vec<NaturalCubic> {
        self.eigenfunctions
            .iter()
            .map(|f| NaturalCubic::new(&self.grid, f))
            .collect()
    }

    /// Eigenfunction values at `times`, one row per time.
    pub fn eigenfunctions_at(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let splines = self.interpolants();
        self.eval_with(&splines, times)
    }

    fn eval_with(&self, splines: &[NaturalCubic], times: &[f64]) -> Result<DMatrix<f64>> {
        let lo = self.grid[0];
        let hi = self.grid[self.grid.len() - 1];
        let slack = 1e-9 * (hi - lo);
        let mut out = DMatrix::zeros(times.len(), splines.len());
        for (r, &t) in times.iter().enumerate() {
            if !(t >= lo - slack && t <= hi + slack) {
                return Err(Error::OutsideRange { time: t, lo, hi });
            }
            let t = t.clamp(lo, hi);
            for (c, s) in splines.iter().enumerate() {
                out[(r, c)] = s.eval(t);
            }
        }
        Ok(out)
    }

    /// `R̂ = Φ Λ Φᵀ + σ̂² I` at the given (distinct) times.
    pub fn block(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let phi = self.eigenfunctions_at(times)?;
        Ok(self.block_from(&phi))
    }

    fn block_from(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let m = phi.nrows();
        let lam = DVector::from_column_slice(&self.eigenvalues);
        let scaled = DMatrix::from_fn(m, lam.len(), |r, c| phi[(r, c)] * lam[c]);
        let mut r = scaled * phi.transpose();
        for k in 0..m {
            r[(k, k)] += self.sigma2;
        }
        r.fill_upper_triangle_with_lower_triangle();
        r
    }
}

/// Full output of covariance estimation, including the smoothed surface.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub model: CovarianceModel,
    /// Smoothed off-diagonal covariance surface on the grid (symmetric).
    pub surface: DMatrix<f64>,
    /// Smoothed variance `Σ(t, t) + σ²` on the grid.
    pub variance: Vec<f64>,
    /// All eigenvalues of the weighted surface, descending.
    pub eigenvalues: Vec<f64>,
}

/// Observation-pair products aggregated by location.
struct Cloud {
    /// (x, y, mean product, count), sorted by x.
    points: Vec<(f64, f64, f64, f64)>,
    total: f64,
}

impl Cloud {
    fn from_map(map: BTreeMap<(u64, u64), (f64, f64, f64, usize)>) -> Self {
        let mut points: Vec<(f64, f64, f64, f64)> = map
            .into_values()
            .map(|(x, y, sum, cnt)| (x, y, sum / cnt as f64, cnt as f64))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let total = points.iter().map(|p| p.3).sum();
        Cloud { points, total }
    }

    /// Index range of points with `|x − s| < h`.
    fn window(&self, s: f64, h: f64) -> core::ops::Range<usize> {
        let start = self.points.partition_point(|p| p.0 <= s - h);
        let end = self.points.partition_point(|p| p.0 < s + h);
        start..end.max(start)
    }

    fn min_coverage(&self, grid: &[f64], h: f64, two_d: bool) -> f64 {
        let mut worst = f64::INFINITY;
        for (a, &s) in grid.iter().enumerate() {
            let win = self.window(s, h);
            let cols: &[f64] = if two_d { &grid[a..] } else { &grid[..1] };
            for &t in cols {
                let mut cnt = 0.0;
                for p in &self.points[win.clone()] {
                    if !two_d || (p.1 - t).abs() < h {
                        cnt += p.3;
                    }
                }
                worst = worst.min(cnt);
            }
        }
        worst
    }

    /// Smallest bandwidth (to bisection precision) meeting the coverage target.
    fn coverage_bandwidth(
        &self,
        grid: &[f64],
        span: f64,
        min_pairs: usize,
        floor: f64,
        two_d: bool,
    ) -> Result<f64> {
        let target = min_pairs as f64;
        if self.min_coverage(grid, floor, two_d) >= target {
            return Ok(floor);
        }
        let mut hi = 1.0001 * span + floor;
        if self.total < target || self.min_coverage(grid, hi, two_d) < target {
            return Err(Error::Uncovered(format!(
                "{} pairs available, {} required per grid cell",
                self.total, min_pairs
            )));
        }
        let mut lo = floor;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.min_coverage(grid, mid, two_d) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        1.0 - u * u
    } else {
        0.0
    }
}

/// Local-linear estimate at `(s, t)`; local-constant if the local design is
/// degenerate.
fn local_linear_2d(cloud: &Cloud, s: f64, t: f64, h: f64) -> Option<f64> {
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    for p in &cloud.points[cloud.window(s, h)] {
        let dx = p.0 - s;
        let dy = p.1 - t;
        let w = p.3 * epanechnikov(dx / h) * epanechnikov(dy / h);
        if w == 0.0 {
            continue;
        }
        let v = Vector3::new(1.0, dx, dy);
        xtx += v * v.transpose() * w;
        xty += v * (w * p.2);
    }
    solve_local(xtx.as_slice(), xty.as_slice(), 3)
}

fn local_linear_1d(cloud: &Cloud, s: f64, h: f64) -> Option<f64> {
    let mut m = [0.0; 4];
    let mut r = [0.0; 2];
    for p in &cloud.points[cloud.window(s, h)] {
        let dx = p.0 - s;
        let w = p.3 * epanechnikov(dx / h);
        m[0] += w;
        m[1] += w * dx;
        m[3] += w * dx * dx;
        r[0] += w * p.2;
        r[1] += w * dx * p.2;
    }
    m[2] = m[1];
    solve_local(&m, &r, 2)
}

fn solve_local(m: &[f64], r: &[f64], n: usize) -> Option<f64> {
    let a = DMatrix::from_column_slice(n, n, m);
    let s0 = a[(0, 0)];
    if s0 <= 0.0 {
        return None;
    }
    let nw = r[0] / s0;
    // scale-free conditioning check on the normalized local design
    let d = DVector::from_fn(n, |k, _| 1.0 / libm::sqrt(a[(k, k)].max(f64::MIN_POSITIVE)));
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    let eig = scaled.clone().symmetric_eigenvalues();
    if eig.min() < 1e-8 * eig.max() {
        return Some(nw);
    }
    let rhs = DVector::from_fn(n, |k, _| r[k] * d[k]);
    match scaled.cholesky() {
        Some(c) => Some(c.solve(&rhs)[0] * d[0]),
        None => Some(nw),
    }
}

fn trapezoid(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let mut w = vec![0.0; g];
    for k in 0..g - 1 {
        let h = grid[k + 1] - grid[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

/// Estimates the error covariance from residual curves.
pub fn estimate_covariance(
    res: &ResidualDataset,
    cfg: &CovarianceConfig,
) -> Result<CovarianceModel> {
    estimate_covariance_detailed(res, cfg).map(|e| e.model)
}

pub fn estimate_covariance_detailed(
    res: &ResidualDataset,
    cfg: &CovarianceConfig,
) -> Result<CovarianceEstimate> {
    cfg.check()?;
    if res.n() < 2 {
        return Err(Error::InvalidData(
            "covariance estimation needs at least 2 subjects".into(),
        ));
    }
    let (lo, hi) = res.time_domain();
    if !(hi > lo) {
        return Err(Error::Uncovered(
            "observation times span a single point".into(),
        ));
    }
    let span = hi - lo;
    let g = cfg.grid_size;
    let grid: Vec<f64> = (0..g)
        .map(|k| {
            if k == g - 1 {
                hi
            } else {
                lo + span * k as f64 / (g - 1) as f64
            }
        })
        .collect();

    let mut off = BTreeMap::new();
    let mut diag = BTreeMap::new();
    for s in res.subjects() {
        for (j, (&tj, &yj)) in s.times.iter().zip(&s.responses).enumerate() {
            let e = diag
                .entry((tj.to_bits(), 0))
                .or_insert((tj, 0.0, 0.0, 0usize));
            e.2 += yj * yj;
            e.3 += 1;
            for (k, (&tk, &yk)) in s.times.iter().zip(&s.responses).enumerate() {
                if k == j {
                    continue;
                }
                let e = off
                    .entry((tj.to_bits(), tk.to_bits()))
                    .or_insert((tj, tk, 0.0, 0usize));
                e.2 += yj * yk;
                e.3 += 1;
            }
        }
    }
    let pairs = Cloud::from_map(off);
    let diagonal = Cloud::from_map(diag);

    let floor = cfg.min_fraction * span;
    let h = match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => pairs.coverage_bandwidth(&grid, span, cfg.min_pairs, floor, true)?,
    };
    let h1 = diagonal.coverage_bandwidth(&grid, span, cfg.min_pairs.clamp(1, 2), h, false)?;

    let mut surface = DMatrix::zeros(g, g);
    for a in 0..g {
        for b in a..g {
            let v = local_linear_2d(&pairs, grid[a], grid[b], h).ok_or_else(|| {
                Error::Uncovered(format!(
                    "no pairs within bandwidth {h:.4} of ({:.4}, {:.4})",
                    grid[a], grid[b]
                ))
            })?;
            surface[(a, b)] = v;
            surface[(b, a)] = v;
        }
    }
    let variance: Vec<f64> = grid
        .iter()
        .map(|&s| {
            local_linear_1d(&diagonal, s, h1)
                .ok_or_else(|| Error::Uncovered(format!("no observations near {s:.4}")))
        })
        .collect::<Result<_>>()?;

    let weights = trapezoid(&grid);
    let sqrt_w: Vec<f64> = weights.iter().map(|&w| libm::sqrt(w)).collect();
    let weighted = DMatrix::from_fn(g, g, |a, b| sqrt_w[a] * surface[(a, b)] * sqrt_w[b]);
    let eig = weighted.symmetric_eigen();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let top = eigenvalues[0];
    if !(top > 0.0) {
        return Err(Error::NoPositiveEigenvalues);
    }
    let positive: Vec<f64> = eigenvalues
        .iter()
        .copied()
        .filter(|&v| v > 1e-10 * top)
        .collect();
    let total: f64 = positive.iter().sum();
    let mut cum = 0.0;
    let mut zeta = positive.len();
    for (k, v) in positive.iter().enumerate() {
        cum += v;
        if cum / total >= cfg.pve {
            zeta = k + 1;
            break;
        }
    }
    let retained: f64 = positive[..zeta].iter().sum();
    let eigenfunctions: Vec<Vec<f64>> = order[..zeta]
        .iter()
        .map(|&k| {
            let mut f: Vec<f64> = (0..g)
                .map(|a| eig.eigenvectors[(a, k)] / sqrt_w[a])
                .collect();
            let lead = f
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                f.iter_mut().for_each(|v| *v = -*v);
            }
            f
        })
        .collect();

    let mean_var = variance.iter().sum::<f64>() / g as f64;
    let sigma2_floor = (1e-6 * mean_var.abs()).max(f64::MIN_POSITIVE);
    let raw_sigma2 = (0..g).map(|a| variance[a] - surface[(a, a)]).sum::<f64>() / g as f64;
    let sigma2 = raw_sigma2.max(sigma2_floor);

    let model = CovarianceModel {
        grid,
        weights,
        eigenvalues: positive[..zeta].to_vec(),
        eigenfunctions,
        sigma2,
        sigma2_floor,
        pve: retained / total,
        spectrum: positive,
        bandwidth: h,
    };
    Ok(CovarianceEstimate {
        model,
        surface,
        variance,
        eigenvalues,
    })
}

/// One subject's covariance block and its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SubjectBlock {
    pub r: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
}

/// Block-diagonal `Σ̂₀`, kept as per-subject factors.
#[derive(Debug, Clone)]
pub struct BlockPrecision {
    pub blocks: Vec<SubjectBlock>,
}

impl BlockPrecision {
    pub fn from_blocks(ids: &[&str], rs: Vec<DMatrix<f64>>, sigma2: f64) -> Result<Self> {
        let blocks = rs
            .into_iter()
            .zip(ids)
            .map(|(r, id)| {
                let chol = Cholesky::new(r.clone()).ok_or_else(|| Error::NotPositiveDefinite {
                    subject: id.to_string(),
                    sigma2,
                })?;
                Ok(SubjectBlock { r, chol })
            })
            .collect::<Result<_>>()?;
        Ok(BlockPrecision { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Assembles and factors `R̂_i` for every subject.
pub fn subject_blocks(model: &CovarianceModel, res: &ResidualDataset) -> Result<BlockPrecision> {
    let splines = model.interpolants();
    let mut rs = Vec::with_capacity(res.n());
    let mut ids = Vec::with_capacity(res.n());
    for s in res.subjects() {
        let phi = model.eval_with(&splines, &s.times)?;
        rs.push(model.block_from(&phi));
        ids.push(s.id.as_str());
    }
    BlockPrecision::from_blocks(&ids, rs, model.sigma2)
}

/// `U_i = R̂_i⁻¹ Y*_i` by two triangular solves per subject.
pub fn whiten(blocks: &BlockPrecision, res: &ResidualDataset) -> Result<Vec<DVector<f64>>> {
    if blocks.len() != res.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} blocks for {} subjects",
            blocks.len(),
            res.n()
        )));
    }
    blocks
        .blocks
        .iter()
        .zip(res.subjects())
        .map(|(b, s)| {
            if b.r.nrows() != s.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {} block size",
                    s.id
                )));
            }
            Ok(b.chol.solve(&DVector::from_column_slice(&s.responses)))
        })
        .collect()
}
