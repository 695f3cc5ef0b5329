//! Varying-coefficient penalized regression with GCV smoothing selection.
//!
//! The nuisance model is `Y_i(t) = Σ_ℓ Z_iℓ η_ℓ(t) + error`, each `η_ℓ`
//! expanded in a shared B-spline basis. Coefficients solve the penalized
//! normal equations `(WᵀW + Σ λ_ℓ S_ℓ) θ = Wᵀy` and each `λ_ℓ` is chosen on a
//! log-spaced grid by coordinate-wise minimization of
//! `N · RSS / (N − DoF)²`, with `N` the total observation count.
//!
//! Along one coordinate the system changes by a low-rank term `μ P Pᵀ`, so a
//! whole grid scan costs one Cholesky factorization plus `O(r²)` work per
//! candidate via the Woodbury identity.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{penalty_factor, BSplineBasis};
use crate::data::FunctionalDataset;
use crate::error::{Error, Result};

/// Shared log10-spaced smoothing-parameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub count: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid {
            log10_lo: -6.0,
            log10_hi: 6.0,
            count: 25,
        }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![libm::pow(10.0, self.log10_lo)],
            c => (0..c)
                .map(|k| {
                    let e =
                        self.log10_lo + (self.log10_hi - self.log10_lo) * k as f64 / (c - 1) as f64;
                    libm::pow(10.0, e)
                })
                .collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.count == 0 || !(self.log10_hi >= self.log10_lo) {
            return Err(Error::Config(
                "lambda grid needs count >= 1 and lo <= hi".into(),
            ));
        }
        Ok(())
    }
}

/// One smooth's penalty, `S = factor · factorᵀ`, placed at `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub offset: usize,
    pub factor: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    pub dim: usize,
    pub blocks: Vec<PenaltyBlock>,
}

impl Penalties {
    /// `terms` copies of the same per-smooth penalty, laid out block-diagonally.
    ///
    /// The penalty is rescaled to unit spectral norm so the λ grid does not
    /// depend on the time units or knot spacing.
    pub fn repeated(s: &DMatrix<f64>, terms: usize) -> Self {
        let mut factor = penalty_factor(s);
        if factor.ncols() > 0 {
            let top = (&factor.transpose() * &factor)
                .symmetric_eigenvalues()
                .max();
            if top > 0.0 {
                factor /= libm::sqrt(top);
            }
        }
        let u = s.nrows();
        Penalties {
            dim: u * terms,
            blocks: (0..terms)
                .map(|l| PenaltyBlock {
                    offset: l * u,
                    factor: factor.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block `k`'s factor embedded in the full coefficient space.
    pub fn embedded(&self, k: usize) -> DMatrix<f64> {
        let b = &self.blocks[k];
        let mut p = DMatrix::zeros(self.dim, b.factor.ncols());
        p.view_mut((b.offset, 0), b.factor.shape())
            .copy_from(&b.factor);
        p
    }

    /// Dense block-diagonal `Σ λ_k S_k`.
    pub fn weighted_sum(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (b, &lam) in self.blocks.iter().zip(lambdas) {
            let s = &b.factor * b.factor.transpose();
            let mut view = m.view_mut((b.offset, b.offset), s.shape());
            view += s * lam;
        }
        m
    }
}

/// Sufficient statistics `WᵀW`, `Wᵀy`, `yᵀy` of a least-squares problem.
///
/// When built from an explicit design, the design and response are kept so
/// residual sums of squares are computed directly instead of through the
/// cancellation-prone `yᵀy − 2θᵀWᵀy + θᵀWᵀWθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub yty: f64,
    pub n_obs: usize,
    explicit: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl NormalEquations {
    pub fn new(gram: DMatrix<f64>, rhs: DVector<f64>, yty: f64, n_obs: usize) -> Self {
        NormalEquations {
            gram,
            rhs,
            yty,
            n_obs,
            explicit: None,
        }
    }

    pub fn from_design(w: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        if w.nrows() != y.len() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "design has {} rows, response has {}",
                w.nrows(),
                y.len()
            )));
        }
        let yv = DVector::from_column_slice(y);
        Ok(NormalEquations {
            gram: w.tr_mul(w),
            rhs: w.tr_mul(&yv),
            yty: yv.dot(&yv),
            n_obs: y.len(),
            explicit: Some((w.clone(), yv)),
        })
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn rss(&self, theta: &DVector<f64>) -> f64 {
        match &self.explicit {
            Some((w, y)) => (y - w * theta).norm_squared(),
            None => {
                let g_theta = &self.gram * theta;
                (self.yty - 2.0 * theta.dot(&self.rhs) + theta.dot(&g_theta)).max(0.0)
            }
        }
    }
}

/// A fitted penalized smooth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothFit {
    pub theta: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Effective degrees of freedom, `tr(W (WᵀW + Σ λ S)⁻¹ Wᵀ)`.
    pub dof: f64,
    pub rss: f64,
    pub gcv: f64,
    pub n_obs: usize,
}

impl SmoothFit {
    /// Coefficient block of smooth `l` for a basis of dimension `dim`.
    pub fn block(&self, l: usize, dim: usize) -> &[f64] {
        &self.theta[l * dim..(l + 1) * dim]
    }
}

pub fn gcv_value(n_obs: usize, rss: f64, dof: f64) -> Option<f64> {
    let n = n_obs as f64;
    let resid_df = n - dof;
    (resid_df > 0.0).then(|| n * rss / (resid_df * resid_df))
}

fn factorize(
    ne: &NormalEquations,
    pens: &Penalties,
    lambdas: &[f64],
) -> Result<Cholesky<f64, Dyn>> {
    let m = &ne.gram + pens.weighted_sum(lambdas);
    Cholesky::new(m).ok_or(Error::Singular)
}

/// `tr(M⁻¹ G)` where `M = G + Σ λ_k P_k P_kᵀ`, via `d − Σ λ_k ‖L⁻¹P_k‖²`.
fn hat_trace(chol: &Cholesky<f64, Dyn>, pens: &Penalties, lambdas: &[f64]) -> f64 {
    let l = chol.l();
    let mut tr = pens.dim as f64;
    for (k, &lam) in lambdas.iter().enumerate() {
        if lam == 0.0 || pens.blocks[k].factor.ncols() == 0 {
            continue;
        }
        let y = l
            .solve_lower_triangular(&pens.embedded(k))
            .expect("cholesky factor has a positive diagonal");
        tr -= lam * y.norm_squared();
    }
    tr
}

/// Fit at fixed smoothing parameters.
pub fn fit_fixed(ne: &NormalEquations, pens: &Penalties, lambdas: &[f64]) -> Result<SmoothFit> {
    if lambdas.len() != pens.len() || ne.dim() != pens.dim {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} lambdas / {} penalties, dim {} / {}",
            lambdas.len(),
            pens.len(),
            ne.dim(),
            pens.dim
        )));
    }
    let chol = factorize(ne, pens, lambdas)?;
    let theta = chol.solve(&ne.rhs);
    let dof = hat_trace(&chol, pens, lambdas);
    let rss = ne.rss(&theta);
    let gcv = gcv_value(ne.n_obs, rss, dof).ok_or(Error::GcvUndefined { n_obs: ne.n_obs })?;
    Ok(SmoothFit {
        theta: theta.as_slice().to_vec(),
        lambdas: lambdas.to_vec(),
        dof,
        rss,
        gcv,
        n_obs: ne.n_obs,
    })
}

/// One point of a GCV profile along a single smoothing parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcvPoint {
    pub lambda: f64,
    pub rss: f64,
    pub dof: f64,
    /// `None` where the criterion is undefined (DoF ≥ N).
    pub gcv: Option<f64>,
}

/// GCV over `candidates` for smooth `coord`, others held at `lambdas`.
///
/// Candidates must be at least `min(candidates)`, which anchors the
/// factorization.
pub fn gcv_profile(
    ne: &NormalEquations,
    pens: &Penalties,
    lambdas: &[f64],
    coord: usize,
    candidates: &[f64],
) -> Result<Vec<GcvPoint>> {
    let base = candidates.iter().copied().fold(f64::INFINITY, f64::min);
    let mut anchor = lambdas.to_vec();
    anchor[coord] = base;
    let chol = factorize(ne, pens, &anchor)?;
    let theta0 = chol.solve(&ne.rhs);
    let trace0 = hat_trace(&chol, pens, &anchor);
    let rss0 = ne.rss(&theta0);
    // gradient of RSS / 2 at the anchor
    let grad0 = &ne.gram * &theta0 - &ne.rhs;

    let p = pens.embedded(coord);
    let r = p.ncols();
    let (gamma, q) = if r == 0 {
        (DVector::zeros(0), DMatrix::zeros(pens.dim, 0))
    } else {
        let l = chol.l();
        let y = l.solve_lower_triangular(&p).ok_or(Error::Singular)?;
        let eig = y.tr_mul(&y).symmetric_eigen();
        let yv = y * &eig.eigenvectors;
        let q = l
            .transpose()
            .solve_upper_triangular(&yv)
            .ok_or(Error::Singular)?;
        (eig.eigenvalues.map(|g| g.max(0.0)), q)
    };
    let c = q.tr_mul(&ne.rhs);
    let gq = &ne.gram * &q;
    let qgq = q.tr_mul(&gq);
    let q_grad0 = q.tr_mul(&grad0);

    let mut out = Vec::with_capacity(candidates.len());
    let mut e = DVector::zeros(r);
    for &lambda in candidates {
        let mu = lambda - base;
        let mut dof = trace0;
        for k in 0..r {
            let dk = mu / (1.0 + mu * gamma[k]);
            e[k] = dk * c[k];
            dof -= dk * qgq[(k, k)];
        }
        // θ = θ0 − Q e
        let rss = (rss0 - 2.0 * e.dot(&q_grad0) + e.dot(&(&qgq * &e))).max(0.0);
        out.push(GcvPoint {
            lambda,
            rss,
            dof,
            gcv: gcv_value(ne.n_obs, rss, dof),
        });
    }
    Ok(out)
}

/// Coordinate-wise GCV search (two sweeps) over a shared grid.
pub fn fit_gcv(ne: &NormalEquations, pens: &Penalties, grid: &LambdaGrid) -> Result<SmoothFit> {
    grid.check()?;
    let candidates = grid.values();
    let mut lambdas = vec![candidates[candidates.len() / 2]; pens.len()];
    for _sweep in 0..2 {
        for coord in 0..pens.len() {
            if pens.blocks[coord].factor.ncols() == 0 {
                continue;
            }
            let profile = gcv_profile(ne, pens, &lambdas, coord, &candidates)?;
            let best = profile
                .iter()
                .filter_map(|pt| pt.gcv.map(|g| (pt.lambda, g)))
                .fold(None, |acc: Option<(f64, f64)>, (lam, g)| match acc {
                    Some((_, bg)) if bg <= g => acc,
                    _ => Some((lam, g)),
                });
            match best {
                Some((lam, _)) => lambdas[coord] = lam,
                None => return Err(Error::GcvUndefined { n_obs: ne.n_obs }),
            }
        }
    }
    fit_fixed(ne, pens, &lambdas)
}

/// Explicit varying-coefficient design for a set of per-subject coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    /// `N_total × (terms · U)`; row `(i, j)` block `ℓ` is `c_iℓ · B(t_ij)`.
    pub w: DMatrix<f64>,
    pub basis: BSplineBasis,
    pub penalties: Penalties,
    pub terms: usize,
}

/// Design for the nuisance smooths `Σ_ℓ Z_iℓ η_ℓ(t)`.
pub fn build_design(ds: &FunctionalDataset, basis: &BSplineBasis) -> Result<Design> {
    let coefs: Vec<Vec<f64>> = ds.subjects().iter().map(|s| s.z.clone()).collect();
    build_design_with(ds, basis, &coefs)
}

pub fn build_design_with(
    ds: &FunctionalDataset,
    basis: &BSplineBasis,
    coefs: &[Vec<f64>],
) -> Result<Design> {
    let terms = coefs.first().map_or(0, |c| c.len());
    let u = basis.dim();
    let n_obs = ds.total_observations();
    let mut w = DMatrix::zeros(n_obs, terms * u);
    let mut row = 0;
    for (s, c) in ds.subjects().iter().zip(coefs) {
        if c.len() != terms {
            return Err(Error::DimensionMismatch(alloc::format!(
                "subject {} has {} coefficients, expected {}",
                s.id,
                c.len(),
                terms
            )));
        }
        for &t in &s.times {
            let b = basis.eval(t)?;
            for (l, &cl) in c.iter().enumerate() {
                if cl == 0.0 {
                    continue;
                }
                for (k, bk) in b.iter().enumerate() {
                    w[(row, l * u + k)] = cl * bk;
                }
            }
            row += 1;
        }
    }
    Ok(Design {
        w,
        penalties: Penalties::repeated(&basis.penalty(), terms),
        basis: basis.clone(),
        terms,
    })
}

/// Responses with the fitted nuisance effects removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDataset(pub FunctionalDataset);

impl core::ops::Deref for ResidualDataset {
    type Target = FunctionalDataset;
    fn deref(&self) -> &FunctionalDataset {
        &self.0
    }
}

/// `Y* = y − Wθ̂`, subject by subject.
pub fn residualize(
    ds: &FunctionalDataset,
    design: &Design,
    fit: &SmoothFit,
) -> Result<ResidualDataset> {
    if fit.theta.len() != design.w.ncols() || design.w.nrows() != ds.total_observations() {
        return Err(Error::DimensionMismatch("fit does not match design".into()));
    }
    let theta = DVector::from_column_slice(&fit.theta);
    let fitted = &design.w * theta;
    let y = ds.stacked_responses();
    let resid: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    Ok(ResidualDataset(ds.with_responses(&resid)?))
}

/// Nuisance fit together with the design it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceModel {
    pub design: Design,
    pub fit: SmoothFit,
}

impl NuisanceModel {
    /// `η̂_ℓ(t)`.
    pub fn eta(&self, l: usize, t: f64) -> Result<f64> {
        let b = self.design.basis.eval(t)?;
        let u = self.design.basis.dim();
        Ok(b.iter().zip(self.fit.block(l, u)).map(|(x, y)| x * y).sum())
    }
}

pub fn fit_nuisance(
    ds: &FunctionalDataset,
    spec: &crate::basis::BasisSpec,
    grid: &LambdaGrid,
) -> Result<NuisanceModel> {
    let basis = BSplineBasis::new(spec, &ds.pooled_times())?;
    let design = build_design(ds, &basis)?;
    let ne = NormalEquations::from_design(&design.w, &ds.stacked_responses())?;
    let fit = fit_gcv(&ne, &design.penalties, grid)?;
    Ok(NuisanceModel { design, fit })
}

/// Per-subject basis cross-products, so normal equations for any set of
/// subject-level coefficients can be formed without the full design.
#[derive(Debug, Clone)]
pub struct SubjectBasisCache {
    dim: usize,
    grams: Vec<DMatrix<f64>>,
    rhs: Vec<DVector<f64>>,
    yty: f64,
    n_obs: usize,
}

impl SubjectBasisCache {
    pub fn new(ds: &FunctionalDataset, basis: &BSplineBasis) -> Result<Self> {
        let dim = basis.dim();
        let mut grams = Vec::with_capacity(ds.n());
        let mut rhs = Vec::with_capacity(ds.n());
        let mut yty = 0.0;
        for s in ds.subjects() {
            let mut b = DMatrix::zeros(s.len(), dim);
            for (j, &t) in s.times.iter().enumerate() {
                for (k, v) in basis.eval(t)?.into_iter().enumerate() {
                    b[(j, k)] = v;
                }
            }
            let y = DVector::from_column_slice(&s.responses);
            grams.push(b.tr_mul(&b));
            rhs.push(b.tr_mul(&y));
            yty += y.dot(&y);
        }
        Ok(SubjectBasisCache {
            dim,
            grams,
            rhs,
            yty,
            n_obs: ds.total_observations(),
        })
    }

    /// Normal equations for coefficient rows `coefs[i]` (one per subject).
    pub fn normal_equations(&self, coefs: &[Vec<f64>]) -> NormalEquations {
        let terms = coefs.first().map_or(0, |c| c.len());
        let u = self.dim;
        let d = terms * u;
        let mut gram = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        let mut acc = DMatrix::zeros(u, u);
        for a in 0..terms {
            for b in a..terms {
                acc.fill(0.0);
                for (i, c) in coefs.iter().enumerate() {
                    let w = c[a] * c[b];
                    if w != 0.0 {
                        for (x, g) in acc.iter_mut().zip(self.grams[i].iter()) {
                            *x += w * g;
                        }
                    }
                }
                gram.view_mut((a * u, b * u), (u, u)).copy_from(&acc);
                if a != b {
                    gram.view_mut((b * u, a * u), (u, u))
                        .copy_from(&acc.transpose());
                }
            }
            let mut r = DVector::zeros(u);
            for (i, c) in coefs.iter().enumerate() {
                if c[a] != 0.0 {
                    r.axpy(c[a], &self.rhs[i], 1.0);
                }
            }
            rhs.rows_mut(a * u, u).copy_from(&r);
        }
        NormalEquations::new(gram, rhs, self.yty, self.n_obs)
    }

    pub fn basis_dim(&self) -> usize {
        self.dim
    }
}
