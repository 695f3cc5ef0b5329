//! Variance-component score test with a permutation null.
//!
//! With `U_i = R̂_i⁻¹ Y*_i` the statistic is `T = Σ_ij A_ij U_iᵀ T_ij U_j`.
//! The scalars `C_ij = U_iᵀ T_ij U_j` do not involve `X`, so every permuted
//! statistic is `Σ_ij A_π(i)π(j) C_ij`, an `O(n²)` sum.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::FunctionalDataset;
use crate::error::{Error, Result, Stage, StageExt};
use crate::exec::Executor;
use crate::fpca::{
    estimate_covariance, subject_blocks, whiten, BlockPrecision, CovarianceConfig, CovarianceModel,
};
use crate::kernel::{assemble_auto, covariate_gram, offsets, KernelMatrix, KernelSpec};
use crate::rng;
use crate::smoother::{fit_nuisance, residualize, LambdaGrid, NuisanceModel, ResidualDataset};

/// How permuted statistics equal to the observed one are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// Count `T^(b) > T`.
    #[default]
    Strict,
    /// Count `T^(b) ≥ T`.
    Inclusive,
}

/// `(#{T^(b) beats T} + 1) / (B + 1)`.
pub fn p_value(observed: f64, permuted: &[f64], ties: TieRule) -> f64 {
    let count = permuted
        .iter()
        .filter(|&&t| match ties {
            TieRule::Strict => t > observed,
            TieRule::Inclusive => t >= observed,
        })
        .count();
    (count + 1) as f64 / (permuted.len() + 1) as f64
}

fn check_shapes(km: &KernelMatrix, u: &[DVector<f64>]) -> Result<()> {
    if km.n() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel has {} subjects, residuals {}",
            km.n(),
            u.len()
        )));
    }
    for (i, (t, ui)) in km.times.iter().zip(u).enumerate() {
        if t.len() != ui.len() {
            return Err(Error::DimensionMismatch(format!(
                "subject {i}: {} kernel times, {} residuals",
                t.len(),
                ui.len()
            )));
        }
    }
    Ok(())
}

/// `C_ij = U_iᵀ T_ij U_j` for all subject pairs.
pub fn contractions(km: &KernelMatrix, u: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    check_shapes(km, u)?;
    let n = u.len();
    if let Some(g) = &km.layout {
        // scatter onto the master grid: C = Ũᵀ T Ũ
        let mut scattered = DMatrix::zeros(g.grid.len(), n);
        for (i, ui) in u.iter().enumerate() {
            for (h, &pos) in g.index[i].iter().enumerate() {
                scattered[(pos, i)] = ui[h];
            }
        }
        let tu = &g.t * &scattered;
        let mut c = scattered.transpose() * tu;
        symmetrize(&mut c);
        return Ok(c);
    }
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = u[i].dot(&(km.time_block(i, j) * &u[j]));
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

/// `Σ_ij A_π(i)π(j) C_ij`.
pub fn permuted_statistic(a: &DMatrix<f64>, c: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let n = perm.len();
    let mut total = 0.0;
    for j in 0..n {
        let pj = perm[j];
        let mut col = 0.0;
        for i in 0..n {
            col += a[(perm[i], pj)] * c[(i, j)];
        }
        total += col;
    }
    total
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `T = Y*ᵀ Σ̂₀⁻¹ K Σ̂₀⁻¹ Y*`.
pub fn statistic(blocks: &BlockPrecision, res: &ResidualDataset, km: &KernelMatrix) -> Result<f64> {
    let u = whiten(blocks, res)?;
    let c = contractions(km, &u)?;
    Ok(permuted_statistic(&km.a, &c, &identity(u.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    /// `tr(Σ̂₀⁻¹ K)`
    pub trace_term: f64,
    /// `Y*ᵀ Σ̂₀⁻¹ K Σ̂₀⁻¹ Y*`
    pub quadratic_term: f64,
}

impl ScoreComponents {
    /// Derivative of the log-likelihood in `τ` at zero.
    pub fn score(&self) -> f64 {
        -0.5 * self.trace_term + 0.5 * self.quadratic_term
    }
}

pub fn score_components(
    blocks: &BlockPrecision,
    res: &ResidualDataset,
    km: &KernelMatrix,
) -> Result<ScoreComponents> {
    let quadratic_term = statistic(blocks, res, km)?;
    let mut trace_term = 0.0;
    for (i, b) in blocks.blocks.iter().enumerate() {
        let rt = b.chol.solve(&km.time_block(i, i));
        trace_term += km.a[(i, i)] * rt.trace();
    }
    Ok(ScoreComponents {
        trace_term,
        quadratic_term,
    })
}

/// Permuted statistics by full re-assembly of `K` under permuted `X`.
pub fn naive_permuted_statistic(
    km: &KernelMatrix,
    family: crate::kernel::KernelFamily,
    x: &[Vec<f64>],
    u: &[DVector<f64>],
    perm: &[usize],
) -> Result<f64> {
    check_shapes(km, u)?;
    let xp: Vec<Vec<f64>> = perm.iter().map(|&k| x[k].clone()).collect();
    let kp = km.with_gram(covariate_gram(family, km.rho, &xp)?).dense();
    let off = offsets(&km.times);
    let mut stacked = DVector::zeros(off[u.len()]);
    for (i, ui) in u.iter().enumerate() {
        stacked.rows_mut(off[i], ui.len()).copy_from(ui);
    }
    Ok(stacked.dot(&(kp * &stacked)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationPath {
    /// Reuse `C_ij` across permutations.
    #[default]
    Fast,
    /// Rebuild `K` for every permutation.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub perms: usize,
    pub kernel: KernelSpec,
    /// Gaussian bandwidth actually used (1.0 for the polynomial families).
    pub kernel_rho: f64,
    pub pve: f64,
    pub basis_dim: usize,
    pub lambda_grid: LambdaGrid,
    pub ties: TieRule,
    pub version: String,
    pub zeta: usize,
    pub sigma2: f64,
    pub nuisance_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t_observed: f64,
    pub t_perm: Vec<f64>,
    pub p_value: f64,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub kernel: KernelSpec,
    pub perms: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    pub lambda_grid: LambdaGrid,
    pub covariance: CovarianceConfig,
    pub ties: TieRule,
    pub path: PermutationPath,
}

impl TestConfig {
    pub fn new(kernel: KernelSpec, perms: usize, seed: u64) -> Self {
        TestConfig {
            kernel,
            perms,
            seed,
            basis: BasisSpec::default(),
            lambda_grid: LambdaGrid::default(),
            covariance: CovarianceConfig::default(),
            ties: TieRule::default(),
            path: PermutationPath::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.perms == 0 {
            return Err(Error::Config("at least one permutation is required".into()));
        }
        self.kernel.check()?;
        self.basis.check()?;
        self.lambda_grid.check()?;
        self.covariance.check()
    }
}

/// Everything upstream of the kernel: nuisance fit, covariance, whitening.
/// One instance serves any number of kernels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: FunctionalDataset,
    pub nuisance: NuisanceModel,
    pub residuals: ResidualDataset,
    pub covariance: CovarianceModel,
    pub blocks: BlockPrecision,
    pub whitened: Vec<DVector<f64>>,
    basis: BasisSpec,
    lambda_grid: LambdaGrid,
}

pub fn prepare(
    ds: &FunctionalDataset,
    basis: &BasisSpec,
    grid: &LambdaGrid,
    cov: &CovarianceConfig,
) -> Result<Prepared> {
    ds.ensure_valid().stage(Stage::Validate)?;
    let nuisance = fit_nuisance(ds, basis, grid).stage(Stage::Nuisance)?;
    let residuals = residualize(ds, &nuisance.design, &nuisance.fit).stage(Stage::Nuisance)?;
    let covariance = estimate_covariance(&residuals, cov).stage(Stage::Covariance)?;
    let blocks = subject_blocks(&covariance, &residuals).stage(Stage::Covariance)?;
    let whitened = whiten(&blocks, &residuals).stage(Stage::Covariance)?;
    Ok(Prepared {
        data: ds.clone(),
        nuisance,
        residuals,
        covariance,
        blocks,
        whitened,
        basis: *basis,
        lambda_grid: *grid,
    })
}

impl Prepared {
    pub fn kernel_matrix(&self, spec: &KernelSpec) -> Result<KernelMatrix> {
        assemble_auto(spec, &self.data).stage(Stage::Kernel)
    }

    /// Permutation test for one kernel; permutation `b` uses the stream
    /// `(seed, b)`.
    pub fn test<E: Executor>(
        &self,
        kernel: &KernelSpec,
        perms: usize,
        seed: u64,
        ties: TieRule,
        path: PermutationPath,
        exec: &E,
    ) -> Result<TestResult> {
        if perms == 0 {
            return Err(Error::Config("at least one permutation is required".into()));
        }
        let km = self.kernel_matrix(kernel)?;
        let c = contractions(&km, &self.whitened).stage(Stage::Kernel)?;
        let n = self.whitened.len();
        let t_observed = permuted_statistic(&km.a, &c, &identity(n));
        let t_perm = match path {
            PermutationPath::Fast => exec.map_indexed(perms, |b| {
                permuted_statistic(&km.a, &c, &rng::permutation(seed, b as u64, n))
            }),
            PermutationPath::Naive => {
                let x = self.data.covariates();
                exec.map_indexed(perms, |b| {
                    naive_permuted_statistic(
                        &km,
                        kernel.family,
                        &x,
                        &self.whitened,
                        &rng::permutation(seed, b as u64, n),
                    )
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .stage(Stage::Permutation)?
            }
        };
        Ok(TestResult {
            p_value: p_value(t_observed, &t_perm, ties),
            t_observed,
            t_perm,
            manifest: Manifest {
                seed,
                perms,
                kernel: *kernel,
                kernel_rho: km.rho,
                pve: self.covariance.pve,
                basis_dim: self.basis.dim,
                lambda_grid: self.lambda_grid,
                ties,
                version: String::from(env!("CARGO_PKG_VERSION")),
                zeta: self.covariance.zeta(),
                sigma2: self.covariance.sigma2,
                nuisance_lambdas: self.nuisance.fit.lambdas.clone(),
            },
        })
    }
}

/// Residualize, estimate the covariance, assemble the kernel, permute.
pub fn run_test<E: Executor>(
    ds: &FunctionalDataset,
    cfg: &TestConfig,
    exec: &E,
) -> Result<TestResult> {
    cfg.check()?;
    let prepared = prepare(ds, &cfg.basis, &cfg.lambda_grid, &cfg.covariance)?;
    prepared.test(&cfg.kernel, cfg.perms, cfg.seed, cfg.ties, cfg.path, exec)
}
