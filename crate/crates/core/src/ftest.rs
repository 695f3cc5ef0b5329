//! F-type comparator: `F* = (RSS₀ − RSS₁) / RSS₁` between the nuisance-only
//! model and one that adds varying coefficients `x_k γ_k(t)`, calibrated by
//! permuting `X`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::basis::{BSplineBasis, BasisSpec};
use crate::data::FunctionalDataset;
use crate::error::{Error, Result, Stage, StageExt};
use crate::exec::Executor;
use crate::rng;
use crate::score::{p_value, TieRule};
use crate::smoother::{fit_fixed, fit_gcv, LambdaGrid, Penalties, SmoothFit, SubjectBasisCache};

/// Smoothing-parameter handling for permuted alternative fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refit {
    /// Re-select every λ by GCV for each permutation.
    #[default]
    Gcv,
    /// Keep the λ selected on the observed data.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FStatistic {
    pub f: f64,
    pub rss0: f64,
    pub rss1: f64,
}

/// Null fit plus everything needed to refit the alternative for any `X`.
#[derive(Debug, Clone)]
pub struct FModel {
    cache: SubjectBasisCache,
    z: Vec<Vec<f64>>,
    /// Covariate columns that are not identically zero.
    active: Vec<usize>,
    alt_penalties: Penalties,
    grid: LambdaGrid,
    pub null_fit: SmoothFit,
}

impl FModel {
    pub fn new(ds: &FunctionalDataset, basis: &BasisSpec, grid: &LambdaGrid) -> Result<Self> {
        let b = BSplineBasis::new(basis, &ds.pooled_times())?;
        let cache = SubjectBasisCache::new(ds, &b)?;
        let z: Vec<Vec<f64>> = ds.subjects().iter().map(|s| s.z.clone()).collect();
        let s = b.penalty();
        let null_fit = fit_gcv(
            &cache.normal_equations(&z),
            &Penalties::repeated(&s, ds.q()),
            grid,
        )?;
        let active: Vec<usize> = (0..ds.p())
            .filter(|&k| ds.subjects().iter().any(|r| r.x[k] != 0.0))
            .collect();
        Ok(FModel {
            alt_penalties: Penalties::repeated(&s, ds.q() + active.len()),
            cache,
            z,
            active,
            grid: *grid,
            null_fit,
        })
    }

    fn coefs(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.z
            .iter()
            .zip(x)
            .map(|(z, xi)| {
                z.iter()
                    .copied()
                    .chain(self.active.iter().map(|&k| xi[k]))
                    .collect()
            })
            .collect()
    }

    /// Alternative fit for covariate rows `x`; `lambdas` freezes smoothing.
    pub fn alternative(&self, x: &[Vec<f64>], lambdas: Option<&[f64]>) -> Result<SmoothFit> {
        if x.len() != self.z.len() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} covariate rows for {} subjects",
                x.len(),
                self.z.len()
            )));
        }
        let ne = self.cache.normal_equations(&self.coefs(x));
        match lambdas {
            Some(l) => fit_fixed(&ne, &self.alt_penalties, l),
            None => fit_gcv(&ne, &self.alt_penalties, &self.grid),
        }
    }

    pub fn statistic_from(&self, alt: &SmoothFit) -> Result<FStatistic> {
        let (rss0, rss1) = (self.null_fit.rss, alt.rss);
        if !(rss1 > 0.0) {
            return Err(Error::DegenerateF);
        }
        Ok(FStatistic {
            f: (rss0 - rss1) / rss1,
            rss0,
            rss1,
        })
    }
}

pub fn f_statistic(
    ds: &FunctionalDataset,
    basis: &BasisSpec,
    grid: &LambdaGrid,
) -> Result<FStatistic> {
    let model = FModel::new(ds, basis, grid)?;
    let alt = model.alternative(&ds.covariates(), None)?;
    model.statistic_from(&alt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FConfig {
    pub perms: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    pub lambda_grid: LambdaGrid,
    pub ties: TieRule,
    pub refit: Refit,
}

impl FConfig {
    pub fn new(perms: usize, seed: u64) -> Self {
        FConfig {
            perms,
            seed,
            basis: BasisSpec::default(),
            lambda_grid: LambdaGrid::default(),
            ties: TieRule::default(),
            refit: Refit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FManifest {
    pub seed: u64,
    pub perms: usize,
    pub basis_dim: usize,
    pub lambda_grid: LambdaGrid,
    pub ties: TieRule,
    pub refit: Refit,
    pub version: String,
    pub null_lambdas: Vec<f64>,
    pub alt_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FResult {
    pub f_observed: f64,
    pub f_perm: Vec<f64>,
    pub p_value: f64,
    pub rss0: f64,
    pub rss1: f64,
    pub manifest: FManifest,
}

pub fn f_permutation_test<E: Executor>(
    ds: &FunctionalDataset,
    cfg: &FConfig,
    exec: &E,
) -> Result<FResult> {
    if cfg.perms == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    cfg.basis.check()?;
    cfg.lambda_grid.check()?;
    ds.ensure_valid().stage(Stage::Validate)?;
    let model = FModel::new(ds, &cfg.basis, &cfg.lambda_grid).stage(Stage::FTest)?;
    let x = ds.covariates();
    let alt = model.alternative(&x, None).stage(Stage::FTest)?;
    let observed = model.statistic_from(&alt).stage(Stage::FTest)?;
    let frozen = match cfg.refit {
        Refit::Gcv => None,
        Refit::Frozen => Some(alt.lambdas.as_slice()),
    };
    let n = ds.n();
    let f_perm = exec
        .map_indexed(cfg.perms, |b| {
            let perm = rng::permutation(cfg.seed, b as u64, n);
            let xp: Vec<Vec<f64>> = perm.iter().map(|&k| x[k].clone()).collect();
            let fit = model.alternative(&xp, frozen)?;
            model.statistic_from(&fit).map(|s| s.f)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()
        .stage(Stage::Permutation)?;
    Ok(FResult {
        p_value: p_value(observed.f, &f_perm, cfg.ties),
        f_observed: observed.f,
        f_perm,
        rss0: observed.rss0,
        rss1: observed.rss1,
        manifest: FManifest {
            seed: cfg.seed,
            perms: cfg.perms,
            basis_dim: cfg.basis.dim,
            lambda_grid: cfg.lambda_grid,
            ties: cfg.ties,
            refit: cfg.refit,
            version: String::from(env!("CARGO_PKG_VERSION")),
            null_lambdas: model.null_fit.lambdas.clone(),
            alt_lambdas: alt.lambdas,
        },
    })
}
