//! Simulation scenarios, type-I error and power studies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{FunctionalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::fpca::CovarianceConfig;
use crate::ftest::{f_permutation_test, FConfig, Refit};
use crate::kernel::{KernelFamily, KernelSpec, TimeKernel};
use crate::rng::{self, role};
use crate::score::{prepare, PermutationPath, TieRule};
use crate::smoother::LambdaGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Dense,
    Sparse,
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Dense => "dense",
            Sampling::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub sampling: Sampling,
    /// 0 is the null; 1 to 4 select the effect shape.
    pub beta: u8,
    pub delta: f64,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub dense_m: usize,
    pub sparse_min: usize,
    pub sparse_max: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(sampling: Sampling, beta: u8, delta: f64) -> Self {
        ScenarioSpec {
            sampling,
            beta,
            delta,
            n: 100,
            p: 5,
            q: 3,
            dense_m: 51,
            sparse_min: 7,
            sparse_max: 14,
            seed: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.beta > 4 {
            return bad(format!("effect shape {} not in 0..=4", self.beta));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta {} must be non-negative", self.delta));
        }
        if self.n < 2 || self.p == 0 || self.dense_m < 2 {
            return bad("need n ≥ 2, p ≥ 1 and at least 2 grid points".into());
        }
        if !(1..=3).contains(&self.q) {
            return bad(format!("q = {} not in 1..=3", self.q));
        }
        if self.sampling == Sampling::Sparse
            && !(1 <= self.sparse_min
                && self.sparse_min <= self.sparse_max
                && self.sparse_max <= self.dense_m)
        {
            return bad("sparse range must satisfy 1 ≤ min ≤ max ≤ dense_m".into());
        }
        Ok(())
    }

    /// Scenario name such as `dense-null` or `sparse-b3`.
    pub fn name(&self) -> String {
        match self.beta {
            0 => format!("{}-null", self.sampling.name()),
            b => format!("{}-b{b}", self.sampling.name()),
        }
    }

    /// Parses a scenario name into sampling and effect shape.
    pub fn parse_name(s: &str) -> Option<(Sampling, u8)> {
        let (samp, rest) = s.split_once('-')?;
        let sampling = match samp {
            "dense" => Sampling::Dense,
            "sparse" => Sampling::Sparse,
            _ => return None,
        };
        let beta = match rest {
            "null" | "b0" => 0,
            _ => rest
                .strip_prefix('b')?
                .parse()
                .ok()
                .filter(|b| (1..=4).contains(b))?,
        };
        Some((sampling, beta))
    }

    pub fn dense_grid(&self) -> Vec<f64> {
        (1..=self.dense_m)
            .map(|j| j as f64 / self.dense_m as f64)
            .collect()
    }
}

/// Default effect-size grid for a scenario.
pub fn default_deltas(sampling: Sampling, beta: u8) -> Vec<f64> {
    // steps and tops in tenths so every point is the nearest double to its decimal
    let grid = |step: u32, top: u32| -> Vec<f64> {
        (0..=top / step)
            .map(|i| f64::from(i * step) / 10.0)
            .collect()
    };
    match (sampling, beta) {
        (_, 0) => vec![0.0],
        (Sampling::Dense, 2) => grid(1, 12),
        (Sampling::Dense, _) => grid(1, 10),
        (Sampling::Sparse, 1 | 3) => grid(3, 15),
        (Sampling::Sparse, 2) => grid(5, 40),
        (Sampling::Sparse, _) => grid(5, 30),
    }
}

/// `β(X, t)` for the effect shapes; `xbar` is the covariate mean and
/// `xbar2` is `(ΣX)² / p`.
pub fn effect(beta: u8, delta: f64, xbar: f64, xbar2: f64, t: f64) -> f64 {
    match beta {
        1 => delta * xbar * t,
        2 => delta * xbar2 * t,
        3 => delta * libm::exp(-xbar * t),
        4 => delta * libm::exp(-xbar2 * t),
        _ => 0.0,
    }
}

fn eta(l: usize, t: f64) -> f64 {
    match l {
        0 => t,
        1 => libm::sin(2.0 * PI * t),
        _ => libm::cos(2.0 * PI * t),
    }
}

/// One simulated dataset. Each role draws from its own stream keyed by
/// `(seed, replicate, role)`, so the effect shape and size never change the
/// covariates, sampling or noise.
pub fn generate(spec: &ScenarioSpec, replicate: u64) -> Result<FunctionalDataset> {
    spec.check()?;
    let mut cov_rng = rng::stream(spec.seed, &[replicate, role::COVARIATES]);
    let mut nuis_rng = rng::stream(spec.seed, &[replicate, role::NUISANCE]);
    let mut samp_rng = rng::stream(spec.seed, &[replicate, role::SAMPLING]);
    let mut noise_rng = rng::stream(spec.seed, &[replicate, role::NOISE]);
    let bern = Bernoulli::new(0.4).expect("valid probability");
    let grid = spec.dense_grid();
    let width = format!("{}", spec.n - 1).len();

    let subjects = (0..spec.n)
        .map(|i| {
            let x: Vec<f64> = (0..spec.p)
                .map(|_| StandardNormal.sample(&mut cov_rng))
                .collect();
            let z2: f64 = StandardNormal.sample(&mut nuis_rng);
            let z3 = if bern.sample(&mut nuis_rng) { 1.0 } else { 0.0 };
            let z: Vec<f64> = [1.0, z2, z3][..spec.q].to_vec();

            let times: Vec<f64> = match spec.sampling {
                Sampling::Dense => grid.clone(),
                Sampling::Sparse => {
                    let m = samp_rng.random_range(spec.sparse_min..=spec.sparse_max);
                    let mut idx = sample(&mut samp_rng, spec.dense_m, m).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|k| grid[k]).collect()
                }
            };

            let a1: f64 = StandardNormal.sample(&mut noise_rng);
            let g2: f64 = StandardNormal.sample(&mut noise_rng);
            let a2 = SQRT_2 * g2;
            let sum: f64 = x.iter().sum();
            let xbar = sum / spec.p as f64;
            let xbar2 = sum * sum / spec.p as f64;
            let responses = times
                .iter()
                .map(|&t| {
                    let w: f64 = StandardNormal.sample(&mut noise_rng);
                    let eps = SQRT_2 * a1 * libm::cos(2.0 * PI * t)
                        + SQRT_2 * a2 * libm::sin(2.0 * PI * t)
                        + w;
                    let nuisance: f64 = z.iter().enumerate().map(|(l, zl)| zl * eta(l, t)).sum();
                    nuisance + effect(spec.beta, spec.delta, xbar, xbar2, t) + eps
                })
                .collect();
            SubjectRecord {
                id: format!("s{i:0width$}"),
                times,
                responses,
                x,
                z,
            }
        })
        .collect();
    Ok(FunctionalDataset::new(subjects))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Kernel(KernelFamily),
    F,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kernel(k) => k.name(),
            Method::F => "f",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f" | "F" => Some(Method::F),
            _ => KernelFamily::parse(s).map(Method::Kernel),
        }
    }

    pub const ALL: [Method; 4] = [
        Method::Kernel(KernelFamily::Linear),
        Method::Kernel(KernelFamily::Quadratic),
        Method::Kernel(KernelFamily::Gaussian),
        Method::F,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub reps: usize,
    pub perms: usize,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub alpha_power: f64,
    pub basis: BasisSpec,
    pub lambda_grid: LambdaGrid,
    pub covariance: CovarianceConfig,
    pub kernel_bandwidth: Option<f64>,
    pub time_kernel: TimeKernel,
    pub ties: TieRule,
    pub refit: Refit,
}

impl StudyConfig {
    pub fn new(reps: usize, perms: usize, methods: Vec<Method>) -> Self {
        StudyConfig {
            reps,
            perms,
            methods,
            alphas: vec![0.01, 0.05, 0.1],
            alpha_power: 0.05,
            basis: BasisSpec::default(),
            lambda_grid: LambdaGrid::default(),
            covariance: CovarianceConfig::default(),
            kernel_bandwidth: None,
            time_kernel: TimeKernel::default(),
            ties: TieRule::default(),
            refit: Refit::default(),
        }
    }

    fn kernel(&self, family: KernelFamily) -> KernelSpec {
        KernelSpec {
            family,
            bandwidth: self.kernel_bandwidth,
            time_kernel: self.time_kernel,
        }
    }
}

/// p-values of every method on one replicate, in `cfg.methods` order.
///
/// Permutations for replicate `r` use the master seed
/// `derive_key(seed, [r, PERMUTATION])`, shared by all methods.
pub fn replicate_pvalues(
    spec: &ScenarioSpec,
    replicate: u64,
    cfg: &StudyConfig,
) -> Result<Vec<f64>> {
    let ds = generate(spec, replicate)?;
    let perm_seed = rng::derive_key(spec.seed, &[replicate, role::PERMUTATION]);
    let needs_prep = cfg.methods.iter().any(|m| matches!(m, Method::Kernel(_)));
    let prepared = if needs_prep {
        Some(prepare(&ds, &cfg.basis, &cfg.lambda_grid, &cfg.covariance)?)
    } else {
        None
    };
    cfg.methods
        .iter()
        .map(|m| match (m, &prepared) {
            (Method::Kernel(family), Some(prep)) => prep
                .test(
                    &cfg.kernel(*family),
                    cfg.perms,
                    perm_seed,
                    cfg.ties,
                    PermutationPath::Fast,
                    &Sequential,
                )
                .map(|r| r.p_value),
            (Method::F, _) => {
                let fc = FConfig {
                    perms: cfg.perms,
                    seed: perm_seed,
                    basis: cfg.basis,
                    lambda_grid: cfg.lambda_grid,
                    ties: cfg.ties,
                    refit: cfg.refit,
                };
                f_permutation_test(&ds, &fc, &Sequential).map(|r| r.p_value)
            }
            (Method::Kernel(_), None) => {
                unreachable!("prepared whenever a kernel method is requested")
            }
        })
        .collect()
}

/// `#{p ≤ α} / s`.
pub fn rejection_rate(p: &[f64], alpha: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    p.iter().filter(|&&v| v <= alpha).count() as f64 / p.len() as f64
}

/// `(Σ I(p > α) + 1) / (s + 1)`, kept for comparison with the rejection
/// proportion.
pub fn literal_type1(p: &[f64], alpha: f64) -> f64 {
    (p.iter().filter(|&&v| v > alpha).count() + 1) as f64 / (p.len() + 1) as f64
}

/// `#{p < α} / s`.
pub fn power(p: &[f64], alpha: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    p.iter().filter(|&&v| v < alpha).count() as f64 / p.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub alpha: f64,
    pub rejection: f64,
    pub literal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub p_values: Vec<f64>,
    pub rates: Vec<Rate>,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub delta: f64,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: String,
    pub spec: ScenarioSpec,
    pub config: StudyConfig,
    pub results: Vec<DeltaResult>,
}

impl BenchResult {
    /// Rows `(delta, method, power)` in grid order.
    pub fn power_rows(&self) -> Vec<(f64, Method, f64)> {
        self.results
            .iter()
            .flat_map(|d| d.methods.iter().map(move |m| (d.delta, m.method, m.power)))
            .collect()
    }

    pub fn summary(&self, delta_index: usize, method: Method) -> Option<&MethodSummary> {
        self.results
            .get(delta_index)?
            .methods
            .iter()
            .find(|m| m.method == method)
    }
}

fn summarize(cfg: &StudyConfig, per_rep: &[Vec<f64>]) -> Vec<MethodSummary> {
    cfg.methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let p_values: Vec<f64> = per_rep.iter().map(|r| r[k]).collect();
            MethodSummary {
                rates: cfg
                    .alphas
                    .iter()
                    .map(|&alpha| Rate {
                        alpha,
                        rejection: rejection_rate(&p_values, alpha),
                        literal: literal_type1(&p_values, alpha),
                    })
                    .collect(),
                power: power(&p_values, cfg.alpha_power),
                method,
                p_values,
            }
        })
        .collect()
}

/// Runs `cfg.reps` replicates at each delta; replicates are distributed by
/// `exec` and aggregated in replicate order.
pub fn power_study<E: Executor>(
    spec: &ScenarioSpec,
    deltas: &[f64],
    cfg: &StudyConfig,
    exec: &E,
) -> Result<BenchResult> {
    spec.check()?;
    if cfg.perms == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    let mut results = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let s = ScenarioSpec { delta, ..*spec };
        s.check()?;
        let per_rep = exec
            .map_indexed(cfg.reps, |r| replicate_pvalues(&s, r as u64, cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        results.push(DeltaResult {
            delta,
            methods: summarize(cfg, &per_rep),
        });
    }
    Ok(BenchResult {
        scenario: spec.name(),
        spec: *spec,
        config: cfg.clone(),
        results,
    })
}

/// Null study: a single zero-effect point.
pub fn type1_study<E: Executor>(
    spec: &ScenarioSpec,
    cfg: &StudyConfig,
    exec: &E,
) -> Result<BenchResult> {
    if spec.beta != 0 {
        return Err(Error::Config(
            "type-I study requires the null scenario".into(),
        ));
    }
    power_study(spec, &[0.0], cfg, exec)
}
