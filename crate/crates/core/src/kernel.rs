//! Separable kernels `K((x, s), (x', t)) = L(x, x') · k(s, t)` and their
//! blocked Gram matrices.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::FunctionalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Linear,
    Quadratic,
    Gaussian,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] = [
        KernelFamily::Linear,
        KernelFamily::Quadratic,
        KernelFamily::Gaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::Quadratic => "quadratic",
            KernelFamily::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeKernel {
    /// `exp(−(s − t)²)`
    #[default]
    SquaredExponential,
    /// `exp(−|s − t|)`
    Exponential,
}

impl TimeKernel {
    #[inline]
    pub fn eval(self, s: f64, t: f64) -> f64 {
        let d = s - t;
        match self {
            TimeKernel::SquaredExponential => libm::exp(-(d * d)),
            TimeKernel::Exponential => libm::exp(-d.abs()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeKernel::SquaredExponential => "squared-exponential",
            TimeKernel::Exponential => "exponential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TimeKernel::SquaredExponential, TimeKernel::Exponential]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Gaussian `ρ`; `None` selects the median heuristic.
    pub bandwidth: Option<f64>,
    pub time_kernel: TimeKernel,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec {
            family,
            bandwidth: None,
            time_kernel: TimeKernel::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        match self.bandwidth {
            Some(rho) if !(rho > 0.0 && rho.is_finite()) => Err(Error::Config(format!(
                "kernel bandwidth {rho} must be positive"
            ))),
            _ => Ok(()),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `L(x1, x2)`; `rho` is only read by the gaussian family.
pub fn covariate_kernel(family: KernelFamily, rho: f64, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vectors of length {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    Ok(match family {
        KernelFamily::Linear => dot(x1, x2),
        KernelFamily::Quadratic => {
            let v = 1.0 + dot(x1, x2);
            v * v
        }
        KernelFamily::Gaussian => libm::exp(-sq_dist(x1, x2) / rho),
    })
}

/// Median of `‖X_i − X_j‖²` over `i < j`.
pub fn median_heuristic(x: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::InvalidData(
            "median heuristic needs at least 2 subjects".into(),
        ));
    }
    let mut d = Vec::with_capacity(x.len() * (x.len() - 1) / 2);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push(sq_dist(&x[i], &x[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    let med = if k % 2 == 1 {
        d[k / 2]
    } else {
        0.5 * (d[k / 2 - 1] + d[k / 2])
    };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::InvalidData(
            "median pairwise covariate distance is zero; set the gaussian bandwidth explicitly"
                .into(),
        ))
    }
}

/// Resolves the gaussian bandwidth for `x` (1.0 placeholder for other families).
pub fn resolve_bandwidth(spec: &KernelSpec, x: &[Vec<f64>]) -> Result<f64> {
    spec.check()?;
    match (spec.family, spec.bandwidth) {
        (KernelFamily::Gaussian, Some(rho)) => Ok(rho),
        (KernelFamily::Gaussian, None) => median_heuristic(x),
        _ => Ok(1.0),
    }
}

/// Covariate Gram matrix `A_ij = L(X_i, X_j)`.
pub fn covariate_gram(family: KernelFamily, rho: f64, x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = covariate_kernel(family, rho, &x[i], &x[j])?;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// Shared master grid: `t` is the time kernel on the grid and `index[i]`
/// lists subject `i`'s grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub grid: Vec<f64>,
    pub t: DMatrix<f64>,
    pub index: Vec<Vec<usize>>,
}

/// Blocked kernel: block `(i, j)` of `K` is `A_ij · T_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub a: DMatrix<f64>,
    pub times: Vec<Vec<f64>>,
    pub time_kernel: TimeKernel,
    pub rho: f64,
    pub layout: Option<GridLayout>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.times.iter().map(Vec::len).sum()
    }

    pub fn time_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        match &self.layout {
            Some(g) => DMatrix::from_fn(g.index[i].len(), g.index[j].len(), |h, k| {
                g.t[(g.index[i][h], g.index[j][k])]
            }),
            None => {
                let (ti, tj) = (&self.times[i], &self.times[j]);
                DMatrix::from_fn(ti.len(), tj.len(), |h, k| {
                    self.time_kernel.eval(ti[h], tj[k])
                })
            }
        }
    }

    /// Materializes the full `Σm_i × Σm_i` matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let offsets = offsets(&self.times);
        let mut k = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.n() {
            for j in 0..self.n() {
                let t = self.time_block(i, j);
                let aij = self.a[(i, j)];
                for h in 0..t.nrows() {
                    for c in 0..t.ncols() {
                        k[(offsets[i] + h, offsets[j] + c)] = aij * t[(h, c)];
                    }
                }
            }
        }
        k
    }

    /// Same time structure with a different covariate Gram matrix.
    pub fn with_gram(&self, a: DMatrix<f64>) -> Self {
        KernelMatrix { a, ..self.clone() }
    }
}

pub(crate) fn offsets(times: &[Vec<f64>]) -> Vec<usize> {
    let mut out = Vec::with_capacity(times.len() + 1);
    let mut acc = 0;
    out.push(0);
    for t in times {
        acc += t.len();
        out.push(acc);
    }
    out
}

fn subject_times(ds: &FunctionalDataset) -> Vec<Vec<f64>> {
    ds.subjects().iter().map(|s| s.times.clone()).collect()
}

/// Blocked kernel with time blocks evaluated per subject pair.
pub fn assemble(spec: &KernelSpec, ds: &FunctionalDataset) -> Result<KernelMatrix> {
    let x = ds.covariates();
    let rho = resolve_bandwidth(spec, &x)?;
    Ok(KernelMatrix {
        a: covariate_gram(spec.family, rho, &x)?,
        times: subject_times(ds),
        time_kernel: spec.time_kernel,
        rho,
        layout: None,
    })
}

/// Kernel on a shared grid: `K` is `A ⊗ T` restricted to the rows and
/// columns where `mask[i][h]` is set.
pub fn assemble_kronecker(
    spec: &KernelSpec,
    x: &[Vec<f64>],
    grid: &[f64],
    mask: &[Vec<bool>],
) -> Result<KernelMatrix> {
    if mask.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} masks for {} subjects",
            mask.len(),
            x.len()
        )));
    }
    let index: Vec<Vec<usize>> = mask
        .iter()
        .map(|row| {
            if row.len() != grid.len() {
                return Err(Error::DimensionMismatch(format!(
                    "mask of length {} for a grid of {}",
                    row.len(),
                    grid.len()
                )));
            }
            Ok(row
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(h, _)| h)
                .collect())
        })
        .collect::<Result<_>>()?;
    let times = index
        .iter()
        .map(|ix| ix.iter().map(|&h| grid[h]).collect())
        .collect();
    let rho = resolve_bandwidth(spec, x)?;
    let t = DMatrix::from_fn(grid.len(), grid.len(), |a, b| {
        spec.time_kernel.eval(grid[a], grid[b])
    });
    Ok(KernelMatrix {
        a: covariate_gram(spec.family, rho, x)?,
        times,
        time_kernel: spec.time_kernel,
        rho,
        layout: Some(GridLayout {
            grid: grid.to_vec(),
            t,
            index,
        }),
    })
}

/// Sorted union of all observation times.
pub fn master_grid(ds: &FunctionalDataset) -> Vec<f64> {
    let mut g = ds.pooled_times();
    g.sort_by(f64::total_cmp);
    g.dedup_by(|a, b| a.to_bits() == b.to_bits());
    g
}

/// Kronecker assembly against an explicit master grid.
pub fn assemble_on_grid(
    spec: &KernelSpec,
    ds: &FunctionalDataset,
    grid: &[f64],
) -> Result<KernelMatrix> {
    let mask = ds
        .subjects()
        .iter()
        .map(|s| {
            let mut row = alloc::vec![false; grid.len()];
            for &t in &s.times {
                match grid.binary_search_by(|g| g.total_cmp(&t)) {
                    Ok(h) => row[h] = true,
                    Err(_) => {
                        return Err(Error::OffGrid {
                            subject: s.id.clone(),
                            time: t,
                        })
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_kronecker(spec, &ds.covariates(), grid, &mask)
}

/// Kronecker path when subjects share a small master grid, blocked path
/// otherwise.
pub fn assemble_auto(spec: &KernelSpec, ds: &FunctionalDataset) -> Result<KernelMatrix> {
    let grid = master_grid(ds);
    let max_m = ds.subjects().iter().map(|s| s.len()).max().unwrap_or(0);
    if grid.len() <= 8 * max_m {
        assemble_on_grid(spec, ds, &grid)
    } else {
        assemble(spec, ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;
    use alloc::vec;
    use proptest::prelude::*;

    fn ds(rows: Vec<(Vec<f64>, Vec<f64>)>) -> FunctionalDataset {
        FunctionalDataset::new(
            rows.into_iter()
                .enumerate()
                .map(|(i, (x, times))| SubjectRecord {
                    id: format!("{i}"),
                    responses: vec![0.0; times.len()],
                    times,
                    x,
                    z: vec![1.0],
                })
                .collect(),
        )
    }

    #[test]
    fn family_values() {
        let k = |f, a: &[f64], b: &[f64]| covariate_kernel(f, 1.0, a, b).unwrap();
        assert_eq!(k(KernelFamily::Linear, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(k(KernelFamily::Gaussian, &[0.3, -2.0], &[0.3, -2.0]), 1.0);
        assert_eq!(k(KernelFamily::Quadratic, &[1.0, 1.0], &[1.0, 1.0]), 9.0);
        assert!(covariate_kernel(KernelFamily::Linear, 1.0, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_heuristic_cases() {
        assert_eq!(median_heuristic(&[vec![0.0], vec![2.0]]).unwrap(), 4.0);
        assert_eq!(
            median_heuristic(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
            1.0
        );
        assert!(median_heuristic(&[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
        assert!(median_heuristic(&[vec![1.0]]).is_err());
    }

    #[test]
    fn single_observation() {
        let d = ds(vec![(vec![0.5, 2.0], vec![0.3])]);
        let km = assemble(&KernelSpec::new(KernelFamily::Quadratic), &d).unwrap();
        let k = km.dense();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], (1.0f64 + 0.25 + 4.0).powi(2));
    }

    #[test]
    fn identical_subjects_share_blocks() {
        let d = ds(vec![
            (vec![1.0, -1.0], vec![0.1, 0.5]),
            (vec![1.0, -1.0], vec![0.1, 0.5]),
        ]);
        let km = assemble(&KernelSpec::new(KernelFamily::Linear), &d).unwrap();
        let k = km.dense();
        assert_eq!(k.view((0, 2), (2, 2)), k.view((0, 0), (2, 2)));
    }

    #[test]
    fn brute_force_irregular() {
        let d = ds(vec![
            (vec![0.2, 1.0], vec![0.1, 0.35, 0.9]),
            (vec![-0.4, 0.5], vec![0.2]),
            (vec![1.5, -0.1], vec![0.05, 0.6]),
        ]);
        for family in KernelFamily::ALL {
            for tk in [TimeKernel::SquaredExponential, TimeKernel::Exponential] {
                let spec = KernelSpec {
                    family,
                    bandwidth: None,
                    time_kernel: tk,
                };
                let km = assemble(&spec, &d).unwrap();
                let k = km.dense();
                let obs: Vec<(&[f64], f64)> = d
                    .subjects()
                    .iter()
                    .flat_map(|s| s.times.iter().map(move |&t| (s.x.as_slice(), t)))
                    .collect();
                for (r, (xa, ta)) in obs.iter().enumerate() {
                    for (c, (xb, tb)) in obs.iter().enumerate() {
                        let l = covariate_kernel(family, km.rho, xa, xb).unwrap();
                        let tv = match tk {
                            TimeKernel::SquaredExponential => (-(ta - tb) * (ta - tb)).exp(),
                            TimeKernel::Exponential => (-(ta - tb).abs()).exp(),
                        };
                        assert!((k[(r, c)] - l * tv).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn full_mask_is_kronecker_product() {
        let x = vec![vec![0.3, 1.0], vec![-1.0, 0.2], vec![0.7, 0.7]];
        let grid = vec![0.0, 0.25, 0.5, 1.0];
        let mask = vec![vec![true; 4]; 3];
        let km =
            assemble_kronecker(&KernelSpec::new(KernelFamily::Gaussian), &x, &grid, &mask).unwrap();
        let t = km.layout.as_ref().unwrap().t.clone();
        assert_eq!(km.dense(), km.a.kronecker(&t));
    }

    #[test]
    fn one_per_subject_is_hadamard() {
        let x = vec![vec![0.3], vec![-1.0], vec![2.0]];
        let grid = vec![0.0, 0.5, 1.0];
        let mask = vec![
            vec![true, false, false],
            vec![false, false, true],
            vec![false, true, false],
        ];
        let km =
            assemble_kronecker(&KernelSpec::new(KernelFamily::Linear), &x, &grid, &mask).unwrap();
        let times = [0.0, 1.0, 0.5];
        let k = km.dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(
                    k[(i, j)],
                    km.a[(i, j)] * TimeKernel::SquaredExponential.eval(times[i], times[j])
                );
            }
        }
    }

    #[test]
    fn off_grid_time_is_error() {
        let d = ds(vec![(vec![1.0], vec![0.1, 0.3]), (vec![2.0], vec![0.2])]);
        let r = assemble_on_grid(&KernelSpec::new(KernelFamily::Linear), &d, &[0.1, 0.2]);
        assert!(matches!(r, Err(Error::OffGrid { .. })));
    }

    fn min_eig_ratio(a: &DMatrix<f64>) -> f64 {
        let e = a.clone().symmetric_eigenvalues();
        e.min() / e.max().abs().max(f64::MIN_POSITIVE)
    }

    proptest! {
        #[test]
        fn kronecker_matches_blocked(
            seed in any::<u64>(),
            n in 1usize..6,
            m in 1usize..8,
            keep in 0.1f64..1.0,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[]);
            let grid: Vec<f64> = (0..m).map(|k| (k as f64 + rng.random::<f64>()) / m as f64).collect();
            let mut rows = Vec::new();
            let mut mask = Vec::new();
            for _ in 0..n {
                let mut row: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < keep).collect();
                if !row.iter().any(|&b| b) {
                    row[rng.random_range(0..m)] = true;
                }
                let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let times = grid.iter().zip(&row).filter(|(_, &b)| b).map(|(&t, _)| t).collect();
                rows.push((x, times));
                mask.push(row);
            }
            let d = ds(rows);
            // canonical order is by id; ids are "0".."n-1" so n < 10 keeps order
            for family in KernelFamily::ALL {
                let spec = KernelSpec { family, bandwidth: Some(1.3), time_kernel: TimeKernel::Exponential };
                let fast = assemble_kronecker(&spec, &d.covariates(), &grid, &mask).unwrap().dense();
                let naive = assemble(&spec, &d).unwrap().dense();
                prop_assert!((fast - naive).amax() <= 1e-14);
            }
        }

        #[test]
        fn covariate_grams_are_psd(seed in any::<u64>(), n in 2usize..12, p in 1usize..6) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[]);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
            for family in KernelFamily::ALL {
                let a = covariate_gram(family, 1.7, &x).unwrap();
                prop_assert_eq!(&a, &a.transpose());
                prop_assert!(min_eig_ratio(&a) >= -1e-8);
            }
        }

        #[test]
        fn relabeling_permutes_gram(seed in any::<u64>(), n in 2usize..8) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[]);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random::<f64>()).collect()).collect();
            let perm = crate::rng::permutation(seed, 0, n);
            let xp: Vec<Vec<f64>> = perm.iter().map(|&k| x[k].clone()).collect();
            for family in KernelFamily::ALL {
                let a = covariate_gram(family, 0.5, &x).unwrap();
                let ap = covariate_gram(family, 0.5, &xp).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(ap[(i, j)], a[(perm[i], perm[j])]);
                    }
                }
            }
        }
    }
}
