//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion outside `KNOWN_FAILURES` fails.

use std::process::Command;
use std::time::Instant;

use fosr::exec::Rayon;
use fosr::io::write_long_csv;
use fosr_core::basis::BasisSpec;
use fosr_core::data::{FunctionalDataset, SubjectRecord};
use fosr_core::fpca::{estimate_covariance, whiten, BlockPrecision, CovarianceConfig};
use fosr_core::kernel::{assemble, assemble_kronecker, KernelFamily, KernelSpec, TimeKernel};
use fosr_core::rng;
use fosr_core::score::{
    contractions, naive_permuted_statistic, permuted_statistic, score_components,
};
use fosr_core::sim::{
    default_deltas, generate, power_study, rejection_rate, type1_study, BenchResult, Method,
    Sampling, ScenarioSpec, StudyConfig,
};
use fosr_core::smoother::{fit_nuisance, residualize, LambdaGrid, ResidualDataset};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

const SEED: u64 = 7;
const ALPHA: f64 = 0.05;
const TYPE1_BAND: (f64, f64) = (0.020, 0.090);
const TYPE1_REPS: usize = 200;
const TYPE1_PERMS: usize = 200;
const TYPE1_N: usize = 50;
const POWER_REPS: usize = 100;
const POWER_PERMS: usize = 200;
const POWER_GAP_B2: f64 = 0.1;
const POWER_SLACK_B4: f64 = 0.05;
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const KRON_TOL: f64 = 1e-14;
const PERM_TOL: f64 = 1e-10;
const FPCA_EIG_TOL: f64 = 0.3;
const FPCA_SIGMA2_TOL: f64 = 0.2;
const FPCA_MIN_SEEDS: usize = 16;
const KS_LEVEL: f64 = 0.01;
/// Criteria that fail with the default configuration; see the README.
const KNOWN_FAILURES: &[u32] = &[4, 11];
const MONOTONE_GAIN: f64 = 0.2;
const LINEAR_B1_SLACK: f64 = 0.15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, o: &Outcome, secs: f64) -> bool {
    let known = KNOWN_FAILURES.contains(&id);
    let tag = match (o.pass, known) {
        (true, _) => "PASS",
        (false, true) => "FAIL (known)",
        (false, false) => "FAIL",
    };
    println!("{tag} [{id}] {name}: {} ({secs:.1}s)", o.detail);
    o.pass || known
}

fn kernels() -> Vec<Method> {
    KernelFamily::ALL
        .iter()
        .map(|&k| Method::Kernel(k))
        .collect()
}

fn null_study(sampling: Sampling, methods: Vec<Method>, exec: &Rayon) -> BenchResult {
    let spec = ScenarioSpec {
        n: TYPE1_N,
        seed: SEED,
        ..ScenarioSpec::new(sampling, 0, 0.0)
    };
    type1_study(
        &spec,
        &StudyConfig::new(TYPE1_REPS, TYPE1_PERMS, methods),
        exec,
    )
    .unwrap()
}

fn type1(benches: &[&BenchResult]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for b in benches {
        for m in &b.results[0].methods {
            let r = rejection_rate(&m.p_values, ALPHA);
            pass &= (TYPE1_BAND.0..=TYPE1_BAND.1).contains(&r);
            parts.push(format!(
                "{} {}={r:.3}",
                b.spec.sampling.name(),
                m.method.name()
            ));
        }
    }
    Outcome {
        pass,
        detail: format!(
            "{} in [{}, {}]",
            parts.join(", "),
            TYPE1_BAND.0,
            TYPE1_BAND.1
        ),
    }
}

fn dense_power(beta: u8, delta: f64, methods: Vec<Method>, exec: &Rayon) -> Vec<(Method, f64)> {
    let spec = ScenarioSpec {
        n: TYPE1_N,
        seed: SEED,
        ..ScenarioSpec::new(Sampling::Dense, beta, 0.0)
    };
    let bench = power_study(
        &spec,
        &[delta],
        &StudyConfig::new(POWER_REPS, POWER_PERMS, methods),
        exec,
    )
    .unwrap();
    bench.results[0]
        .methods
        .iter()
        .map(|m| (m.method, m.power))
        .collect()
}

fn power_of(rows: &[(Method, f64)], k: KernelFamily) -> f64 {
    rows.iter().find(|r| r.0 == Method::Kernel(k)).unwrap().1
}

fn criterion_power_b2(exec: &Rayon) -> Outcome {
    let rows = dense_power(
        2,
        1.2,
        vec![
            Method::Kernel(KernelFamily::Linear),
            Method::Kernel(KernelFamily::Quadratic),
        ],
        exec,
    );
    let (lin, quad) = (
        power_of(&rows, KernelFamily::Linear),
        power_of(&rows, KernelFamily::Quadratic),
    );
    Outcome {
        pass: quad - lin >= POWER_GAP_B2,
        detail: format!(
            "quadratic {quad:.2} - linear {lin:.2} = {:.2}, need >= {POWER_GAP_B2}",
            quad - lin
        ),
    }
}

fn criterion_power_b4(exec: &Rayon) -> Outcome {
    let rows = dense_power(4, 1.0, kernels(), exec);
    let g = power_of(&rows, KernelFamily::Gaussian);
    let best = power_of(&rows, KernelFamily::Linear).max(power_of(&rows, KernelFamily::Quadratic));
    Outcome {
        pass: g >= best - POWER_SLACK_B4,
        detail: format!(
            "gaussian {g:.2}, linear {:.2}, quadratic {:.2}, need gaussian >= {:.2}",
            power_of(&rows, KernelFamily::Linear),
            power_of(&rows, KernelFamily::Quadratic),
            best - POWER_SLACK_B4
        ),
    }
}

fn invariant_monotone(exec: &Rayon) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for sampling in [Sampling::Dense, Sampling::Sparse] {
        for beta in 1..=4u8 {
            let top = *default_deltas(sampling, beta).last().unwrap();
            let spec = ScenarioSpec {
                n: TYPE1_N,
                seed: SEED,
                ..ScenarioSpec::new(sampling, beta, 0.0)
            };
            let bench = power_study(
                &spec,
                &[0.0, top],
                &StudyConfig::new(POWER_REPS, POWER_PERMS, kernels()),
                exec,
            )
            .unwrap();
            let best = |k: usize| {
                bench.results[k]
                    .methods
                    .iter()
                    .map(|m| m.power)
                    .fold(0.0, f64::max)
            };
            let (p0, p1) = (best(0), best(1));
            pass &= p1 >= p0 + MONOTONE_GAIN;
            parts.push(format!("{} {:.2}->{:.2}", bench.scenario, p0, p1));
        }
    }
    Outcome {
        pass,
        detail: format!(
            "best-kernel power at delta 0 -> top of grid: {}; need gain >= {MONOTONE_GAIN}",
            parts.join(", ")
        ),
    }
}

fn invariant_linear_b1(exec: &Rayon) -> Outcome {
    let deltas = default_deltas(Sampling::Dense, 1);
    let spec = ScenarioSpec {
        n: TYPE1_N,
        seed: SEED,
        ..ScenarioSpec::new(Sampling::Dense, 1, 0.0)
    };
    let methods = vec![
        Method::Kernel(KernelFamily::Linear),
        Method::Kernel(KernelFamily::Gaussian),
    ];
    let bench = power_study(
        &spec,
        &deltas,
        &StudyConfig::new(POWER_REPS, POWER_PERMS, methods),
        exec,
    )
    .unwrap();
    let worst = bench
        .results
        .iter()
        .map(|d| (d.delta, d.methods[0].power - d.methods[1].power))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    Outcome {
        pass: worst.1 >= -LINEAR_B1_SLACK,
        detail: format!(
            "smallest linear - gaussian gap {:.2} at delta {}, need >= -{LINEAR_B1_SLACK}",
            worst.1, worst.0
        ),
    }
}

fn random_subjects<R: Rng>(rng: &mut R, n: usize, mmax: usize, p: usize) -> FunctionalDataset {
    FunctionalDataset::new(
        (0..n)
            .map(|i| {
                let m = rng.random_range(1..=mmax);
                let mut times: Vec<f64> = (0..m)
                    .map(|k| (k as f64 + rng.random::<f64>()) / m as f64)
                    .collect();
                times.sort_by(f64::total_cmp);
                SubjectRecord {
                    id: format!("s{i}"),
                    responses: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    times,
                    x: (0..p).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    z: vec![1.0],
                }
            })
            .collect(),
    )
}

fn l_kernel(family: KernelFamily, rho: f64, a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    match family {
        KernelFamily::Linear => dot,
        KernelFamily::Quadratic => (1.0 + dot).powi(2),
        KernelFamily::Gaussian => (-d2 / rho).exp(),
    }
}

fn median_sq_distance(x: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push(x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum());
        }
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    if k % 2 == 1 {
        d[k / 2]
    } else {
        0.5 * (d[k / 2 - 1] + d[k / 2])
    }
}

/// `K` written out entry by entry from the kernel definitions.
fn dense_kernel(ds: &FunctionalDataset, family: KernelFamily) -> DMatrix<f64> {
    let rho = median_sq_distance(&ds.covariates());
    let obs: Vec<(&[f64], f64)> = ds
        .subjects()
        .iter()
        .flat_map(|s| s.times.iter().map(move |&t| (s.x.as_slice(), t)))
        .collect();
    DMatrix::from_fn(obs.len(), obs.len(), |a, b| {
        l_kernel(family, rho, obs[a].0, obs[b].0) * (-(obs[a].1 - obs[b].1).powi(2)).exp()
    })
}

fn block_diag(rs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let dim = rs.iter().map(|r| r.nrows()).sum();
    let mut s = DMatrix::zeros(dim, dim);
    let mut off = 0;
    for r in rs {
        s.view_mut((off, off), r.shape()).copy_from(r);
        off += r.nrows();
    }
    s
}

fn log_likelihood(tau: f64, y: &DVector<f64>, k: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let v = k * tau + sigma;
    let chol = v.cholesky().expect("positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = y.len() as f64;
    -0.5 * y.dot(&chol.solve(y)) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn criterion_score_derivative() -> Outcome {
    let mut worst: f64 = 0.0;
    for inst in 0..10u64 {
        let mut rng = rng::stream(SEED, &[5, inst]);
        let n = rng.random_range(2..=5);
        let ds = random_subjects(&mut rng, n, 4, 2);
        let family = KernelFamily::ALL[inst as usize % 3];
        let rs: Vec<DMatrix<f64>> = ds
            .subjects()
            .iter()
            .map(|s| {
                let g = DMatrix::from_fn(s.len(), s.len(), |_, _| rng.random_range(-0.5..0.5));
                &g * g.transpose() + DMatrix::identity(s.len(), s.len()) * 0.7
            })
            .collect();
        let ids: Vec<&str> = ds.subjects().iter().map(|s| s.id.as_str()).collect();
        let blocks = BlockPrecision::from_blocks(&ids, rs.clone(), 0.7).unwrap();
        let km = assemble(&KernelSpec::new(family), &ds).unwrap();
        let res = ResidualDataset(ds.clone());
        let analytic = score_components(&blocks, &res, &km).unwrap().score();

        let y = DVector::from_vec(ds.stacked_responses());
        let k = dense_kernel(&ds, family);
        let sigma = block_diag(&rs);
        let fd = (log_likelihood(FD_STEP, &y, &k, &sigma)
            - log_likelihood(-FD_STEP, &y, &k, &sigma))
            / (2.0 * FD_STEP);
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1e-12));
    }
    Outcome {
        pass: worst < FD_TOL,
        detail: format!("max relative error {worst:.2e} over 10 instances, need < {FD_TOL:e}"),
    }
}

fn criterion_kronecker() -> Outcome {
    let mut worst: f64 = 0.0;
    for inst in 0..50u64 {
        let mut rng = rng::stream(SEED, &[6, inst]);
        let n = rng.random_range(2..=7);
        let g = rng.random_range(2..=9);
        let grid: Vec<f64> = (1..=g).map(|j| j as f64 / g as f64).collect();
        let family = KernelFamily::ALL[inst as usize % 3];
        let time_kernel = if inst % 2 == 0 {
            TimeKernel::SquaredExponential
        } else {
            TimeKernel::Exponential
        };
        let spec = KernelSpec {
            time_kernel,
            ..KernelSpec::new(family)
        };
        let mut masks = Vec::new();
        let mut subjects = Vec::new();
        for i in 0..n {
            let mut mask: Vec<bool> = (0..g).map(|_| rng.random_bool(0.6)).collect();
            let keep = rng.random_range(0..g);
            mask[keep] = true;
            let times: Vec<f64> = grid
                .iter()
                .zip(&mask)
                .filter(|(_, &b)| b)
                .map(|(&t, _)| t)
                .collect();
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                responses: vec![0.0; times.len()],
                times,
                x: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                z: vec![1.0],
            });
            masks.push(mask);
        }
        let ds = FunctionalDataset::new(subjects);
        let x = ds.covariates();
        let kron = assemble_kronecker(&spec, &x, &grid, &masks)
            .unwrap()
            .dense();
        let blocked = assemble(&spec, &ds).unwrap().dense();
        worst = worst.max((kron - blocked).abs().max());
    }
    Outcome {
        pass: worst <= KRON_TOL,
        detail: format!("max |diff| {worst:.2e} over 50 instances, need <= {KRON_TOL:e}"),
    }
}

fn criterion_fast_permutation() -> Outcome {
    let mut rng = rng::stream(SEED, &[7]);
    let ds = random_subjects(&mut rng, 12, 6, 3);
    let family = KernelFamily::Gaussian;
    let km = assemble(&KernelSpec::new(family), &ds).unwrap();
    let rs: Vec<DMatrix<f64>> = ds
        .subjects()
        .iter()
        .map(|s| DMatrix::identity(s.len(), s.len()) * 1.3)
        .collect();
    let ids: Vec<&str> = ds.subjects().iter().map(|s| s.id.as_str()).collect();
    let blocks = BlockPrecision::from_blocks(&ids, rs, 1.3).unwrap();
    let u = whiten(&blocks, &ResidualDataset(ds.clone())).unwrap();
    let c = contractions(&km, &u).unwrap();
    let x = ds.covariates();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..ds.n()).collect();
        perm.shuffle(&mut rng);
        let fast = permuted_statistic(&km.a, &c, &perm);
        let naive = naive_permuted_statistic(&km, family, &x, &u, &perm).unwrap();
        worst = worst.max((fast - naive).abs() / naive.abs());
    }
    Outcome {
        pass: worst < PERM_TOL,
        detail: format!("max relative error {worst:.2e} over 20 permutations, need < {PERM_TOL:e}"),
    }
}

fn criterion_fpca() -> Outcome {
    let mut good = 0;
    let mut misses = Vec::new();
    for seed in 0..20u64 {
        let spec = ScenarioSpec {
            n: 200,
            seed,
            ..ScenarioSpec::new(Sampling::Dense, 0, 0.0)
        };
        let ds = generate(&spec, 0).unwrap();
        let nm = fit_nuisance(&ds, &BasisSpec::default(), &LambdaGrid::default()).unwrap();
        let res = residualize(&ds, &nm.design, &nm.fit).unwrap();
        let m = estimate_covariance(&res, &CovarianceConfig::default()).unwrap();
        let ok = m.zeta() == 2
            && (m.eigenvalues[0] - 2.0).abs() <= FPCA_EIG_TOL
            && (m.eigenvalues[1] - 1.0).abs() <= FPCA_EIG_TOL
            && (m.sigma2 - 1.0).abs() <= FPCA_SIGMA2_TOL;
        if ok {
            good += 1;
        } else {
            misses.push(seed.to_string());
        }
    }
    Outcome {
        pass: good >= FPCA_MIN_SEEDS,
        detail: format!(
            "{good}/20 seeds recovered (missed: {}), need >= {FPCA_MIN_SEEDS}",
            misses.join(" ")
        ),
    }
}

/// Asymptotic Kolmogorov tail with the finite-sample correction of Stephens.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_statistic(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

fn criterion_uniformity(dense: &BenchResult) -> Outcome {
    let m = dense.results[0]
        .methods
        .iter()
        .find(|m| m.method == Method::Kernel(KernelFamily::Gaussian))
        .unwrap();
    let d = ks_statistic(&m.p_values);
    let p = ks_p_value(d, m.p_values.len());
    Outcome {
        pass: p > KS_LEVEL,
        detail: format!(
            "D = {d:.4}, KS p-value {p:.3} over {} p-values, need > {KS_LEVEL}",
            m.p_values.len()
        ),
    }
}

fn fosr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fosr"))
        .args(args)
        .output()
        .unwrap()
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScenarioSpec {
        n: 30,
        seed: SEED,
        ..ScenarioSpec::new(Sampling::Sparse, 2, 0.8)
    };
    let data = dir.path().join("data.csv");
    write_long_csv(
        std::fs::File::create(&data).unwrap(),
        &generate(&spec, 0).unwrap(),
    )
    .unwrap();
    let data = data.to_str().unwrap();
    let mut failures = Vec::new();
    let mut reference: Vec<Option<Vec<u8>>> = vec![None; 3];
    for threads in ["1", "2", "8"] {
        let t = dir.path().join(format!("t{threads}"));
        std::fs::create_dir_all(&t).unwrap();
        let runs: [(String, Vec<&str>, std::path::PathBuf); 3] = [
            (
                "test score".into(),
                vec![
                    "test",
                    "--data",
                    data,
                    "--x-cols",
                    "x1,x2,x3,x4,x5",
                    "--z-cols",
                    "z1,z2,z3",
                    "--perms",
                    "199",
                ],
                t.join("score.json"),
            ),
            (
                "test f".into(),
                vec![
                    "test",
                    "--method",
                    "f",
                    "--data",
                    data,
                    "--x-cols",
                    "x1,x2,x3,x4,x5",
                    "--z-cols",
                    "z1,z2,z3",
                    "--perms",
                    "19",
                ],
                t.join("f.json"),
            ),
            (
                "simulate".into(),
                vec![
                    "simulate",
                    "--scenario",
                    "dense-b4",
                    "--n",
                    "20",
                    "--reps",
                    "6",
                    "--perms",
                    "19",
                    "--deltas",
                    "0,1",
                ],
                t.join("dense-b4.json"),
            ),
        ];
        for (k, (name, mut args, out)) in runs.into_iter().enumerate() {
            let dest = if name == "simulate" {
                t.to_str().unwrap().to_string()
            } else {
                out.to_str().unwrap().to_string()
            };
            args.extend(["--seed", "11", "--threads", threads, "--out", &dest]);
            let o = fosr(&args);
            if !o.status.success() {
                failures.push(format!(
                    "{name} threads={threads} exited {:?}",
                    o.status.code()
                ));
                continue;
            }
            let bytes = std::fs::read(&out).unwrap();
            match &reference[k] {
                None => reference[k] = Some(bytes),
                Some(r) if *r != bytes => {
                    failures.push(format!("{name} threads={threads} differs"))
                }
                Some(_) => {}
            }
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "test score, test f and simulate byte-identical at 1, 2 and 8 threads".into()
        } else {
            failures.join("; ")
        },
    }
}

fn main() {
    let exec = Rayon::new(None).unwrap();
    let mut all = true;
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        all &= report(id, name, &o, t.elapsed().as_secs_f64());
    };

    let mut dense_null = None;
    run(1, "type-I calibration, score test", &mut || {
        let dense = null_study(Sampling::Dense, kernels(), &exec);
        let sparse = null_study(Sampling::Sparse, kernels(), &exec);
        let o = type1(&[&dense, &sparse]);
        dense_null = Some(dense);
        o
    });
    run(2, "type-I calibration, F baseline", &mut || {
        let dense = null_study(Sampling::Dense, vec![Method::F], &exec);
        let sparse = null_study(Sampling::Sparse, vec![Method::F], &exec);
        type1(&[&dense, &sparse])
    });
    run(3, "power ordering, dense beta2 at delta 1.2", &mut || {
        criterion_power_b2(&exec)
    });
    run(4, "power ordering, dense beta4 at delta 1.0", &mut || {
        criterion_power_b4(&exec)
    });
    run(
        5,
        "score derivative matches finite difference",
        &mut criterion_score_derivative,
    );
    run(
        6,
        "Kronecker assembly matches blockwise assembly",
        &mut criterion_kronecker,
    );
    run(
        7,
        "fast permutation path matches naive re-assembly",
        &mut criterion_fast_permutation,
    );
    run(
        8,
        "FPCA recovery on the simulated error process",
        &mut criterion_fpca,
    );
    let dense_null = dense_null.expect("criterion 1 ran");
    run(9, "null p-value uniformity, dense gaussian", &mut || {
        criterion_uniformity(&dense_null)
    });
    run(
        10,
        "CLI determinism across thread counts",
        &mut criterion_determinism,
    );
    run(
        11,
        "invariant: power grows over each delta grid",
        &mut || invariant_monotone(&exec),
    );
    run(
        12,
        "invariant: dense beta1 linear power >= gaussian - 0.15",
        &mut || invariant_linear_b1(&exec),
    );

    if !all {
        std::process::exit(1);
    }
}
