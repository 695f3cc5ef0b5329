//! The `fosr` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fosr_core::basis::BasisSpec;
use fosr_core::data::{FunctionalDataset, SubjectRecord};
use fosr_core::fpca::{estimate_covariance, Bandwidth, CovarianceConfig, CovarianceModel};
use fosr_core::ftest::{f_permutation_test, FConfig, Refit};
use fosr_core::kernel::{KernelFamily, KernelSpec, TimeKernel};
use fosr_core::score::{prepare, PermutationPath, TieRule};
use fosr_core::sim::{default_deltas, power_study, Method, ScenarioSpec, StudyConfig};
use fosr_core::smoother::{fit_nuisance, residualize, LambdaGrid};
use fosr_core::Stage;

use crate::error::{CliError, Result};
use crate::exec::Rayon;
use crate::io::{file_hash, load_long_csv, write_atomic, ColumnSpec};
use crate::manifest::{manifest_path, RunManifest, Stopwatch, SCHEMA_VERSION};
use crate::plot::{power_csv, power_svg};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (manifest schema 1)");

#[derive(Debug, Parser)]
#[command(name = "fosr", version = VERSION, about = "Kernel-machine score tests for function-on-scalar regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test for an effect of X on the functional response.
    Test(TestArgs),
    /// Run a simulation study and write power tables and plots.
    Simulate(SimArgs),
    /// Check a data file and list every violation.
    Validate(ValidateArgs),
    /// Fit the nuisance model and report the estimated error covariance.
    DescribeCovariance(CovArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "id")]
    id_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Covariates of interest, comma separated.
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
    /// Nuisance covariates, comma separated; an intercept is added unless the first is constant 1.
    #[arg(long, value_delimiter = ',')]
    z_cols: Vec<String>,
    /// Map observation times affinely onto [0, 1] before fitting.
    #[arg(long)]
    rescale_time: bool,
}

impl DataArgs {
    fn columns(&self) -> ColumnSpec {
        ColumnSpec {
            id: self.id_col.clone(),
            time: self.time_col.clone(),
            y: self.y_col.clone(),
            x: self.x_cols.clone(),
            z: self.z_cols.clone(),
        }
    }

    fn load(&self) -> Result<FunctionalDataset> {
        let ds = load_long_csv(&self.data, &self.columns())?;
        Ok(if self.rescale_time {
            rescale_time(&ds)
        } else {
            ds
        })
    }
}

fn rescale_time(ds: &FunctionalDataset) -> FunctionalDataset {
    let (lo, hi) = ds.time_domain();
    let span = if hi > lo { hi - lo } else { 1.0 };
    FunctionalDataset::new(
        ds.subjects()
            .iter()
            .map(|s| SubjectRecord {
                times: s.times.iter().map(|t| (t - lo) / span).collect(),
                ..s.clone()
            })
            .collect(),
    )
}

#[derive(Debug, Args)]
struct SmoothArgs {
    /// B-spline basis dimension for every smooth.
    #[arg(long, default_value_t = 10)]
    basis_dim: usize,
    /// Smoothing-parameter grid as log10 lo,hi,count.
    #[arg(long, default_value = "-6,6,25", allow_hyphen_values = true)]
    lambda_grid: String,
    /// Proportion of variance the retained components must explain.
    #[arg(long, default_value_t = 0.95)]
    pve: f64,
    /// Covariance grid size.
    #[arg(long, default_value_t = 51)]
    cov_grid: usize,
    /// Covariance smoothing bandwidth: auto or a positive number.
    #[arg(long, default_value = "auto")]
    cov_bandwidth: String,
}

impl SmoothArgs {
    fn basis(&self) -> BasisSpec {
        BasisSpec {
            dim: self.basis_dim,
            ..BasisSpec::default()
        }
    }

    fn lambda_grid(&self) -> Result<LambdaGrid> {
        let parts: Vec<&str> = self.lambda_grid.split(',').map(str::trim).collect();
        let bad = || {
            CliError::Usage(format!(
                "--lambda-grid expects lo,hi,count, got '{}'",
                self.lambda_grid
            ))
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let grid = LambdaGrid {
            log10_lo: parts[0].parse().map_err(|_| bad())?,
            log10_hi: parts[1].parse().map_err(|_| bad())?,
            count: parts[2].parse().map_err(|_| bad())?,
        };
        grid.check().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(grid)
    }

    fn covariance(&self) -> Result<CovarianceConfig> {
        let bandwidth = match self.cov_bandwidth.as_str() {
            "auto" => Bandwidth::Auto,
            v => Bandwidth::Fixed(v.parse().map_err(|_| {
                CliError::Usage(format!(
                    "--cov-bandwidth expects 'auto' or a number, got '{v}'"
                ))
            })?),
        };
        let cfg = CovarianceConfig {
            grid_size: self.cov_grid,
            pve: self.pve,
            bandwidth,
            ..CovarianceConfig::default()
        };
        cfg.check().map_err(|e| CliError::Usage(e.to_string()))?;
        let basis = self.basis();
        basis.check().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    Linear,
    Quadratic,
    Gaussian,
}

impl From<KernelArg> for KernelFamily {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Linear => KernelFamily::Linear,
            KernelArg::Quadratic => KernelFamily::Quadratic,
            KernelArg::Gaussian => KernelFamily::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TimeKernelArg {
    SquaredExponential,
    Exponential,
}

impl From<TimeKernelArg> for TimeKernel {
    fn from(k: TimeKernelArg) -> Self {
        match k {
            TimeKernelArg::SquaredExponential => TimeKernel::SquaredExponential,
            TimeKernelArg::Exponential => TimeKernel::Exponential,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TiesArg {
    Strict,
    Inclusive,
}

impl From<TiesArg> for TieRule {
    fn from(t: TiesArg) -> Self {
        match t {
            TiesArg::Strict => TieRule::Strict,
            TiesArg::Inclusive => TieRule::Inclusive,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Score,
    F,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Count permuted statistics equal to the observed one as exceeding it.
    #[arg(long, value_enum, default_value = "strict")]
    ties: TiesArg,
    /// Keep the alternative model's smoothing parameters fixed across permutations.
    #[arg(long)]
    fast_f: bool,
    #[arg(long, value_enum, default_value = "squared-exponential")]
    time_kernel: TimeKernelArg,
    /// Gaussian kernel bandwidth; defaults to the median heuristic.
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    smooth: SmoothArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value = "score")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    kernel: KernelArg,
    #[arg(long, default_value_t = 1000)]
    perms: usize,
    /// Recompute the full kernel for every permutation (slow; for checking).
    #[arg(long)]
    naive_perms: bool,
    /// Result JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long, default_value = "dense-null")]
    scenario: String,
    /// Effect sizes as lo:hi:step or a comma-separated list; defaults to the scenario grid.
    #[arg(long)]
    deltas: Option<String>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 200)]
    perms: usize,
    /// Methods: any of linear, quadratic, gaussian, f.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "linear,quadratic,gaussian,f"
    )]
    kernels: Vec<String>,
    /// Subjects per replicate.
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[command(flatten)]
    smooth: SmoothArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct CovArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    smooth: SmoothArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn executor(threads: Option<usize>) -> Result<Rayon> {
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Rayon::new(threads).map_err(|e| CliError::Usage(e.to_string()))
}

fn kernel_spec(run: &RunArgs, family: KernelFamily) -> Result<KernelSpec> {
    let spec = KernelSpec {
        family,
        bandwidth: run.bandwidth,
        time_kernel: run.time_kernel.into(),
    };
    spec.check().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `bytes` to `out` (atomically) or stdout.
fn emit(out: Option<&Path>, bytes: &[u8], stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => stdout
            .write_all(bytes)
            .map_err(|e| CliError::Output(e.to_string())),
    }
}

struct Context {
    command: String,
    args: Vec<String>,
    watch: Stopwatch,
}

impl Context {
    fn manifest<C: Serialize>(
        &self,
        config: &C,
        seed: u64,
        threads: usize,
        input: Option<&Path>,
        outputs: &[&Path],
    ) -> Result<RunManifest> {
        Ok(RunManifest {
            schema_version: SCHEMA_VERSION,
            software_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            args: self.args.clone(),
            config: serde_json::to_value(config)?,
            seed,
            threads,
            input_sha256: input.map(file_hash).transpose()?,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_seconds: self.watch.total(),
            stages: self.watch.stages.clone(),
        })
    }
}

#[derive(Serialize)]
struct TestRecord<'a> {
    method: &'a str,
    data: String,
    columns: ColumnsRecord<'a>,
    rescale_time: bool,
}

#[derive(Serialize)]
struct ColumnsRecord<'a> {
    id: &'a str,
    time: &'a str,
    y: &'a str,
    x: &'a [String],
    z: &'a [String],
}

fn columns_record(d: &DataArgs) -> ColumnsRecord<'_> {
    ColumnsRecord {
        id: &d.id_col,
        time: &d.time_col,
        y: &d.y_col,
        x: &d.x_cols,
        z: &d.z_cols,
    }
}

fn cmd_test(
    a: &TestArgs,
    ctx: &mut Context,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<()> {
    if a.perms == 0 {
        return Err(CliError::Usage("--perms must be at least 1".into()));
    }
    if a.data.x_cols.is_empty() {
        return Err(CliError::Usage("--x-cols names no covariates".into()));
    }
    let grid = a.smooth.lambda_grid()?;
    let cov = a.smooth.covariance()?;
    let basis = a.smooth.basis();
    let exec = executor(a.run.threads)?;
    let ds = a.data.load()?;
    ctx.watch.lap("load");
    let ties: TieRule = a.run.ties.into();

    let (bytes, p_value, config) = match a.method {
        MethodArg::Score => {
            let kernel = kernel_spec(&a.run, a.kernel.into())?;
            let prepared = prepare(&ds, &basis, &grid, &cov)?;
            ctx.watch.lap("prepare");
            let path = if a.naive_perms {
                PermutationPath::Naive
            } else {
                PermutationPath::Fast
            };
            let r = prepared.test(&kernel, a.perms, a.run.seed, ties, path, &exec)?;
            ctx.watch.lap("permutations");
            let config = serde_json::json!({
                "kernel": kernel, "perms": a.perms, "basis": basis, "lambda_grid": grid,
                "covariance": cov, "ties": ties, "path": path,
            });
            (to_json(&r)?, r.p_value, config)
        }
        MethodArg::F => {
            let fc = FConfig {
                perms: a.perms,
                seed: a.run.seed,
                basis,
                lambda_grid: grid,
                ties,
                refit: if a.run.fast_f {
                    Refit::Frozen
                } else {
                    Refit::Gcv
                },
            };
            let r = f_permutation_test(&ds, &fc, &exec)?;
            ctx.watch.lap("permutations");
            (to_json(&r)?, r.p_value, serde_json::to_value(&fc)?)
        }
    };
    emit(a.out.as_deref(), &bytes, stdout)?;
    writeln!(stderr, "p-value {p_value}").map_err(|e| CliError::Output(e.to_string()))?;
    if let Some(out) = &a.out {
        let record = TestRecord {
            method: match a.method {
                MethodArg::Score => "score",
                MethodArg::F => "f",
            },
            data: a.data.data.display().to_string(),
            columns: columns_record(&a.data),
            rescale_time: a.data.rescale_time,
        };
        let config = serde_json::json!({ "run": record, "test": config });
        ctx.manifest(
            &config,
            a.run.seed,
            exec.threads(),
            Some(&a.data.data),
            &[out],
        )?
        .write(&manifest_path(out))?;
    }
    Ok(())
}

fn parse_deltas(s: &str) -> Result<Vec<f64>> {
    let bad = || {
        CliError::Usage(format!(
            "--deltas expects lo:hi:step or a comma list, got '{s}'"
        ))
    };
    if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [lo, hi, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0 && hi >= lo && lo >= 0.0) {
            return Err(bad());
        }
        let k = ((hi - lo) / step + 1e-9).floor() as usize;
        // rounding to 1e-12 removes accumulated error such as 0.30000000000000004
        Ok((0..=k)
            .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
            .collect())
    } else if s.trim().is_empty() {
        Ok(Vec::new())
    } else {
        s.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect()
    }
}

fn cmd_simulate(a: &SimArgs, ctx: &mut Context, stderr: &mut dyn Write) -> Result<()> {
    let (sampling, beta) = ScenarioSpec::parse_name(&a.scenario)
        .ok_or_else(|| CliError::Usage(format!("unknown scenario '{}'", a.scenario)))?;
    let methods: Vec<Method> = a
        .kernels
        .iter()
        .map(|k| {
            Method::parse(k.trim()).ok_or_else(|| CliError::Usage(format!("unknown method '{k}'")))
        })
        .collect::<Result<_>>()?;
    if a.reps == 0 || a.perms == 0 {
        return Err(CliError::Usage(
            "--reps and --perms must be at least 1".into(),
        ));
    }
    let deltas = match &a.deltas {
        Some(s) => parse_deltas(s)?,
        None => default_deltas(sampling, beta),
    };
    let spec = ScenarioSpec {
        n: a.n,
        seed: a.run.seed,
        ..ScenarioSpec::new(sampling, beta, 0.0)
    };
    spec.check().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut cfg = StudyConfig::new(a.reps, a.perms, methods);
    cfg.basis = a.smooth.basis();
    cfg.lambda_grid = a.smooth.lambda_grid()?;
    cfg.covariance = a.smooth.covariance()?;
    cfg.kernel_bandwidth = a.run.bandwidth;
    cfg.time_kernel = a.run.time_kernel.into();
    cfg.ties = a.run.ties.into();
    cfg.refit = if a.run.fast_f {
        Refit::Frozen
    } else {
        Refit::Gcv
    };
    kernel_spec(&a.run, KernelFamily::Gaussian)?;
    let exec = executor(a.run.threads)?;

    let bench = power_study(&spec, &deltas, &cfg, &exec)?;
    ctx.watch.lap("study");

    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Output(format!("{}: {e}", a.out.display())))?;
    let name = bench.scenario.clone();
    let json = a.out.join(format!("{name}.json"));
    let csv = a.out.join(format!("{name}_power.csv"));
    let svg = a.out.join(format!("{name}_power.svg"));
    write_atomic(&json, &to_json(&bench)?)?;
    write_atomic(&csv, power_csv(&bench).as_bytes())?;
    write_atomic(&svg, power_svg(&bench).as_bytes())?;
    ctx.watch.lap("write");
    for d in &bench.results {
        for m in &d.methods {
            writeln!(
                stderr,
                "{name} delta={} {}: power {}",
                d.delta,
                m.method.name(),
                m.power
            )
            .map_err(|e| CliError::Output(e.to_string()))?;
        }
    }
    let config = serde_json::json!({ "scenario": spec, "deltas": deltas, "study": cfg });
    ctx.manifest(
        &config,
        a.run.seed,
        exec.threads(),
        None,
        &[&json, &csv, &svg],
    )?
    .write(&manifest_path(&json))?;
    Ok(())
}

fn cmd_validate(a: &ValidateArgs, stdout: &mut dyn Write) -> Result<()> {
    let ds = a.data.load()?;
    let violations = ds.validate();
    let w = |e: std::io::Error| CliError::Output(e.to_string());
    for v in &violations {
        writeln!(stdout, "{v}").map_err(w)?;
    }
    if violations.is_empty() {
        writeln!(
            stdout,
            "ok: {} subjects, {} observations, p = {}, q = {}",
            ds.n(),
            ds.total_observations(),
            ds.p(),
            ds.q()
        )
        .map_err(w)?;
        Ok(())
    } else {
        Err(CliError::Invalid(violations.len()))
    }
}

#[derive(Serialize)]
struct CovarianceReport {
    nuisance_lambdas: Vec<f64>,
    zeta: usize,
    covariance: CovarianceModel,
}

fn cmd_describe(a: &CovArgs, ctx: &mut Context, stdout: &mut dyn Write) -> Result<()> {
    let grid = a.smooth.lambda_grid()?;
    let cov = a.smooth.covariance()?;
    let ds = a.data.load()?;
    ds.ensure_valid().map_err(|e| e.at(Stage::Validate))?;
    let nm = fit_nuisance(&ds, &a.smooth.basis(), &grid).map_err(|e| e.at(Stage::Nuisance))?;
    let res = residualize(&ds, &nm.design, &nm.fit).map_err(|e| e.at(Stage::Nuisance))?;
    let model = estimate_covariance(&res, &cov).map_err(|e| e.at(Stage::Covariance))?;
    ctx.watch.lap("covariance");
    let report = CovarianceReport {
        nuisance_lambdas: nm.fit.lambdas,
        zeta: model.zeta(),
        covariance: model,
    };
    emit(a.out.as_deref(), &to_json(&report)?, stdout)?;
    if let Some(out) = &a.out {
        let config = serde_json::json!({
            "basis": a.smooth.basis(), "lambda_grid": grid, "covariance": cov,
            "columns": columns_record(&a.data), "rescale_time": a.data.rescale_time,
        });
        ctx.manifest(&config, 0, 1, Some(&a.data.data), &[out])?
            .write(&manifest_path(out))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    stage: Option<Stage>,
    exit_code: i32,
}

fn stage_of(e: &CliError) -> Option<Stage> {
    match e {
        CliError::Core(fosr_core::Error::Stage { stage, .. }) => Some(*stage),
        _ => None,
    }
}

fn out_target(cmd: &Command) -> Option<PathBuf> {
    match cmd {
        Command::Test(a) => a.out.clone(),
        Command::DescribeCovariance(a) => a.out.clone(),
        Command::Simulate(a) => Some(a.out.join("error.json")),
        Command::Validate(_) => None,
    }
}

/// Runs the CLI with explicit argument list and output streams; returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = stdout.write_all(rendered.as_bytes());
            } else {
                let _ = stderr.write_all(rendered.as_bytes());
            }
            return code;
        }
    };
    let mut ctx = Context {
        command: match &cli.command {
            Command::Test(_) => "test",
            Command::Simulate(_) => "simulate",
            Command::Validate(_) => "validate",
            Command::DescribeCovariance(_) => "describe-covariance",
        }
        .into(),
        args: args
            .iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
        watch: Stopwatch::default(),
    };
    let result = match &cli.command {
        Command::Test(a) => cmd_test(a, &mut ctx, stdout, stderr),
        Command::Simulate(a) => cmd_simulate(a, &mut ctx, stderr),
        Command::Validate(a) => cmd_validate(a, stdout),
        Command::DescribeCovariance(a) => cmd_describe(a, &mut ctx, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let _ = writeln!(stderr, "fosr: {e}");
            if let (Some(path), false) =
                (out_target(&cli.command), matches!(e, CliError::Output(_)))
            {
                let report = ErrorReport {
                    error: e.to_string(),
                    stage: stage_of(&e),
                    exit_code: code,
                };
                if let Ok(bytes) = to_json(&report) {
                    let _ = write_atomic(&path, &bytes);
                }
            }
            code
        }
    }
}
