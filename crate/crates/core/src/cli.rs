//! `awl` command-line frontend.
//!
//! Exit codes: 0 success, 1 input error, 2 estimation or inference error,
//! 3 inference declined because the information matrix is near singular.
//! Every failure writes one `error kind=<kind> reason=<text>` line to stderr.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{AwlError, Result};
use crate::inference::{infer, weight_ci};
use crate::model_core::{CompositeSurface, DoseGrid, GridSpec, OutcomeSurface, PreferenceModel, Sample};
use crate::outcome_regression::{fit_outcome, BasisSpec, Outcome};
use crate::policy_engine::optimal_dose;
use crate::pseudo_likelihood::{FitConfig, FitFlag, PseudoLikelihood};
use crate::sim_engine::{run_study_with_workers, write_estimates_csv, write_values_csv, StudyConfig};

pub const ESTIMATE_FORMAT_VERSION: u32 = 1;

/// Environment variable holding the worker count for `simulate`.
pub const WORKERS_ENV: &str = "AWL_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "awl", version, about = "Preference-weight learning for two-outcome dose regimes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit outcome surfaces and the pseudo-likelihood; write an estimate JSON.
    Fit(FitArgs),
    /// Add standard errors, tests and intervals to an estimate JSON.
    Infer(InferArgs),
    /// Recommend doses for a covariate CSV.
    Policy(PolicyArgs),
    /// Run a Monte Carlo study from a scenario JSON.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Data CSV with columns x1..xp, a, y, z.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 1-based covariates entering the weight model, e.g. `1,2`; empty for a constant weight.
    #[arg(long, default_value = "")]
    weight_covs: String,
    /// Dose grid as `a_min,a_max,m`; defaults to the observed dose range with 201 points.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Highest power of dose in the outcome basis (1 or 2).
    #[arg(long, default_value_t = 2)]
    dose_degree: u8,
    /// Covariates interacting with dose: `all`, `none` or a 1-based list.
    #[arg(long, default_value = "all")]
    interactions: String,
    #[arg(long)]
    no_mains: bool,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long)]
    estimate: PathBuf,
    /// CSV with columns x1..xp; other columns are ignored.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Directory receiving estimates.csv and values.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; falls back to AWL_WORKERS, then to the number of CPUs.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub hessian_condition: Option<f64>,
    pub flags: Vec<FitFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterInference {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightInference {
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSection {
    pub level: f64,
    pub parameters: Vec<ParameterInference>,
    pub b_matrix: Vec<Vec<f64>>,
    /// Present for constant-weight models only.
    pub omega: Option<WeightInference>,
}

/// On-disk estimate produced by `fit` and extended by `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub format_version: u32,
    pub n: usize,
    pub beta: f64,
    pub preference: PreferenceModel,
    pub q_y: OutcomeSurface,
    pub q_z: OutcomeSurface,
    pub grid: GridSpec,
    pub fit: FitSummary,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub inference: Option<InferenceSection>,
}

impl EstimateFile {
    pub fn composite(&self) -> CompositeSurface {
        CompositeSurface::new(self.q_y.clone(), self.q_z.clone(), self.preference.clone())
    }

    pub fn dose_grid(&self) -> Result<DoseGrid> {
        DoseGrid::try_from(self.grid)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AwlError {
    AwlError::input(format!("{}: {e}", path.display()))
}

/// Reads `x1..xp, a, y, z` columns (any order, other columns ignored).
pub fn read_samples_csv(path: &Path) -> Result<Vec<Sample>> {
    let (cov_cols, mut reader, header) = open_table(path)?;
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AwlError::input(format!("{}: missing column `{name}`", path.display())))
    };
    let (ia, iy, iz) = (find("a")?, find("y")?, find("z")?);
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |i: usize| parse_cell(path, line + 2, rec.get(i).unwrap_or(""));
        let x = cov_cols.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>()?;
        out.push(Sample::new(x, num(ia)?, num(iy)?, num(iz)?));
    }
    if out.is_empty() {
        return Err(AwlError::input(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

/// Reads the `x1..xp` columns of a CSV.
pub fn read_covariates_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (cov_cols, mut reader, _) = open_table(path)?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        out.push(
            cov_cols
                .iter()
                .map(|&i| parse_cell(path, line + 2, rec.get(i).unwrap_or("")))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(out)
}

fn open_table(path: &Path) -> Result<(Vec<usize>, csv::Reader<File>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut cols = Vec::new();
    for k in 1.. {
        match header.iter().position(|h| *h == format!("x{k}")) {
            Some(i) => cols.push(i),
            None => break,
        }
    }
    Ok((cols, reader, header))
}

fn parse_cell(path: &Path, line: usize, cell: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| AwlError::input(format!("{}:{line}: `{cell}` is not a number", path.display())))
}

/// Writes samples with 17 significant digits so the file reads back exactly.
pub fn write_samples_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let p = samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
    header.extend(["a", "y", "z"].map(String::from));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for s in samples {
        let row: Vec<String> = s
            .x
            .iter()
            .chain([s.a, s.y, s.z].iter())
            .map(|v| format!("{v:.16e}"))
            .collect();
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn parse_index_list(spec: &str, p: usize, what: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    match spec {
        "" | "none" => Ok(Vec::new()),
        "all" => Ok((0..p).collect()),
        _ => spec
            .split(',')
            .map(|tok| {
                let k: usize = tok
                    .trim()
                    .parse()
                    .map_err(|_| AwlError::input(format!("{what}: `{tok}` is not an index")))?;
                if k == 0 || k > p {
                    return Err(AwlError::input(format!("{what}: covariate {k} not in 1..={p}")));
                }
                Ok(k - 1)
            })
            .collect(),
    }
}

fn parse_grid(spec: &str) -> Result<DoseGrid> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(AwlError::input(format!("grid `{spec}` must be a_min,a_max,m")));
    }
    let bad = || AwlError::input(format!("grid `{spec}` must be a_min,a_max,m"));
    DoseGrid::new(
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

enum Outcome3 {
    Ok,
    Declined(String),
}

fn cmd_fit(args: FitArgs) -> Result<Outcome3> {
    let data = read_samples_csv(&args.data)?;
    let p = data[0].x.len();
    if data.iter().any(|s| s.x.len() != p) {
        return Err(AwlError::input("rows have differing covariate counts"));
    }
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => {
            let lo = data.iter().map(|s| s.a).fold(f64::INFINITY, f64::min);
            let hi = data.iter().map(|s| s.a).fold(f64::NEG_INFINITY, f64::max);
            DoseGrid::new(lo, hi, 201)?
        }
    };
    let covs = parse_index_list(&args.weight_covs, p, "--weight-covs")?;
    let basis = BasisSpec::new(
        p,
        args.dose_degree,
        parse_index_list(&args.interactions, p, "--interactions")?,
        !args.no_mains,
        !args.no_intercept,
    );
    let (q_y, _) = fit_outcome(&data, Outcome::Y, &basis)?;
    let (q_z, _) = fit_outcome(&data, Outcome::Z, &basis)?;
    let pl = PseudoLikelihood::new(&data, &q_y, &q_z, &covs, &grid)?;
    let mut config = FitConfig::new(grid.clone());
    config.max_iter = args.max_iter;
    config.n_restarts = args.restarts;
    let est = pl.maximize(&config)?;

    let file = EstimateFile {
        format_version: ESTIMATE_FORMAT_VERSION,
        n: data.len(),
        beta: est.beta_hat,
        preference: PreferenceModel::new(est.theta_hat.clone(), covs)?,
        q_y,
        q_z,
        grid: grid.into(),
        fit: FitSummary {
            loglik: est.loglik,
            iterations: est.iterations,
            converged: est.converged,
            grad_norm: est.grad_norm,
            hessian_condition: finite(est.hessian_condition),
            flags: est.flags.clone(),
        },
        covariance: None,
        inference: None,
    };
    write_json(&args.out, &file)?;
    if est.has_flag(FitFlag::NearSingular) {
        return Ok(Outcome3::Declined(format!(
            "NEAR_SINGULAR hessian condition {:.3e}; weight parameters are not identified",
            est.hessian_condition
        )));
    }
    Ok(Outcome3::Ok)
}

fn cmd_infer(args: InferArgs) -> Result<Outcome3> {
    let data = read_samples_csv(&args.data)?;
    let mut file: EstimateFile = read_json(&args.estimate)?;
    if file.format_version != ESTIMATE_FORMAT_VERSION {
        return Err(AwlError::input(format!("unsupported format_version {}", file.format_version)));
    }
    let grid = file.dose_grid()?;
    let covs = file.preference.weight_covariate_indices.clone();
    let pl = PseudoLikelihood::new(&data, &file.q_y, &file.q_z, &covs, &grid)?;
    let est = crate::pseudo_likelihood::EstimateResult {
        theta_hat: file.preference.theta.clone(),
        beta_hat: file.beta,
        loglik: file.fit.loglik,
        iterations: file.fit.iterations,
        converged: file.fit.converged,
        grad_norm: file.fit.grad_norm,
        hessian_condition: file.fit.hessian_condition.unwrap_or(f64::INFINITY),
        flags: file.fit.flags.clone(),
        trace: vec![],
    };
    let inf = match infer(&pl, &est, args.level) {
        Ok(inf) => inf,
        Err(AwlError::NearSingular { condition }) => {
            return Ok(Outcome3::Declined(format!(
                "NEAR_SINGULAR information condition {condition:.3e}; inference declined"
            )))
        }
        Err(e) => return Err(e),
    };
    let mut names = vec!["beta".to_string()];
    names.push("theta0".to_string());
    names.extend(covs.iter().map(|k| format!("theta_x{}", k + 1)));
    let params = est.params();
    let parameters = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| ParameterInference {
            name,
            estimate: params[k],
            se: inf.se[k],
            z: inf.z_stats[k],
            p_value: inf.p_values[k],
            ci_lower: inf.ci_lower[k],
            ci_upper: inf.ci_upper[k],
        })
        .collect();
    let omega = if covs.is_empty() {
        let (w, lo, hi) = weight_ci(&file.preference, &est.theta_hat, &inf.cov_theta(), &[], args.level)?;
        Some(WeightInference {
            estimate: w,
            ci_lower: lo,
            ci_upper: hi,
        })
    } else {
        None
    };
    file.covariance = Some(matrix_rows(&inf.cov_hat));
    file.inference = Some(InferenceSection {
        level: args.level,
        parameters,
        b_matrix: matrix_rows(&inf.b_hat),
        omega,
    });
    write_json(&args.out, &file)?;
    Ok(Outcome3::Ok)
}

fn cmd_policy(args: PolicyArgs) -> Result<Outcome3> {
    let file: EstimateFile = read_json(&args.estimate)?;
    let grid = file.dose_grid()?;
    let cs = file.composite();
    let xs = read_covariates_csv(&args.covariates)?;
    let p = file.q_y.basis.n_covariates;
    let out = File::create(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(out));
    let mut header: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
    header.extend(["weight", "dose"].map(String::from));
    w.write_record(&header).map_err(|e| io_err(&args.out, e))?;
    for x in &xs {
        let weight = cs.pref.weight(x)?;
        let dose = optimal_dose(&cs, x, &grid)?;
        let row: Vec<String> = x
            .iter()
            .take(p)
            .chain([weight, dose].iter())
            .map(|v| format!("{v:.16e}"))
            .collect();
        w.write_record(&row).map_err(|e| io_err(&args.out, e))?;
    }
    w.flush().map_err(|e| io_err(&args.out, e))?;
    Ok(Outcome3::Ok)
}

fn worker_count(flag: Option<usize>) -> Result<usize> {
    if let Some(w) = flag {
        return Ok(w.max(1));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|w| w.max(1))
            .map_err(|_| AwlError::input(format!("{WORKERS_ENV}=`{v}` is not a count"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<Outcome3> {
    let mut config: StudyConfig = read_json(&args.scenario)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(reps) = args.reps {
        config.n_reps = reps;
    }
    let workers = worker_count(args.workers)?;
    let tables = config
        .scenarios()?
        .iter()
        .map(|s| run_study_with_workers(s, workers))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    for (name, writer) in [
        ("estimates.csv", write_estimates_csv as fn(&[_], BufWriter<File>) -> Result<()>),
        ("values.csv", write_values_csv),
    ] {
        let path = args.out_dir.join(name);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        writer(&tables, BufWriter::new(f))?;
    }
    Ok(Outcome3::Ok)
}

fn exit_code(e: &AwlError) -> i32 {
    match e {
        AwlError::Input(_) => 1,
        AwlError::NearSingular { .. } => 3,
        AwlError::RankDeficient { .. } | AwlError::Numeric(_) | AwlError::Estimation { .. } | AwlError::Inference(_) => 2,
    }
}

fn report(kind: &str, reason: &str) {
    let reason = reason.replace(['\n', '\r'], " ");
    let _ = writeln!(std::io::stderr(), "error kind={kind} reason={reason}");
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            report("usage", msg.lines().next().unwrap_or("invalid arguments"));
            return 1;
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Policy(a) => cmd_policy(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(Outcome3::Ok) => 0,
        Ok(Outcome3::Declined(reason)) => {
            report("near_singular", &reason);
            3
        }
        Err(e) => {
            report(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}
