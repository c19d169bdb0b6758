//! Generative two-outcome dose scenarios and the Monte Carlo study runner.
//!
//! Covariates are iid `N(0, x_sd^2)`. Each outcome is quadratic in dose,
//! `Y = A (c_Y' x + c_Y0) + curvature A^2 + eps`, and doses are drawn from the
//! assignment density of the true composite surface. Replication `r` of a
//! study uses the seed [`replication_seed`]`(master_seed, r)`, so results do
//! not depend on how replications are scheduled across workers.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment_density::density_at;
use crate::error::{AwlError, Result};
use crate::inference::{infer, weight_wald, InferenceResult};
use crate::model_core::{expit, CompositeSurface, DoseGrid, GridSpec, OutcomeSurface, PreferenceModel, Sample};
use crate::outcome_regression::{fit_outcome, BasisSpec, Outcome};
use crate::policy_engine::{value_observed, value_under_policy, Policy, PolicyKind};
use crate::pseudo_likelihood::{EstimateResult, FitConfig, FitFlag, PseudoLikelihood};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightKind {
    Fixed { omega0: f64 },
    PatientSpecific { theta0: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub p: usize,
    pub x_sd: f64,
    /// Dose slope coefficients `(c_1..c_p, c_0)` of outcome Y.
    pub coef_y: Vec<f64>,
    pub coef_z: Vec<f64>,
    pub curvature: f64,
    pub noise_sd: f64,
    pub beta0: f64,
    pub weight: WeightKind,
    pub grid: DoseGrid,
    pub n: usize,
    pub n_reps: usize,
    pub master_seed: u64,
    pub eval_size: usize,
    pub alpha: f64,
    pub n_restarts: usize,
}

impl Scenario {
    /// Two-covariate design with constant weight `omega0`.
    pub fn fixed_utility(n: usize, beta0: f64, omega0: f64, grid: DoseGrid) -> Self {
        Self {
            p: 2,
            x_sd: 0.5,
            coef_y: vec![4.0, -2.0, 2.0],
            coef_z: vec![2.0, -4.0, -2.0],
            curvature: -2.0,
            noise_sd: 0.5,
            beta0,
            weight: WeightKind::Fixed { omega0 },
            grid,
            n,
            n_reps: 500,
            master_seed: 2024,
            eval_size: 10_000,
            alpha: 0.05,
            n_restarts: 3,
        }
    }

    /// Two-covariate design with weight `expit(theta0' (1, x))`.
    pub fn patient_specific(n: usize, beta0: f64, theta0: Vec<f64>, grid: DoseGrid) -> Self {
        Self {
            weight: WeightKind::PatientSpecific { theta0 },
            ..Self::fixed_utility(n, beta0, 0.5, grid)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 || self.n == 0 || self.eval_size == 0 {
            return Err(AwlError::input("n, n_reps and eval_size must be positive"));
        }
        if !(self.beta0 > 0.0) {
            return Err(AwlError::input(format!("beta0 {} must be positive", self.beta0)));
        }
        if self.coef_y.len() != self.p + 1 || self.coef_z.len() != self.p + 1 {
            return Err(AwlError::input("outcome coefficients need p + 1 entries"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.x_sd > 0.0) || !(self.noise_sd >= 0.0) {
            return Err(AwlError::input("invalid alpha, x_sd or noise_sd"));
        }
        self.true_preference()?;
        Ok(())
    }

    pub fn weight_covariates(&self) -> Vec<usize> {
        match self.weight {
            WeightKind::Fixed { .. } => Vec::new(),
            WeightKind::PatientSpecific { .. } => (0..self.p).collect(),
        }
    }

    pub fn true_preference(&self) -> Result<PreferenceModel> {
        match &self.weight {
            WeightKind::Fixed { omega0 } => PreferenceModel::fixed(*omega0),
            WeightKind::PatientSpecific { theta0 } => PreferenceModel::new(theta0.clone(), (0..self.p).collect()),
        }
    }

    fn true_outcome(&self, coef: &[f64]) -> OutcomeSurface {
        let basis = BasisSpec::default_for(self.p);
        let mut coeffs = vec![0.0; 1 + self.p];
        coeffs.push(coef[self.p]);
        coeffs.push(self.curvature);
        coeffs.extend_from_slice(&coef[..self.p]);
        OutcomeSurface::new(basis, coeffs).expect("generative surface matches its basis")
    }

    pub fn true_surfaces(&self) -> (OutcomeSurface, OutcomeSurface) {
        (self.true_outcome(&self.coef_y), self.true_outcome(&self.coef_z))
    }

    pub fn true_composite(&self) -> Result<CompositeSurface> {
        let (y, z) = self.true_surfaces();
        Ok(CompositeSurface::new(y, z, self.true_preference()?))
    }

    /// Names and true values of the reported parameters.
    pub fn parameters(&self) -> Vec<(String, f64)> {
        let mut out = vec![("beta".to_string(), self.beta0)];
        match &self.weight {
            WeightKind::Fixed { omega0 } => out.push(("omega".to_string(), *omega0)),
            WeightKind::PatientSpecific { theta0 } => {
                out.extend(theta0.iter().enumerate().map(|(k, t)| (format!("theta{k}"), *t)))
            }
        }
        out
    }

    pub fn draw_covariates<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let nd = Normal::new(0.0, self.x_sd).expect("validated sd");
        (0..self.p).map(|_| nd.sample(rng)).collect()
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep_index`: `splitmix64(splitmix64(master_seed) ^ rep_index)`.
pub fn replication_seed(master_seed: u64, rep_index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ rep_index)
}

pub fn generate_dataset(scenario: &Scenario, seed: u64) -> Result<Vec<Sample>> {
    scenario.validate()?;
    let truth = scenario.true_composite()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, scenario.noise_sd).map_err(|e| AwlError::input(e.to_string()))?;
    let mut data = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let x = scenario.draw_covariates(&mut rng);
        let cd = density_at(&truth, scenario.beta0, &x, &scenario.grid)?;
        let a = cd.sample_dose(rng.random());
        let y = truth.q_y.eval(&x, a)? + noise.sample(&mut rng);
        let z = truth.q_z.eval(&x, a)? + noise.sample(&mut rng);
        data.push(Sample::new(x, a, y, z));
    }
    Ok(data)
}

/// Fresh covariates for policy evaluation; independent of the training stream.
pub fn evaluation_sample(scenario: &Scenario, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..scenario.eval_size).map(|_| scenario.draw_covariates(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Rejection of `param = truth` at level alpha.
    pub reject_truth: Option<bool>,
    /// Rejection of `param = 0`; undefined for the constant weight.
    pub reject_zero: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValues {
    pub optimal: f64,
    pub new: Option<f64>,
    pub y_optimizer: f64,
    pub z_optimizer: f64,
    pub observed: f64,
}

pub const POLICY_NAMES: [&str; 5] = ["Optimal", "New", "Y-Optimizer", "Z-Optimizer", "Observed"];

impl PolicyValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "Optimal" => Some(self.optimal),
            "New" => self.new,
            "Y-Optimizer" => Some(self.y_optimizer),
            "Z-Optimizer" => Some(self.z_optimizer),
            "Observed" => Some(self.observed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub rep_index: usize,
    pub seed: u64,
    pub estimate: Option<EstimateResult>,
    pub inference: Option<InferenceResult>,
    /// Excluded from the estimate and error tables.
    pub flagged: bool,
    pub flag_reason: Option<String>,
    pub params: Vec<ParamReport>,
    pub values: PolicyValues,
}

pub fn run_replication(scenario: &Scenario, rep_index: usize) -> Result<ReplicationResult> {
    scenario.validate()?;
    let seed = replication_seed(scenario.master_seed, rep_index as u64);
    let data = generate_dataset(scenario, seed)?;
    let truth = scenario.true_composite()?;
    let grid = &scenario.grid;
    let covs = scenario.weight_covariates();

    let basis = BasisSpec::default_for(scenario.p);
    let (q_y, _) = fit_outcome(&data, Outcome::Y, &basis)?;
    let (q_z, _) = fit_outcome(&data, Outcome::Z, &basis)?;

    let pl = PseudoLikelihood::new(&data, &q_y, &q_z, &covs, grid)?;
    let mut config = FitConfig::new(grid.clone());
    config.n_restarts = scenario.n_restarts;
    config.jitter_seed = seed;

    let mut flag_reason = None;
    let estimate = match pl.maximize(&config) {
        Ok(est) => Some(est),
        Err(e) => {
            flag_reason = Some(e.to_string());
            None
        }
    };
    let inference = match &estimate {
        Some(est) if est.has_flag(FitFlag::NearSingular) => {
            flag_reason = Some("NEAR_SINGULAR".into());
            None
        }
        Some(est) => match infer(&pl, est, 1.0 - scenario.alpha) {
            Ok(inf) => Some(inf),
            Err(e) => {
                flag_reason = Some(e.to_string());
                None
            }
        },
        None => None,
    };
    let flagged = inference.is_none();

    let shape = scenario.true_preference()?;
    let params = match &estimate {
        Some(est) => parameter_reports(scenario, &shape, est, inference.as_ref())?,
        None => Vec::new(),
    };

    let xs = evaluation_sample(scenario, seed);
    let value = |kind: PolicyKind| value_under_policy(&Policy::new(kind, grid.clone()), &truth, &xs);
    let new = match &estimate {
        Some(est) => {
            let fitted = CompositeSurface::new(q_y.clone(), q_z.clone(), shape.with_theta(&est.theta_hat)?);
            Some(value(PolicyKind::CompositeArgmax(fitted))?)
        }
        None => None,
    };
    let values = PolicyValues {
        optimal: value(PolicyKind::CompositeArgmax(truth.clone()))?,
        new,
        y_optimizer: value(PolicyKind::YOnly(q_y))?,
        z_optimizer: value(PolicyKind::ZOnly(q_z))?,
        observed: value_observed(&truth, scenario.beta0, grid, &xs)?,
    };

    Ok(ReplicationResult {
        rep_index,
        seed,
        estimate,
        inference,
        flagged,
        flag_reason,
        params,
        values,
    })
}

fn parameter_reports(
    scenario: &Scenario,
    shape: &PreferenceModel,
    est: &EstimateResult,
    inf: Option<&InferenceResult>,
) -> Result<Vec<ParamReport>> {
    let crit = crate::inference::normal_quantile(1.0 - scenario.alpha / 2.0);
    let reject = |est: f64, se: Option<f64>, null: f64| se.filter(|s| *s > 0.0).map(|s| ((est - null) / s).abs() > crit);
    let se_of = |k: usize| inf.map(|i| i.se[k]);

    let mut out = vec![ParamReport {
        name: "beta".into(),
        truth: scenario.beta0,
        estimate: est.beta_hat,
        se: se_of(0),
        reject_truth: reject(est.beta_hat, se_of(0), scenario.beta0),
        reject_zero: reject(est.beta_hat, se_of(0), 0.0),
    }];
    match &scenario.weight {
        WeightKind::Fixed { omega0 } => {
            let omega = expit(est.theta_hat[0]);
            let (se, reject_truth) = match inf {
                Some(i) => {
                    let cov = i.cov_theta();
                    let se = crate::inference::weight_se(shape, &est.theta_hat, &cov, &[])?;
                    let (_, p) = weight_wald(shape, &est.theta_hat, &cov, &[], *omega0)?;
                    (Some(se), Some(p < scenario.alpha))
                }
                None => (None, None),
            };
            out.push(ParamReport {
                name: "omega".into(),
                truth: *omega0,
                estimate: omega,
                se,
                reject_truth,
                reject_zero: None,
            });
        }
        WeightKind::PatientSpecific { theta0 } => {
            for (k, t) in theta0.iter().enumerate() {
                let v = est.theta_hat[k];
                out.push(ParamReport {
                    name: format!("theta{k}"),
                    truth: *t,
                    estimate: v,
                    se: se_of(k + 1),
                    reject_truth: reject(v, se_of(k + 1), *t),
                    reject_zero: reject(v, se_of(k + 1), 0.0),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub n_used: usize,
    pub type_i_error: f64,
    pub power: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub policy: String,
    pub mean: f64,
    pub sd: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTables {
    pub n: usize,
    pub beta0: f64,
    pub n_reps: usize,
    pub n_flagged: usize,
    pub estimates: Vec<EstimateRow>,
    pub values: Vec<ValueRow>,
}

impl StudyTables {
    pub fn estimate(&self, parameter: &str) -> Option<&EstimateRow> {
        self.estimates.iter().find(|r| r.parameter == parameter)
    }

    pub fn value(&self, policy: &str) -> Option<&ValueRow> {
        self.values.iter().find(|r| r.policy == policy)
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn rate(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for f in flags {
        total += 1;
        hits += usize::from(f);
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Aggregates replications in `rep_index` order.
pub fn summarize(scenario: &Scenario, reps: &[ReplicationResult]) -> StudyTables {
    let kept: Vec<&ReplicationResult> = reps.iter().filter(|r| !r.flagged).collect();
    let estimates = scenario
        .parameters()
        .into_iter()
        .enumerate()
        .map(|(k, (name, truth))| {
            let reports: Vec<&ParamReport> = kept.iter().map(|r| &r.params[k]).collect();
            let ests: Vec<f64> = reports.iter().map(|p| p.estimate).collect();
            let ses: Vec<f64> = reports.iter().filter_map(|p| p.se).collect();
            let (mean, sd) = mean_sd(&ests);
            EstimateRow {
                parameter: name,
                truth,
                mean,
                sd,
                mean_se: mean_sd(&ses).0,
                n_used: ests.len(),
                type_i_error: rate(reports.iter().filter_map(|p| p.reject_truth)).unwrap_or(f64::NAN),
                power: rate(reports.iter().filter_map(|p| p.reject_zero)),
            }
        })
        .collect();
    let values = POLICY_NAMES
        .iter()
        .map(|name| {
            let vs: Vec<f64> = reps.iter().filter_map(|r| r.values.get(name)).collect();
            let (mean, sd) = mean_sd(&vs);
            ValueRow {
                policy: name.to_string(),
                mean,
                sd,
                n_used: vs.len(),
            }
        })
        .collect();
    StudyTables {
        n: scenario.n,
        beta0: scenario.beta0,
        n_reps: reps.len(),
        n_flagged: reps.len() - kept.len(),
        estimates,
        values,
    }
}

/// All replications of a scenario, in order, on the current rayon pool.
pub fn run_replications(scenario: &Scenario) -> Result<Vec<ReplicationResult>> {
    scenario.validate()?;
    (0..scenario.n_reps)
        .into_par_iter()
        .map(|r| run_replication(scenario, r))
        .collect()
}

pub fn run_study(scenario: &Scenario) -> Result<StudyTables> {
    Ok(summarize(scenario, &run_replications(scenario)?))
}

/// Runs `run_study` on a dedicated pool of `workers` threads.
pub fn run_study_with_workers(scenario: &Scenario, workers: usize) -> Result<StudyTables> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AwlError::input(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_study(scenario))
}

fn default_x_sd() -> f64 {
    0.5
}
fn default_coef_y() -> Vec<f64> {
    vec![4.0, -2.0, 2.0]
}
fn default_coef_z() -> Vec<f64> {
    vec![2.0, -4.0, -2.0]
}
fn default_curvature() -> f64 {
    -2.0
}
fn default_n_reps() -> usize {
    500
}
fn default_seed() -> u64 {
    2024
}
fn default_eval_size() -> usize {
    10_000
}
fn default_alpha() -> f64 {
    0.05
}
fn default_restarts() -> usize {
    3
}
fn default_grid() -> GridSpec {
    GridSpec {
        a_min: -6.0,
        a_max: 6.0,
        m: 241,
    }
}
fn default_version() -> u32 {
    1
}

/// Scenario file: one study per `(n, beta0)` pair in the cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub weight: WeightKind,
    pub n: Vec<usize>,
    pub beta0: Vec<f64>,
    #[serde(default = "default_n_reps")]
    pub n_reps: usize,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default = "default_x_sd")]
    pub x_sd: f64,
    #[serde(default = "default_x_sd")]
    pub noise_sd: f64,
    #[serde(default = "default_coef_y")]
    pub coef_y: Vec<f64>,
    #[serde(default = "default_coef_z")]
    pub coef_z: Vec<f64>,
    #[serde(default = "default_curvature")]
    pub curvature: f64,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_restarts")]
    pub n_restarts: usize,
}

impl StudyConfig {
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        if self.format_version != 1 {
            return Err(AwlError::input(format!("unsupported format_version {}", self.format_version)));
        }
        if self.coef_y.len() != self.coef_z.len() || self.coef_y.len() < 2 {
            return Err(AwlError::input("coef_y and coef_z must have equal length p + 1"));
        }
        let grid = DoseGrid::try_from(self.grid)?;
        let mut out = Vec::new();
        for &n in &self.n {
            for &beta0 in &self.beta0 {
                let s = Scenario {
                    p: self.coef_y.len() - 1,
                    x_sd: self.x_sd,
                    coef_y: self.coef_y.clone(),
                    coef_z: self.coef_z.clone(),
                    curvature: self.curvature,
                    noise_sd: self.noise_sd,
                    beta0,
                    weight: self.weight.clone(),
                    grid: grid.clone(),
                    n,
                    n_reps: self.n_reps,
                    master_seed: self.master_seed,
                    eval_size: self.eval_size,
                    alpha: self.alpha,
                    n_restarts: self.n_restarts,
                };
                s.validate()?;
                out.push(s);
            }
        }
        if out.is_empty() {
            return Err(AwlError::input("scenario file lists no (n, beta0) settings"));
        }
        Ok(out)
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_estimates_csv<W: Write>(tables: &[StudyTables], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| AwlError::input(format!("csv write failed: {e}"));
    w.write_record([
        "n", "beta0", "n_reps", "n_flagged", "parameter", "truth", "mean", "sd", "mean_se", "n_used",
        "type_i_error", "power",
    ])
    .map_err(io)?;
    for t in tables {
        for r in &t.estimates {
            w.write_record([
                t.n.to_string(),
                fmt_num(t.beta0),
                t.n_reps.to_string(),
                t.n_flagged.to_string(),
                r.parameter.clone(),
                fmt_num(r.truth),
                fmt_num(r.mean),
                fmt_num(r.sd),
                fmt_num(r.mean_se),
                r.n_used.to_string(),
                fmt_num(r.type_i_error),
                r.power.map(fmt_num).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| AwlError::input(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn write_values_csv<W: Write>(tables: &[StudyTables], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| AwlError::input(format!("csv write failed: {e}"));
    w.write_record(["n", "beta0", "policy", "mean", "sd", "n_used"]).map_err(io)?;
    for t in tables {
        for r in &t.values {
            w.write_record([
                t.n.to_string(),
                fmt_num(t.beta0),
                r.policy.clone(),
                fmt_num(r.mean),
                fmt_num(r.sd),
                r.n_used.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| AwlError::input(format!("csv write failed: {e}")))?;
    Ok(())
}
