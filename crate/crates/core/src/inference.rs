//! Asymptotic inference for `(beta, theta)`: the plug-in information matrix,
//! Wald tests and delta-method intervals for patient-specific weights.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{AwlError, Result};
use crate::model_core::{DoseGrid, OutcomeSurface, PreferenceModel, Sample};
use crate::pseudo_likelihood::{EstimateResult, PseudoLikelihood, NEAR_SINGULAR_CONDITION};

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// `(1/n) Σ_i Cov[(Q(A), beta R(A) w') | x_i]` at the estimate.
    pub b_hat: DMatrix<f64>,
    /// `B^{-1} / n`.
    pub cov_hat: DMatrix<f64>,
    pub se: Vec<f64>,
    /// Wald statistics against zero.
    pub z_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub ci_level: f64,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub condition: f64,
    pub n: usize,
}

impl InferenceResult {
    /// The theta block of the covariance.
    pub fn cov_theta(&self) -> DMatrix<f64> {
        let d = self.cov_hat.nrows();
        self.cov_hat.view((1, 1), (d - 1, d - 1)).into_owned()
    }
}

pub fn b_matrix(
    data: &[Sample],
    q_y: &OutcomeSurface,
    q_z: &OutcomeSurface,
    weight_covs: &[usize],
    theta_hat: &[f64],
    beta_hat: f64,
    grid: &DoseGrid,
) -> Result<DMatrix<f64>> {
    let pl = PseudoLikelihood::new(data, q_y, q_z, weight_covs, grid)?;
    Ok(pl.information(beta_hat, theta_hat)? / pl.n() as f64)
}

/// Standard errors, tests and intervals at level `ci_level` for a fitted model.
pub fn infer(pl: &PseudoLikelihood<'_>, est: &EstimateResult, ci_level: f64) -> Result<InferenceResult> {
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(AwlError::input(format!("ci level {ci_level} not in (0, 1)")));
    }
    let n = pl.n();
    let b_hat = pl.information(est.beta_hat, &est.theta_hat)? / n as f64;
    let cov_hat = inverse_psd(&b_hat)? / n as f64;
    let condition = crate::pseudo_likelihood::condition_number(&b_hat);
    let params = est.params();
    let zq = normal_quantile(0.5 + ci_level / 2.0);
    let se: Vec<f64> = (0..params.len()).map(|k| cov_hat[(k, k)].sqrt()).collect();
    let z_stats: Vec<f64> = params.iter().zip(&se).map(|(v, s)| v / s).collect();
    let p_values = z_stats.iter().map(|z| two_sided_p(*z)).collect();
    let ci_lower = params.iter().zip(&se).map(|(v, s)| v - zq * s).collect();
    let ci_upper = params.iter().zip(&se).map(|(v, s)| v + zq * s).collect();
    Ok(InferenceResult {
        b_hat,
        cov_hat,
        se,
        z_stats,
        p_values,
        ci_level,
        ci_lower,
        ci_upper,
        condition,
        n,
    })
}

/// Inverse of a symmetric positive definite matrix through its eigendecomposition.
/// Declines when the condition number exceeds the near-singular threshold.
pub fn inverse_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !(max / min <= NEAR_SINGULAR_CONDITION) {
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(AwlError::NearSingular { condition });
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l);
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv) * v.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Wald test of `param[component] = null_value`, parameters ordered `(beta, theta...)`.
pub fn wald(est: &EstimateResult, inf: &InferenceResult, component: usize, null_value: f64) -> Result<(f64, f64)> {
    let params = est.params();
    let value = *params
        .get(component)
        .ok_or_else(|| AwlError::input(format!("component {component} out of range")))?;
    z_test(value, inf.se[component], null_value)
}

fn z_test(value: f64, se: f64, null_value: f64) -> Result<(f64, f64)> {
    if !(se > 0.0) {
        return Err(AwlError::Inference(format!("standard error {se} is not positive")));
    }
    let z = (value - null_value) / se;
    Ok((z, two_sided_p(z)))
}

/// Delta-method standard error of `w(x; theta)`.
pub fn weight_se(shape: &PreferenceModel, theta_hat: &[f64], cov_theta: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let pref = shape.with_theta(theta_hat)?;
    let g = pref.weight_grad(x)?;
    if cov_theta.nrows() != g.len() || cov_theta.ncols() != g.len() {
        return Err(AwlError::input(format!(
            "theta covariance is {}x{}, expected {}x{}",
            cov_theta.nrows(),
            cov_theta.ncols(),
            g.len(),
            g.len()
        )));
    }
    let mut var = 0.0;
    for i in 0..g.len() {
        for j in 0..g.len() {
            var += g[i] * cov_theta[(i, j)] * g[j];
        }
    }
    Ok(var.max(0.0).sqrt())
}

/// Point estimate and interval for the weight at `x`, clipped to `[0, 1]`.
pub fn weight_ci(
    shape: &PreferenceModel,
    theta_hat: &[f64],
    cov_theta: &DMatrix<f64>,
    x: &[f64],
    level: f64,
) -> Result<(f64, f64, f64)> {
    let w = shape.with_theta(theta_hat)?.weight(x)?;
    let half = normal_quantile(0.5 + level / 2.0) * weight_se(shape, theta_hat, cov_theta, x)?;
    Ok((w, (w - half).max(0.0), (w + half).min(1.0)))
}

/// Wald test of `w(x; theta) = null_weight` by the delta method.
pub fn weight_wald(
    shape: &PreferenceModel,
    theta_hat: &[f64],
    cov_theta: &DMatrix<f64>,
    x: &[f64],
    null_weight: f64,
) -> Result<(f64, f64)> {
    let w = shape.with_theta(theta_hat)?.weight(x)?;
    z_test(w, weight_se(shape, theta_hat, cov_theta, x)?, null_weight)
}
