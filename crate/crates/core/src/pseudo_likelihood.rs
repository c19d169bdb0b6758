//! Log pseudo-likelihood of the observed doses, its analytic derivatives and
//! the Newton maximizer over `(beta, theta)`.
//!
//! Parameters are always ordered `(beta, theta_0, .., theta_{q-1})`. For one
//! observation with utility `Q(t) = Q_Z(x, t) + w(x) R(x, t)` the contribution
//! is `beta Q(a) - log ∫ exp{beta Q(t)} dt`, so with `g(t) = (Q(t), beta R(t) w')`
//! the score is `g(a) - E[g(A)]` and the Hessian is
//! `∂²(beta Q)(a) - E[∂²(beta Q)(A)] - Cov[g(A)]`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment_density::normalize_into;
use crate::error::{AwlError, Result};
use crate::model_core::{expit, poly2, DoseGrid, OutcomeSurface, Sample};

/// Hessian or information condition number above which the fit is flagged.
pub const NEAR_SINGULAR_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FitFlag {
    BetaNonpositive,
    NearSingular,
    MaxIter,
}

impl std::fmt::Display for FitFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitFlag::BetaNonpositive => "BETA_NONPOSITIVE",
            FitFlag::NearSingular => "NEAR_SINGULAR",
            FitFlag::MaxIter => "MAX_ITER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: Vec<f64>,
    pub beta_hat: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub hessian_condition: f64,
    pub flags: Vec<FitFlag>,
    /// Log-likelihood after each accepted step of the winning start.
    pub trace: Vec<f64>,
}

impl EstimateResult {
    pub fn has_flag(&self, flag: FitFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// `(beta, theta...)` as one vector.
    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.beta_hat).chain(self.theta_hat.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub grid: DoseGrid,
    /// Convergence threshold on `‖score‖ / n`.
    pub tol_grad: f64,
    pub max_iter: usize,
    pub init_theta: Option<Vec<f64>>,
    pub init_beta: f64,
    pub n_restarts: usize,
    pub jitter_seed: u64,
}

impl FitConfig {
    pub fn new(grid: DoseGrid) -> Self {
        Self {
            grid,
            tol_grad: 1e-8,
            max_iter: 200,
            init_theta: None,
            init_beta: 0.1,
            n_restarts: 3,
            jitter_seed: 0x5eed,
        }
    }
}

struct Obs {
    a: f64,
    cy: [f64; 3],
    cz: [f64; 3],
    xw: Vec<f64>,
}

/// Which derivatives an evaluation pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Order {
    Value,
    Score,
    Hessian,
}

#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// `Σ_i Cov[g(A) | x_i]`, the unnormalized information matrix.
    pub info: DMatrix<f64>,
}

/// Observed data with the plug-in surfaces reduced to dose polynomials.
pub struct PseudoLikelihood<'g> {
    grid: &'g DoseGrid,
    obs: Vec<Obs>,
    q: usize,
}

impl<'g> PseudoLikelihood<'g> {
    pub fn new(
        data: &[Sample],
        q_y: &OutcomeSurface,
        q_z: &OutcomeSurface,
        weight_covs: &[usize],
        grid: &'g DoseGrid,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(AwlError::input("no observations"));
        }
        let mut obs = Vec::with_capacity(data.len());
        for s in data {
            s.validate(grid)?;
            let mut xw = Vec::with_capacity(weight_covs.len() + 1);
            xw.push(1.0);
            for &k in weight_covs {
                xw.push(*s.x.get(k).ok_or_else(|| {
                    AwlError::input(format!("weight covariate index {k} out of range"))
                })?);
            }
            obs.push(Obs {
                a: s.a,
                cy: q_y.dose_coefficients(&s.x)?,
                cz: q_z.dose_coefficients(&s.x)?,
                xw,
            });
        }
        Ok(Self {
            grid,
            obs,
            q: weight_covs.len() + 1,
        })
    }

    pub fn n(&self) -> usize {
        self.obs.len()
    }

    /// Number of parameters, `1 + q`.
    pub fn dim(&self) -> usize {
        1 + self.q
    }

    pub(crate) fn evaluate(&self, beta: f64, theta: &[f64], order: Order) -> Result<Evaluation> {
        if theta.len() != self.q {
            return Err(AwlError::input(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                self.q
            )));
        }
        if !beta.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(AwlError::numeric("non-finite parameter"));
        }
        let d = self.dim();
        let pts = self.grid.points();
        let mut ev = Evaluation {
            loglik: 0.0,
            score: DVector::zeros(d),
            hessian: DMatrix::zeros(d, d),
            info: DMatrix::zeros(d, d),
        };
        let mut qv = vec![0.0; pts.len()];
        let mut rv = vec![0.0; pts.len()];
        let mut lu = vec![0.0; pts.len()];
        let mut mass = vec![0.0; pts.len()];
        let mut wp = vec![0.0; self.q];

        for o in &self.obs {
            let w = expit(theta.iter().zip(&o.xw).map(|(t, v)| t * v).sum());
            let cr = [o.cy[0] - o.cz[0], o.cy[1] - o.cz[1], o.cy[2] - o.cz[2]];
            let cq = [o.cz[0] + w * cr[0], o.cz[1] + w * cr[1], o.cz[2] + w * cr[2]];
            for (j, &t) in pts.iter().enumerate() {
                qv[j] = poly2(&cq, t);
                rv[j] = poly2(&cr, t);
            }
            for (l, v) in lu.iter_mut().zip(&qv) {
                *l = beta * v;
            }
            let log_norm = normalize_into(self.grid, &lu, &mut mass)?;
            let q_obs = poly2(&cq, o.a);
            ev.loglik += beta * q_obs - log_norm;
            if order == Order::Value {
                continue;
            }

            let (mut mq, mut mr) = (0.0, 0.0);
            for j in 0..mass.len() {
                mq += mass[j] * qv[j];
                mr += mass[j] * rv[j];
            }
            let (mut var_q, mut cov_qr, mut var_r) = (0.0, 0.0, 0.0);
            for j in 0..mass.len() {
                let (dq, dr) = (qv[j] - mq, rv[j] - mr);
                var_q += mass[j] * dq * dq;
                cov_qr += mass[j] * dq * dr;
                var_r += mass[j] * dr * dr;
            }
            let s = w * (1.0 - w);
            for (dst, v) in wp.iter_mut().zip(&o.xw) {
                *dst = s * v;
            }
            let r_dev = poly2(&cr, o.a) - mr;

            ev.score[0] += q_obs - mq;
            for k in 0..self.q {
                ev.score[1 + k] += beta * r_dev * wp[k];
            }
            if order == Order::Score {
                continue;
            }

            let curv = s * (1.0 - 2.0 * w);
            ev.hessian[(0, 0)] -= var_q;
            ev.info[(0, 0)] += var_q;
            for k in 0..self.q {
                let h = r_dev * wp[k] - beta * cov_qr * wp[k];
                ev.hessian[(0, 1 + k)] += h;
                ev.hessian[(1 + k, 0)] += h;
                ev.info[(0, 1 + k)] += beta * cov_qr * wp[k];
                ev.info[(1 + k, 0)] += beta * cov_qr * wp[k];
                for l in k..self.q {
                    let b = beta * beta * var_r * wp[k] * wp[l];
                    let h = beta * r_dev * curv * o.xw[k] * o.xw[l] - b;
                    ev.hessian[(1 + k, 1 + l)] += h;
                    ev.info[(1 + k, 1 + l)] += b;
                    if l != k {
                        ev.hessian[(1 + l, 1 + k)] += h;
                        ev.info[(1 + l, 1 + k)] += b;
                    }
                }
            }
        }
        if !ev.loglik.is_finite() {
            return Err(AwlError::numeric("non-finite log-likelihood"));
        }
        Ok(ev)
    }

    pub fn loglik(&self, beta: f64, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(beta, theta, Order::Value)?.loglik)
    }

    pub fn score(&self, beta: f64, theta: &[f64]) -> Result<DVector<f64>> {
        Ok(self.evaluate(beta, theta, Order::Score)?.score)
    }

    pub fn hessian(&self, beta: f64, theta: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(beta, theta, Order::Hessian)?.hessian)
    }

    /// `Σ_i Cov[(Q(A), beta R(A) w') | x_i]` at `(beta, theta)`.
    pub fn information(&self, beta: f64, theta: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(beta, theta, Order::Hessian)?.info)
    }

    /// Maximizes the pseudo-likelihood from the configured start and its
    /// jittered restarts; the highest log-likelihood wins.
    pub fn maximize(&self, config: &FitConfig) -> Result<EstimateResult> {
        if self.n() < self.dim() {
            return Err(AwlError::input(format!(
                "need at least {} observations, got {}",
                self.dim(),
                self.n()
            )));
        }
        if !(config.tol_grad > 0.0) || config.max_iter == 0 {
            return Err(AwlError::input("tolerance and iteration limit must be positive"));
        }
        let theta0 = match &config.init_theta {
            Some(t) if t.len() == self.q => t.clone(),
            Some(t) => {
                return Err(AwlError::input(format!(
                    "init_theta has {} entries, expected {}",
                    t.len(),
                    self.q
                )))
            }
            None => vec![0.0; self.q],
        };

        let mut starts = vec![(config.init_beta, theta0.clone())];
        let mut rng = ChaCha8Rng::seed_from_u64(config.jitter_seed);
        let jitter = Normal::<f64>::new(0.0, 0.5).expect("valid sd");
        for _ in 0..config.n_restarts {
            let b = config.init_beta * jitter.sample(&mut rng).exp();
            let t = theta0.iter().map(|v| v + jitter.sample(&mut rng)).collect();
            starts.push((b, t));
        }

        let mut best: Option<EstimateResult> = None;
        let mut first_err = None;
        for (b, t) in starts {
            match self.ascend(b, t, config) {
                Ok(r) => {
                    best = Some(match best {
                        None => r,
                        Some(cur) => pick_better(cur, r),
                    })
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let mut result = match (best, first_err) {
            (Some(r), _) => r,
            (None, Some(e)) => return Err(e),
            (None, None) => unreachable!("at least one start is attempted"),
        };

        let h = self.hessian(result.beta_hat, &result.theta_hat)?;
        result.hessian_condition = condition_number(&h);
        if result.beta_hat <= 0.0 {
            result.flags.push(FitFlag::BetaNonpositive);
        }
        if !(result.hessian_condition <= NEAR_SINGULAR_CONDITION) {
            result.flags.push(FitFlag::NearSingular);
        }
        result.flags.sort();
        result.flags.dedup();
        Ok(result)
    }

    fn ascend(&self, beta: f64, theta: Vec<f64>, config: &FitConfig) -> Result<EstimateResult> {
        let n = self.n() as f64;
        let mut p = DVector::from_iterator(self.dim(), std::iter::once(beta).chain(theta));
        let mut cur = self.evaluate(p[0], &p.as_slice()[1..], Order::Hessian).map_err(|e| {
            AwlError::Estimation {
                reason: format!("objective not finite at the starting point: {e}"),
                iterations: 0,
                trace: vec![],
            }
        })?;
        let mut trace = vec![cur.loglik];
        let mut converged = false;
        let mut iterations = 0;

        while iterations < config.max_iter {
            if cur.score.norm() / n < config.tol_grad {
                converged = true;
                break;
            }
            iterations += 1;
            let step = self
                .newton_step(&p, &cur)
                .or_else(|| self.gradient_step(&p, &cur));
            match step {
                Some((next, ev)) => {
                    p = next;
                    cur = ev;
                    trace.push(cur.loglik);
                }
                None => break,
            }
        }
        if !converged && cur.score.norm() / n < config.tol_grad {
            converged = true;
        }
        if trace.iter().any(|v| !v.is_finite()) {
            return Err(AwlError::Estimation {
                reason: "non-finite objective".into(),
                iterations,
                trace,
            });
        }
        let mut flags = Vec::new();
        if !converged && iterations >= config.max_iter {
            flags.push(FitFlag::MaxIter);
        }
        Ok(EstimateResult {
            theta_hat: p.as_slice()[1..].to_vec(),
            beta_hat: p[0],
            loglik: cur.loglik,
            iterations,
            converged,
            grad_norm: cur.score.norm() / n,
            hessian_condition: f64::NAN,
            flags,
            trace,
        })
    }

    fn try_point(&self, p: &DVector<f64>) -> Option<Evaluation> {
        self.evaluate(p[0], &p.as_slice()[1..], Order::Hessian).ok()
    }

    /// Newton direction with step halving; `None` when no halving improves the
    /// objective. Where the Hessian is not negative definite its eigenvalues
    /// are replaced by `-max(|λ|, 1e-8 max|λ|)`, which keeps an ascent
    /// direction with the curvature scaling of each eigen-direction.
    fn newton_step(&self, p: &DVector<f64>, cur: &Evaluation) -> Option<(DVector<f64>, Evaluation)> {
        let eig = SymmetricEigen::new(cur.hessian.clone());
        let scale = eig.eigenvalues.amax();
        if !(scale > 0.0) {
            return None;
        }
        let floor = 1e-8 * scale;
        let inv = eig.eigenvalues.map(|l| -1.0 / l.abs().max(floor));
        let coord = eig.eigenvectors.transpose() * &cur.score;
        let dir = -(&eig.eigenvectors * coord.component_mul(&inv));
        if cur.score.dot(&dir) <= 0.0 {
            return None;
        }
        let mut t = 1.0;
        for _ in 0..40 {
            let cand = p + &dir * t;
            if let Some(ev) = self.try_point(&cand) {
                if ev.loglik >= cur.loglik {
                    return Some((cand, ev));
                }
            }
            t *= 0.5;
        }
        None
    }

    /// Backtracking gradient ascent, first trial step scaled by the Hessian norm.
    fn gradient_step(&self, p: &DVector<f64>, cur: &Evaluation) -> Option<(DVector<f64>, Evaluation)> {
        let g2 = cur.score.norm_squared();
        if !(g2 > 0.0) {
            return None;
        }
        let hnorm = SymmetricEigen::new(cur.hessian.clone()).eigenvalues.amax();
        let mut t = if hnorm > 0.0 { 1.0 / hnorm } else { 1.0 / self.n() as f64 };
        for _ in 0..60 {
            let cand = p + &cur.score * t;
            if let Some(ev) = self.try_point(&cand) {
                if ev.loglik >= cur.loglik + 1e-4 * t * g2 || (ev.loglik > cur.loglik && t < 1e-12) {
                    return Some((cand, ev));
                }
            }
            t *= 0.5;
        }
        None
    }
}

fn pick_better(a: EstimateResult, b: EstimateResult) -> EstimateResult {
    if (a.loglik - b.loglik).abs() < 1e-10 {
        let na: f64 = a.theta_hat.iter().map(|v| v * v).sum();
        let nb: f64 = b.theta_hat.iter().map(|v| v * v).sum();
        return if nb < na { b } else { a };
    }
    match a.loglik.partial_cmp(&b.loglik) {
        Some(Ordering::Less) => b,
        _ => a,
    }
}

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
    let min = eig.iter().fold(f64::INFINITY, |acc, l| acc.min(l.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn loglik(
    data: &[Sample],
    q_y: &OutcomeSurface,
    q_z: &OutcomeSurface,
    weight_covs: &[usize],
    theta: &[f64],
    beta: f64,
    grid: &DoseGrid,
) -> Result<f64> {
    PseudoLikelihood::new(data, q_y, q_z, weight_covs, grid)?.loglik(beta, theta)
}

/// Score vector ordered `(beta, theta...)`.
pub fn score(
    data: &[Sample],
    q_y: &OutcomeSurface,
    q_z: &OutcomeSurface,
    weight_covs: &[usize],
    theta: &[f64],
    beta: f64,
    grid: &DoseGrid,
) -> Result<DVector<f64>> {
    PseudoLikelihood::new(data, q_y, q_z, weight_covs, grid)?.score(beta, theta)
}

pub fn hessian(
    data: &[Sample],
    q_y: &OutcomeSurface,
    q_z: &OutcomeSurface,
    weight_covs: &[usize],
    theta: &[f64],
    beta: f64,
    grid: &DoseGrid,
) -> Result<DMatrix<f64>> {
    PseudoLikelihood::new(data, q_y, q_z, weight_covs, grid)?.hessian(beta, theta)
}

pub fn fit(
    data: &[Sample],
    q_y: &OutcomeSurface,
    q_z: &OutcomeSurface,
    weight_covs: &[usize],
    config: &FitConfig,
) -> Result<EstimateResult> {
    PseudoLikelihood::new(data, q_y, q_z, weight_covs, &config.grid)?.maximize(config)
}
