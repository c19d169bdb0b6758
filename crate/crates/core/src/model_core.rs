//! Domain types shared by the estimator, the policy engine and the simulator.
//!
//! The composite outcome for a patient with covariates `x` at dose `a` is
//! `w(x) * Q_Y(x, a) + (1 - w(x)) * Q_Z(x, a)`, where the preference weight
//! `w(x) = expit(x_w' theta)` and `x_w = (1, x[i] for i in weight covariates)`.

use serde::{Deserialize, Serialize};

use crate::error::{AwlError, Result};
use crate::outcome_regression::BasisSpec;

/// Logistic function, evaluated without overflow for any finite input.
pub fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One observation: covariates, received dose and the two outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub a: f64,
    pub y: f64,
    pub z: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, a: f64, y: f64, z: f64) -> Self {
        Self { x, a, y, z }
    }

    pub fn validate(&self, grid: &DoseGrid) -> Result<()> {
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(AwlError::input("non-finite covariate"));
        }
        if !self.y.is_finite() || !self.z.is_finite() {
            return Err(AwlError::input("non-finite outcome"));
        }
        if !grid.contains(self.a) {
            return Err(AwlError::input(format!(
                "dose {} outside [{}, {}]",
                self.a, grid.a_min, grid.a_max
            )));
        }
        Ok(())
    }
}

/// Bounded dose interval discretized into `m` equally spaced points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct DoseGrid {
    pub a_min: f64,
    pub a_max: f64,
    pub m: usize,
    points: Vec<f64>,
    step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub a_min: f64,
    pub a_max: f64,
    pub m: usize,
}

impl TryFrom<GridSpec> for DoseGrid {
    type Error = AwlError;

    fn try_from(spec: GridSpec) -> Result<Self> {
        DoseGrid::new(spec.a_min, spec.a_max, spec.m)
    }
}

impl From<DoseGrid> for GridSpec {
    fn from(grid: DoseGrid) -> Self {
        GridSpec {
            a_min: grid.a_min,
            a_max: grid.a_max,
            m: grid.m,
        }
    }
}

impl DoseGrid {
    pub fn new(a_min: f64, a_max: f64, m: usize) -> Result<Self> {
        if !(a_min.is_finite() && a_max.is_finite()) || a_min >= a_max {
            return Err(AwlError::input(format!(
                "dose interval [{a_min}, {a_max}] is empty or non-finite"
            )));
        }
        if m < 3 {
            return Err(AwlError::input(format!("dose grid needs at least 3 points, got {m}")));
        }
        let step = (a_max - a_min) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|j| a_min + step * j as f64).collect();
        points[m - 1] = a_max;
        Ok(Self {
            a_min,
            a_max,
            m,
            points,
            step,
        })
    }

    /// Default support used by the simulator when nothing else is configured.
    pub fn default_simulation() -> Self {
        Self::new(-6.0, 6.0, 241).expect("static grid is valid")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn width(&self) -> f64 {
        self.a_max - self.a_min
    }

    pub fn contains(&self, a: f64) -> bool {
        a.is_finite() && a >= self.a_min && a <= self.a_max
    }

    /// Trapezoid-rule weight of grid point `j`.
    pub fn quadrature_weight(&self, j: usize) -> f64 {
        if j == 0 || j + 1 == self.m {
            0.5 * self.step
        } else {
            self.step
        }
    }
}

/// Expit-linear preference weight on outcome Y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceModel {
    pub theta: Vec<f64>,
    pub weight_covariate_indices: Vec<usize>,
}

impl PreferenceModel {
    pub fn new(theta: Vec<f64>, weight_covariate_indices: Vec<usize>) -> Result<Self> {
        if theta.len() != weight_covariate_indices.len() + 1 {
            return Err(AwlError::input(format!(
                "theta has {} entries but {} weight covariates need {}",
                theta.len(),
                weight_covariate_indices.len(),
                weight_covariate_indices.len() + 1
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(AwlError::input("non-finite theta"));
        }
        let mut seen = weight_covariate_indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != weight_covariate_indices.len() {
            return Err(AwlError::input("duplicate weight covariate index"));
        }
        Ok(Self {
            theta,
            weight_covariate_indices,
        })
    }

    /// Constant weight `omega` for every patient.
    pub fn fixed(omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < 1.0) {
            return Err(AwlError::input(format!("fixed weight {omega} not in (0, 1)")));
        }
        Self::new(vec![logit(omega)], Vec::new())
    }

    /// Same covariate selection with a different parameter vector.
    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::new(theta.to_vec(), self.weight_covariate_indices.clone())
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Weight design vector `(1, x[i] for i in weight covariates)`.
    pub fn design(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut xw = Vec::with_capacity(self.dim());
        xw.push(1.0);
        for &i in &self.weight_covariate_indices {
            let v = x.get(i).ok_or_else(|| {
                AwlError::input(format!(
                    "weight covariate index {i} out of range for {} covariates",
                    x.len()
                ))
            })?;
            xw.push(*v);
        }
        Ok(xw)
    }

    pub fn weight(&self, x: &[f64]) -> Result<f64> {
        Ok(weight_from_design(&self.theta, &self.design(x)?))
    }

    /// Gradient of the weight with respect to theta: `w (1 - w) x_w`.
    pub fn weight_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xw = self.design(x)?;
        let w = weight_from_design(&self.theta, &xw);
        let s = w * (1.0 - w);
        Ok(xw.into_iter().map(|v| s * v).collect())
    }
}

pub(crate) fn weight_from_design(theta: &[f64], xw: &[f64]) -> f64 {
    expit(theta.iter().zip(xw).map(|(t, v)| t * v).sum())
}

/// Fitted (or true) conditional mean of one outcome over a dose-polynomial basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSurface {
    pub basis: BasisSpec,
    pub coeffs: Vec<f64>,
}

impl OutcomeSurface {
    pub fn new(basis: BasisSpec, coeffs: Vec<f64>) -> Result<Self> {
        basis.validate()?;
        if coeffs.len() != basis.dim() {
            return Err(AwlError::input(format!(
                "basis has {} columns but {} coefficients were given",
                basis.dim(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(AwlError::input("non-finite surface coefficient"));
        }
        Ok(Self { basis, coeffs })
    }

    /// Coefficients `(c0, c1, c2)` of the surface as a polynomial in dose,
    /// `Q(x, a) = c0 + c1 a + c2 a^2`, at covariates `x`.
    pub fn dose_coefficients(&self, x: &[f64]) -> Result<[f64; 3]> {
        let b = &self.basis;
        if x.len() < b.n_covariates {
            return Err(AwlError::input(format!(
                "surface expects {} covariates, got {}",
                b.n_covariates,
                x.len()
            )));
        }
        let mut k = 0;
        let mut out = [0.0; 3];
        if b.include_intercept {
            out[0] += self.coeffs[k];
            k += 1;
        }
        if b.include_main_covariates {
            for &xj in &x[..b.n_covariates] {
                out[0] += self.coeffs[k] * xj;
                k += 1;
            }
        }
        out[1] += self.coeffs[k];
        k += 1;
        if b.degree_in_dose == 2 {
            out[2] += self.coeffs[k];
            k += 1;
        }
        for &j in &b.interaction_indices {
            out[1] += self.coeffs[k] * x[j];
            k += 1;
        }
        Ok(out)
    }

    pub fn eval(&self, x: &[f64], a: f64) -> Result<f64> {
        let c = self.dose_coefficients(x)?;
        Ok(poly2(&c, a))
    }

    /// Same basis with every coefficient multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            basis: self.basis.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }
}

#[inline]
pub fn poly2(c: &[f64; 3], a: f64) -> f64 {
    c[0] + a * (c[1] + a * c[2])
}

/// Two outcome surfaces combined by a preference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSurface {
    pub q_y: OutcomeSurface,
    pub q_z: OutcomeSurface,
    pub pref: PreferenceModel,
}

impl CompositeSurface {
    pub fn new(q_y: OutcomeSurface, q_z: OutcomeSurface, pref: PreferenceModel) -> Self {
        Self { q_y, q_z, pref }
    }

    pub fn eval(&self, x: &[f64], a: f64) -> Result<f64> {
        let w = self.pref.weight(x)?;
        Ok(w * self.q_y.eval(x, a)? + (1.0 - w) * self.q_z.eval(x, a)?)
    }

    /// `Q_Y(x, a) - Q_Z(x, a)`.
    pub fn contrast(&self, x: &[f64], a: f64) -> Result<f64> {
        Ok(self.q_y.eval(x, a)? - self.q_z.eval(x, a)?)
    }

    /// Dose-polynomial coefficients of the composite surface at `x`.
    pub fn dose_coefficients(&self, x: &[f64]) -> Result<[f64; 3]> {
        let w = self.pref.weight(x)?;
        let cy = self.q_y.dose_coefficients(x)?;
        let cz = self.q_z.dose_coefficients(x)?;
        Ok([
            w * cy[0] + (1.0 - w) * cz[0],
            w * cy[1] + (1.0 - w) * cz[1],
            w * cy[2] + (1.0 - w) * cz[2],
        ])
    }
}
