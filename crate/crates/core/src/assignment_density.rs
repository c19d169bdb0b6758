//! Dose-assignment density `f(a | x) ∝ exp{beta * Q(x, a)}` on a dose grid.
//!
//! All integrals use the trapezoid rule on the uniform grid. The sampler
//! inverts the matching piecewise-linear CDF, so sampling and quadrature
//! agree on the mass of every grid interval.

use nalgebra::DMatrix;

use crate::error::{AwlError, Result};
use crate::model_core::{poly2, CompositeSurface, DoseGrid};

#[derive(Debug, Clone)]
pub struct ConditionalDensity<'g> {
    grid: &'g DoseGrid,
    log_unnorm: Vec<f64>,
    log_norm: f64,
    density: Vec<f64>,
    mass: Vec<f64>,
    cdf: Vec<f64>,
}

impl<'g> ConditionalDensity<'g> {
    /// Builds the density from `beta * Q(x, t_j)` on every grid point.
    pub fn from_log_unnormalized(grid: &'g DoseGrid, log_unnorm: Vec<f64>) -> Result<Self> {
        if log_unnorm.len() != grid.m {
            return Err(AwlError::input(format!(
                "expected {} grid values, got {}",
                grid.m,
                log_unnorm.len()
            )));
        }
        let mut mass = vec![0.0; grid.m];
        let log_norm = normalize_into(grid, &log_unnorm, &mut mass)?;
        let density: Vec<f64> = mass
            .iter()
            .enumerate()
            .map(|(j, p)| p / grid.quadrature_weight(j))
            .collect();

        let half = 0.5 * grid.step();
        let mut cdf = Vec::with_capacity(grid.m);
        let mut acc = 0.0;
        cdf.push(0.0);
        for pair in density.windows(2) {
            acc += half * (pair[0] + pair[1]);
            cdf.push(acc);
        }
        for c in cdf.iter_mut() {
            *c /= acc;
        }

        Ok(Self {
            grid,
            log_unnorm,
            log_norm,
            density,
            mass,
            cdf,
        })
    }

    /// Density for dose-polynomial utility coefficients `(c0, c1, c2)`.
    pub fn from_dose_polynomial(grid: &'g DoseGrid, beta: f64, coeffs: &[f64; 3]) -> Result<Self> {
        let lu = grid.points().iter().map(|&t| beta * poly2(coeffs, t)).collect();
        Self::from_log_unnormalized(grid, lu)
    }

    pub fn grid(&self) -> &DoseGrid {
        self.grid
    }

    pub fn log_unnormalized(&self) -> &[f64] {
        &self.log_unnorm
    }

    /// `log ∫ exp{beta Q(x, t)} dt` under the trapezoid rule.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Normalized density values at the grid points.
    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Quadrature mass per grid point; sums to one.
    pub fn probs(&self) -> &[f64] {
        &self.mass
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Conditional means of each `g_k(A)` and their covariance matrix.
    pub fn conditional_moments<G: AsRef<[f64]>>(&self, g: &[G]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let k = g.len();
        for gk in g {
            if gk.as_ref().len() != self.grid.m {
                return Err(AwlError::input(format!(
                    "moment function has {} values, grid has {}",
                    gk.as_ref().len(),
                    self.grid.m
                )));
            }
        }
        let means: Vec<f64> = g
            .iter()
            .map(|gk| gk.as_ref().iter().zip(&self.mass).map(|(v, p)| v * p).sum())
            .collect();
        let mut cov = DMatrix::zeros(k, k);
        for a in 0..k {
            let ga = g[a].as_ref();
            for b in a..k {
                let gb = g[b].as_ref();
                let c: f64 = self
                    .mass
                    .iter()
                    .enumerate()
                    .map(|(j, p)| p * (ga[j] - means[a]) * (gb[j] - means[b]))
                    .sum();
                cov[(a, b)] = c;
                cov[(b, a)] = c;
            }
        }
        Ok((means, cov))
    }

    /// Inverse-CDF draw for `u` in `[0, 1)`.
    pub fn sample_dose(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let pts = self.grid.points();
        // First interval whose upper CDF value exceeds u.
        let j = self.cdf[1..].partition_point(|&c| c <= u);
        if j + 1 >= self.grid.m {
            return self.grid.a_max;
        }
        let (lo, hi) = (self.cdf[j], self.cdf[j + 1]);
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
        (pts[j] + frac * self.grid.step()).min(self.grid.a_max)
    }
}

/// Writes the quadrature masses of `exp(log_unnorm)` into `mass` (summing to
/// one) and returns the log normalizer. Allocation-free kernel shared with the
/// likelihood loop.
pub(crate) fn normalize_into(grid: &DoseGrid, log_unnorm: &[f64], mass: &mut [f64]) -> Result<f64> {
    if log_unnorm.len() != grid.m || mass.len() != grid.m {
        return Err(AwlError::input(format!(
            "expected {} grid values, got {}",
            grid.m,
            log_unnorm.len()
        )));
    }
    let shift = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(AwlError::numeric("non-finite utility on the dose grid"));
    }
    let mut total = 0.0;
    for (j, (dst, v)) in mass.iter_mut().zip(log_unnorm).enumerate() {
        *dst = grid.quadrature_weight(j) * (v - shift).exp();
        total += *dst;
    }
    if !total.is_finite() {
        return Err(AwlError::numeric("non-finite utility on the dose grid"));
    }
    let inv = 1.0 / total;
    for p in mass.iter_mut() {
        *p *= inv;
    }
    Ok(shift + total.ln())
}

/// Assignment density of the composite surface `cs` at covariates `x`.
pub fn density_at<'g>(
    cs: &CompositeSurface,
    beta: f64,
    x: &[f64],
    grid: &'g DoseGrid,
) -> Result<ConditionalDensity<'g>> {
    if !beta.is_finite() {
        return Err(AwlError::input("beta must be finite"));
    }
    let coeffs = cs.dose_coefficients(x)?;
    ConditionalDensity::from_dose_polynomial(grid, beta, &coeffs)
}
