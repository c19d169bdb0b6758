//! Dose recommendations and their value under a reference composite surface.

use crate::assignment_density::density_at;
use crate::error::{AwlError, Result};
use crate::model_core::{poly2, CompositeSurface, DoseGrid, OutcomeSurface};

/// Grid argmax of `values` (first index wins ties) refined by the vertex of
/// the parabola through the argmax and its neighbours.
fn refine_argmax(grid: &DoseGrid, values: &[f64]) -> f64 {
    let pts = grid.points();
    let best = grid_argmax(values);
    let m = values.len();
    let center = best.clamp(1, m - 2);
    let (fm, f0, fp) = (values[center - 1], values[center], values[center + 1]);
    let curvature = fm - 2.0 * f0 + fp;
    if !(curvature < 0.0) {
        return pts[best];
    }
    let vertex = pts[center] + 0.5 * grid.step() * (fm - fp) / curvature;
    let (lo, hi) = if best == 0 {
        (pts[0], pts[1])
    } else if best == m - 1 {
        (pts[m - 2], pts[m - 1])
    } else {
        (pts[best - 1], pts[best + 1])
    };
    vertex.clamp(lo, hi)
}

/// Grid-only argmax, ties toward the smaller dose.
pub fn grid_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = j;
        }
    }
    best
}

fn argmax_polynomial(grid: &DoseGrid, coeffs: &[f64; 3]) -> f64 {
    let values: Vec<f64> = grid.points().iter().map(|&t| poly2(coeffs, t)).collect();
    refine_argmax(grid, &values)
}

/// Dose maximizing the composite surface at `x`.
pub fn optimal_dose(cs: &CompositeSurface, x: &[f64], grid: &DoseGrid) -> Result<f64> {
    Ok(argmax_polynomial(grid, &cs.dose_coefficients(x)?))
}

/// Dose maximizing a single outcome surface at `x`.
pub fn optimal_dose_single(surface: &OutcomeSurface, x: &[f64], grid: &DoseGrid) -> Result<f64> {
    Ok(argmax_polynomial(grid, &surface.dose_coefficients(x)?))
}

/// Dose maximizing an arbitrary function of dose over the grid.
pub fn optimal_dose_fn(grid: &DoseGrid, f: impl Fn(f64) -> f64) -> f64 {
    let values: Vec<f64> = grid.points().iter().map(|&t| f(t)).collect();
    refine_argmax(grid, &values)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    CompositeArgmax(CompositeSurface),
    YOnly(OutcomeSurface),
    ZOnly(OutcomeSurface),
    FixedDose(f64),
    /// Precomputed doses aligned with the covariate sample being evaluated.
    ExternalTable(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub grid: DoseGrid,
}

impl Policy {
    pub fn new(kind: PolicyKind, grid: DoseGrid) -> Self {
        Self { kind, grid }
    }

    /// Recommended dose for the `index`-th patient with covariates `x`.
    pub fn dose(&self, index: usize, x: &[f64]) -> Result<f64> {
        let d = match &self.kind {
            PolicyKind::CompositeArgmax(cs) => optimal_dose(cs, x, &self.grid)?,
            PolicyKind::YOnly(s) | PolicyKind::ZOnly(s) => optimal_dose_single(s, x, &self.grid)?,
            PolicyKind::FixedDose(a) => *a,
            PolicyKind::ExternalTable(doses) => *doses
                .get(index)
                .ok_or_else(|| AwlError::input(format!("no tabulated dose for patient {index}")))?,
        };
        Ok(d.clamp(self.grid.a_min, self.grid.a_max))
    }
}

/// Mean of the reference surface when every patient receives the policy dose.
pub fn value_under_policy(policy: &Policy, truth: &CompositeSurface, x_sample: &[Vec<f64>]) -> Result<f64> {
    if x_sample.is_empty() {
        return Err(AwlError::input("empty covariate sample"));
    }
    let mut total = 0.0;
    for (i, x) in x_sample.iter().enumerate() {
        total += truth.eval(x, policy.dose(i, x)?)?;
    }
    Ok(total / x_sample.len() as f64)
}

/// Mean of the reference surface under the assignment density with optimality `beta0`.
pub fn value_observed(truth: &CompositeSurface, beta0: f64, grid: &DoseGrid, x_sample: &[Vec<f64>]) -> Result<f64> {
    if x_sample.is_empty() {
        return Err(AwlError::input("empty covariate sample"));
    }
    let mut total = 0.0;
    for x in x_sample {
        let cd = density_at(truth, beta0, x, grid)?;
        let c = truth.dose_coefficients(x)?;
        let q: Vec<f64> = grid.points().iter().map(|&t| poly2(&c, t)).collect();
        total += cd.conditional_moments(&[q])?.0[0];
    }
    Ok(total / x_sample.len() as f64)
}
