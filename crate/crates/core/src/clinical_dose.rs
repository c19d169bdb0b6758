//! Radiation dose conversions and the two-outcome utility score.

use serde::{Deserialize, Serialize};

use crate::error::{AwlError, Result};

/// Fractionated treatment plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionPlan {
    pub n_fractions: u32,
    /// Gy per fraction.
    pub dose_per_fraction: f64,
    /// Lesion-to-liver dose ratio in (0, 1].
    pub ratio: f64,
}

impl FractionPlan {
    pub fn new(n_fractions: u32, dose_per_fraction: f64, ratio: f64) -> Result<Self> {
        if n_fractions == 0 {
            return Err(AwlError::input("plan needs at least one fraction"));
        }
        if !(dose_per_fraction > 0.0 && dose_per_fraction.is_finite()) {
            return Err(AwlError::input(format!("dose per fraction {dose_per_fraction} must be positive")));
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(AwlError::input(format!("dose ratio {ratio} not in [0, 1]")));
        }
        Ok(Self {
            n_fractions,
            dose_per_fraction,
            ratio,
        })
    }
}

pub fn total_dose(plan: &FractionPlan) -> f64 {
    plan.n_fractions as f64 * plan.dose_per_fraction
}

/// Mean liver dose, alpha/beta = 2.5 Gy normalized to 2 Gy fractions.
pub fn mld(plan: &FractionPlan) -> f64 {
    total_dose(plan) * plan.ratio * (plan.dose_per_fraction * plan.ratio + 2.5) / (2.0 + 2.5)
}

/// Biologically effective dose with alpha/beta = 10 Gy.
pub fn bed(plan: &FractionPlan) -> f64 {
    total_dose(plan) * (plan.dose_per_fraction / 10.0 + 1.0)
}

/// `1 - p_tox * w - p_lp * (1 - w)`.
pub fn utility_score(p_tox: f64, p_lp: f64, w: f64) -> Result<f64> {
    for (name, v) in [("toxicity", p_tox), ("local progression", p_lp), ("weight", w)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(AwlError::input(format!("{name} {v} not in [0, 1]")));
        }
    }
    Ok(1.0 - p_tox * w - p_lp * (1.0 - w))
}
