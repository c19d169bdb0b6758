//! Adaptive weight learning for individualized dose regimes with two outcomes.
//!
//! Observed doses are modelled as draws from `f(a | x) ∝ exp{beta Q(x, a)}`,
//! where `Q = w(x) Q_Y + (1 - w(x)) Q_Z` mixes two fitted outcome surfaces
//! with a patient-specific preference weight. Maximizing the resulting
//! pseudo-likelihood recovers the weight model and the clinicians'
//! optimality `beta`, which in turn defines a recommended dose per patient.

pub mod assignment_density;
pub mod cli;
pub mod clinical_dose;
pub mod error;
pub mod inference;
pub mod model_core;
pub mod outcome_regression;
pub mod policy_engine;
pub mod pseudo_likelihood;
pub mod sim_engine;

pub use assignment_density::{density_at, ConditionalDensity};
pub use error::{AwlError, Result};
pub use inference::{b_matrix, infer, wald, weight_ci, InferenceResult};
pub use model_core::{expit, logit, CompositeSurface, DoseGrid, OutcomeSurface, PreferenceModel, Sample};
pub use outcome_regression::{build_design, fit_outcome, fit_surface, BasisSpec, FitDiagnostics, Outcome};
pub use policy_engine::{optimal_dose, value_observed, value_under_policy, Policy, PolicyKind};
pub use pseudo_likelihood::{fit, EstimateResult, FitConfig, FitFlag, PseudoLikelihood};
pub use sim_engine::{generate_dataset, run_replication, run_study, Scenario, StudyConfig, StudyTables, WeightKind};
