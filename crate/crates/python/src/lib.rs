//! Python bindings: dose grids, outcome surfaces, the pseudo-likelihood fit
//! with its inference, dose recommendations, simulation studies and the
//! clinical dose conversions.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use awl_core::clinical_dose::{self, FractionPlan};
use awl_core::error::AwlError;
use awl_core::model_core::{self, CompositeSurface, PreferenceModel, Sample};
use awl_core::outcome_regression::BasisSpec;
use awl_core::pseudo_likelihood::{FitConfig, PseudoLikelihood};
use awl_core::sim_engine::{self, StudyConfig};

fn to_py(e: AwlError) -> PyErr {
    match e {
        AwlError::Input(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(format!("{}: {e}", e.kind())),
    }
}

#[pyclass(module = "awl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct DoseGrid {
    inner: model_core::DoseGrid,
}

#[pymethods]
impl DoseGrid {
    #[new]
    fn new(a_min: f64, a_max: f64, m: usize) -> PyResult<Self> {
        Ok(Self {
            inner: model_core::DoseGrid::new(a_min, a_max, m).map_err(to_py)?,
        })
    }

    #[getter]
    fn a_min(&self) -> f64 {
        self.inner.a_min
    }

    #[getter]
    fn a_max(&self) -> f64 {
        self.inner.a_max
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn step(&self) -> f64 {
        self.inner.step()
    }

    fn points(&self) -> Vec<f64> {
        self.inner.points().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("DoseGrid({}, {}, {})", self.inner.a_min, self.inner.a_max, self.inner.m)
    }
}

#[pyclass(module = "awl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct OutcomeSurface {
    inner: model_core::OutcomeSurface,
}

#[pymethods]
impl OutcomeSurface {
    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs.clone()
    }

    fn column_names(&self) -> Vec<String> {
        self.inner.basis.column_names()
    }

    fn eval(&self, x: Vec<f64>, a: f64) -> PyResult<f64> {
        self.inner.eval(&x, a).map_err(to_py)
    }
}

fn samples(x: Vec<Vec<f64>>, a: Vec<f64>, y: Vec<f64>, z: Vec<f64>) -> PyResult<Vec<Sample>> {
    if a.len() != x.len() || y.len() != x.len() || z.len() != x.len() {
        return Err(PyValueError::new_err("x, a, y and z must have the same length"));
    }
    Ok(x.into_iter()
        .zip(a)
        .zip(y.into_iter().zip(z))
        .map(|((x, a), (y, z))| Sample::new(x, a, y, z))
        .collect())
}

/// Least-squares fit of one outcome on the default dose-quadratic basis.
#[pyfunction]
fn fit_surface(x: Vec<Vec<f64>>, a: Vec<f64>, r: Vec<f64>) -> PyResult<OutcomeSurface> {
    if a.len() != x.len() || r.len() != x.len() {
        return Err(PyValueError::new_err("x, a and r must have the same length"));
    }
    let p = x.first().map_or(0, Vec::len);
    let rows = x.iter().zip(&a).zip(&r).map(|((x, a), r)| (x.as_slice(), *a, *r));
    let (inner, _) = awl_core::fit_surface(rows, &BasisSpec::default_for(p)).map_err(to_py)?;
    Ok(OutcomeSurface { inner })
}

/// Full estimation pipeline: outcome surfaces, pseudo-likelihood fit and, when
/// the information matrix is well conditioned, standard errors.
#[pyfunction]
#[pyo3(signature = (x, a, y, z, grid, weight_covs=Vec::new(), level=0.95))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    a: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    grid: &DoseGrid,
    weight_covs: Vec<usize>,
    level: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = samples(x, a, y, z)?;
    let basis = BasisSpec::default_for(data.first().map_or(0, |s| s.x.len()));
    let (q_y, _) = awl_core::fit_outcome(&data, awl_core::Outcome::Y, &basis).map_err(to_py)?;
    let (q_z, _) = awl_core::fit_outcome(&data, awl_core::Outcome::Z, &basis).map_err(to_py)?;
    let pl = PseudoLikelihood::new(&data, &q_y, &q_z, &weight_covs, &grid.inner).map_err(to_py)?;
    let est = pl.maximize(&FitConfig::new(grid.inner.clone())).map_err(to_py)?;

    let out = PyDict::new(py);
    out.set_item("beta", est.beta_hat)?;
    out.set_item("theta", est.theta_hat.clone())?;
    out.set_item("loglik", est.loglik)?;
    out.set_item("converged", est.converged)?;
    out.set_item("iterations", est.iterations)?;
    out.set_item("flags", est.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>())?;
    out.set_item("q_y", OutcomeSurface { inner: q_y })?;
    out.set_item("q_z", OutcomeSurface { inner: q_z })?;
    match awl_core::infer(&pl, &est, level) {
        Ok(inf) => {
            let d = inf.cov_hat.nrows();
            let cov: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| inf.cov_hat[(i, j)]).collect()).collect();
            out.set_item("se", inf.se)?;
            out.set_item("p_values", inf.p_values)?;
            out.set_item("ci_lower", inf.ci_lower)?;
            out.set_item("ci_upper", inf.ci_upper)?;
            out.set_item("cov", cov)?;
        }
        Err(AwlError::NearSingular { condition }) => {
            out.set_item("declined", format!("NEAR_SINGULAR condition={condition:e}"))?;
        }
        Err(e) => return Err(to_py(e)),
    }
    Ok(out)
}

/// Logistic weight on outcome Y for covariates `x`.
#[pyfunction]
#[pyo3(signature = (theta, x, weight_covs=Vec::new()))]
fn weight(theta: Vec<f64>, x: Vec<f64>, weight_covs: Vec<usize>) -> PyResult<f64> {
    PreferenceModel::new(theta, weight_covs).and_then(|p| p.weight(&x)).map_err(to_py)
}

/// Dose maximizing `w Q_Y + (1 - w) Q_Z` at each covariate row.
#[pyfunction]
#[pyo3(signature = (q_y, q_z, theta, x, grid, weight_covs=Vec::new()))]
fn optimal_dose(
    q_y: &OutcomeSurface,
    q_z: &OutcomeSurface,
    theta: Vec<f64>,
    x: Vec<Vec<f64>>,
    grid: &DoseGrid,
    weight_covs: Vec<usize>,
) -> PyResult<Vec<f64>> {
    let pref = PreferenceModel::new(theta, weight_covs).map_err(to_py)?;
    let cs = CompositeSurface::new(q_y.inner.clone(), q_z.inner.clone(), pref);
    x.iter()
        .map(|row| awl_core::optimal_dose(&cs, row, &grid.inner))
        .collect::<Result<_, _>>()
        .map_err(to_py)
}

/// Runs a Monte Carlo study from a scenario JSON string; returns the
/// estimate and value tables as lists of dicts.
#[pyfunction]
#[pyo3(signature = (scenario_json, workers=1))]
fn run_study<'py>(py: Python<'py>, scenario_json: &str, workers: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config: StudyConfig = serde_json::from_str(scenario_json).map_err(|e| PyValueError::new_err(format!("invalid scenario: {e}")))?;
    let scenarios = config.scenarios().map_err(to_py)?;
    let mut rows = Vec::new();
    for s in &scenarios {
        let t = sim_engine::run_study_with_workers(s, workers).map_err(to_py)?;
        for e in &t.estimates {
            let d = PyDict::new(py);
            d.set_item("n", t.n)?;
            d.set_item("beta0", t.beta0)?;
            d.set_item("n_flagged", t.n_flagged)?;
            d.set_item("parameter", &e.parameter)?;
            d.set_item("truth", e.truth)?;
            d.set_item("mean", e.mean)?;
            d.set_item("sd", e.sd)?;
            d.set_item("mean_se", e.mean_se)?;
            d.set_item("type_i_error", e.type_i_error)?;
            d.set_item("power", e.power)?;
            rows.push(d);
        }
        for v in &t.values {
            let d = PyDict::new(py);
            d.set_item("n", t.n)?;
            d.set_item("beta0", t.beta0)?;
            d.set_item("policy", &v.policy)?;
            d.set_item("mean", v.mean)?;
            d.set_item("sd", v.sd)?;
            rows.push(d);
        }
    }
    Ok(rows)
}

#[pyfunction]
fn expit(u: f64) -> f64 {
    model_core::expit(u)
}

#[pyfunction]
fn logit(p: f64) -> f64 {
    model_core::logit(p)
}

#[pyfunction]
fn total_dose(n_fractions: u32, dose_per_fraction: f64) -> PyResult<f64> {
    Ok(clinical_dose::total_dose(&FractionPlan::new(n_fractions, dose_per_fraction, 1.0).map_err(to_py)?))
}

#[pyfunction]
fn mld(n_fractions: u32, dose_per_fraction: f64, ratio: f64) -> PyResult<f64> {
    Ok(clinical_dose::mld(&FractionPlan::new(n_fractions, dose_per_fraction, ratio).map_err(to_py)?))
}

#[pyfunction]
fn bed(n_fractions: u32, dose_per_fraction: f64) -> PyResult<f64> {
    Ok(clinical_dose::bed(&FractionPlan::new(n_fractions, dose_per_fraction, 1.0).map_err(to_py)?))
}

#[pyfunction]
fn utility_score(p_tox: f64, p_lp: f64, w: f64) -> PyResult<f64> {
    clinical_dose::utility_score(p_tox, p_lp, w).map_err(to_py)
}

#[pymodule]
fn awl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<DoseGrid>()?;
    m.add_class::<OutcomeSurface>()?;
    m.add_function(wrap_pyfunction!(fit_surface, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(weight, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_dose, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(expit, m)?)?;
    m.add_function(wrap_pyfunction!(logit, m)?)?;
    m.add_function(wrap_pyfunction!(total_dose, m)?)?;
    m.add_function(wrap_pyfunction!(mld, m)?)?;
    m.add_function(wrap_pyfunction!(bed, m)?)?;
    m.add_function(wrap_pyfunction!(utility_score, m)?)?;
    Ok(())
}
