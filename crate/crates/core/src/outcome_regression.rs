//! Least-squares fits of the outcome surfaces `Q_Y` and `Q_Z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AwlError, Result};
use crate::model_core::{OutcomeSurface, Sample};

/// Feature layout of an outcome surface. Columns are emitted in the order
/// `[1?, x_1..x_p?, a, a^2?, a*x_j for j in interaction_indices]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n_covariates: usize,
    pub degree_in_dose: u8,
    pub interaction_indices: Vec<usize>,
    pub include_main_covariates: bool,
    pub include_intercept: bool,
}

impl BasisSpec {
    pub fn new(
        n_covariates: usize,
        degree_in_dose: u8,
        interaction_indices: Vec<usize>,
        include_main_covariates: bool,
        include_intercept: bool,
    ) -> Self {
        Self {
            n_covariates,
            degree_in_dose,
            interaction_indices,
            include_main_covariates,
            include_intercept,
        }
    }

    /// Intercept, covariate mains, `a`, `a^2` and `a*x_j` for every covariate.
    pub fn default_for(n_covariates: usize) -> Self {
        Self::new(n_covariates, 2, (0..n_covariates).collect(), true, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.degree_in_dose, 1 | 2) {
            return Err(AwlError::input(format!(
                "degree_in_dose must be 1 or 2, got {}",
                self.degree_in_dose
            )));
        }
        if let Some(&j) = self.interaction_indices.iter().find(|&&j| j >= self.n_covariates) {
            return Err(AwlError::input(format!(
                "interaction index {j} out of range for {} covariates",
                self.n_covariates
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        usize::from(self.include_intercept)
            + if self.include_main_covariates { self.n_covariates } else { 0 }
            + 1
            + usize::from(self.degree_in_dose == 2)
            + self.interaction_indices.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        if self.include_intercept {
            names.push("1".to_string());
        }
        if self.include_main_covariates {
            names.extend((0..self.n_covariates).map(|j| format!("x{}", j + 1)));
        }
        names.push("a".to_string());
        if self.degree_in_dose == 2 {
            names.push("a^2".to_string());
        }
        names.extend(self.interaction_indices.iter().map(|j| format!("a*x{}", j + 1)));
        names
    }
}

pub fn build_design(spec: &BasisSpec, x: &[f64], a: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    if x.len() < spec.n_covariates {
        return Err(AwlError::input(format!(
            "basis expects {} covariates, got {}",
            spec.n_covariates,
            x.len()
        )));
    }
    let mut row = Vec::with_capacity(spec.dim());
    if spec.include_intercept {
        row.push(1.0);
    }
    if spec.include_main_covariates {
        row.extend_from_slice(&x[..spec.n_covariates]);
    }
    row.push(a);
    if spec.degree_in_dose == 2 {
        row.push(a * a);
    }
    row.extend(spec.interaction_indices.iter().map(|&j| a * x[j]));
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rss: f64,
    pub n: usize,
    pub condition_estimate: f64,
    pub rank_ok: bool,
}

/// Relative size of a triangular pivot below which its column counts as
/// linearly dependent on the preceding ones.
const RANK_TOL: f64 = 1e-10;

/// Ordinary least squares via Householder QR of the design matrix.
pub fn fit_surface<'a, I>(rows: I, spec: &BasisSpec) -> Result<(OutcomeSurface, FitDiagnostics)>
where
    I: IntoIterator<Item = (&'a [f64], f64, f64)>,
{
    spec.validate()?;
    let p = spec.dim();
    let mut design = Vec::new();
    let mut response = Vec::new();
    for (x, a, r) in rows {
        if !r.is_finite() || !a.is_finite() {
            return Err(AwlError::input("non-finite dose or response"));
        }
        design.extend(build_design(spec, x, a)?);
        response.push(r);
    }
    let n = response.len();
    if n <= p {
        return Err(AwlError::input(format!(
            "need more observations ({n}) than basis columns ({p})"
        )));
    }

    let xmat = DMatrix::from_row_slice(n, p, &design);
    let qr = xmat.clone().qr();
    let r = qr.r();

    let diag_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let deficient: Vec<usize> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= RANK_TOL * diag_max)
        .collect();
    if !deficient.is_empty() {
        return Err(AwlError::RankDeficient {
            columns: collinear_columns(&r, &deficient, &spec.column_names()),
        });
    }

    let mut qty = DVector::from_vec(response.clone());
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, p).into_owned();
    let coeffs = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| AwlError::numeric("triangular solve failed"))?;

    let fitted = &xmat * &coeffs;
    let rss: f64 = response
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| (y - f).powi(2))
        .sum();
    let sv = r.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);

    let surface = OutcomeSurface::new(spec.clone(), coeffs.iter().copied().collect())?;
    let diagnostics = FitDiagnostics {
        rss,
        n,
        condition_estimate: smax / smin,
        rank_ok: true,
    };
    Ok((surface, diagnostics))
}

/// Names the dependent columns together with the earlier columns that span them.
fn collinear_columns(r: &DMatrix<f64>, deficient: &[usize], names: &[String]) -> Vec<String> {
    let mut involved = std::collections::BTreeSet::new();
    for &j in deficient {
        involved.insert(j);
        if j == 0 {
            continue;
        }
        let head = r.view((0, 0), (j, j)).into_owned();
        let col = r.view((0, j), (j, 1)).into_owned();
        if let Some(c) = head.solve_upper_triangular(&col) {
            let scale = c.amax().max(1.0);
            for (k, v) in c.iter().enumerate() {
                if v.abs() > 1e-8 * scale && !deficient.contains(&k) {
                    involved.insert(k);
                }
            }
        }
    }
    involved.into_iter().map(|k| names[k].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Y,
    Z,
}

/// Fits one of the two outcome surfaces from observed samples.
pub fn fit_outcome(
    samples: &[Sample],
    outcome: Outcome,
    spec: &BasisSpec,
) -> Result<(OutcomeSurface, FitDiagnostics)> {
    fit_surface(
        samples.iter().map(|s| {
            let r = match outcome {
                Outcome::Y => s.y,
                Outcome::Z => s.z,
            };
            (s.x.as_slice(), s.a, r)
        }),
        spec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sim_rows(n: usize, seed: u64, noise: f64) -> Vec<(Vec<f64>, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xd = Normal::new(0.0, 0.5).unwrap();
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let x = vec![xd.sample(&mut rng), xd.sample(&mut rng)];
                let a: f64 = rng.random_range(-1.0..1.0);
                let y = a * (4.0 * x[0] - 2.0 * x[1] + 2.0) - 2.0 * a * a + noise * nd.sample(&mut rng);
                (x, a, y)
            })
            .collect()
    }

    fn as_refs(rows: &[(Vec<f64>, f64, f64)]) -> impl Iterator<Item = (&[f64], f64, f64)> {
        rows.iter().map(|(x, a, r)| (x.as_slice(), *a, *r))
    }

    #[test]
    fn design_layout() {
        let spec = BasisSpec::default_for(2);
        assert_eq!(
            build_design(&spec, &[1.0, 2.0], 3.0).unwrap(),
            vec![1.0, 1.0, 2.0, 3.0, 9.0, 3.0, 6.0]
        );
        let spec = BasisSpec::new(2, 1, vec![], false, true);
        assert_eq!(build_design(&spec, &[7.0, -3.0], 0.0).unwrap(), vec![1.0, 0.0]);
        for (p, mains, deg, inter, icpt) in [(3, true, 2, 2, true), (3, false, 1, 0, true), (1, true, 2, 1, false)] {
            let spec = BasisSpec::new(p, deg, (0..inter).collect(), mains, icpt);
            let expected = usize::from(icpt) + if mains { p } else { 0 } + 1 + usize::from(deg == 2) + inter;
            assert_eq!(spec.dim(), expected);
            assert_eq!(build_design(&spec, &vec![0.5; p], 1.5).unwrap().len(), expected);
            assert_eq!(spec.column_names().len(), expected);
        }
        let bad = BasisSpec::new(2, 2, vec![4], true, true);
        assert!(matches!(build_design(&bad, &[1.0, 2.0], 0.0), Err(AwlError::Input(_))));
    }

    #[test]
    fn recovers_noiseless_generative_model() {
        let rows = sim_rows(200, 1, 0.0);
        let (surface, diag) = fit_surface(as_refs(&rows), &BasisSpec::default_for(2)).unwrap();
        let truth = [0.0, 0.0, 0.0, 2.0, -2.0, 4.0, -2.0];
        for (c, t) in surface.coeffs.iter().zip(truth) {
            assert!((c - t).abs() < 1e-8, "{c} vs {t}");
        }
        assert!(diag.rank_ok && diag.rss < 1e-16);
    }

    #[test]
    fn constant_response() {
        let mut rows = sim_rows(50, 2, 0.0);
        for r in rows.iter_mut() {
            r.2 = 3.25;
        }
        let (surface, _) = fit_surface(as_refs(&rows), &BasisSpec::default_for(2)).unwrap();
        assert!((surface.coeffs[0] - 3.25).abs() < 1e-10);
        assert!(surface.coeffs[1..].iter().all(|c| c.abs() < 1e-10));
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        // Interacting x1 twice duplicates the a*x1 column.
        let rows = sim_rows(50, 3, 0.1);
        let spec = BasisSpec::new(2, 2, vec![0, 0], true, true);
        match fit_surface(as_refs(&rows), &spec) {
            Err(AwlError::RankDeficient { columns }) => {
                assert!(columns.iter().filter(|c| *c == "a*x1").count() >= 1, "{columns:?}");
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }

        // Constant covariate collides with the intercept.
        let mut rows = sim_rows(50, 4, 0.1);
        for r in rows.iter_mut() {
            r.0[1] = 1.0;
        }
        let spec = BasisSpec::new(2, 2, vec![0], true, true);
        match fit_surface(as_refs(&rows), &spec) {
            Err(AwlError::RankDeficient { columns }) => {
                assert_eq!(columns, vec!["1".to_string(), "x2".to_string()]);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let rows = sim_rows(7, 5, 0.1);
        assert!(matches!(
            fit_surface(as_refs(&rows), &BasisSpec::default_for(2)),
            Err(AwlError::Input(_))
        ));
    }

    #[test]
    fn tolerates_ill_conditioned_design() {
        // Dose shifted far from zero makes a and a^2 nearly collinear.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<(Vec<f64>, f64, f64)> = (0..400)
            .map(|_| {
                let x = vec![rng.random_range(-1.0..1.0)];
                let a: f64 = 1000.0 + rng.random_range(-0.5..0.5);
                (x.clone(), a, 1.0 + x[0] + 0.5 * a - 0.001 * a * a)
            })
            .collect();
        let spec = BasisSpec::new(1, 2, vec![], true, true);
        let (surface, diag) = fit_surface(as_refs(&rows), &spec).unwrap();
        assert!(diag.condition_estimate > 1e6, "{}", diag.condition_estimate);
        for (x, a, r) in &rows {
            assert!((surface.eval(x, *a).unwrap() - r).abs() < 1e-6);
        }
    }

    #[test]
    fn residuals_orthogonal_and_refit_idempotent() {
        let rows = sim_rows(300, 6, 0.5);
        let spec = BasisSpec::default_for(2);
        let (surface, _) = fit_surface(as_refs(&rows), &spec).unwrap();
        let n = rows.len() as f64;
        let mut inner = vec![0.0; spec.dim()];
        let mut scale: f64 = 0.0;
        for (x, a, r) in &rows {
            let d = build_design(&spec, x, *a).unwrap();
            let res = r - surface.eval(x, *a).unwrap();
            scale = scale.max(r.abs());
            for (acc, v) in inner.iter_mut().zip(&d) {
                *acc += res * v;
            }
        }
        assert!(inner.iter().all(|v| v.abs() < 1e-8 * n * scale), "{inner:?}");

        let refit: Vec<(Vec<f64>, f64, f64)> = rows
            .iter()
            .map(|(x, a, _)| (x.clone(), *a, surface.eval(x, *a).unwrap()))
            .collect();
        let (again, _) = fit_surface(as_refs(&refit), &spec).unwrap();
        for (c1, c2) in surface.coeffs.iter().zip(&again.coeffs) {
            assert!((c1 - c2).abs() < 1e-10);
        }
    }

    #[test]
    fn coefficient_error_shrinks_like_root_n() {
        let truth = [0.0, 0.0, 0.0, 2.0, -2.0, 4.0, -2.0];
        let spec = BasisSpec::default_for(2);
        let mean_err = |n: usize| -> f64 {
            let reps = 20;
            (0..reps)
                .map(|k| {
                    let rows = sim_rows(n, 1000 + k as u64 * 7 + n as u64, 0.5);
                    let (s, _) = fit_surface(as_refs(&rows), &spec).unwrap();
                    s.coeffs
                        .iter()
                        .zip(truth)
                        .map(|(c, t)| (c - t).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / reps as f64
        };
        let e = [mean_err(500), mean_err(5000), mean_err(50000)];
        for w in e.windows(2) {
            let ratio = w[1] / w[0];
            assert!((0.2..=0.5).contains(&ratio), "errors {e:?}");
        }
    }
}
