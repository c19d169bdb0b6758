use awl_core::model_core::{CompositeSurface, DoseGrid, PreferenceModel};
use awl_core::outcome_regression::BasisSpec;
use awl_core::policy_engine::{value_observed, value_under_policy, Policy, PolicyKind};
use awl_core::sim_engine::{evaluation_sample, generate_dataset, run_study, run_study_with_workers, Scenario};
use awl_core::{fit_surface, Outcome};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn wide_fixed(n: usize) -> Scenario {
    Scenario::fixed_utility(n, 0.25, 0.3, DoseGrid::default_simulation())
}

fn fresh_covariates(size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = wide_fixed(1);
    s.eval_size = size;
    evaluation_sample(&s, seed)
}

#[test]
fn optimal_value_matches_closed_form() {
    let scen = wide_fixed(1);
    let truth = scen.true_composite().unwrap();
    let xs = fresh_covariates(100_000, 3);
    let v = value_under_policy(&Policy::new(PolicyKind::CompositeArgmax(truth.clone()), scen.grid.clone()), &truth, &xs)
        .unwrap();
    assert!((v - 0.6525).abs() < 0.01, "{v}");
}

#[test]
fn y_optimizer_value_under_pure_y_preference() {
    let scen = wide_fixed(1);
    let (y, z) = scen.true_surfaces();
    let truth = CompositeSurface::new(y.clone(), z, PreferenceModel::new(vec![60.0], vec![]).unwrap());
    let xs = fresh_covariates(100_000, 4);
    let v = value_under_policy(&Policy::new(PolicyKind::YOnly(y), scen.grid.clone()), &truth, &xs).unwrap();
    assert!((v - 1.125).abs() < 0.01, "{v}");
}

#[test]
fn observed_value_matches_closed_form() {
    let scen = wide_fixed(1);
    let truth = scen.true_composite().unwrap();
    let xs = fresh_covariates(100_000, 5);
    let v = value_observed(&truth, 0.25, &scen.grid, &xs).unwrap();
    assert!((v + 1.3475).abs() < 0.02, "{v}");
}

#[test]
fn covariates_have_configured_spread() {
    let xs = fresh_covariates(100_000, 6);
    for k in 0..2 {
        let vals: Vec<f64> = xs.iter().map(|x| x[k]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0)).sqrt();
        assert!((0.495..=0.505).contains(&sd), "x{} sd {sd}", k + 1);
    }
}

#[test]
fn generated_outcomes_follow_the_true_surfaces() {
    let scen = Scenario::fixed_utility(20_000, 0.25, 0.3, DoseGrid::new(-1.0, 1.0, 81).unwrap());
    let data = generate_dataset(&scen, 9).unwrap();
    let (y_true, z_true) = scen.true_surfaces();
    let basis = BasisSpec::default_for(2);
    for (outcome, truth) in [(Outcome::Y, &y_true), (Outcome::Z, &z_true)] {
        let rows = data.iter().map(|s| {
            let r = match outcome {
                Outcome::Y => s.y,
                Outcome::Z => s.z,
            };
            (s.x.as_slice(), s.a, r)
        });
        let (fitted, _) = fit_surface(rows, &basis).unwrap();
        for (c, t) in fitted.coeffs.iter().zip(&truth.coeffs) {
            assert!((c - t).abs() < 0.1, "{outcome:?}: {c} vs {t}");
        }
        // Residuals against the truth are N(0, 0.5^2): chi-square test on deciles.
        let nd = Normal::new(0.0, 0.5).unwrap();
        let mut counts = [0usize; 10];
        for s in &data {
            let r = match outcome {
                Outcome::Y => s.y,
                Outcome::Z => s.z,
            } - truth.eval(&s.x, s.a).unwrap();
            counts[((nd.cdf(r) * 10.0) as usize).min(9)] += 1;
        }
        let expected = data.len() as f64 / 10.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
        assert!(p > 1e-3, "{outcome:?}: chi-square {stat}, p {p}");
    }
}

#[test]
fn doses_follow_the_assignment_density() {
    // Pool probability-integral transforms of the observed doses: uniform under the model.
    let scen = Scenario::patient_specific(20_000, 0.6, vec![0.0, -2.0, 2.0], DoseGrid::new(-1.0, 1.0, 81).unwrap());
    let data = generate_dataset(&scen, 10).unwrap();
    let truth = scen.true_composite().unwrap();
    let mut counts = [0usize; 10];
    for s in &data {
        let cd = awl_core::density_at(&truth, 0.6, &s.x, &scen.grid).unwrap();
        let pts = scen.grid.points();
        let j = pts.partition_point(|p| *p < s.a).clamp(1, pts.len() - 1);
        let t = (s.a - pts[j - 1]) / scen.grid.step();
        let u = cd.cdf()[j - 1] + t * (cd.cdf()[j] - cd.cdf()[j - 1]);
        counts[((u * 10.0) as usize).min(9)] += 1;
    }
    let expected = data.len() as f64 / 10.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat}, p {p}, counts {counts:?}");
}

#[test]
fn study_tables_do_not_depend_on_worker_count() {
    let mut scen = Scenario::patient_specific(200, 0.6, vec![0.0, -2.0, 2.0], DoseGrid::new(-1.0, 1.0, 41).unwrap());
    scen.n_reps = 16;
    scen.eval_size = 500;
    let a = run_study_with_workers(&scen, 1).unwrap();
    let b = run_study_with_workers(&scen, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, run_study(&scen).unwrap());
}

#[test]
fn fixed_utility_power_is_near_one() {
    let mut scen = Scenario::fixed_utility(500, 0.25, 0.3, DoseGrid::new(-1.0, 1.0, 81).unwrap());
    scen.n_reps = 100;
    scen.eval_size = 200;
    let t = run_study(&scen).unwrap();
    let beta = t.estimate("beta").unwrap();
    assert!(beta.power.unwrap() >= 0.98, "{beta:?}");
    let omega = t.estimate("omega").unwrap();
    assert!(omega.mean > 0.0 && omega.mean < 1.0);
}
