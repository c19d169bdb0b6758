use awl_core::assignment_density::ConditionalDensity;
use awl_core::inference::{normal_quantile, weight_ci};
use awl_core::model_core::{DoseGrid, OutcomeSurface, Sample};
use awl_core::outcome_regression::BasisSpec;
use awl_core::pseudo_likelihood::{FitConfig, PseudoLikelihood};
use awl_core::sim_engine::{generate_dataset, replication_seed, run_study, Scenario};
use awl_core::{expit, fit_outcome, infer, Outcome};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn paper_grid() -> DoseGrid {
    DoseGrid::new(-1.0, 1.0, 81).unwrap()
}

fn fitted_surfaces(data: &[Sample]) -> (OutcomeSurface, OutcomeSurface) {
    let basis = BasisSpec::default_for(2);
    (
        fit_outcome(data, Outcome::Y, &basis).unwrap().0,
        fit_outcome(data, Outcome::Z, &basis).unwrap().0,
    )
}

#[test]
fn information_matches_negative_hessian_on_average() {
    let scen = Scenario::fixed_utility(500, 0.25, 0.3, paper_grid());
    let (qy, qz) = scen.true_surfaces();
    let theta0 = [(0.3f64 / 0.7).ln()];
    let reps = 200;
    let diffs: Vec<DMatrix<f64>> = (0..reps)
        .map(|r| {
            let data = generate_dataset(&scen, replication_seed(5, r)).unwrap();
            let pl = PseudoLikelihood::new(&data, &qy, &qz, &[], &scen.grid).unwrap();
            let n = pl.n() as f64;
            -pl.hessian(0.25, &theta0).unwrap() / n - pl.information(0.25, &theta0).unwrap() / n
        })
        .collect();
    let b = PseudoLikelihood::new(&generate_dataset(&scen, 1).unwrap(), &qy, &qz, &[], &scen.grid)
        .unwrap()
        .information(0.25, &theta0)
        .unwrap()
        / 500.0;
    for i in 0..2 {
        for j in 0..2 {
            let vals: Vec<f64> = diffs.iter().map(|d| d[(i, j)]).collect();
            let mean = vals.iter().sum::<f64>() / reps as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt();
            assert!(
                mean.abs() <= 3.0 * sd / (reps as f64).sqrt() + 1e-12,
                "({i},{j}): mean difference {mean} (sd {sd}, B {})",
                b[(i, j)]
            );
        }
    }
}

#[test]
fn weight_interval_agrees_with_parametric_bootstrap() {
    let scen = Scenario::fixed_utility(500, 0.25, 0.3, paper_grid());
    let data = generate_dataset(&scen, 17).unwrap();
    let (qy, qz) = fitted_surfaces(&data);
    let cfg = FitConfig::new(scen.grid.clone());
    let pl = PseudoLikelihood::new(&data, &qy, &qz, &[], &scen.grid).unwrap();
    let est = pl.maximize(&cfg).unwrap();
    let inf = infer(&pl, &est, 0.95).unwrap();
    let shape = scen.true_preference().unwrap();
    let (_, lo, hi) = weight_ci(&shape, &est.theta_hat, &inf.cov_theta(), &[], 0.95).unwrap();

    // Redraw doses from the fitted density, keep covariates and surfaces fixed.
    let fitted = awl_core::CompositeSurface::new(qy.clone(), qz.clone(), shape.with_theta(&est.theta_hat).unwrap());
    let densities: Vec<ConditionalDensity> = data
        .iter()
        .map(|s| {
            ConditionalDensity::from_dose_polynomial(&scen.grid, est.beta_hat, &fitted.dose_coefficients(&s.x).unwrap())
                .unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut boot_cfg = cfg.clone();
    boot_cfg.n_restarts = 0;
    boot_cfg.init_theta = Some(est.theta_hat.clone());
    boot_cfg.init_beta = est.beta_hat;
    let omegas: Vec<f64> = (0..1000)
        .map(|_| {
            let resample: Vec<Sample> = data
                .iter()
                .zip(&densities)
                .map(|(s, cd)| Sample::new(s.x.clone(), cd.sample_dose(rng.random()), s.y, s.z))
                .collect();
            let e = PseudoLikelihood::new(&resample, &qy, &qz, &[], &scen.grid)
                .unwrap()
                .maximize(&boot_cfg)
                .unwrap();
            expit(e.theta_hat[0])
        })
        .collect();
    let m = omegas.iter().sum::<f64>() / omegas.len() as f64;
    let sd = (omegas.iter().map(|w| (w - m).powi(2)).sum::<f64>() / (omegas.len() as f64 - 1.0)).sqrt();
    let boot_width = 2.0 * normal_quantile(0.975) * sd;
    let width = hi - lo;
    assert!(lo > 0.0 && hi < 1.0, "interval [{lo}, {hi}] should not be clipped here");
    assert!((width - boot_width).abs() / boot_width < 0.10, "delta width {width} vs bootstrap {boot_width}");
}

#[test]
fn weight_intervals_cover_at_nominal_rate() {
    let scen = Scenario::patient_specific(1000, 0.6, vec![0.0, -2.0, 2.0], paper_grid());
    let shape = scen.true_preference().unwrap();
    let points = [vec![0.0, 0.0], vec![0.3, -0.2], vec![-0.5, 0.4]];
    let truths: Vec<f64> = points.iter().map(|x| shape.weight(x).unwrap()).collect();
    let mut hits = vec![0usize; points.len()];
    let mut used = 0usize;
    for r in 0..500 {
        let data = generate_dataset(&scen, replication_seed(23, r)).unwrap();
        let (qy, qz) = fitted_surfaces(&data);
        let pl = PseudoLikelihood::new(&data, &qy, &qz, &[0, 1], &scen.grid).unwrap();
        let est = pl.maximize(&FitConfig::new(scen.grid.clone())).unwrap();
        let Ok(inf) = infer(&pl, &est, 0.95) else { continue };
        used += 1;
        for (k, x) in points.iter().enumerate() {
            let (_, lo, hi) = weight_ci(&shape, &est.theta_hat, &inf.cov_theta(), x, 0.95).unwrap();
            hits[k] += usize::from(lo <= truths[k] && truths[k] <= hi);
        }
    }
    assert!(used >= 490);
    for (k, h) in hits.iter().enumerate() {
        let cov = *h as f64 / used as f64;
        assert!((0.92..=0.98).contains(&cov), "coverage at {:?}: {cov}", points[k]);
    }
}

#[test]
fn standard_errors_track_replication_spread() {
    let mut scen = Scenario::fixed_utility(500, 0.25, 0.3, paper_grid());
    scen.n_reps = 300;
    scen.eval_size = 200;
    let t = run_study(&scen).unwrap();
    for row in &t.estimates {
        assert!((row.mean_se - row.sd).abs() / row.sd < 0.2, "{}: se {} sd {}", row.parameter, row.mean_se, row.sd);
    }
}
