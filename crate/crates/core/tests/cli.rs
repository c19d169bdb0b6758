use std::path::Path;
use std::process::{Command, Output};

use awl_core::cli::{read_samples_csv, write_samples_csv, EstimateFile};
use awl_core::model_core::{CompositeSurface, DoseGrid, PreferenceModel, Sample};
use awl_core::policy_engine::optimal_dose_single;
use awl_core::sim_engine::{generate_dataset, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn awl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awl")).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn samples_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scen = Scenario::fixed_utility(50, 0.25, 0.3, DoseGrid::new(-1.0, 1.0, 41).unwrap());
    let data = generate_dataset(&scen, 1).unwrap();
    let path = dir.path().join("d.csv");
    write_samples_csv(&path, &data).unwrap();
    assert_eq!(read_samples_csv(&path).unwrap(), data);
}

#[test]
fn fit_infer_policy_pipeline_with_pure_y_preference() {
    let dir = tempfile::tempdir().unwrap();
    let grid = DoseGrid::new(-1.0, 1.0, 81).unwrap();
    let scen = Scenario::fixed_utility(400, 2.0, 0.5, grid.clone());
    let (y, z) = scen.true_surfaces();
    // Weight one on Y: doses concentrate around the Y optimum.
    let truth = CompositeSurface::new(y, z, PreferenceModel::new(vec![40.0], vec![]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let data: Vec<Sample> = (0..400)
        .map(|_| {
            let x = scen.draw_covariates(&mut rng);
            let a = awl_core::density_at(&truth, 2.0, &x, &grid).unwrap().sample_dose(rng.random());
            let y = truth.q_y.eval(&x, a).unwrap() + noise.sample(&mut rng);
            let z = truth.q_z.eval(&x, a).unwrap() + noise.sample(&mut rng);
            Sample::new(x, a, y, z)
        })
        .collect();
    write_samples_csv(&dir.path().join("data.csv"), &data).unwrap();

    let fit = awl(&["fit", "--data", "data.csv", "--out", "est.json", "--grid", "-1,1,81"], dir.path());
    assert_eq!(fit.status.code(), Some(0), "{}", stderr(&fit));
    let inf = awl(&["infer", "--data", "data.csv", "--estimate", "est.json", "--out", "inf.json"], dir.path());
    assert!(matches!(inf.status.code(), Some(0) | Some(3)), "{}", stderr(&inf));

    let est: EstimateFile = serde_json::from_str(&std::fs::read_to_string(dir.path().join("est.json")).unwrap()).unwrap();
    assert!(est.preference.weight(&[0.0, 0.0]).unwrap() > 0.95);

    let xs: Vec<Vec<f64>> = (0..25).map(|k| vec![-0.6 + 0.05 * k as f64, 0.3 - 0.02 * k as f64]).collect();
    let mut cov = csv::Writer::from_path(dir.path().join("x.csv")).unwrap();
    cov.write_record(["x1", "x2"]).unwrap();
    for x in &xs {
        cov.write_record(x.iter().map(|v| v.to_string())).unwrap();
    }
    cov.flush().unwrap();
    let pol = awl(&["policy", "--estimate", "est.json", "--covariates", "x.csv", "--out", "doses.csv"], dir.path());
    assert_eq!(pol.status.code(), Some(0), "{}", stderr(&pol));

    let mut rdr = csv::Reader::from_path(dir.path().join("doses.csv")).unwrap();
    let doses: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(doses.len(), xs.len());
    let w_hat = est.preference.weight(&[]).unwrap();
    for (x, d) in xs.iter().zip(doses) {
        let y_best = optimal_dose_single(&est.q_y, x, &grid).unwrap();
        // A weight just below one moves the optimum by at most (1 - w) times the Z pull.
        assert!((d - y_best).abs() <= grid.step() + 2.0 * (1.0 - w_hat), "x {x:?}: {d} vs {y_best}");
    }
}

#[test]
fn identical_outcomes_decline_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let scen = Scenario::fixed_utility(200, 0.25, 0.3, DoseGrid::new(-1.0, 1.0, 41).unwrap());
    let data: Vec<Sample> = generate_dataset(&scen, 2)
        .unwrap()
        .into_iter()
        .map(|s| Sample::new(s.x, s.a, s.y, s.y))
        .collect();
    write_samples_csv(&dir.path().join("data.csv"), &data).unwrap();
    let out = awl(&["fit", "--data", "data.csv", "--out", "est.json", "--grid", "-1,1,41"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("NEAR_SINGULAR"), "{}", stderr(&out));
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "x1,a,y,z\n0.1,zero,1,2\n").unwrap();
    let out = awl(&["fit", "--data", "bad.csv", "--out", "est.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error kind=input"), "{}", stderr(&out));
    let missing = awl(&["policy", "--estimate", "nope.json", "--covariates", "x.csv", "--out", "o.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn simulate_output_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{"weight": {"kind": "fixed", "omega0": 0.3}, "n": [150], "beta0": [0.15, 0.25],
            "n_reps": 10, "eval_size": 500, "grid": {"a_min": -1.0, "a_max": 1.0, "m": 41}}"#,
    )
    .unwrap();
    let run = |workers: &str, out: &str| {
        let o = awl(&["simulate", "--scenario", "s.json", "--out-dir", out, "--seed", "5", "--workers", workers], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (
            std::fs::read(dir.path().join(out).join("estimates.csv")).unwrap(),
            std::fs::read(dir.path().join(out).join("values.csv")).unwrap(),
        )
    };
    let a = run("1", "one");
    let b = run("3", "three");
    assert_eq!(a, b);
    let text = String::from_utf8(a.0).unwrap();
    assert!(text.starts_with("n,beta0,n_reps,n_flagged,parameter"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
}
