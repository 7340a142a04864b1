use std::path::PathBuf;

use rand::Rng;
use suppressdp::harness::{
    known_bounds, load_column, load_normalized, run_sampling_experiment,
    run_suppression_experiment, wilson_ci, DatasetSpec, ExperimentConfig, UtilityKind, Variant,
    ADULT_NUMERIC_COLUMNS,
};
use suppressdp::mechanisms::{MechanismKind, NoiseKind};
use suppressdp::RandomStream;

fn adult() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv")
}

#[test]
fn adult_fixture_sizes() {
    let d = load_column(&adult(), "age", known_bounds("age").unwrap()).unwrap();
    assert_eq!(d.len(), 32_561);
    let h = load_column(&adult(), "hours-per-week", known_bounds("hours-per-week").unwrap()).unwrap();
    assert_eq!(h.len(), 32_561);
    let all = load_normalized(&adult(), &ADULT_NUMERIC_COLUMNS).unwrap();
    assert_eq!(all.dim(), 6);
    assert!(all.records().iter().flat_map(|r| r.values()).all(|v| v.abs() <= 1.0));
}

#[test]
fn wilson_coverage_on_fair_coin() {
    let mut rng = RandomStream::new(5).child("wilson").rng();
    let batches = 1000;
    let covered = (0..batches)
        .filter(|_| {
            let s = (0..100).filter(|_| rng.random::<bool>()).count() as u64;
            let (lo, hi) = wilson_ci(s, 100, 0.95).unwrap();
            lo <= 0.5 && 0.5 <= hi
        })
        .count();
    let rate = covered as f64 / batches as f64;
    assert!((rate - 0.95).abs() <= 0.03, "coverage {rate}");
}

#[test]
fn clustering_runs_on_synthetic_data() {
    let mut km = ExperimentConfig::new(
        DatasetSpec::Synthetic { seed: 4 },
        MechanismKind::KMedian,
        NoiseKind::Exponential,
    );
    km.epsilons = vec![1.0];
    km.p_grid = vec![0.5];
    km.iterations = 2;
    km.reps = 2;
    let rows = run_sampling_experiment(&km).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.metric == UtilityKind::KMedianCost && r.mean.unwrap() > 0.0));

    let mut lloyd = ExperimentConfig::new(
        DatasetSpec::Synthetic { seed: 4 },
        MechanismKind::DpLloyd,
        NoiseKind::Laplace,
    );
    lloyd.epsilons = vec![1.0];
    lloyd.mm_grid = vec![0.2, 0.9];
    lloyd.reps = 3;
    let rows = run_suppression_experiment(&lloyd).unwrap();
    assert_eq!(rows.len(), 4);
    let diag = rows.iter().find(|r| r.m == Some(0.2) && r.big_m == Some(0.2)).unwrap();
    assert!(diag.metric == UtilityKind::NICV && diag.mean.unwrap() >= 0.0);
}

#[test]
fn gaussian_runs_use_inverse_square_delta_and_are_deterministic() {
    let spec = DatasetSpec::Column {
        name: "adult".into(),
        path: adult(),
        column: "hours-per-week".into(),
        bounds: known_bounds("hours-per-week").unwrap(),
    };
    let mut cfg = ExperimentConfig::new(spec, MechanismKind::NoisyAverage, NoiseKind::Gaussian);
    cfg.epsilons = vec![0.5];
    cfg.p_grid = vec![0.3];
    cfg.reps = 20;
    cfg.seed = 9;
    let a = run_sampling_experiment(&cfg).unwrap();
    assert_eq!(a, run_sampling_experiment(&cfg).unwrap());
    let n = 32_561f64;
    assert!((a[0].delta - 1.0 / (n * n)).abs() < 1e-24);
    assert_eq!(a[1].variant, Variant::PreprocessedRecalibrated);
    cfg.recalibrate = false;
    let b = run_sampling_experiment(&cfg).unwrap();
    assert_eq!(b[0], a[0]);
    assert_eq!(b[1].variant, Variant::Preprocessed);
}

#[test]
fn mode_with_exponential_mechanism_runs() {
    let spec = DatasetSpec::Column {
        name: "adult".into(),
        path: adult(),
        column: "age".into(),
        bounds: known_bounds("age").unwrap(),
    };
    let mut cfg = ExperimentConfig::new(spec, MechanismKind::ExpMechMode, NoiseKind::Exponential);
    cfg.epsilons = vec![2.0];
    cfg.mm_grid = vec![0.9];
    cfg.reps = 50;
    let rows = run_suppression_experiment(&cfg).unwrap();
    let plain = rows.iter().find(|r| r.variant == Variant::Plain).unwrap();
    let supp = rows.iter().find(|r| r.variant != Variant::Plain).unwrap();
    assert!(plain.mean.unwrap() <= supp.mean.unwrap());
}
