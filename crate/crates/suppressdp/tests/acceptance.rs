//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use suppressdp::accounting::{
    amplify_poisson, calibrate_sampling, delta_s, epsilon_s, l_branch, maximizer_p, Branch,
    BranchCurve, MMParams, Sensitivity,
};
use suppressdp::harness::{
    known_bounds, run_sampling_experiment, run_suppression_experiment, utility_differences,
    DatasetSpec, ExperimentConfig, ExperimentRow, Variant, DEFAULT_SCALE,
};
use suppressdp::mechanisms::{MechanismKind, NoiseKind};
use suppressdp::oracle::{
    composed_distribution, deterministic_sensitivity, submultisets, suppression_theorem_bounds,
    tight_dp_of_finite_mechanism, verify_bound_forward, verify_bound_inverse, Verdict,
    DEFAULT_FORWARD_BUDGET, VERIFICATION_TOL,
};
use suppressdp::suppression::{DistanceFn, MMTransform, Suppressor};
use suppressdp::{Database, PrivacyParams, RandomStream, Record, ValueBounds};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn grid(lo_i: u32, hi_i: u32, step: f64) -> Vec<f64> {
    (lo_i..=hi_i).map(|i| i as f64 * step).collect()
}

fn mm(m: f64, big_m: f64) -> MMParams {
    MMParams::new(m, big_m).unwrap()
}

fn pp(e: f64, d: f64) -> PrivacyParams {
    PrivacyParams::new(e, d).unwrap()
}

fn lattice() -> Vec<MMParams> {
    let vals = grid(1, 9, 0.1);
    let mut out = Vec::new();
    for &m in &vals {
        for &big_m in vals.iter().filter(|v| **v >= m) {
            out.push(mm(m, big_m));
        }
    }
    out
}

fn adult_age() -> DatasetSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv");
    DatasetSpec::Column {
        name: "adult".into(),
        path,
        column: "age".into(),
        bounds: known_bounds("age").unwrap(),
    }
}

const SEED: u64 = 20_240_917;

fn c1_calibration_round_trip() -> Outcome {
    let mut worst: f64 = 0.0;
    for e in grid(1, 500, 0.01) {
        for p in grid(1, 20, 0.05) {
            for delta in [0.0, 1e-5] {
                let target = pp(e, delta);
                let back = amplify_poisson(calibrate_sampling(target, p).unwrap(), p).unwrap();
                worst = worst
                    .max((back.epsilon - e).abs())
                    .max((back.delta - delta).abs());
            }
        }
    }
    outcome(worst < 1e-12, format!("max error {worst:.3e} (tol 1e-12)"))
}

fn c2_diagonal_equivalence() -> Outcome {
    let (mut worst_e, mut worst_d): (f64, f64) = (0.0, 0.0);
    let delta = 1e-6;
    for m in grid(1, 99, 0.01) {
        let q = mm(m, m);
        for e in grid(0, 200, 0.01) {
            let expected = ((1.0 - m) * e.exp_m1()).ln_1p();
            worst_e = worst_e.max((epsilon_s(e, q).unwrap().eps_s - expected).abs());
        }
        worst_d = worst_d.max((delta_s(delta, q) - delta * (1.0 - m)).abs());
    }
    outcome(
        worst_e < 1e-9 && worst_d == 0.0,
        format!("max eps error {worst_e:.3e} (tol 1e-9), max delta error {worst_d:e} (tol 0)"),
    )
}

fn c3_closed_form_maximizer() -> Outcome {
    let mut rng = RandomStream::new(SEED).child("c3").rng();
    let n_grid = 1_000_000;
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::new();
    for _ in 0..500 {
        let eps = rng.random_range(0.0..5.0);
        let m = rng.random_range(0.01..0.99);
        let big_m = rng.random_range(m..0.99);
        let q = mm(m, big_m);
        for branch in [Branch::L1, Branch::L2] {
            let at_root = l_branch(eps, q, branch, maximizer_p(eps, q, branch));
            let curve = BranchCurve::new(eps, q, branch);
            let grid_max = (0..=n_grid)
                .map(|i| curve.eval(i as f64 / n_grid as f64))
                .fold(f64::NEG_INFINITY, f64::max);
            let shortfall = grid_max - at_root;
            if shortfall > worst {
                worst = shortfall;
                witness = format!("{branch:?} eps={eps:.4} m={m:.4} M={big_m:.4}");
            }
        }
    }
    outcome(
        worst <= 1e-6,
        format!("max grid excess {worst:.3e} (tol 1e-6) at {witness}"),
    )
}

fn c4_forward_and_inverse() -> Outcome {
    let mut fails = Vec::new();
    let (mut worst_fwd, mut worst_inv): (f64, f64) = (0.0, 0.0);
    let mut points = 0;
    for eps in [0.0f64, 0.5, 1.0, 2.0] {
        for q in lattice() {
            points += 1;
            let f = verify_bound_forward(eps, q, DEFAULT_FORWARD_BUDGET, SEED).unwrap();
            worst_fwd = worst_fwd.max(f.gap.abs());
            if f.verdict != Verdict::Pass {
                fails.push(format!("fwd eps={eps} m={} M={}: {:?}", q.m, q.big_m, f.verdict));
            }
            let i = verify_bound_inverse(eps, q).unwrap();
            worst_inv = worst_inv.max(i.gap.abs());
            let inverse_ok = i.within_tolerance && i.numeric_max <= i.closed_form + VERIFICATION_TOL;
            if !inverse_ok {
                fails.push(format!("inv eps={eps} m={} M={}: gap {:e}", q.m, q.big_m, i.gap));
            }
        }
    }
    outcome(
        fails.is_empty(),
        format!(
            "{points} points, worst forward gap {worst_fwd:.3e}, worst inverse gap {worst_inv:.3e} (tol 2e-7){}",
            if fails.is_empty() { String::new() } else { format!("; failures: {}", fails.join(", ")) }
        ),
    )
}

fn c5_oracle_domination() -> Outcome {
    let mut rng = RandomStream::new(SEED).child("c5").rng();
    let (mut worst_eps, mut worst_delta) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..200 {
        let labels = rng.random_range(2..=8usize);
        let pts: Vec<[f64; 2]> = (0..labels).map(|_| [rng.random(), rng.random()]).collect();
        let matrix: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| {
                pts.iter()
                    .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / 2f64.sqrt())
                    .collect()
            })
            .collect();
        let dist = DistanceFn::custom(move |a: &Record, b: &Record| {
            matrix[a.0[0] as usize][b.0[0] as usize]
        });
        let m = rng.random_range(0.01..0.99);
        let big_m = rng.random_range(m..0.99);
        let eps = rng.random_range(0.0..3.0);
        let delta = rng.random_range(0.0..1e-3);
        let s = Suppressor::OutlierScore(MMTransform::new(m, big_m, dist).unwrap());
        let n = rng.random_range(0..8usize);
        let bounds = ValueBounds::new(0.0, labels as f64).unwrap();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(0..labels) as f64).collect();
        let d = Database::from_values(&vals, bounds).unwrap();
        let y = Record::scalar(rng.random_range(0..labels) as f64);
        let d2 = d.with_record(y.clone()).unwrap();
        let kb = suppression_theorem_bounds(
            &s.kernel_of(&d).unwrap(),
            &s.kernel_of(&d2).unwrap(),
            &y,
            pp(eps, delta),
        )
        .unwrap();
        let q = mm(m, big_m);
        worst_eps = worst_eps.max(kb.epsilon() - epsilon_s(eps, q).unwrap().eps_s);
        let allowed = delta_s(delta, q) * (1.0 + 1e-12);
        worst_delta = worst_delta.max(kb.delta() - allowed);
    }
    let mut worst_poisson: f64 = 0.0;
    for _ in 0..200 {
        let keep = rng.random_range(0.01..1.0);
        let eps = rng.random_range(0.0..3.0);
        let n = rng.random_range(0..8usize);
        let bounds = ValueBounds::new(0.0, 1.0).unwrap();
        let vals: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let d = Database::from_values(&vals, bounds).unwrap();
        let y = Record::scalar(rng.random());
        let d2 = d.with_record(y.clone()).unwrap();
        let s = Suppressor::Poisson { keep };
        let kb = suppression_theorem_bounds(
            &s.kernel_of(&d).unwrap(),
            &s.kernel_of(&d2).unwrap(),
            &y,
            pp(eps, 0.0),
        )
        .unwrap();
        worst_poisson = worst_poisson.max((kb.epsilon() - (keep * eps.exp_m1()).ln_1p()).abs());
    }
    outcome(
        worst_eps <= 1e-9 && worst_delta <= 0.0 && worst_poisson <= 1e-12,
        format!(
            "max eps excess {worst_eps:.3e} (tol 1e-9), max delta excess {worst_delta:.3e} \
             (relative tol 1e-12), \
             Poisson error {worst_poisson:.3e} (tol 1e-12)"
        ),
    )
}

fn c6_tight_dp() -> Outcome {
    let delta = 0.01;
    let mut worst: f64 = 0.0;
    let bounds = ValueBounds::new(0.0, 1.0).unwrap();
    for eps in [0.5f64, 1.0, 2.0] {
        let z = 1.0 + eps.exp();
        // Output 0 has probability (1 - δ)/z on ∅ and (e^ε + δ)/z on {y}.
        let base = move |d: &Database| {
            let p0 = if d.is_empty() { (1.0 - delta) / z } else { (eps.exp() + delta) / z };
            vec![p0, 1.0 - p0]
        };
        for q in [0.25, 0.5, 0.75] {
            let s = Suppressor::Poisson { keep: q };
            let empty = Database::empty(vec![bounds]).unwrap();
            let single = Database::from_values(&[0.5], bounds).unwrap();
            let tables = BTreeMap::from([
                (0u8, composed_distribution(&s.kernel_of(&empty).unwrap(), base)),
                (1u8, composed_distribution(&s.kernel_of(&single).unwrap(), base)),
            ]);
            let e = tight_dp_of_finite_mechanism(&tables, &[(0, 1)], delta * q).unwrap();
            worst = worst.max((e - (q * eps.exp_m1()).ln_1p()).abs());
        }
    }
    outcome(worst < 1e-9, format!("max error {worst:.3e} (tol 1e-9)"))
}

fn c7_sensitivity() -> Outcome {
    let bounds = ValueBounds::new(0.0, 1.0).unwrap();
    let universe = Database::from_values(&[0.1, 0.2, 0.3, 0.4], bounds).unwrap();
    let class = submultisets(&universe);
    let pairs = suppressdp::oracle::neighbor_pairs_within(&class);
    let s_a = Suppressor::by_set(|r| r.0[0] <= 0.25);
    let sa = deterministic_sensitivity(&s_a, &class, &pairs).unwrap().sensitivity;
    // K = 1/2, N = 2: D_n holds n copies of x' = 0 and n of y' = 1 (distance
    // 1); the neighbor drops one y'.
    let s_k = Suppressor::AvgThreshold {
        k: 0.5,
        dist: DistanceFn::abs_scaled(bounds),
    };
    let mut deltas = Vec::new();
    for n in 1..=3usize {
        let vals: Vec<f64> = [vec![0.0; n], vec![1.0; n]].concat();
        let d = Database::from_values(&vals, bounds).unwrap();
        let smaller = d.without_record(&Record::scalar(1.0)).unwrap();
        let class = submultisets(&d);
        let rep = deterministic_sensitivity(&s_k, &class, &[(smaller, d.canonicalized())]).unwrap();
        deltas.push(rep.sensitivity);
    }
    let increasing = deltas.windows(2).all(|w| match (w[0], w[1]) {
        (Sensitivity::Finite(a), Sensitivity::Finite(b)) => b > a,
        (Sensitivity::Finite(_), Sensitivity::Infinite) => true,
        _ => false,
    });
    outcome(
        sa == Sensitivity::Finite(1) && increasing,
        format!("S_A sensitivity {sa:?} (want 1); avg-threshold family n=1..3: {deltas:?}"),
    )
}

fn row(rows: &[ExperimentRow], variant: Variant) -> &ExperimentRow {
    rows.iter().find(|r| r.variant == variant).expect("row present")
}

fn c8_experiment_direction() -> Outcome {
    let mut cfg = ExperimentConfig::new(adult_age(), MechanismKind::NoisyAverage, NoiseKind::Laplace);
    cfg.epsilons = vec![1.0];
    cfg.p_grid = vec![0.5];
    cfg.reps = 500;
    cfg.seed = SEED;
    let rows = run_sampling_experiment(&cfg).unwrap();
    let plain = row(&rows, Variant::Plain);
    let pre = row(&rows, Variant::PreprocessedRecalibrated);
    let (pm, ph) = (plain.mean.unwrap(), plain.ci_high.unwrap());
    let (qm, ql) = (pre.mean.unwrap(), pre.ci_low.unwrap());
    outcome(
        qm > pm && ql > ph && pm < 0.25,
        format!(
            "plain MPE {pm:.4} [{:.4}, {ph:.4}], preprocessed MPE {qm:.4} [{ql:.4}, {:.4}] (plain < 0.25)",
            plain.ci_low.unwrap(),
            pre.ci_high.unwrap()
        ),
    )
}

fn c9_mode_degradation() -> Outcome {
    let mut cfg = ExperimentConfig::new(adult_age(), MechanismKind::Rnm, NoiseKind::Laplace);
    cfg.epsilons = vec![1.0];
    cfg.p_grid = vec![0.5];
    cfg.reps = 2000;
    cfg.seed = SEED;
    let rows = run_sampling_experiment(&cfg).unwrap();
    let plain = row(&rows, Variant::Plain);
    let pre = row(&rows, Variant::PreprocessedRecalibrated);
    let ok = plain.ci_high.unwrap() < 0.18 && pre.ci_low.unwrap() > 0.60;
    outcome(
        ok,
        format!(
            "plain failure {:.4} [{:.4}, {:.4}] (< 0.18), preprocessed {:.4} [{:.4}, {:.4}] (> 0.60)",
            plain.mean.unwrap(),
            plain.ci_low.unwrap(),
            plain.ci_high.unwrap(),
            pre.mean.unwrap(),
            pre.ci_low.unwrap(),
            pre.ci_high.unwrap()
        ),
    )
}

fn c10_suppression_difference() -> Outcome {
    let mut cfg = ExperimentConfig::new(adult_age(), MechanismKind::NoisyAverage, NoiseKind::Laplace)
        .with_scale(DEFAULT_SCALE);
    cfg.epsilons = vec![1.0];
    cfg.seed = SEED;
    let rows = run_suppression_experiment(&cfg).unwrap();
    let diffs = utility_differences(&rows);
    let feasible: Vec<_> = diffs.iter().filter(|d| d.difference.is_some()).collect();
    let nonpositive = feasible.iter().filter(|d| d.difference.unwrap() <= 0.0).count();
    let share = nonpositive as f64 / feasible.len() as f64;
    let max_abs = feasible
        .iter()
        .map(|d| d.difference.unwrap().abs())
        .fold(0.0, f64::max);

    let mut sampling = cfg.clone();
    sampling.p_grid = cfg.mm_grid.iter().map(|m| 1.0 - m).collect();
    let srows = run_sampling_experiment(&sampling).unwrap();
    let mut diag_fail = Vec::new();
    for r in rows.iter().filter(|r| r.m.is_some() && r.m == r.big_m) {
        let m = r.m.unwrap();
        let s = srows
            .iter()
            .find(|s| s.p.is_some_and(|p| (p - (1.0 - m)).abs() < 1e-12))
            .expect("sampling row for p = 1 - m");
        let width = (r.ci_high.unwrap() - r.ci_low.unwrap()).max(s.ci_high.unwrap() - s.ci_low.unwrap());
        if (r.mean.unwrap() - s.mean.unwrap()).abs() > 2.0 * width {
            diag_fail.push(format!("m={m}"));
        }
    }
    outcome(
        share >= 0.95 && max_abs < 0.6 && diag_fail.is_empty(),
        format!(
            "{} feasible of {} cells, {:.1}% with difference <= 0 (>= 95%), max |difference| {max_abs:.4} p.p. (< 0.6), \
             diagonal mismatches: {:?}",
            feasible.len(),
            diffs.len(),
            100.0 * share,
            diag_fail
        ),
    )
}

fn c11_poisson_floor() -> Outcome {
    let vals: Vec<f64> = (1..=50).map(|i| i as f64 / 51.0).collect();
    let mut worst = f64::NEG_INFINITY;
    for eps in [0.25f64, 0.5, 1.0, 2.0] {
        for &m in &vals {
            for &big_m in vals.iter().filter(|v| **v >= m) {
                let floor = ((1.0 - m) * eps.exp_m1()).ln_1p();
                worst = worst.max(floor - epsilon_s(eps, mm(m, big_m)).unwrap().eps_s);
            }
        }
    }
    outcome(worst <= 0.0, format!("max floor excess {worst:.3e} (tol 0)"))
}

type Check = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let checks: [Check; 11] = [
        ("1 calibration round trip", Duration::from_secs(1), c1_calibration_round_trip),
        ("2 diagonal equivalence", Duration::from_secs(1), c2_diagonal_equivalence),
        ("3 closed-form maximizer", Duration::from_secs(30), c3_closed_form_maximizer),
        ("4 forward and inverse verification", Duration::from_secs(600), c4_forward_and_inverse),
        ("5 oracle domination", Duration::from_secs(60), c5_oracle_domination),
        ("6 tight-DP oracle", Duration::from_secs(1), c6_tight_dp),
        ("7 sensitivity", Duration::from_secs(10), c7_sensitivity),
        ("8 sampling experiment direction", Duration::from_secs(120), c8_experiment_direction),
        ("9 mode degradation", Duration::from_secs(300), c9_mode_degradation),
        ("10 suppression difference sign", Duration::from_secs(600), c10_suppression_difference),
        ("11 Poisson floor", Duration::from_secs(1), c11_poisson_floor),
    ];
    let mut failed = 0;
    for (name, limit, check) in checks {
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let pass = out.pass && took <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {}; runtime {:.2}s (limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
