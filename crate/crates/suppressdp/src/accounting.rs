//! Closed-form privacy accounting: Poisson amplification and its inverse,
//! group bounds for deterministic suppression, and the outlier-score
//! suppression bound with its closed-form maximizers.

use serde::{Deserialize, Serialize};

use crate::domain::PrivacyParams;
use crate::error::{invalid, Error, Result};

/// Bounds `m <= M` of an (m, M)-transformed distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MMParams {
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
}

impl MMParams {
    /// Accepts `0 <= m <= M <= 1`; the open-interval requirement is enforced
    /// where the bound would otherwise diverge.
    pub fn new(m: f64, big_m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&big_m) {
            return invalid(format!("m and M must lie in [0, 1], got m={m}, M={big_m}"));
        }
        if m > big_m {
            return invalid(format!("need m <= M, got m={m}, M={big_m}"));
        }
        Ok(Self { m, big_m })
    }

    pub fn is_diagonal(&self) -> bool {
        self.m == self.big_m
    }
}

/// Which term of the outlier-score bound is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    L1,
    L2,
    L3,
}

/// Result of evaluating the outlier-score bound at one `(epsilon, m, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBound {
    pub eps_s: f64,
    pub argmax_p: f64,
    pub active_branch: Branch,
    /// Set when the inputs leave the numerically verified region
    /// (epsilon above 100, or m, M outside [0.01, 0.99]).
    pub outside_verified_range: bool,
}

/// Full `(eps_s, delta_s)` report for a base guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_s: f64,
    pub delta_s: f64,
    pub argmax_p: f64,
    pub active_branch: Branch,
    pub outside_verified_range: bool,
}

/// Sensitivity of a deterministic suppression algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sensitivity {
    Finite(u64),
    Infinite,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("{name} must lie in [0, 1], got {p}"));
    }
    Ok(())
}

/// Guarantee of `M ∘ Poisson(p)` when `M` satisfies `pp`.
pub fn amplify_poisson(pp: PrivacyParams, p: f64) -> Result<PrivacyParams> {
    check_prob("keep probability", p)?;
    let eps = (p * pp.epsilon.exp_m1()).ln_1p();
    PrivacyParams::new(eps.min(pp.epsilon), pp.delta * p)
}

/// Parameters to run the mechanism at so that Poisson sampling with keep
/// probability `p` yields exactly `target`.
pub fn calibrate_sampling(target: PrivacyParams, p: f64) -> Result<PrivacyParams> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("keep probability must lie in (0, 1], got {p}"));
    }
    let delta = target.delta / p;
    if delta > 1.0 {
        return Err(Error::Infeasible(format!(
            "delta/p = {delta} exceeds 1 (delta={}, p={p})",
            target.delta
        )));
    }
    let eps = (target.epsilon.exp_m1() / p).ln_1p();
    PrivacyParams::new(eps, delta)
}

/// Group-privacy bound for a mechanism preceded by deterministic suppression
/// of sensitivity `sens`. Delta is capped at 1.
pub fn group_bound_deterministic(pp: PrivacyParams, sens: Sensitivity) -> PrivacyParams {
    match sens {
        Sensitivity::Finite(0) => PrivacyParams {
            epsilon: 0.0,
            delta: 0.0,
        },
        Sensitivity::Infinite => {
            if pp.epsilon == 0.0 && pp.delta == 0.0 {
                PrivacyParams {
                    epsilon: 0.0,
                    delta: 0.0,
                }
            } else {
                PrivacyParams {
                    epsilon: f64::INFINITY,
                    delta: 1.0,
                }
            }
        }
        Sensitivity::Finite(k) => {
            let k = k as f64;
            let geometric = if pp.epsilon == 0.0 {
                k
            } else {
                (pp.epsilon * k).exp_m1() / pp.epsilon.exp_m1()
            };
            let delta = if pp.delta == 0.0 {
                0.0
            } else {
                (pp.delta * geometric).min(1.0)
            };
            PrivacyParams {
                epsilon: pp.epsilon * k,
                delta,
            }
        }
    }
}

/// `-ln(e^-eps + (1 - e^-eps) s)`.
fn neg_log_mix_down(eps: f64, s: f64) -> f64 {
    -(-s * (-eps).exp_m1() + (-eps).exp()).ln()
}

/// First branch of the outlier-score bound, as a function of `p`.
pub fn l1(eps: f64, mm: MMParams, p: f64) -> f64 {
    BranchCurve::new(eps, mm, Branch::L1).eval(p)
}

/// Second branch of the outlier-score bound, as a function of `p`.
pub fn l2(eps: f64, mm: MMParams, p: f64) -> f64 {
    BranchCurve::new(eps, mm, Branch::L2).eval(p)
}

/// Third (p-independent) branch.
pub fn l3(eps: f64, mm: MMParams) -> f64 {
    neg_log_mix_down(eps, mm.big_m) + 1.0 - (1.0 - mm.big_m) / (1.0 - mm.m)
}

/// Evaluates `l1`, `l2` or `l3` at `p`.
pub fn l_branch(eps: f64, mm: MMParams, branch: Branch, p: f64) -> f64 {
    BranchCurve::new(eps, mm, branch).eval(p)
}

/// One branch at fixed `(eps, m, M)` with its `p`-independent factors
/// precomputed, for evaluating many `p`.
#[derive(Debug, Clone, Copy)]
pub struct BranchCurve {
    branch: Branch,
    eps: f64,
    m: f64,
    big_m: f64,
    /// `e^-eps - 1`.
    shrink: f64,
    ratio: f64,
    l3: f64,
}

impl BranchCurve {
    pub fn new(eps: f64, mm: MMParams, branch: Branch) -> Self {
        Self {
            branch,
            eps,
            m: mm.m,
            big_m: mm.big_m,
            shrink: (-eps).exp_m1(),
            ratio: mm.big_m / mm.m,
            l3: if branch == Branch::L3 { l3(eps, mm) } else { 0.0 },
        }
    }

    pub fn eval(&self, p: f64) -> f64 {
        let (m, big_m) = (self.m, self.big_m);
        match self.branch {
            Branch::L1 => {
                let s = p * big_m + (1.0 - p) * m;
                self.eps + (s * self.shrink).ln_1p() + p * self.ratio + (1.0 - p) * (1.0 - m) / (1.0 - s)
                    - 1.0
            }
            Branch::L2 => {
                let q = ((big_m + m) - p * big_m) / (2.0 - p);
                let s = p * big_m + (1.0 - p) * q;
                self.eps + (s * self.shrink).ln_1p() + p * self.ratio + (1.0 - p) * (1.0 - q) / (1.0 - big_m)
                    - 1.0
            }
            Branch::L3 => self.l3,
        }
    }
}

fn cubic_coefficients(eps: f64, mm: MMParams, branch: Branch) -> [f64; 4] {
    let (m, big_m) = (mm.m, mm.big_m);
    let e = eps.exp();
    let e1 = eps.exp_m1();
    match branch {
        Branch::L1 => {
            let a = e1 * (big_m / m) * (big_m - m).powi(2);
            let b = -((big_m - m) / m) * ((m * m - 4.0 * big_m * m + 2.0 * big_m) * e1 + e * big_m);
            let c = ((1.0 - m) / m)
                * (e1 * (2.0 * m * m - 4.0 * big_m * m - m) + (3.0 * e - 1.0) * big_m);
            let d = -(1.0 - m) * (e1 * (m - 2.0) + e / m);
            [a, b, c, d]
        }
        _ => {
            let a = (e - e1 * m) / m;
            let b = -(6.0 * e - e1 * (big_m + 5.0 * m)) / m;
            let c = (m * (e1 * (m + 9.0 * big_m - 9.0) - e)
                + 4.0 * big_m * (e1 * big_m - 4.0 * e + 1.0)
                + 12.0 * e)
                / ((1.0 - big_m) * m);
            let d = -(2.0 * e - e1 * (big_m + m)) * ((4.0 - 4.0 * big_m - m) / ((1.0 - big_m) * m))
                + 2.0 * e1;
            [a, b, c, d]
        }
    }
}

/// Root of `a p^3 + b p^2 + c p + d` picked by the discriminant test: the
/// Cardano form when `D1^2 - 4 D0^3 > 0`, otherwise the trigonometric form.
fn cubic_root(coef: [f64; 4]) -> f64 {
    let [a, b, c, d] = coef;
    let d0 = b * b - 3.0 * a * c;
    let d1 = 2.0 * b.powi(3) - 9.0 * a * b * c + 27.0 * a * a * d;
    let disc = d1 * d1 - 4.0 * d0.powi(3);
    if disc > 0.0 {
        let sq = disc.sqrt();
        -(b + ((d1 + sq) / 2.0).cbrt() + ((d1 - sq) / 2.0).cbrt()) / (3.0 * a)
    } else {
        let r = d0.powi(3).sqrt();
        let arg = if r > 0.0 { (d1 / (2.0 * r)).clamp(-1.0, 1.0) } else { 1.0 };
        -(b + 2.0 * d0.max(0.0).sqrt() * (arg.acos() / 3.0).cos()) / (3.0 * a)
    }
}

/// Closed-form maximizer of `l1` (or `l2`) over `p in [0, 1]`.
///
/// `m == M` makes both branches constant; `0` is returned by convention.
pub fn maximizer_p(eps: f64, mm: MMParams, branch: Branch) -> f64 {
    let (m, big_m) = (mm.m, mm.big_m);
    if m == big_m || branch == Branch::L3 {
        return 0.0;
    }
    let v = if eps == 0.0 {
        match branch {
            Branch::L1 => {
                (1.0 - m) / (big_m - m)
                    - (big_m * m * (1.0 - m) * (1.0 - big_m)).sqrt() / (big_m * (big_m - m))
            }
            _ => 2.0 - (m * (1.0 - big_m)).sqrt() / (1.0 - big_m),
        }
    } else {
        cubic_root(cubic_coefficients(eps, mm, branch))
    };
    if v.is_nan() {
        return 0.0;
    }
    v.clamp(0.0, 1.0)
}

fn outside_verified(eps: f64, mm: MMParams) -> bool {
    eps > 100.0 || mm.m < 0.01 || mm.big_m > 0.99
}

/// Privacy loss of any `eps`-DP mechanism preceded by outlier-score
/// suppression with parameters `mm`.
///
/// Both `l1` and `l2` are evaluated at their closed-form maximizers and at
/// the endpoints `p = 0, 1`; the overall maximum with `l3` is reported.
pub fn epsilon_s(eps: f64, mm: MMParams) -> Result<EpsilonBound> {
    if !(eps >= 0.0) || eps.is_infinite() {
        return invalid(format!("epsilon must be finite and >= 0, got {eps}"));
    }
    let outside = outside_verified(eps, mm);
    if mm.is_diagonal() && mm.m < 1.0 {
        return Ok(EpsilonBound {
            eps_s: poisson_floor(eps, mm),
            argmax_p: 0.0,
            active_branch: Branch::L1,
            outside_verified_range: outside,
        });
    }
    if mm.m == 0.0 || mm.big_m == 1.0 {
        return Err(Error::Infinite(format!(
            "outlier-score bound diverges at m={}, M={}",
            mm.m, mm.big_m
        )));
    }
    let mut best = EpsilonBound {
        eps_s: l3(eps, mm),
        argmax_p: 0.0,
        active_branch: Branch::L3,
        outside_verified_range: outside,
    };
    for branch in [Branch::L2, Branch::L1] {
        let pstar = maximizer_p(eps, mm, branch);
        for p in [1.0, 0.0, pstar] {
            let v = l_branch(eps, mm, branch, p);
            if v >= best.eps_s {
                best.eps_s = v;
                best.argmax_p = p;
                best.active_branch = branch;
            }
        }
    }
    Ok(best)
}

/// `delta(1 - m)`.
pub fn delta_s(delta: f64, mm: MMParams) -> f64 {
    delta * (1.0 - mm.m)
}

/// Combined `(eps_s, delta_s)` report.
pub fn suppression_bound(pp: PrivacyParams, mm: MMParams) -> Result<BoundReport> {
    let e = epsilon_s(pp.epsilon, mm)?;
    Ok(BoundReport {
        eps_s: e.eps_s,
        delta_s: delta_s(pp.delta, mm),
        argmax_p: e.argmax_p,
        active_branch: e.active_branch,
        outside_verified_range: e.outside_verified_range,
    })
}

/// Smallest privacy loss reachable by outlier-score suppression: that of
/// uniform Poisson sampling with keep probability `1 - m`.
pub fn poisson_floor(eps: f64, mm: MMParams) -> f64 {
    ((1.0 - mm.m) * eps.exp_m1()).ln_1p()
}

/// Upper end of the search interval used by [`calibrate_suppression`].
pub const CALIBRATION_EPS_MAX: f64 = 200.0;
/// Absolute tolerance of the calibration bisection.
pub const CALIBRATION_TOL: f64 = 1e-10;

/// Parameters `(eps'', delta'')` such that outlier-score suppression with
/// `mm` followed by an `(eps'', delta'')`-DP mechanism meets `target`.
///
/// Uses bisection on `eps -> eps_s(eps, mm)`, checking along the way that
/// the map is nondecreasing. A target within `1e-12` of `eps_s(0)` calibrates
/// to `eps'' = 0`.
pub fn calibrate_suppression(target: PrivacyParams, mm: MMParams) -> Result<PrivacyParams> {
    let keep = 1.0 - mm.m;
    if keep <= 0.0 {
        return Err(Error::Infeasible("m = 1 suppresses everything".into()));
    }
    let delta = target.delta / keep;
    if delta > 1.0 {
        return Err(Error::Infeasible(format!("delta/(1-m) = {delta} exceeds 1")));
    }
    let f = |e: f64| epsilon_s(e, mm).map(|b| b.eps_s);
    let (mut lo, mut hi) = (0.0, CALIBRATION_EPS_MAX);
    let (mut flo, mut fhi) = (f(lo)?, f(hi)?);
    if target.epsilon < flo {
        return Err(Error::Infeasible(format!(
            "target epsilon {} is below eps_s(0) = {flo} for m={}, M={}",
            target.epsilon, mm.m, mm.big_m
        )));
    }
    if target.epsilon - flo <= 1e-12 {
        return PrivacyParams::new(0.0, delta);
    }
    if target.epsilon > fhi {
        return Err(Error::Infeasible(format!(
            "target epsilon {} exceeds eps_s({CALIBRATION_EPS_MAX}) = {fhi}",
            target.epsilon
        )));
    }
    while hi - lo > CALIBRATION_TOL {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm < flo - 1e-12 || fm > fhi + 1e-12 {
            return Err(Error::NonMonotone(format!(
                "eps_s({mid}) = {fm} outside [{flo}, {fhi}] for m={}, M={}",
                mm.m, mm.big_m
            )));
        }
        if fm < target.epsilon {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
            fhi = fm;
        }
    }
    PrivacyParams::new(0.5 * (lo + hi), delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm(m: f64, big_m: f64) -> MMParams {
        MMParams::new(m, big_m).unwrap()
    }

    fn pp(e: f64, d: f64) -> PrivacyParams {
        PrivacyParams::new(e, d).unwrap()
    }

    #[test]
    fn amplify_examples() {
        let a = amplify_poisson(pp(0.7, 1e-3), 1.0).unwrap();
        assert!((a.epsilon - 0.7).abs() < 1e-15 && a.delta == 1e-3);
        let a = amplify_poisson(pp(0.0, 1e-3), 0.3).unwrap();
        assert_eq!(a.epsilon, 0.0);
        assert!((a.delta - 3e-4).abs() < 1e-18);
        let a = amplify_poisson(pp(1.0, 1e-4), 0.5).unwrap();
        // ln(1 + (e - 1)/2)
        let expected = (0.5 * (std::f64::consts::E - 1.0) + 1.0).ln();
        assert!((a.epsilon - expected).abs() < 1e-14);
        assert!((a.epsilon - 0.620115).abs() < 1e-6);
        assert!((a.delta - 5e-5).abs() < 1e-18);
        assert!(amplify_poisson(pp(1.0, 0.0), 1.5).is_err());
    }

    #[test]
    fn calibrate_sampling_examples() {
        let t = pp(0.8, 1e-5);
        assert_eq!(calibrate_sampling(t, 1.0).unwrap().epsilon, 0.8);
        let c = calibrate_sampling(pp(1.0, 0.0), 0.5).unwrap();
        let expected = (2.0 * std::f64::consts::E - 1.0).ln();
        assert!((c.epsilon - expected).abs() < 1e-14);
        assert!((c.epsilon - 1.489_880_1).abs() < 1e-7);
        assert!(matches!(
            calibrate_sampling(pp(1.0, 0.6), 0.5),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn group_bound_examples() {
        let base = pp(std::f64::consts::LN_2, 0.01);
        assert_eq!(group_bound_deterministic(base, Sensitivity::Finite(1)), base);
        let g = group_bound_deterministic(base, Sensitivity::Finite(3));
        assert!((g.epsilon - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.delta - 0.07).abs() < 1e-15);
        let g = group_bound_deterministic(pp(0.4, 0.0), Sensitivity::Finite(2));
        assert_eq!((g.epsilon, g.delta), (0.8, 0.0));
        let g = group_bound_deterministic(base, Sensitivity::Infinite);
        assert!(g.epsilon.is_infinite() && g.delta == 1.0);
        let g = group_bound_deterministic(pp(0.0, 0.0), Sensitivity::Infinite);
        assert_eq!((g.epsilon, g.delta), (0.0, 0.0));
        let g = group_bound_deterministic(base, Sensitivity::Finite(0));
        assert_eq!((g.epsilon, g.delta), (0.0, 0.0));
        let g = group_bound_deterministic(pp(3.0, 0.5), Sensitivity::Finite(4));
        assert_eq!(g.delta, 1.0);
    }

    #[test]
    fn diagonal_matches_poisson() {
        let b = epsilon_s(1.0, mm(0.5, 0.5)).unwrap();
        assert!((b.eps_s - 0.620115).abs() < 1e-6);
        for &m in &[0.05, 0.3, 0.77] {
            let e: f64 = 1.3;
            let expected = e.exp() - (e.exp() - 1.0) * m;
            assert!((epsilon_s(e, mm(m, m)).unwrap().eps_s - expected.ln()).abs() < 1e-12);
            assert_eq!(maximizer_p(e, mm(m, m), Branch::L1), 0.0);
            assert_eq!(maximizer_p(e, mm(m, m), Branch::L2), 0.0);
            // the general formulas are constant on the diagonal as well
            for p in [0.0, 0.4, 1.0] {
                assert!((l1(e, mm(m, m), p) - expected.ln()).abs() < 1e-12);
                assert!((l2(e, mm(m, m), p) - expected.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_s_examples() {
        assert_eq!(delta_s(0.0, mm(0.2, 0.5)), 0.0);
        assert!((delta_s(1e-4, mm(0.2, 0.5)) - 8e-5).abs() < 1e-19);
        assert!(delta_s(1e-4, mm(0.999999, 0.999999)) < 1e-9);
    }

    #[test]
    fn zero_epsilon_maximizer_formula() {
        let (m, big_m): (f64, f64) = (0.2, 0.7);
        let v1 = (1.0 - m) / (big_m - m)
            - (big_m * m * (1.0 - m) * (1.0 - big_m)).sqrt() / (big_m * (big_m - m));
        assert_eq!(maximizer_p(0.0, mm(m, big_m), Branch::L1), v1.clamp(0.0, 1.0));
    }

    #[test]
    fn maximizer_beats_random_probes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let eps = rng.random_range(0.0..4.0);
            let a: f64 = rng.random_range(0.02..0.98);
            let b: f64 = rng.random_range(0.02..0.98);
            let p_mm = mm(a.min(b), a.max(b));
            for branch in [Branch::L1, Branch::L2] {
                let best = l_branch(eps, p_mm, branch, maximizer_p(eps, p_mm, branch));
                for _ in 0..50 {
                    let p = rng.random_range(0.0..=1.0);
                    assert!(best >= l_branch(eps, p_mm, branch, p) - 1e-10);
                }
            }
        }
    }

    #[test]
    fn infinite_at_open_interval_edges() {
        assert!(matches!(epsilon_s(1.0, mm(0.0, 0.5)), Err(Error::Infinite(_))));
        assert!(matches!(epsilon_s(1.0, mm(0.3, 1.0)), Err(Error::Infinite(_))));
    }

    #[test]
    fn outside_range_tagged() {
        assert!(epsilon_s(150.0, mm(0.2, 0.5)).unwrap().outside_verified_range);
        assert!(!epsilon_s(1.0, mm(0.2, 0.5)).unwrap().outside_verified_range);
    }

    #[test]
    fn floor_zero_at_zero_epsilon() {
        assert_eq!(poisson_floor(0.0, mm(0.3, 0.6)), 0.0);
    }

    #[test]
    fn calibrate_suppression_diagonal_and_round_trip() {
        let t = pp(1.0, 1e-6);
        let c = calibrate_suppression(t, mm(0.3, 0.3)).unwrap();
        let s = calibrate_sampling(t, 0.7).unwrap();
        assert!((c.epsilon - s.epsilon).abs() < 1e-9);
        assert!((c.delta - s.delta).abs() < 1e-18);
        let q = mm(0.4, 0.5);
        let c = calibrate_suppression(t, q).unwrap();
        assert!((epsilon_s(c.epsilon, q).unwrap().eps_s - 1.0).abs() < 1e-8);
    }

    #[test]
    fn calibrate_suppression_infeasible_below_zero_budget_value() {
        let q = mm(0.1, 0.9);
        let floor = epsilon_s(0.0, q).unwrap().eps_s;
        assert!(floor > 0.0);
        let r = calibrate_suppression(pp(floor * 0.5, 0.0), q);
        assert!(matches!(r, Err(Error::Infeasible(_))));
        // M = 2m puts eps_s(0) at exactly 1.
        let edge = calibrate_suppression(pp(1.0, 0.0), mm(0.2, 0.4)).unwrap();
        assert_eq!(edge.epsilon, 0.0);
    }
}
