//! Ground-truth computations on small explicit systems: suppression-theorem
//! bounds from exact kernels, tight `(eps, delta)` of finite mechanisms,
//! sensitivity of deterministic suppression, the polytope of feasible
//! outlier scores, and numerical verification of the outlier-score bound.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{self, Branch, MMParams, Sensitivity};
use crate::domain::{Database, PrivacyParams, RandomStream, Record};
use crate::error::{invalid, Error, Result};
use crate::suppression::{SuppressionKernel, Suppressor, KERNEL_NORMALIZATION_TOL};

/// The four privacy quantities of the suppression theorem for one ordered
/// neighbor pair `D`, `D' = D + y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    /// Loss bound from `D` to `D'`.
    pub eps_fwd: f64,
    /// Loss bound from `D'` to `D`.
    pub eps_bwd: f64,
    pub delta_fwd: f64,
    pub delta_bwd: f64,
}

impl KernelBounds {
    pub const ZERO: KernelBounds = KernelBounds {
        eps_fwd: 0.0,
        eps_bwd: 0.0,
        delta_fwd: 0.0,
        delta_bwd: 0.0,
    };

    pub fn epsilon(&self) -> f64 {
        self.eps_fwd.max(self.eps_bwd)
    }

    pub fn delta(&self) -> f64 {
        self.delta_fwd.max(self.delta_bwd)
    }

    /// Componentwise maximum.
    pub fn join(&self, other: &KernelBounds) -> KernelBounds {
        KernelBounds {
            eps_fwd: self.eps_fwd.max(other.eps_fwd),
            eps_bwd: self.eps_bwd.max(other.eps_bwd),
            delta_fwd: self.delta_fwd.max(other.delta_fwd),
            delta_bwd: self.delta_bwd.max(other.delta_bwd),
        }
    }
}

fn check_kernel_pair(kd: &SuppressionKernel, kd2: &SuppressionKernel, y: &Record) -> Result<()> {
    let (d, d2) = (kd.base().records(), kd2.base().records());
    if d2.len() != d.len() + 1 || d2[..d.len()] != *d || d2[d.len()] != *y {
        return Err(Error::KernelMismatch(format!(
            "second kernel base must be the first base followed by {y}"
        )));
    }
    Ok(())
}

/// Whether every output `C` of `S(D)` is matched by `C` or `C + y` in the
/// support of `S(D + y)`, and conversely.
pub fn support_condition_holds(
    kd: &SuppressionKernel,
    kd2: &SuppressionKernel,
    y: &Record,
) -> Result<bool> {
    check_kernel_pair(kd, kd2, y)?;
    let n = kd.base().len();
    let low = (1u64 << n) - 1;
    let mut masks: BTreeSet<u64> = kd.iter().map(|(m, _)| m).collect();
    masks.extend(kd2.iter().map(|(m, _)| m & low));
    Ok(masks.into_iter().all(|c| {
        let in_d = kd.prob_of_mask(c) > 0.0;
        let in_d2 = kd2.prob_of_mask(c) > 0.0 || kd2.prob_of_mask(c | (1 << n)) > 0.0;
        in_d == in_d2
    }))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + (-(a - b).abs()).exp().ln_1p()
}

/// Evaluates the suppression-theorem bounds for base parameters `base` by
/// exact summation over the support of `S(D)`.
pub fn suppression_theorem_bounds(
    kd: &SuppressionKernel,
    kd2: &SuppressionKernel,
    y: &Record,
    base: PrivacyParams,
) -> Result<KernelBounds> {
    if !support_condition_holds(kd, kd2, y)? {
        return Err(Error::SupportViolation(format!(
            "S({}) and S({}) have mismatched supports",
            kd.base(),
            kd2.base()
        )));
    }
    let eps = base.epsilon;
    let n = kd.base().len();
    let (mut ln_fwd, mut ln_bwd, mut dsum) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0);
    for (c, a) in kd.iter() {
        let b = kd2.prob_of_mask(c);
        let cy = kd2.prob_of_mask(c | (1 << n));
        let (lb, lc) = (b.ln(), cy.ln());
        let ln_down = log_add_exp(lb, lc - eps);
        let ln_up = log_add_exp(lb, lc + eps);
        ln_fwd = ln_fwd.max(a.ln() - ln_down);
        ln_bwd = ln_bwd.max(ln_up - a.ln());
        if cy > 0.0 {
            dsum += a * (lc - eps - ln_down).exp();
        }
    }
    let y_kept: f64 = kd2
        .iter()
        .filter(|(m, _)| m >> n & 1 == 1)
        .map(|(_, p)| p)
        .sum();
    Ok(KernelBounds {
        eps_fwd: ln_fwd.max(0.0),
        eps_bwd: ln_bwd.max(0.0),
        delta_fwd: (base.delta * dsum).min(1.0),
        delta_bwd: (base.delta * y_kept).min(1.0),
    })
}

/// Largest database accepted by [`exhaustive_epsilon_s`].
pub const EXHAUSTIVE_MAX_RECORDS: usize = 12;

/// Result of an exhaustive sweep over neighbor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveReport {
    pub bounds: KernelBounds,
    pub pairs: usize,
    /// The pair `(D, y)` attaining the largest epsilon.
    pub witness: Option<(Database, Record)>,
}

/// Supremum of the suppression-theorem bounds over every neighbor pair
/// `(D, D + y)` where `D` or `D + y` belongs to `family` and `y` is drawn
/// from `universe` (additions) or from `D` itself (deletions).
pub fn exhaustive_epsilon_s(
    algorithm: &Suppressor,
    family: &[Database],
    universe: &[Record],
    base: PrivacyParams,
    max_pairs: usize,
) -> Result<ExhaustiveReport> {
    let mut pairs: BTreeSet<(Database, Record)> = BTreeSet::new();
    for d in family {
        if d.len() > EXHAUSTIVE_MAX_RECORDS {
            return Err(Error::TooLarge {
                size: d.len(),
                limit: EXHAUSTIVE_MAX_RECORDS,
            });
        }
        for y in universe {
            pairs.insert((d.canonicalized(), y.clone()));
        }
        for (y, _) in d.multiplicities() {
            let smaller = d.without_record(&y).expect("record taken from d");
            pairs.insert((smaller.canonicalized(), y));
        }
        if pairs.len() > max_pairs {
            return Err(Error::TooLarge {
                size: pairs.len(),
                limit: max_pairs,
            });
        }
    }
    let mut report = ExhaustiveReport {
        bounds: KernelBounds::ZERO,
        pairs: pairs.len(),
        witness: None,
    };
    for (d, y) in pairs {
        let d2 = d.with_record(y.clone())?;
        let kb = suppression_theorem_bounds(
            &algorithm.kernel_of(&d)?,
            &algorithm.kernel_of(&d2)?,
            &y,
            base,
        )?;
        if report.witness.is_none() || kb.epsilon() > report.bounds.epsilon() {
            report.witness = Some((d, y));
        }
        report.bounds = report.bounds.join(&kb);
    }
    Ok(report)
}

/// Output distribution of `M(S(D))` for a kernel of `S` on `D` and a
/// mechanism given by its output distribution on each sub-multiset.
pub fn composed_distribution(
    kernel: &SuppressionKernel,
    mechanism: impl Fn(&Database) -> Vec<f64>,
) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for (sub, p) in kernel.by_submultiset() {
        let dist = mechanism(&sub);
        if out.len() < dist.len() {
            out.resize(dist.len(), 0.0);
        }
        for (o, q) in out.iter_mut().zip(dist) {
            *o += p * q;
        }
    }
    out
}

/// `sum_o max(P(o) - e^eps Q(o), 0)`.
pub fn hockey_stick(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if b == 0.0 {
                a
            } else {
                (a - (eps + b.ln()).exp()).max(0.0)
            }
        })
        .sum()
}

/// Absolute tolerance of the bisection in [`tight_dp_of_finite_mechanism`].
pub const TIGHT_EPS_TOL: f64 = 1e-12;

fn tight_eps_one_way(p: &[f64], q: &[f64], delta: f64) -> f64 {
    if delta == 0.0 {
        return p
            .iter()
            .zip(q)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| if *b == 0.0 { f64::INFINITY } else { (a / b).ln() })
            .fold(0.0, f64::max);
    }
    if hockey_stick(p, q, 0.0) <= delta {
        return 0.0;
    }
    let unmatched: f64 = p.iter().zip(q).filter(|(_, b)| **b == 0.0).map(|(a, _)| a).sum();
    if unmatched > delta {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hockey_stick(p, q, hi) > delta {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > TIGHT_EPS_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if hockey_stick(p, q, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return invalid(format!("probabilities must be finite and >= 0, got {v}"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > KERNEL_NORMALIZATION_TOL {
        return Err(Error::NotNormalized(total));
    }
    Ok(())
}

/// Least `eps` such that every ordered neighbor pair satisfies the
/// `(eps, delta)` hockey-stick condition. `f64::INFINITY` signals that no
/// finite `eps` works at this `delta`.
pub fn tight_dp_of_finite_mechanism<K: Ord + std::fmt::Debug>(
    tables: &BTreeMap<K, Vec<f64>>,
    pairs: &[(K, K)],
    delta: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) {
        return invalid(format!("delta must lie in [0, 1], got {delta}"));
    }
    for dist in tables.values() {
        check_distribution(dist)?;
    }
    let mut eps: f64 = 0.0;
    for (a, b) in pairs {
        let lookup = |k: &K| {
            tables
                .get(k)
                .ok_or_else(|| Error::InvalidParameter(format!("no table for {k:?}")))
        };
        let (p, q) = (lookup(a)?, lookup(b)?);
        if p.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                found: q.len(),
            });
        }
        eps = eps
            .max(tight_eps_one_way(p, q, delta))
            .max(tight_eps_one_way(q, p, delta));
    }
    Ok(eps)
}

/// Output tables of the two-output mechanism that is tight for Poisson
/// sampling, composed with Poisson keep-`q`, on `∅` (key 0) and `{y}`
/// (key 1).
pub fn two_output_poisson_tables(eps: f64, delta: f64, q: f64) -> BTreeMap<u8, Vec<f64>> {
    let z = 1.0 + eps.exp();
    let without = (1.0 - delta) / z;
    let with = (eps.exp() + delta) / z;
    let mixed = (1.0 - q) * without + q * with;
    BTreeMap::from([(0, vec![without, 1.0 - without]), (1, vec![mixed, 1.0 - mixed])])
}

/// Sensitivity of a deterministic suppression over an explicit class.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub sensitivity: Sensitivity,
    /// Pair attaining the sensitivity (or disconnected images).
    pub witness: Option<(Database, Database)>,
}

/// All distinct sub-multisets of `d`, canonicalized.
pub fn submultisets(d: &Database) -> Vec<Database> {
    let groups = d.multiplicities();
    let mut out = vec![Vec::<Record>::new()];
    for (r, c) in &groups {
        let mut next = Vec::with_capacity(out.len() * (c + 1));
        for base in &out {
            for k in 0..=*c {
                let mut v = base.clone();
                v.extend(std::iter::repeat_n(r.clone(), k));
                next.push(v);
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|v| {
            Database::new(v, d.bounds().to_vec())
                .expect("sub-multiset of a valid database")
                .canonicalized()
        })
        .collect()
}

/// Every pair `(X, X + r)` with both databases in `class`.
pub fn neighbor_pairs_within(class: &[Database]) -> Vec<(Database, Database)> {
    let members: BTreeSet<Database> = class.iter().map(|d| d.canonicalized()).collect();
    let mut out = Vec::new();
    for big in &members {
        for (r, _) in big.multiplicities() {
            let small = big.without_record(&r).expect("record from big").canonicalized();
            if members.contains(&small) {
                out.push((small, big.clone()));
            }
        }
    }
    out
}

/// Largest neighbor-graph distance within `class` between the images
/// `S(D)` and `S(D')` over the given pairs.
pub fn deterministic_sensitivity(
    s: &Suppressor,
    class: &[Database],
    pairs: &[(Database, Database)],
) -> Result<SensitivityReport> {
    let nodes: Vec<Database> = class
        .iter()
        .map(|d| d.canonicalized())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&Database, usize> = nodes.iter().enumerate().map(|(i, d)| (d, i)).collect();
    let mut adj = vec![Vec::new(); nodes.len()];
    for (small, big) in neighbor_pairs_within(&nodes) {
        let (a, b) = (index[&small], index[&big]);
        adj[a].push(b);
        adj[b].push(a);
    }
    let image = |d: &Database| -> Result<usize> {
        let keep = s
            .deterministic_keep(d)?
            .ok_or_else(|| Error::InvalidParameter(format!("{s:?} is randomized")))?;
        let img = d.filter_occurrences(|i, _| keep[i]).canonicalized();
        index
            .get(&img)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("image {img} lies outside the class")))
    };
    let mut report = SensitivityReport {
        sensitivity: Sensitivity::Finite(0),
        witness: None,
    };
    let mut best = 0u64;
    for (d, d2) in pairs {
        let (a, b) = (image(d)?, image(d2)?);
        match bfs_distance(&adj, a, b) {
            None => {
                return Ok(SensitivityReport {
                    sensitivity: Sensitivity::Infinite,
                    witness: Some((d.clone(), d2.clone())),
                })
            }
            Some(dist) => {
                if report.witness.is_none() || dist > best {
                    best = dist;
                    report.sensitivity = Sensitivity::Finite(dist);
                    report.witness = Some((d.clone(), d2.clone()));
                }
            }
        }
    }
    Ok(report)
}

fn bfs_distance(adj: &[Vec<usize>], from: usize, to: usize) -> Option<u64> {
    let mut dist = vec![u64::MAX; adj.len()];
    dist[from] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u == to {
            return Some(dist[u]);
        }
        for &v in &adj[u] {
            if dist[v] == u64::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    None
}

/// Upper bounds `M_i` on the outlier score of the `i`-th record given its
/// transformed distances `a` to the added record.
pub fn polytope_upper_bounds(a: &[f64], mm: MMParams) -> Vec<f64> {
    let n = a.len() as f64;
    let total: f64 = a.iter().sum();
    let cap = mm.m + (n - 1.0) * mm.big_m;
    a.iter()
        .map(|ai| cap.min((n - 2.0) * (ai - mm.m) + total) / n)
        .collect()
}

/// Largest `N` accepted by [`polytope_vertices`].
pub const POLYTOPE_MAX_N: usize = 20;

/// Vertices of the polytope of feasible outlier-score vectors.
///
/// For `N > 2` entry `K` (a bitmask over coordinates) is the vertex
/// `z^(K)`, so coincident vertices may repeat. `N = 1` gives `[m]` and
/// `N = 2` the two segment endpoints.
pub fn polytope_vertices(a: &[f64], mm: MMParams) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    if n == 0 {
        return invalid("need at least one coordinate");
    }
    if n > POLYTOPE_MAX_N {
        return Err(Error::TooLarge {
            size: n,
            limit: POLYTOPE_MAX_N,
        });
    }
    if let Some(v) = a.iter().find(|v| !(mm.m..=mm.big_m).contains(*v)) {
        return invalid(format!("a_i must lie in [m, M], got {v}"));
    }
    let upper = polytope_upper_bounds(a, mm);
    match n {
        1 => return Ok(vec![vec![mm.m]]),
        2 => return Ok(vec![vec![mm.m; 2], vec![upper[0]; 2]]),
        _ => {}
    }
    let nf = n as f64;
    Ok((0u64..1 << n)
        .map(|k| {
            let size = k.count_ones() as f64;
            let rest: f64 = (0..n).filter(|i| k >> i & 1 == 0).map(|i| upper[i]).sum();
            let b = ((nf - 2.0) * mm.m + rest) / (2.0 * nf - 2.0 - size);
            (0..n)
                .map(|i| if k >> i & 1 == 1 { b } else { upper[i] })
                .collect()
        })
        .collect())
}

/// Whether `z` satisfies every defining inequality of the polytope, up to
/// `tol`.
pub fn in_polytope(z: &[f64], a: &[f64], mm: MMParams, tol: f64) -> bool {
    let n = z.len() as f64;
    let upper = polytope_upper_bounds(a, mm);
    let total: f64 = z.iter().sum();
    z.iter().zip(&upper).all(|(zi, ui)| {
        *zi >= mm.m - tol
            && *zi <= ui + tol
            && total <= (2.0 * n - 2.0) * zi - (n - 2.0) * mm.m + tol
    })
}

/// `ln(e^eps - (e^eps - 1) s)`; `-inf` outside the valid range.
fn ln_mix(eps: f64, s: f64) -> f64 {
    let v = eps + (s * (-eps).exp_m1()).ln_1p();
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// `ln f_{J,N}(a; z)` of the forward objective; bit `i` of `j_mask` puts
/// coordinate `i` in `J`.
pub fn forward_objective_log(eps: f64, mm: MMParams, a: &[f64], z: &[f64], j_mask: u64) -> f64 {
    let n = a.len() as f64;
    let s = (mm.m + a.iter().sum::<f64>()) / (n + 1.0);
    let mut v = ln_mix(eps, s);
    for (i, (ai, zi)) in a.iter().zip(z).enumerate() {
        let ratio = if j_mask >> i & 1 == 1 {
            ai / zi
        } else {
            (1.0 - ai) / (1.0 - zi)
        };
        v += ((n + ratio) / (n + 1.0)).ln();
    }
    v
}

/// Brute-force maximum of the forward objective for a fixed `N` over an
/// `a`-grid with `grid` points per coordinate, all `J`, and all polytope
/// vertices. Returns the log value.
pub fn brute_force_forward(eps: f64, mm: MMParams, n: usize, grid: usize) -> Result<f64> {
    if n == 0 || grid < 2 {
        return invalid("need N >= 1 and at least two grid points");
    }
    let pts: Vec<f64> = (0..grid)
        .map(|i| mm.m + (mm.big_m - mm.m) * i as f64 / (grid - 1) as f64)
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; n];
    loop {
        let a: Vec<f64> = idx.iter().map(|&i| pts[i]).collect();
        let verts = polytope_vertices(&a, mm)?;
        // the a-grid is symmetric, so J = first j coordinates suffices
        for j in 0..=n {
            let mask = (1u64 << j) - 1;
            for z in &verts {
                best = best.max(forward_objective_log(eps, mm, &a, z, mask));
            }
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(best);
            }
            idx[pos] += 1;
            if idx[pos] < grid {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Gap tolerance of the bound verification.
pub const VERIFICATION_TOL: f64 = 2e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Outcome of a numerical bound verification. Values are logarithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub numeric_max: f64,
    pub closed_form: f64,
    /// `closed_form - numeric_max`.
    pub gap: f64,
    pub evaluations: u64,
    pub within_tolerance: bool,
    pub verdict: Verdict,
}

impl VerificationReport {
    fn new(numeric_max: f64, closed_form: f64, evaluations: u64) -> Self {
        let gap = closed_form - numeric_max;
        let verdict = if numeric_max > closed_form + VERIFICATION_TOL {
            Verdict::Fail
        } else if gap >= VERIFICATION_TOL {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        Self {
            numeric_max,
            closed_form,
            gap,
            evaluations,
            within_tolerance: verdict == Verdict::Pass,
            verdict,
        }
    }
}

fn check_open_mm(mm: MMParams) -> Result<()> {
    if !(mm.m > 0.0 && mm.big_m < 1.0) {
        return invalid(format!(
            "verification needs 0 < m <= M < 1, got m={}, M={}",
            mm.m, mm.big_m
        ));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return invalid(format!("epsilon must be finite and >= 0, got {eps}"));
    }
    Ok(())
}

/// The `N` values searched: every integer up to 1000, then powers of ten
/// up to `10^9`.
pub fn n_ladder(start: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (start..=1000).collect();
    v.extend((4..=9).map(|e| 10u64.pow(e)));
    v
}

/// The forward objective after reduction to the parameters
/// `(N, J, k, c, t)`, in log space.
#[derive(Debug, Clone)]
pub struct ForwardObjective {
    pub eps: f64,
    pub m: f64,
    pub big_m: f64,
    evaluations: Cell<u64>,
}

impl ForwardObjective {
    pub fn new(eps: f64, mm: MMParams) -> Self {
        Self {
            eps,
            m: mm.m,
            big_m: mm.big_m,
            evaluations: Cell::new(0),
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.get()
    }

    fn tick(&self, n: u64) {
        self.evaluations.set(self.evaluations.get() + n);
    }

    /// `ln((N + x) / (N + 1))`.
    fn lnq(n: f64, x: f64) -> f64 {
        if !(x > -n) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        ((x - 1.0) / (n + 1.0)).ln_1p()
    }

    fn ratio(num: f64, den: f64) -> f64 {
        if den > 0.0 {
            num / den
        } else {
            f64::NAN
        }
    }

    /// Upper end of the `t` range for the `k`-th branch.
    pub fn upper_t(&self, n: f64, j: f64, k: f64, c: f64) -> f64 {
        ((n - 1.0) * (self.big_m + self.m) - (j * c + (n - j - k - 1.0) * self.m)) / (n + k - 1.0)
    }

    /// Diagonal branch `g`, `-inf` when `t` is outside its range.
    pub fn g(&self, n: f64, j: f64, c: f64, t: f64) -> f64 {
        self.tick(1);
        let (m, eps) = (self.m, self.eps);
        if t < m || t > self.upper_t(n, j, n - j - 1.0, c) {
            return f64::NEG_INFINITY;
        }
        let x = ((2.0 * n - j - 2.0) * t - (n - 2.0) * m + j * c) / n;
        let v = ln_mix(eps, (m + j * c + (n - j) * t) / (n + 1.0))
            + j * Self::lnq(n, c / m)
            + (n - j) * Self::lnq(n, Self::ratio(1.0 - t, 1.0 - x));
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Branch `g_k`, `-inf` when `t` is outside its range.
    pub fn g_k(&self, n: f64, j: f64, k: f64, c: f64, t: f64) -> f64 {
        self.tick(1);
        let (m, big_m, eps) = (self.m, self.big_m, self.eps);
        if t < m || t > self.upper_t(n, j, k, c) {
            return f64::NEG_INFINITY;
        }
        let rest = n - j - k - 1.0;
        let b = ((n - 1.0) * (big_m + m) - (j * c + rest * m + t)) / (n + k - 2.0);
        let s = j * c + t + rest * m + k * b;
        let mut v = ln_mix(eps, (m + s) / (n + 1.0))
            + Self::lnq(n, Self::ratio(1.0 - t, 1.0 - ((n - 2.0) * (t - m) + s) / n))
            + j * Self::lnq(n, c / m);
        if rest > 0.0 {
            v += rest * Self::lnq(n, Self::ratio(1.0 - m, 1.0 - s / n));
        }
        if k > 0.0 {
            v += k * Self::lnq(n, Self::ratio(1.0 - b, 1.0 - (m + (n - 1.0) * big_m) / n));
        }
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Objective for `N > 2` and `J < N` on integer counts.
    pub fn h_bar(&self, n: u64, j: u64, k: u64, c: f64, t: f64) -> f64 {
        let (nf, jf, kf) = (n as f64, j as f64, k as f64);
        self.g(nf, jf, c, t).max(self.g_k(nf, jf, kf, c, t))
    }

    /// `ln H_[N]` for `J = [N]`.
    pub fn h_full(&self, n: u64, c: f64) -> f64 {
        self.tick(1);
        let nf = n as f64;
        ln_mix(self.eps, (self.m + nf * c) / (nf + 1.0)) + nf * Self::lnq(nf, c / self.m)
    }

    /// Maps a point of `[0, 1]^5` to integer counts and reals and
    /// evaluates the objective there.
    pub fn at_unit(&self, ladder: &[u64], x: &[f64]) -> (f64, (u64, u64, u64, f64, f64)) {
        let n = ladder[((x[0] * ladder.len() as f64) as usize).min(ladder.len() - 1)];
        let nf = n as f64;
        let j = ((x[1] * (nf - 1.0)).round() as u64).min(n - 1);
        let k = (x[2] * (n - j - 1) as f64).round() as u64;
        let c = self.m + x[3] * (self.big_m - self.m);
        let t = self.m + x[4] * (self.big_m - self.m);
        (self.h_bar(n, j, k, c, t), (n, j, k, c, t))
    }

    /// `ln H_{1,2}`, the `N = 1, 2` cases.
    pub fn h12(&self) -> f64 {
        let (m, big_m, eps) = (self.m, self.big_m, self.eps);
        let mut evals = 0u64;
        let mut best = f64::NEG_INFINITY;
        let mut scan = |f: &dyn Fn(f64) -> f64| {
            let (v, e) = maximize_1d(f, m, big_m);
            evals += e;
            best = best.max(v);
        };
        scan(&|a| ln_mix(eps, (m + a) / 2.0) + ((1.0 + a / m) / 2.0).ln());
        scan(&|a| ln_mix(eps, (m + a) / 2.0) + ((1.0 + (1.0 - a) / (1.0 - m)) / 2.0).ln());
        scan(&|b| ln_mix(eps, (m + 2.0 * b) / 3.0) + 2.0 * ((2.0 + b / m) / 3.0).ln());
        scan(&|b| {
            let top = (big_m + m).min(2.0 * b) / 2.0;
            ln_mix(eps, (m + 2.0 * b) / 3.0) + 2.0 * ((2.0 + (1.0 - b) / (1.0 - top)) / 3.0).ln()
        });
        scan(&|a| {
            let base = ln_mix(eps, (2.0 * m + a) / 3.0);
            let one = base + ((2.0 + a / m) / 3.0).ln();
            let two = base
                + ((2.0 + 2.0 * a / (m + a)) / 3.0).ln()
                + ((2.0 + (1.0 - m) / (1.0 - (m + a) / 2.0)) / 3.0).ln();
            one.max(two)
        });
        self.tick(evals);
        best
    }
}

const GOLDEN: f64 = 0.618_033_988_749_895;

/// Maximizes a 1-d function on `[lo, hi]` by a uniform scan followed by a
/// golden-section refinement around the best scan point. Returns the value
/// and the evaluation count.
pub fn maximize_1d(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, u64) {
    let (_, v, e) = argmax_1d(f, lo, hi, 200);
    (v, e)
}

fn argmax_1d(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, scan: usize) -> (f64, f64, u64) {
    if hi <= lo {
        return (lo, f(lo), 1);
    }
    let step = (hi - lo) / scan as f64;
    let mut best = (lo, f(lo));
    for i in 1..=scan {
        let x = if i == scan { hi } else { lo + step * i as f64 };
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    let mut evals = scan as u64 + 1;
    let (mut a, mut b) = ((best.0 - step).max(lo), (best.0 + step).min(hi));
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    evals += 2;
    while b - a > 1e-12 * (1.0 + a.abs()) && evals < scan as u64 + 200 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            f1 = f(x1);
        }
        evals += 1;
    }
    for (x, v) in [(x1, f1), (x2, f2)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    (best.0, best.1, evals)
}

/// Settings of the population-based search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionSettings {
    pub population: usize,
    pub crossover: f64,
    /// Mutation factor is drawn uniformly from this range each generation.
    pub mutation: (f64, f64),
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        Self {
            population: 40,
            crossover: 0.7,
            mutation: (0.5, 1.0),
        }
    }
}

/// Differential evolution (best/1/bin) maximizing `f` over `[0, 1]^dim`
/// with at most `budget` evaluations. Returns the best point and value.
pub fn differential_evolution<R: Rng + ?Sized>(
    f: &mut dyn FnMut(&[f64]) -> f64,
    dim: usize,
    budget: u64,
    settings: EvolutionSettings,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let np = settings.population.max(4);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut vals: Vec<f64> = pop.iter().map(|x| f(x)).collect();
    let mut used = np as u64;
    let mut best = argmax(&vals);
    while used < budget {
        let scale = rng.random_range(settings.mutation.0..=settings.mutation.1);
        for i in 0..np {
            if used >= budget {
                break;
            }
            let (r1, r2) = loop {
                let a = rng.random_range(0..np);
                let b = rng.random_range(0..np);
                if a != b && a != i && b != i {
                    break (a, b);
                }
            };
            let forced = rng.random_range(0..dim);
            let trial: Vec<f64> = (0..dim)
                .map(|d| {
                    if d == forced || rng.random::<f64>() < settings.crossover {
                        (pop[best][d] + scale * (pop[r1][d] - pop[r2][d])).clamp(0.0, 1.0)
                    } else {
                        pop[i][d]
                    }
                })
                .collect();
            let v = f(&trial);
            used += 1;
            if v >= vals[i] {
                pop[i] = trial;
                vals[i] = v;
                if v > vals[best] {
                    best = i;
                }
            }
        }
    }
    (pop[best].clone(), vals[best])
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `ln max{L1(p1*), L2(p2*)}`, with the endpoints `p = 0, 1` included.
pub fn forward_closed_form(eps: f64, mm: MMParams) -> f64 {
    [Branch::L1, Branch::L2]
        .into_iter()
        .flat_map(|b| {
            let p = accounting::maximizer_p(eps, mm, b);
            [0.0, 1.0, p].map(|p| accounting::l_branch(eps, mm, b, p))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Default evaluation budget of the stochastic search.
pub const DEFAULT_FORWARD_BUDGET: u64 = 20_000;

/// Numerically maximizes the reduced forward objective and compares it
/// with the closed form.
///
/// The search combines seeded differential evolution over
/// `(N, p_J, p_k, c, t)`, a deterministic grid, and coordinate-wise
/// golden-section polishing of the best point; the `J = [N]` and
/// `N = 1, 2` cases are maximized separately.
pub fn verify_bound_forward(
    eps: f64,
    mm: MMParams,
    budget: u64,
    seed: u64,
) -> Result<VerificationReport> {
    check_eps(eps)?;
    check_open_mm(mm)?;
    let obj = ForwardObjective::new(eps, mm);
    let ladder = n_ladder(3);
    let (m, big_m) = (mm.m, mm.big_m);

    let mut numeric = obj.h12();
    for &n in &ladder {
        let (v, e) = maximize_1d(&|c| obj.h_full(n, c), m, big_m);
        obj.tick(e);
        numeric = numeric.max(v);
    }

    type Point = (u64, u64, u64, f64, f64);
    let mut best: (f64, Option<Point>) = (f64::NEG_INFINITY, None);
    let consider = |v: f64, p: Point, best: &mut (f64, Option<Point>)| {
        if v > best.0 {
            *best = (v, Some(p));
        }
    };

    let mut rng = RandomStream::new(seed)
        .child("verify-forward")
        .child(format!("{eps}/{m}/{big_m}"))
        .rng();
    {
        let mut f = |x: &[f64]| {
            let (v, p) = obj.at_unit(&ladder, x);
            consider(v, p, &mut best);
            v
        };
        differential_evolution(&mut f, 5, budget, EvolutionSettings::default(), &mut rng);
    }

    // deterministic safety net
    let grid_n: [u64; 14] = [
        3, 4, 5, 6, 8, 10, 20, 50, 100, 1000, 10_000, 100_000, 1_000_000, 1_000_000_000,
    ];
    for n in grid_n {
        let mut js: Vec<u64> = (0..=100)
            .map(|i| ((i as f64 / 100.0 * n as f64).round() as u64).min(n - 1))
            .collect();
        js.dedup();
        for j in js {
            for k in [0, n - j - 1] {
                for c in [m, big_m] {
                    let (nf, jf) = (n as f64, j as f64);
                    let uk = obj.upper_t(nf, jf, k as f64, c).clamp(m, big_m);
                    let ud = obj.upper_t(nf, jf, nf - jf - 1.0, c).clamp(m, big_m);
                    for t in [m, uk, ud, 0.5 * (m + uk)] {
                        consider(obj.h_bar(n, j, k, c, t), (n, j, k, c, t), &mut best);
                    }
                }
            }
        }
    }

    // coordinate-wise polish at the best N found and in the large-N limit;
    // at c = m the share of J has no effect, so c = M is tried as a start too
    if let (_, Some((n0, j0, k0, c0, t0))) = best {
        for n in [n0, 1_000_000_000] {
            let nf = n as f64;
            let at = |pj: f64, kfrac: f64, c: f64, t: f64| {
                let j = ((pj * nf).round() as u64).min(n - 1);
                let k = (kfrac * (n - j - 1) as f64).round() as u64;
                (obj.h_bar(n, j, k, c, t), (n, j, k, c, t))
            };
            let k_start = k0 as f64 / ((n0 - j0 - 1).max(1)) as f64;
            let starts = [0.0, 1.0, k_start]
                .into_iter()
                .flat_map(|kf| [(kf, c0, t0), (kf, big_m, m)]);
            for (kfrac, c_start, t_start) in starts {
                let (mut c, mut t) = (c_start, t_start);
                for _ in 0..4 {
                    let pj = argmax_1d(&|v| at(v, kfrac, c, t).0, 0.0, 1.0 - 1.0 / nf, 200).0;
                    c = argmax_1d(&|v| at(pj, kfrac, v, t).0, m, big_m, 100).0;
                    t = argmax_1d(&|v| at(pj, kfrac, c, v).0, m, big_m, 100).0;
                    let (v, p) = at(pj, kfrac, c, t);
                    consider(v, p, &mut best);
                }
            }
        }
    }
    numeric = numeric.max(best.0);
    Ok(VerificationReport::new(
        numeric,
        forward_closed_form(eps, mm),
        obj.evaluations(),
    ))
}

/// `-ln(e^-eps + (1 - e^-eps) s)`.
fn neg_ln_mix_down(eps: f64, s: f64) -> f64 {
    -((1.0 - s) * (-eps).exp_m1()).ln_1p()
}

/// `ln` of the inverse-direction term at a given `N`.
pub fn inverse_term_log(eps: f64, mm: MMParams, n: u64) -> f64 {
    let nf = n as f64;
    let r = (1.0 - mm.big_m) / (1.0 - mm.m);
    neg_ln_mix_down(eps, (mm.m + nf * mm.big_m) / (nf + 1.0)) - nf * ((r - 1.0) / (nf + 1.0)).ln_1p()
}

/// `ln` of the inverse-direction closed form.
pub fn inverse_closed_form(eps: f64, mm: MMParams) -> f64 {
    let r = (1.0 - mm.big_m) / (1.0 - mm.m);
    let first = neg_ln_mix_down(eps, mm.big_m) + 1.0 - r;
    first.max(inverse_second_term(eps, mm))
}

fn inverse_second_term(eps: f64, mm: MMParams) -> f64 {
    neg_ln_mix_down(eps, mm.m) + 1.0 - mm.m / mm.big_m
}

/// Maximizes the inverse-direction term over the `N` ladder and compares
/// with its closed form.
pub fn verify_bound_inverse(eps: f64, mm: MMParams) -> Result<VerificationReport> {
    check_eps(eps)?;
    check_open_mm(mm)?;
    let ladder = n_ladder(1);
    let sup = ladder
        .iter()
        .map(|&n| inverse_term_log(eps, mm, n))
        .fold(f64::NEG_INFINITY, f64::max);
    let numeric = sup.max(inverse_second_term(eps, mm));
    Ok(VerificationReport::new(
        numeric,
        inverse_closed_form(eps, mm),
        ladder.len() as u64,
    ))
}

/// Whether the second inverse-direction term is dominated by the
/// outlier-score bound, so that it never changes the result.
pub fn inverse_extra_term_dominated(eps: f64, mm: MMParams) -> Result<bool> {
    check_eps(eps)?;
    check_open_mm(mm)?;
    let bound = accounting::epsilon_s(eps, mm)?.eps_s;
    Ok(inverse_second_term(eps, mm) <= bound + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ValueBounds;
    use crate::suppression::{DistanceFn, MMTransform};

    fn unit() -> ValueBounds {
        ValueBounds::new(0.0, 1.0).unwrap()
    }

    fn db(v: &[f64]) -> Database {
        Database::from_values(v, unit()).unwrap()
    }

    fn pp(e: f64, d: f64) -> PrivacyParams {
        PrivacyParams::new(e, d).unwrap()
    }

    fn mm(m: f64, big_m: f64) -> MMParams {
        MMParams::new(m, big_m).unwrap()
    }

    #[test]
    fn poisson_single_record_bounds() {
        let (eps, q) = (1.3, 0.4);
        let s = Suppressor::Poisson { keep: q };
        let d = db(&[0.2]);
        let y = Record::scalar(0.9);
        let d2 = d.with_record(y.clone()).unwrap();
        let kb = suppression_theorem_bounds(
            &s.kernel_of(&d).unwrap(),
            &s.kernel_of(&d2).unwrap(),
            &y,
            pp(eps, 1e-5),
        )
        .unwrap();
        let expected = (q * eps.exp_m1()).ln_1p();
        assert!((kb.epsilon() - expected).abs() < 1e-12, "{kb:?}");
        assert!((kb.delta_bwd - q * 1e-5).abs() < 1e-18);
    }

    #[test]
    fn empty_vs_singleton_outlier_score() {
        let (eps, m, big_m) = (0.8, 0.2, 0.7);
        let s = Suppressor::OutlierScore(MMTransform::new(m, big_m, DistanceFn::Discrete).unwrap());
        let d = db(&[]);
        let y = Record::scalar(0.5);
        let d2 = d.with_record(y.clone()).unwrap();
        let kb = suppression_theorem_bounds(
            &s.kernel_of(&d).unwrap(),
            &s.kernel_of(&d2).unwrap(),
            &y,
            pp(eps, 0.0),
        )
        .unwrap();
        let fwd = -(m + (-eps).exp() * (1.0 - m)).ln();
        let bwd = (m + eps.exp() * (1.0 - m)).ln();
        assert!((kb.eps_fwd - fwd).abs() < 1e-12);
        assert!((kb.eps_bwd - bwd).abs() < 1e-12);
    }

    #[test]
    fn support_condition_counterexample() {
        let d = db(&[0.1, 0.2]);
        let y = Record::scalar(0.3);
        let d2 = d.with_record(y.clone()).unwrap();
        let kd = SuppressionKernel::point_mass(d, 0b01).unwrap();
        let kd2 = SuppressionKernel::point_mass(d2, 0b010).unwrap();
        assert!(!support_condition_holds(&kd, &kd2, &y).unwrap());
        assert!(matches!(
            suppression_theorem_bounds(&kd, &kd2, &y, pp(1.0, 0.0)),
            Err(Error::SupportViolation(_))
        ));
        let wrong = SuppressionKernel::point_mass(db(&[0.5]), 0).unwrap();
        assert!(support_condition_holds(&kd, &wrong, &y).is_err());
    }

    #[test]
    fn randomized_response_tight_eps() {
        let tables = BTreeMap::from([(0, vec![0.75, 0.25]), (1, vec![0.25, 0.75])]);
        let e = tight_dp_of_finite_mechanism(&tables, &[(0, 1)], 0.0).unwrap();
        assert!((e - 3f64.ln()).abs() < 1e-12);
        let same = BTreeMap::from([(0, vec![0.5, 0.5]), (1, vec![0.5, 0.5])]);
        assert_eq!(tight_dp_of_finite_mechanism(&same, &[(0, 1)], 0.0).unwrap(), 0.0);
        let bad = BTreeMap::from([(0, vec![0.5, 0.4])]);
        assert!(tight_dp_of_finite_mechanism(&bad, &[], 0.0).is_err());
    }

    #[test]
    fn two_output_mechanism_is_tight() {
        let (eps, delta, q) = (1.0, 0.01, 0.5);
        let tables = two_output_poisson_tables(eps, delta, q);
        let e = tight_dp_of_finite_mechanism(&tables, &[(0, 1)], delta * q).unwrap();
        assert!((e - (q * eps.exp_m1()).ln_1p()).abs() < 1e-9, "{e}");
    }

    #[test]
    fn sensitivity_of_set_suppression_and_identity() {
        let universe = db(&[0.1, 0.2, 0.3, 0.4]);
        let class = submultisets(&universe);
        assert_eq!(class.len(), 16);
        let pairs = neighbor_pairs_within(&class);
        let s = Suppressor::by_set(|r| r.0[0] < 0.25);
        let rep = deterministic_sensitivity(&s, &class, &pairs).unwrap();
        assert_eq!(rep.sensitivity, Sensitivity::Finite(1));
        let id = deterministic_sensitivity(&Suppressor::Identity, &class, &pairs).unwrap();
        assert_eq!(id.sensitivity, Sensitivity::Finite(1));
    }

    #[test]
    fn polytope_small_cases() {
        let p = mm(0.2, 0.6);
        assert_eq!(polytope_vertices(&[0.4], p).unwrap(), vec![vec![0.2]]);
        let v = polytope_vertices(&[0.3, 0.5], p).unwrap();
        assert_eq!(v[0], vec![0.2, 0.2]);
        assert_eq!(v[1][0], v[1][1]);
        let a = [0.25, 0.4, 0.55, 0.6];
        let v = polytope_vertices(&a, p).unwrap();
        assert_eq!(v.len(), 16);
        assert!(v[15].iter().all(|z| (z - 0.2).abs() < 1e-15));
        assert_eq!(v[0], polytope_upper_bounds(&a, p));
        for z in &v {
            assert!(in_polytope(z, &a, p, 1e-12), "{z:?}");
        }
    }

    #[test]
    fn forward_verification_diagonal_and_interior() {
        let r = verify_bound_forward(1.0, mm(0.4, 0.4), 2_000, 1).unwrap();
        let expected = 1.0 + (0.4 * (-1f64).exp_m1()).ln_1p();
        assert!((r.closed_form - expected).abs() < 1e-9);
        assert!((r.numeric_max - expected).abs() < 1e-9, "{r:?}");
        let r = verify_bound_forward(1.0, mm(0.3, 0.6), 2_000, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn inverse_verification_examples() {
        let r = verify_bound_inverse(1.0, mm(0.3, 0.6)).unwrap();
        assert!(r.within_tolerance, "{r:?}");
        let r = verify_bound_inverse(1.0, mm(0.5, 0.5)).unwrap();
        assert!(r.gap.abs() < 1e-9);
        assert!(inverse_extra_term_dominated(1.0, mm(0.3, 0.6)).unwrap());
    }

    #[test]
    fn de_finds_quadratic_peak() {
        let mut rng = RandomStream::new(3).rng();
        let mut f = |x: &[f64]| -((x[0] - 0.3).powi(2) + (x[1] - 0.7).powi(2));
        let (x, v) = differential_evolution(&mut f, 2, 3_000, EvolutionSettings::default(), &mut rng);
        assert!(v > -1e-8, "{x:?} {v}");
    }
}
