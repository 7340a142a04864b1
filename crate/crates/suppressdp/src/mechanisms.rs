//! Noise primitives and the differentially private statistics built on
//! them: noisy average, report-noisy-max and exponential-mechanism modes,
//! DP Lloyd clustering and exponential-mechanism k-median.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::domain::{Database, PrivacyParams, Record};
use crate::error::{invalid, Error, Result};

/// Noise distribution used by a mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseKind {
    Laplace,
    Gaussian,
    Exponential,
}

/// How a perturbed mode is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeVariant {
    /// Report-noisy-max with the given noise.
    Rnm(NoiseKind),
    /// Exponential mechanism with score `count - max count`.
    ExpMech,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    NoisyAverage,
    Rnm,
    ExpMechMode,
    DpLloyd,
    KMedian,
}

/// A mechanism together with its privacy budget and settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub noise: NoiseKind,
    pub params: PrivacyParams,
    /// Number of clusters for the clustering mechanisms.
    pub k: usize,
    pub iterations: usize,
}

pub const DEFAULT_LLOYD_ITERATIONS: usize = 5;
pub const DEFAULT_KMEDIAN_ITERATIONS: usize = 10;

impl MechanismSpec {
    pub fn new(kind: MechanismKind, noise: NoiseKind, params: PrivacyParams) -> Result<Self> {
        if noise == NoiseKind::Gaussian && params.delta <= 0.0 {
            return invalid("Gaussian noise requires delta > 0");
        }
        let iterations = match kind {
            MechanismKind::DpLloyd => DEFAULT_LLOYD_ITERATIONS,
            MechanismKind::KMedian => DEFAULT_KMEDIAN_ITERATIONS,
            _ => 1,
        };
        Ok(Self {
            kind,
            noise,
            params,
            k: 1,
            iterations,
        })
    }
}

/// Sequential composition of sub-budgets spent by one mechanism run. Each
/// entry may be spent in parallel over disjoint record supports.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub steps: Vec<PrivacyParams>,
}

impl BudgetPlan {
    pub fn total(&self) -> PrivacyParams {
        let (e, d) = self
            .steps
            .iter()
            .fold((0.0, 0.0), |(e, d), p| (e + p.epsilon, d + p.delta));
        PrivacyParams {
            epsilon: e,
            delta: d,
        }
    }
}

fn share(pp: PrivacyParams, parts: usize) -> PrivacyParams {
    PrivacyParams {
        epsilon: pp.epsilon / parts as f64,
        delta: pp.delta / parts as f64,
    }
}

/// The sub-budgets each mechanism spends; the mechanisms below draw their
/// budgets from the same helpers.
pub fn budget_plan(spec: &MechanismSpec, dim: usize) -> BudgetPlan {
    let half = share(spec.params, 2);
    let steps = match spec.kind {
        MechanismKind::NoisyAverage => vec![half, half],
        MechanismKind::Rnm | MechanismKind::ExpMechMode => vec![spec.params],
        MechanismKind::DpLloyd => {
            let per = share(lloyd_step_budget(spec.params, spec.iterations, dim), 2);
            vec![per; 2 * spec.iterations * dim]
        }
        MechanismKind::KMedian => vec![share(spec.params, spec.iterations); spec.iterations],
    };
    BudgetPlan { steps }
}

fn lloyd_step_budget(pp: PrivacyParams, iterations: usize, dim: usize) -> PrivacyParams {
    share(pp, iterations * dim)
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// One Laplace(0, scale) variate by inverse-CDF sampling, so that draws at
/// different scales from the same stream differ by exactly the scale ratio.
pub fn laplace_draw<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0) {
        return invalid(format!("Laplace scale must be > 0, got {scale}"));
    }
    let u = open_unit(rng) - 0.5;
    let mag = -(1.0 - 2.0 * u.abs()).ln();
    Ok(scale * if u < 0.0 { -mag } else { mag })
}

/// One exponential variate with the given mean.
pub fn exponential_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<f64> {
    if !(mean > 0.0) {
        return invalid(format!("exponential mean must be > 0, got {mean}"));
    }
    Ok(-mean * open_unit(rng).ln())
}

pub fn gaussian_draw<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Phi(-a)` for `a >= 0`, using the asymptotic tail series once `erfc`
/// would underflow.
fn ln_normal_tail(a: f64) -> f64 {
    if a < 30.0 {
        return (0.5 * erfc(a / std::f64::consts::SQRT_2)).ln();
    }
    let a2 = a * a;
    let series = 1.0 - 1.0 / a2 + 3.0 / (a2 * a2) - 15.0 / (a2 * a2 * a2);
    -0.5 * a2 - (a * (2.0 * std::f64::consts::PI).sqrt()).ln() + series.ln()
}

/// Exact privacy profile `delta(eps)` of the Gaussian mechanism with noise
/// `sigma` and L2 sensitivity `sens`.
pub fn gaussian_profile(eps: f64, sigma: f64, sens: f64) -> f64 {
    let r = sens / sigma;
    let x = 0.5 * r - eps / r;
    let a = 0.5 * r + eps / r;
    let first = normal_cdf(x);
    let second = (eps + ln_normal_tail(a)).exp();
    (first - second).max(0.0)
}

/// Smallest Gaussian noise scale for `(eps, delta)`-DP at L2 sensitivity
/// `sens`, by bisection on the exact privacy profile.
pub fn analytic_gaussian_sigma(eps: f64, delta: f64, sens: f64) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid(format!("epsilon must be finite and > 0, got {eps}"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("delta must lie in (0, 1), got {delta}"));
    }
    if !(sens >= 0.0) {
        return invalid(format!("sensitivity must be >= 0, got {sens}"));
    }
    if sens == 0.0 {
        return Ok(0.0);
    }
    let profile = |s: f64| gaussian_profile(eps, s, 1.0);
    let (mut lo, mut hi) = (1.0, 1.0);
    while profile(hi) > delta {
        hi *= 2.0;
    }
    while profile(lo) <= delta && lo > 1e-300 {
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if profile(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi * sens)
}

fn check_pure_budget(pp: PrivacyParams) -> Result<()> {
    if !(pp.epsilon > 0.0) || !pp.epsilon.is_finite() {
        return invalid(format!("epsilon must be finite and > 0, got {}", pp.epsilon));
    }
    Ok(())
}

/// Noisy average from sufficient statistics: `sum` of values bounded in
/// absolute value by `max_abs`, and the record `count`.
pub fn noisy_average_stats<R: Rng + ?Sized>(
    sum: f64,
    count: f64,
    max_abs: f64,
    pp: PrivacyParams,
    noise: NoiseKind,
    rng: &mut R,
) -> Result<f64> {
    check_pure_budget(pp)?;
    let half = share(pp, 2);
    let (z_sum, z_cnt) = match noise {
        NoiseKind::Laplace => (
            laplace_draw(max_abs / half.epsilon, rng)?,
            laplace_draw(1.0 / half.epsilon, rng)?,
        ),
        NoiseKind::Gaussian => {
            let s_sum = analytic_gaussian_sigma(half.epsilon, half.delta, max_abs)?;
            let s_cnt = analytic_gaussian_sigma(half.epsilon, half.delta, 1.0)?;
            (gaussian_draw(s_sum, rng), gaussian_draw(s_cnt, rng))
        }
        NoiseKind::Exponential => return invalid("noisy average supports Laplace or Gaussian noise"),
    };
    let noisy_count = (count + z_cnt).max(1.0);
    Ok((sum + z_sum) / noisy_count)
}

/// Noisy sum divided by noisy count, each released with half the budget.
/// The noisy count is clamped to at least 1 before dividing.
pub fn noisy_average<R: Rng + ?Sized>(
    d: &Database,
    pp: PrivacyParams,
    noise: NoiseKind,
    rng: &mut R,
) -> Result<f64> {
    if d.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: d.dim(),
        });
    }
    let max_abs = d.bounds()[0].max_abs();
    noisy_average_stats(d.sum(0), d.len() as f64, max_abs, pp, noise, rng)
}

/// Index of the largest noisy count; ties go to the lowest index.
pub fn report_noisy_max<R: Rng + ?Sized>(
    counts: &[f64],
    sensitivities: &[f64],
    pp: PrivacyParams,
    noise: NoiseKind,
    rng: &mut R,
) -> Result<usize> {
    if counts.is_empty() {
        return invalid("report-noisy-max needs at least one count");
    }
    if counts.len() != sensitivities.len() {
        return Err(Error::DimensionMismatch {
            expected: counts.len(),
            found: sensitivities.len(),
        });
    }
    if let Some(s) = sensitivities.iter().find(|s| !(**s > 0.0)) {
        return invalid(format!("sensitivities must be > 0, got {s}"));
    }
    check_pure_budget(pp)?;
    let mut sigma_cache: Option<(f64, f64)> = None;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, (&c, &s)) in counts.iter().zip(sensitivities).enumerate() {
        let z = match noise {
            NoiseKind::Laplace => laplace_draw(s / pp.epsilon, rng)?,
            NoiseKind::Exponential => exponential_draw(2.0 * s / pp.epsilon, rng)?,
            NoiseKind::Gaussian => {
                let sigma = match sigma_cache {
                    Some((cs, sig)) if cs == s => sig,
                    _ => {
                        let sig = analytic_gaussian_sigma(pp.epsilon, pp.delta, s)?;
                        sigma_cache = Some((s, sig));
                        sig
                    }
                };
                gaussian_draw(sigma, rng)
            }
        };
        let v = c + z;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Samples an index with probability proportional to
/// `exp(eps * score / (2 * sensitivity))`, computed in log space.
pub fn exponential_mechanism_index<R: Rng + ?Sized>(
    scores: &[f64],
    sensitivity: f64,
    eps: f64,
    rng: &mut R,
) -> Result<usize> {
    if scores.is_empty() {
        return invalid("exponential mechanism needs at least one item");
    }
    if !(sensitivity > 0.0) {
        return invalid(format!("score sensitivity must be > 0, got {sensitivity}"));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return invalid(format!("epsilon must be finite and >= 0, got {eps}"));
    }
    let factor = eps / (2.0 * sensitivity);
    let logw: Vec<f64> = scores
        .iter()
        .map(|s| if factor == 0.0 { 0.0 } else { factor * s })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(weights.iter().rposition(|w| *w > 0.0).unwrap_or(0))
}

/// Exponential mechanism over an explicit item list.
pub fn exponential_mechanism<'a, T, R: Rng + ?Sized>(
    items: &'a [T],
    scores: &[f64],
    sensitivity: f64,
    eps: f64,
    rng: &mut R,
) -> Result<&'a T> {
    if items.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: items.len(),
            found: scores.len(),
        });
    }
    let i = exponential_mechanism_index(scores, sensitivity, eps, rng)?;
    Ok(&items[i])
}

/// Upper limit on the number of integer bins a mode query may span.
pub const MAX_MODE_BINS: usize = 10_000_000;

/// Counts of every integer value inside the bounds of a 1-dim database.
/// Returns the lowest value and the counts.
pub fn integer_histogram(d: &Database) -> Result<(i64, Vec<f64>)> {
    if d.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: d.dim(),
        });
    }
    let b = d.bounds()[0];
    if b.lower.fract() != 0.0 || b.upper.fract() != 0.0 {
        return invalid(format!(
            "mode bounds must be integers, got [{}, {}]",
            b.lower, b.upper
        ));
    }
    let span = b.upper - b.lower + 1.0;
    if span > MAX_MODE_BINS as f64 {
        return invalid(format!("mode range spans {span} bins"));
    }
    let lower = b.lower as i64;
    let mut counts = vec![0.0; span as usize];
    for v in d.column(0) {
        if v.fract() != 0.0 {
            return invalid(format!("mode requires integer values, got {v}"));
        }
        counts[(v as i64 - lower) as usize] += 1.0;
    }
    Ok((lower, counts))
}

/// Perturbed mode over every integer in the bounds.
pub fn compute_mode<R: Rng + ?Sized>(
    d: &Database,
    variant: ModeVariant,
    pp: PrivacyParams,
    rng: &mut R,
) -> Result<f64> {
    let (lower, counts) = integer_histogram(d)?;
    compute_mode_from_histogram(lower, &counts, variant, pp, rng)
}

pub fn compute_mode_from_histogram<R: Rng + ?Sized>(
    lower: i64,
    counts: &[f64],
    variant: ModeVariant,
    pp: PrivacyParams,
    rng: &mut R,
) -> Result<f64> {
    let idx = match variant {
        ModeVariant::Rnm(noise) => {
            let sens = vec![1.0; counts.len()];
            report_noisy_max(counts, &sens, pp, noise, rng)?
        }
        ModeVariant::ExpMech => {
            let max = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let scores: Vec<f64> = counts.iter().map(|c| c - max).collect();
            exponential_mechanism_index(&scores, 1.0, pp.epsilon, rng)?
        }
    };
    Ok((lower + idx as i64) as f64)
}

/// Cluster centers and the nearest-center assignment of every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center under L2; ties go to the lowest index.
pub fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn assign(d: &Database, centers: &[Vec<f64>]) -> Vec<usize> {
    d.records()
        .iter()
        .map(|r| nearest_center(r.values(), centers))
        .collect()
}

/// DP Lloyd clustering on data normalized to `[-1, 1]` per coordinate.
///
/// Each iteration spends `1/iterations` of the budget; within an iteration
/// every cluster (disjoint supports) releases one noisy average per
/// coordinate at `1/dim` of the iteration budget. Initial centers are drawn
/// uniformly from `[-1, 1]^dim`; an empty cluster keeps its previous center.
pub fn dp_lloyd<R: Rng + ?Sized>(
    d: &Database,
    k: usize,
    pp: PrivacyParams,
    iterations: usize,
    noise: NoiseKind,
    rng: &mut R,
) -> Result<ClusteringResult> {
    if k == 0 {
        return invalid("k must be positive");
    }
    if iterations == 0 {
        return invalid("iterations must be positive");
    }
    for r in d.records() {
        if let Some(v) = r.values().iter().find(|v| v.abs() > 1.0) {
            return invalid(format!("DP Lloyd expects data normalized to [-1, 1], found {v}"));
        }
    }
    let dim = d.dim();
    let coord_budget = lloyd_step_budget(pp, iterations, dim);
    let mut centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    for _ in 0..iterations {
        let assignment = assign(d, &centers);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &c) in d.records().iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(r.values()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                centers[c][j] =
                    noisy_average_stats(sums[c][j], counts[c] as f64, 1.0, coord_budget, noise, rng)?;
            }
        }
    }
    let assignment = assign(d, &centers);
    Ok(ClusteringResult {
        centers,
        assignment,
    })
}

/// Diameter of the bounding box of a database's bounds.
pub fn bounds_diameter(d: &Database) -> f64 {
    d.bounds()
        .iter()
        .map(|b| b.width() * b.width())
        .sum::<f64>()
        .sqrt()
}

/// Private k-median by local search over a finite candidate set.
///
/// Initial medians are drawn uniformly without replacement from the
/// candidates. Each of the `iterations` rounds spends an equal share of the
/// budget choosing one (median, candidate) swap, or keeping the current
/// medians, with the exponential mechanism. Each option is scored by minus
/// the resulting total L2 cost; the score sensitivity is the diameter of the
/// bounding box.
pub fn dp_kmedian<R: Rng + ?Sized>(
    d: &Database,
    candidates: &[Record],
    k: usize,
    pp: PrivacyParams,
    iterations: usize,
    rng: &mut R,
) -> Result<ClusteringResult> {
    if k == 0 || k > candidates.len() {
        return invalid(format!(
            "need 1 <= k <= |candidates| = {}, got k = {k}",
            candidates.len()
        ));
    }
    if iterations == 0 {
        return invalid("iterations must be positive");
    }
    if let Some(c) = candidates.iter().find(|c| c.dim() != d.dim()) {
        return Err(Error::DimensionMismatch {
            expected: d.dim(),
            found: c.dim(),
        });
    }
    check_pure_budget(pp)?;
    let sens = bounds_diameter(d);
    let eps_round = pp.epsilon / iterations as f64;
    let n = d.len();
    let nc = candidates.len();
    // dist[x * nc + j] = ||record x - candidate j||
    let dist: Vec<f64> = d
        .records()
        .iter()
        .flat_map(|r| {
            candidates
                .iter()
                .map(move |c| squared_distance(r.values(), c.values()).sqrt())
        })
        .collect();
    let mut medians: Vec<usize> = sample(rng, nc, k).into_vec();
    for _ in 0..iterations {
        let mut is_median = vec![false; nc];
        for &m in &medians {
            is_median[m] = true;
        }
        let outside: Vec<usize> = (0..nc).filter(|j| !is_median[*j]).collect();
        if outside.is_empty() {
            break;
        }
        // best and second-best median distance per record
        let mut best = vec![(f64::INFINITY, usize::MAX); n];
        let mut second = vec![f64::INFINITY; n];
        for x in 0..n {
            for (slot, &m) in medians.iter().enumerate() {
                let v = dist[x * nc + m];
                if v < best[x].0 {
                    second[x] = best[x].0;
                    best[x] = (v, slot);
                } else if v < second[x] {
                    second[x] = v;
                }
            }
        }
        let current: f64 = best.iter().map(|b| b.0).sum();
        let mut scores = Vec::with_capacity(1 + k * outside.len());
        scores.push(-current);
        for slot in 0..k {
            let without: Vec<f64> = (0..n)
                .map(|x| if best[x].1 == slot { second[x] } else { best[x].0 })
                .collect();
            for &j in &outside {
                let cost: f64 = (0..n).map(|x| without[x].min(dist[x * nc + j])).sum();
                scores.push(-cost);
            }
        }
        let pick = exponential_mechanism_index(&scores, sens, eps_round, rng)?;
        if pick > 0 {
            let pick = pick - 1;
            medians[pick / outside.len()] = outside[pick % outside.len()];
        }
    }
    let centers: Vec<Vec<f64>> = medians
        .iter()
        .map(|&m| candidates[m].values().to_vec())
        .collect();
    let assignment = assign(d, &centers);
    Ok(ClusteringResult {
        centers,
        assignment,
    })
}
