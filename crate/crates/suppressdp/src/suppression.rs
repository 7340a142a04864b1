//! Sampling and suppression algorithms, bounded distances, and exact
//! subset distributions ("kernels") for small databases.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::accounting::MMParams;
use crate::domain::{Database, Record, ValueBounds};
use crate::error::{invalid, Error, Result};

type CustomDistance = Arc<dyn Fn(&Record, &Record) -> f64 + Send + Sync>;

/// A normalized metric on records with values in `[0, 1]`.
#[derive(Clone)]
pub enum DistanceFn {
    /// `|x - y| / width` on 1-dim records.
    AbsScaled { width: f64 },
    /// 0 on equal records, 1 otherwise.
    Discrete,
    /// L2 distance divided by the diameter of the bounding box.
    L2Scaled { diameter: f64 },
    Custom(CustomDistance),
}

impl fmt::Debug for DistanceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceFn::AbsScaled { width } => write!(f, "AbsScaled({width})"),
            DistanceFn::Discrete => write!(f, "Discrete"),
            DistanceFn::L2Scaled { diameter } => write!(f, "L2Scaled({diameter})"),
            DistanceFn::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl DistanceFn {
    pub fn abs_scaled(bounds: ValueBounds) -> Self {
        DistanceFn::AbsScaled {
            width: bounds.width(),
        }
    }

    pub fn l2_scaled(bounds: &[ValueBounds]) -> Self {
        let diameter = bounds.iter().map(|b| b.width() * b.width()).sum::<f64>().sqrt();
        DistanceFn::L2Scaled { diameter }
    }

    pub fn custom(f: impl Fn(&Record, &Record) -> f64 + Send + Sync + 'static) -> Self {
        DistanceFn::Custom(Arc::new(f))
    }

    pub fn eval(&self, a: &Record, b: &Record) -> f64 {
        match self {
            DistanceFn::AbsScaled { width } => ((a.0[0] - b.0[0]).abs() / width).min(1.0),
            DistanceFn::Discrete => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            DistanceFn::L2Scaled { diameter } => {
                let sq: f64 = a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum();
                (sq.sqrt() / diameter).min(1.0)
            }
            DistanceFn::Custom(f) => f(a, b),
        }
    }
}

/// The `(m, M)`-transformation `m + (M - m) d(x, y)` of a base distance.
#[derive(Debug, Clone)]
pub struct MMTransform {
    pub mm: MMParams,
    pub base: DistanceFn,
}

impl MMTransform {
    pub fn new(m: f64, big_m: f64, base: DistanceFn) -> Result<Self> {
        Ok(Self {
            mm: MMParams::new(m, big_m)?,
            base,
        })
    }

    pub fn eval(&self, a: &Record, b: &Record) -> f64 {
        self.mm.m + (self.mm.big_m - self.mm.m) * self.base.eval(a, b)
    }

    /// Maps an average base distance to the corresponding outlier score.
    pub fn score_from_average(&self, avg: f64) -> f64 {
        self.mm.m + (self.mm.big_m - self.mm.m) * avg
    }
}

/// Average distance of every record occurrence to all records of `d`,
/// itself included.
pub fn average_distances(d: &Database, dist: &DistanceFn) -> Vec<f64> {
    if d.is_empty() {
        return Vec::new();
    }
    let groups = d.multiplicities();
    let n = d.len() as f64;
    let per_group: BTreeMap<&Record, f64> = groups
        .par_iter()
        .map(|(x, _)| {
            let total: f64 = groups.iter().map(|(y, c)| *c as f64 * dist.eval(x, y)).sum();
            (x, total / n)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    d.records().iter().map(|r| per_group[r]).collect()
}

/// Outlier score `out_D(x)` per record occurrence, in insertion order.
pub fn outlier_scores(d: &Database, t: &MMTransform) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    Ok(average_distances(d, &t.base)
        .into_iter()
        .map(|a| t.score_from_average(a))
        .collect())
}

/// Deletes occurrence `i` independently with probability `delete_probs[i]`.
pub fn bernoulli_delete<R: Rng + ?Sized>(
    d: &Database,
    delete_probs: &[f64],
    rng: &mut R,
) -> Result<Database> {
    if delete_probs.len() != d.len() {
        return Err(Error::DimensionMismatch {
            expected: d.len(),
            found: delete_probs.len(),
        });
    }
    Ok(d.filter_occurrences(|i, _| rng.random::<f64>() >= delete_probs[i]))
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("{what} must lie in [0, 1], got {p}"));
    }
    Ok(())
}

/// Keeps each record occurrence independently with probability `p`.
pub fn poisson_sample<R: Rng + ?Sized>(d: &Database, p: f64, rng: &mut R) -> Result<Database> {
    check_prob(p, "keep probability")?;
    Ok(d.filter_occurrences(|_, _| rng.random::<f64>() < p))
}

/// Deletes each occurrence independently with probability equal to its
/// outlier score.
pub fn outlier_score_suppress<R: Rng + ?Sized>(
    d: &Database,
    t: &MMTransform,
    rng: &mut R,
) -> Result<Database> {
    if d.is_empty() {
        return Ok(d.clone());
    }
    bernoulli_delete(d, &outlier_scores(d, t)?, rng)
}

/// `D ∩ A`.
pub fn suppress_by_set(d: &Database, keep: impl Fn(&Record) -> bool) -> Database {
    d.filter_occurrences(|_, r| keep(r))
}

fn check_fraction(k: f64, lo_open: f64, hi: f64, closed_hi: bool, what: &str) -> Result<()> {
    let ok = k > lo_open && if closed_hi { k <= hi } else { k < hi };
    if !ok {
        return invalid(format!("{what} out of range, got {k}"));
    }
    Ok(())
}

fn avg_threshold_keep(d: &Database, k: f64, dist: &DistanceFn) -> Vec<bool> {
    average_distances(d, dist).into_iter().map(|a| a <= k).collect()
}

/// Keeps the records whose average distance to `d` is at most `k`.
pub fn suppress_by_avg_threshold(d: &Database, k: f64, dist: &DistanceFn) -> Result<Database> {
    check_fraction(k, 0.0, 1.0, false, "threshold K")?;
    let keep = avg_threshold_keep(d, k, dist);
    Ok(d.filter_occurrences(|i, _| keep[i]))
}

fn top_fraction_keep(d: &Database, fraction: f64, dist: &DistanceFn) -> Vec<bool> {
    let cut = (fraction * d.len() as f64).floor() as usize;
    if cut == 0 {
        return vec![true; d.len()];
    }
    let avgs = average_distances(d, dist);
    let mut sorted = avgs.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[cut - 1];
    avgs.into_iter().map(|a| a < threshold).collect()
}

/// Deletes the `⌊P|D|⌋` records with the highest average distance. Every
/// record tied with the cutoff value is deleted as well.
pub fn suppress_top_fraction(d: &Database, fraction: f64, dist: &DistanceFn) -> Result<Database> {
    check_fraction(fraction, 0.0, 0.5, true, "fraction P")?;
    let keep = top_fraction_keep(d, fraction, dist);
    Ok(d.filter_occurrences(|i, _| keep[i]))
}

/// A sampling or suppression algorithm.
#[derive(Clone)]
pub enum Suppressor {
    Identity,
    Poisson { keep: f64 },
    OutlierScore(MMTransform),
    BySet(Arc<dyn Fn(&Record) -> bool + Send + Sync>),
    AvgThreshold { k: f64, dist: DistanceFn },
    TopFraction { fraction: f64, dist: DistanceFn },
}

impl fmt::Debug for Suppressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Suppressor::Identity => write!(f, "Identity"),
            Suppressor::Poisson { keep } => write!(f, "Poisson({keep})"),
            Suppressor::OutlierScore(t) => write!(f, "OutlierScore({:?})", t),
            Suppressor::BySet(_) => write!(f, "BySet"),
            Suppressor::AvgThreshold { k, dist } => write!(f, "AvgThreshold({k}, {dist:?})"),
            Suppressor::TopFraction { fraction, dist } => {
                write!(f, "TopFraction({fraction}, {dist:?})")
            }
        }
    }
}

impl Suppressor {
    pub fn by_set(keep: impl Fn(&Record) -> bool + Send + Sync + 'static) -> Self {
        Suppressor::BySet(Arc::new(keep))
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            Suppressor::Identity
                | Suppressor::BySet(_)
                | Suppressor::AvgThreshold { .. }
                | Suppressor::TopFraction { .. }
        ) || matches!(self, Suppressor::Poisson { keep } if *keep == 0.0 || *keep == 1.0)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Suppressor::Poisson { keep } => check_prob(*keep, "keep probability"),
            Suppressor::AvgThreshold { k, .. } => check_fraction(*k, 0.0, 1.0, false, "threshold K"),
            Suppressor::TopFraction { fraction, .. } => {
                check_fraction(*fraction, 0.0, 0.5, true, "fraction P")
            }
            _ => Ok(()),
        }
    }

    /// Per-occurrence keep decisions for deterministic algorithms.
    pub fn deterministic_keep(&self, d: &Database) -> Result<Option<Vec<bool>>> {
        self.validate()?;
        Ok(match self {
            Suppressor::Identity => Some(vec![true; d.len()]),
            Suppressor::Poisson { keep } if *keep == 0.0 || *keep == 1.0 => {
                Some(vec![*keep == 1.0; d.len()])
            }
            Suppressor::BySet(a) => Some(d.records().iter().map(|r| a(r)).collect()),
            Suppressor::AvgThreshold { k, dist } => Some(avg_threshold_keep(d, *k, dist)),
            Suppressor::TopFraction { fraction, dist } => {
                Some(top_fraction_keep(d, *fraction, dist))
            }
            _ => None,
        })
    }

    /// Per-occurrence deletion probabilities for the independent-deletion
    /// algorithms.
    pub fn deletion_probs(&self, d: &Database) -> Result<Option<Vec<f64>>> {
        self.validate()?;
        Ok(match self {
            Suppressor::Poisson { keep } => Some(vec![1.0 - keep; d.len()]),
            Suppressor::OutlierScore(_) if d.is_empty() => Some(Vec::new()),
            Suppressor::OutlierScore(t) => Some(outlier_scores(d, t)?),
            _ => None,
        })
    }

    pub fn apply<R: Rng + ?Sized>(&self, d: &Database, rng: &mut R) -> Result<Database> {
        match self {
            Suppressor::Poisson { keep } => poisson_sample(d, *keep, rng),
            Suppressor::OutlierScore(t) => outlier_score_suppress(d, t, rng),
            _ => {
                let keep = self
                    .deterministic_keep(d)?
                    .expect("non-random suppressors have keep masks");
                Ok(d.filter_occurrences(|i, _| keep[i]))
            }
        }
    }

    /// Exact output distribution on a database of at most
    /// [`MAX_KERNEL_RECORDS`] records.
    pub fn kernel_of(&self, d: &Database) -> Result<SuppressionKernel> {
        if let Some(keep) = self.deterministic_keep(d)? {
            let mask = keep
                .iter()
                .enumerate()
                .filter(|(_, k)| **k)
                .fold(0u64, |m, (i, _)| m | (1 << i));
            return SuppressionKernel::point_mass(d.clone(), mask);
        }
        let del = self
            .deletion_probs(d)?
            .expect("random suppressors have deletion probabilities");
        let keep: Vec<f64> = del.iter().map(|q| 1.0 - q).collect();
        SuppressionKernel::from_product(d.clone(), &keep)
    }
}

/// Largest database for which kernels are materialized.
pub const MAX_KERNEL_RECORDS: usize = 20;

/// Tolerance on the total mass of a kernel.
pub const KERNEL_NORMALIZATION_TOL: f64 = 1e-9;

/// Exact distribution of `S(D)` over the sub-multisets of `D`.
///
/// Outputs are bitmasks over the occurrences of `base` in insertion order:
/// bit `i` set means occurrence `i` survives. Masks with zero probability
/// are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SuppressionKernel {
    base: Database,
    probs: BTreeMap<u64, f64>,
}

impl SuppressionKernel {
    fn check_size(d: &Database) -> Result<()> {
        if d.len() > MAX_KERNEL_RECORDS {
            return Err(Error::TooLarge {
                size: d.len(),
                limit: MAX_KERNEL_RECORDS,
            });
        }
        Ok(())
    }

    pub fn point_mass(base: Database, mask: u64) -> Result<Self> {
        Self::from_masses(base, vec![(mask, 1.0)])
    }

    /// Independent survival of occurrence `i` with probability `keep[i]`.
    pub fn from_product(base: Database, keep: &[f64]) -> Result<Self> {
        Self::check_size(&base)?;
        if keep.len() != base.len() {
            return Err(Error::DimensionMismatch {
                expected: base.len(),
                found: keep.len(),
            });
        }
        for &k in keep {
            check_prob(k, "survival probability")?;
        }
        // grow the distribution one occurrence at a time
        let mut probs: Vec<(u64, f64)> = vec![(0, 1.0)];
        for (i, &k) in keep.iter().enumerate() {
            let mut next = Vec::with_capacity(probs.len() * 2);
            for (mask, p) in probs {
                if k < 1.0 {
                    next.push((mask, p * (1.0 - k)));
                }
                if k > 0.0 {
                    next.push((mask | (1 << i), p * k));
                }
            }
            probs = next;
        }
        Ok(Self {
            base,
            probs: probs.into_iter().filter(|(_, p)| *p > 0.0).collect(),
        })
    }

    /// Builds a kernel from explicit `(mask, probability)` entries; repeated
    /// masks accumulate.
    pub fn from_masses(base: Database, entries: Vec<(u64, f64)>) -> Result<Self> {
        Self::check_size(&base)?;
        let limit = 1u64 << base.len();
        let mut probs = BTreeMap::new();
        for (mask, p) in entries {
            if mask >= limit {
                return invalid(format!("mask {mask:#b} exceeds {} records", base.len()));
            }
            if !(p >= 0.0) || !p.is_finite() {
                return invalid(format!("probability must be finite and >= 0, got {p}"));
            }
            if p > 0.0 {
                *probs.entry(mask).or_insert(0.0) += p;
            }
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > KERNEL_NORMALIZATION_TOL {
            return Err(Error::NotNormalized(total));
        }
        Ok(Self { base, probs })
    }

    pub fn base(&self) -> &Database {
        &self.base
    }

    pub fn prob_of_mask(&self, mask: u64) -> f64 {
        self.probs.get(&mask).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.probs.iter().map(|(m, p)| (*m, *p))
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Probability that occurrence `i` survives.
    pub fn survival_prob(&self, i: usize) -> f64 {
        self.iter().filter(|(m, _)| m >> i & 1 == 1).map(|(_, p)| p).sum()
    }

    /// Probabilities aggregated over equal sub-multisets.
    pub fn by_submultiset(&self) -> BTreeMap<Database, f64> {
        let mut out = BTreeMap::new();
        for (mask, p) in self.iter() {
            *out.entry(self.base.select_mask(mask).canonicalized())
                .or_insert(0.0) += p;
        }
        out
    }
}
