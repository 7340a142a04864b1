//! Data loading, utility metrics, confidence intervals and the grid runners
//! that compare a mechanism with and without sampling or suppression.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal, StudentsT};

use crate::accounting::{calibrate_sampling, calibrate_suppression, MMParams};
use crate::domain::{Database, PrivacyParams, RandomStream, Record, ValueBounds};
use crate::error::{invalid, Error, Result};
use crate::mechanisms::{
    compute_mode_from_histogram, dp_kmedian, dp_lloyd, integer_histogram, nearest_center,
    noisy_average_stats, squared_distance, MechanismKind, ModeVariant, NoiseKind,
};
use crate::suppression::{average_distances, DistanceFn};

// ---------------------------------------------------------------------------
// Data ingestion

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads numeric columns by header name. Rows are numbered from 1 for the
/// first data row.
pub fn load_columns(path: &Path, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    if columns.is_empty() {
        return invalid("no columns requested");
    }
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::Data(format!("missing column {c:?} in {}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        for (j, &k) in idx.iter().enumerate() {
            let field = rec
                .get(k)
                .ok_or_else(|| Error::Data(format!("row {row}: missing field {:?}", columns[j])))?;
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!("row {row}: cannot parse {field:?} in column {:?}", columns[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {row}: non-finite value in {:?}", columns[j])));
            }
            out[j].push(v);
        }
    }
    Ok(out)
}

/// Loads one column as a 1-dim database, rejecting values outside `bounds`.
pub fn load_column(path: &Path, column: &str, bounds: ValueBounds) -> Result<Database> {
    let values = load_columns(path, &[column])?.remove(0);
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !bounds.contains(**v)) {
        return Err(Error::Data(format!(
            "row {}: value {v} in column {column:?} outside [{}, {}]",
            i + 1,
            bounds.lower,
            bounds.upper
        )));
    }
    Database::from_values(&values, bounds)
}

/// Loads several columns, min-max normalizing each to `[-1, 1]`.
pub fn load_normalized(path: &Path, columns: &[&str]) -> Result<Database> {
    let cols = load_columns(path, columns)?;
    let n = cols[0].len();
    let scaled: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            c.iter()
                .map(|v| if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let records = (0..n)
        .map(|i| Record::new(scaled.iter().map(|c| c[i]).collect()))
        .collect();
    let unit = ValueBounds::new(-1.0, 1.0)?;
    Database::new(records, vec![unit; columns.len()])
}

/// Sensitivity bounds of the bundled fixture columns.
pub fn known_bounds(column: &str) -> Option<ValueBounds> {
    let (lo, hi) = match column {
        "age" | "Age" => (0.0, 125.0),
        "hours-per-week" => (0.0, 100.0),
        "FEDTAX" => (0.0, 31_889.0),
        "FICA" => (0.0, 11_890.0),
        "Education" => (1.0, 10.0),
        _ => return None,
    };
    ValueBounds::new(lo, hi).ok()
}

/// The six numeric Adult columns used for clustering.
pub const ADULT_NUMERIC_COLUMNS: [&str; 6] = [
    "age",
    "fnlwgt",
    "education-num",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
];

// ---------------------------------------------------------------------------
// Synthetic clusters

pub const SYNTHETIC_POINTS: usize = 100;
pub const SYNTHETIC_CENTERS: usize = 4;
pub const SYNTHETIC_SIGMA: f64 = 10.0;
pub const SYNTHETIC_GRID: i64 = 100;

/// A synthetic 2-dim clustering database and its candidate medians.
#[derive(Debug, Clone)]
pub struct SyntheticClusters {
    /// Accumulation points in `{10..90}^2`.
    pub centers: Vec<[i64; 2]>,
    /// Points before normalization, in `{1..100}^2`.
    pub raw: Vec<[i64; 2]>,
    pub db: Database,
    /// Every grid point of `{1..100}^2`, normalized.
    pub candidates: Vec<Record>,
}

/// Maps a grid coordinate in `1..=100` so that the grid diameter is 1.
pub fn normalize_grid_coordinate(v: i64) -> f64 {
    (v - 1) as f64 / ((SYNTHETIC_GRID - 1) as f64 * SQRT_2)
}

pub fn gen_synthetic_clusters(seed: u64) -> SyntheticClusters {
    let mut rng = RandomStream::new(seed).child("synthetic-clusters").rng();
    let centers: Vec<[i64; 2]> = (0..SYNTHETIC_CENTERS)
        .map(|_| [rng.random_range(10..=90), rng.random_range(10..=90)])
        .collect();
    let noise = Normal::new(0.0, SYNTHETIC_SIGMA).expect("valid sigma");
    let raw: Vec<[i64; 2]> = (0..SYNTHETIC_POINTS)
        .map(|_| {
            let c = centers[rng.random_range(0..SYNTHETIC_CENTERS)];
            c.map(|x| ((x as f64 + noise.sample(&mut rng)).round() as i64).clamp(1, SYNTHETIC_GRID))
        })
        .collect();
    let to_record = |p: [i64; 2]| {
        Record::new(vec![
            normalize_grid_coordinate(p[0]),
            normalize_grid_coordinate(p[1]),
        ])
    };
    let b = ValueBounds::new(0.0, normalize_grid_coordinate(SYNTHETIC_GRID)).expect("valid bounds");
    let db = Database::new(raw.iter().map(|&p| to_record(p)).collect(), vec![b, b])
        .expect("normalized points lie in bounds");
    let candidates = (1..=SYNTHETIC_GRID)
        .flat_map(|x| (1..=SYNTHETIC_GRID).map(move |y| [x, y]))
        .map(to_record)
        .collect();
    SyntheticClusters {
        centers,
        raw,
        db,
        candidates,
    }
}

// ---------------------------------------------------------------------------
// Metrics and intervals

/// Mean percent error.
pub fn metric_mpe(true_mean: f64, noisy_mean: f64) -> Result<f64> {
    if true_mean == 0.0 {
        return invalid("MPE is undefined for a zero true mean");
    }
    Ok(100.0 * (noisy_mean - true_mean).abs() / true_mean.abs())
}

/// Fraction of outputs different from the true mode.
pub fn metric_mode_error(outputs: &[f64], true_mode: f64) -> Result<f64> {
    if outputs.is_empty() {
        return invalid("no outputs");
    }
    let wrong = outputs.iter().filter(|&&o| o != true_mode).count();
    Ok(wrong as f64 / outputs.len() as f64)
}

/// Average L2 distance of every record to its nearest median.
pub fn metric_kmedian_cost(d: &Database, medians: &[Vec<f64>]) -> Result<f64> {
    check_centers(d, medians)?;
    let total: f64 = d
        .records()
        .iter()
        .map(|r| {
            let c = &medians[nearest_center(r.values(), medians)];
            squared_distance(r.values(), c).sqrt()
        })
        .sum();
    Ok(total / d.len() as f64)
}

/// Normalized intracluster variance: average squared L2 distance of every
/// record to its assigned (nearest) center.
pub fn metric_nicv(d: &Database, centers: &[Vec<f64>]) -> Result<f64> {
    check_centers(d, centers)?;
    let total: f64 = d
        .records()
        .iter()
        .map(|r| squared_distance(r.values(), &centers[nearest_center(r.values(), centers)]))
        .sum();
    Ok(total / d.len() as f64)
}

fn check_centers(d: &Database, centers: &[Vec<f64>]) -> Result<()> {
    if centers.is_empty() {
        return invalid("empty center list");
    }
    if d.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if let Some(c) = centers.iter().find(|c| c.len() != d.dim()) {
        return Err(Error::DimensionMismatch {
            expected: d.dim(),
            found: c.len(),
        });
    }
    Ok(())
}

/// Most frequent value of a 1-dim database; the lowest value wins ties.
pub fn true_mode(d: &Database) -> Result<f64> {
    if d.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: d.dim(),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    for (r, c) in d.multiplicities() {
        let v = r.values()[0];
        best = match best {
            Some((bv, bc)) if bc > c || (bc == c && bv <= v) => Some((bv, bc)),
            _ => Some((v, c)),
        };
    }
    best.map(|(v, _)| v).ok_or(Error::EmptyDatabase)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("confidence level must lie in (0, 1), got {level}"));
    }
    Ok(())
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if n == 0 {
        return invalid("Wilson interval needs n > 0");
    }
    if successes > n {
        return invalid(format!("successes {successes} exceed n {n}"));
    }
    let z = StdNormal::standard().inverse_cdf(0.5 + level / 2.0);
    let nf = n as f64;
    let phat = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (phat + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (phat * (1.0 - phat) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

/// Sample mean with a Student-t interval. A single value gives a
/// degenerate interval.
pub fn normal_ci(values: &[f64], level: f64) -> Result<(f64, f64, f64)> {
    check_level(level)?;
    if values.is_empty() {
        return invalid("no values");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, mean, mean));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * (var / n).sqrt();
    Ok((mean, mean - half, mean + half))
}

// ---------------------------------------------------------------------------
// Experiment configuration and rows

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Plain,
    Preprocessed,
    PreprocessedRecalibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UtilityKind {
    MPE,
    ModeError,
    KMedianCost,
    NICV,
}

impl UtilityKind {
    pub fn for_mechanism(kind: MechanismKind) -> Self {
        match kind {
            MechanismKind::NoisyAverage => UtilityKind::MPE,
            MechanismKind::Rnm | MechanismKind::ExpMechMode => UtilityKind::ModeError,
            MechanismKind::KMedian => UtilityKind::KMedianCost,
            MechanismKind::DpLloyd => UtilityKind::NICV,
        }
    }
}

/// How the target delta is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeltaRule {
    Zero,
    /// `|D|^-2`.
    InverseSquareSize,
    Fixed(f64),
}

impl DeltaRule {
    pub fn for_noise(noise: NoiseKind) -> Self {
        match noise {
            NoiseKind::Gaussian => DeltaRule::InverseSquareSize,
            _ => DeltaRule::Zero,
        }
    }

    pub fn resolve(&self, n: usize) -> f64 {
        match *self {
            DeltaRule::Zero => 0.0,
            DeltaRule::InverseSquareSize => {
                let n = n.max(1) as f64;
                1.0 / (n * n)
            }
            DeltaRule::Fixed(d) => d,
        }
    }
}

/// Where the experiment data comes from.
#[derive(Debug, Clone)]
pub enum DatasetSpec {
    /// One CSV column as a 1-dim database.
    Column {
        name: String,
        path: PathBuf,
        column: String,
        bounds: ValueBounds,
    },
    /// Several CSV columns min-max normalized to `[-1, 1]`.
    Normalized {
        name: String,
        path: PathBuf,
        columns: Vec<String>,
    },
    /// Synthetic 2-dim clusters with their candidate grid.
    Synthetic { seed: u64 },
    InMemory {
        name: String,
        column: String,
        db: Database,
        candidates: Option<Vec<Record>>,
    },
}

/// A dataset ready for the runners.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: String,
    pub column: String,
    pub db: Database,
    pub candidates: Option<Vec<Record>>,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<LoadedData> {
        Ok(match self {
            DatasetSpec::Column {
                name,
                path,
                column,
                bounds,
            } => LoadedData {
                dataset: name.clone(),
                column: column.clone(),
                db: load_column(path, column, *bounds)?,
                candidates: None,
            },
            DatasetSpec::Normalized {
                name,
                path,
                columns,
            } => {
                let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
                LoadedData {
                    dataset: name.clone(),
                    column: columns.join("+"),
                    db: load_normalized(path, &cols)?,
                    candidates: None,
                }
            }
            DatasetSpec::Synthetic { seed } => {
                let s = gen_synthetic_clusters(*seed);
                LoadedData {
                    dataset: format!("synthetic-{seed}"),
                    column: "x+y".into(),
                    db: s.db,
                    candidates: Some(s.candidates),
                }
            }
            DatasetSpec::InMemory {
                name,
                column,
                db,
                candidates,
            } => LoadedData {
                dataset: name.clone(),
                column: column.clone(),
                db: db.clone(),
                candidates: candidates.clone(),
            },
        })
    }
}

/// Repetitions per cell at scale 1.
pub fn default_reps(kind: MechanismKind) -> usize {
    match kind {
        MechanismKind::NoisyAverage | MechanismKind::DpLloyd => 500,
        MechanismKind::Rnm | MechanismKind::ExpMechMode => 2000,
        MechanismKind::KMedian => 20,
    }
}

pub const DEFAULT_SCALE: f64 = 0.2;
pub const DEFAULT_EPSILONS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const CI_LEVEL: f64 = 0.95;

/// `{0.01, ..., 0.99}`.
pub fn default_p_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// `{0.1, ..., 0.9}`.
pub fn default_mm_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub mechanism: MechanismKind,
    pub noise: NoiseKind,
    pub k: usize,
    pub iterations: usize,
    pub epsilons: Vec<f64>,
    pub delta_rule: DeltaRule,
    /// Keep probabilities for the sampling experiment.
    pub p_grid: Vec<f64>,
    /// Values taken by both `m` and `M` in the suppression experiment.
    pub mm_grid: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub recalibrate: bool,
}

impl ExperimentConfig {
    /// Full-scale defaults for a mechanism.
    pub fn new(dataset: DatasetSpec, mechanism: MechanismKind, noise: NoiseKind) -> Self {
        let (k, iterations) = match mechanism {
            MechanismKind::DpLloyd => (5, crate::mechanisms::DEFAULT_LLOYD_ITERATIONS),
            MechanismKind::KMedian => (SYNTHETIC_CENTERS, crate::mechanisms::DEFAULT_KMEDIAN_ITERATIONS),
            _ => (1, 1),
        };
        Self {
            dataset,
            mechanism,
            noise,
            k,
            iterations,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            delta_rule: DeltaRule::for_noise(noise),
            p_grid: default_p_grid(),
            mm_grid: default_mm_grid(),
            reps: default_reps(mechanism),
            seed: 0,
            recalibrate: true,
        }
    }

    /// Scales the default repetition count, keeping at least one.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.reps = ((default_reps(self.mechanism) as f64 * scale).round() as usize).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return invalid("reps must be positive");
        }
        if self.k == 0 || self.iterations == 0 {
            return invalid("k and iterations must be positive");
        }
        if self.epsilons.is_empty() {
            return invalid("empty epsilon grid");
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return invalid(format!("epsilon must be finite and > 0, got {e}"));
        }
        if let Some(p) = self.p_grid.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return invalid(format!("keep probability must lie in (0, 1], got {p}"));
        }
        if let Some(v) = self.mm_grid.iter().find(|v| !(**v >= 0.0 && **v < 1.0)) {
            return invalid(format!("m and M must lie in [0, 1), got {v}"));
        }
        let uses_noise = matches!(
            self.mechanism,
            MechanismKind::NoisyAverage | MechanismKind::Rnm | MechanismKind::DpLloyd
        );
        if uses_noise && self.noise == NoiseKind::Gaussian && self.delta_rule == DeltaRule::Zero {
            return invalid("Gaussian noise requires a positive delta");
        }
        if self.mechanism == MechanismKind::NoisyAverage && self.noise == NoiseKind::Exponential {
            return invalid("noisy average supports Laplace or Gaussian noise");
        }
        Ok(())
    }
}

/// Utility statistics of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub dataset: String,
    pub column: String,
    pub mechanism: MechanismKind,
    pub noise: NoiseKind,
    /// Target privacy of the cell.
    pub epsilon: f64,
    pub delta: f64,
    pub p: Option<f64>,
    pub m: Option<f64>,
    #[serde(rename = "M")]
    pub big_m: Option<f64>,
    pub variant: Variant,
    pub metric: UtilityKind,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub reps: usize,
    pub infeasible: bool,
}

// ---------------------------------------------------------------------------
// Runners

#[derive(Debug, Clone)]
struct ScalarData {
    values: Vec<f64>,
    counts: Vec<u64>,
    max_abs: f64,
    true_mean: f64,
    /// Histogram layout for the mode mechanisms.
    mode: Option<ModeLayout>,
}

#[derive(Debug, Clone)]
struct ModeLayout {
    lower: i64,
    bins: usize,
    bin_of_group: Vec<usize>,
    true_mode: f64,
}

#[derive(Debug, Clone)]
enum Keep {
    All,
    /// Keep probability per unit (distinct value for scalar data, record
    /// occurrence otherwise).
    Probs(Vec<f64>),
}

struct Workload<'a> {
    cfg: &'a ExperimentConfig,
    data: LoadedData,
    scalar: Option<ScalarData>,
    delta: f64,
}

impl<'a> Workload<'a> {
    fn prepare(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.dataset.load()?;
        if data.db.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let scalar = match cfg.mechanism {
            MechanismKind::NoisyAverage | MechanismKind::Rnm | MechanismKind::ExpMechMode => {
                if data.db.dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        found: data.db.dim(),
                    });
                }
                let groups = data.db.multiplicities();
                let values: Vec<f64> = groups.iter().map(|(r, _)| r.values()[0]).collect();
                let counts: Vec<u64> = groups.iter().map(|(_, c)| *c as u64).collect();
                let mode = if cfg.mechanism == MechanismKind::NoisyAverage {
                    None
                } else {
                    let (lower, hist) = integer_histogram(&data.db)?;
                    Some(ModeLayout {
                        lower,
                        bins: hist.len(),
                        bin_of_group: values.iter().map(|v| (*v as i64 - lower) as usize).collect(),
                        true_mode: true_mode(&data.db)?,
                    })
                };
                let true_mean = data.db.mean(0)?;
                if cfg.mechanism == MechanismKind::NoisyAverage && true_mean == 0.0 {
                    return invalid("MPE needs a nonzero true mean");
                }
                Some(ScalarData {
                    values,
                    counts,
                    max_abs: data.db.bounds()[0].max_abs(),
                    true_mean,
                    mode,
                })
            }
            MechanismKind::DpLloyd => None,
            MechanismKind::KMedian => {
                if data.candidates.is_none() {
                    return invalid("k-median needs a candidate set");
                }
                None
            }
        };
        let delta = cfg.delta_rule.resolve(data.db.len());
        Ok(Self {
            cfg,
            data,
            scalar,
            delta,
        })
    }

    fn units(&self) -> usize {
        match &self.scalar {
            Some(s) => s.values.len(),
            None => self.data.db.len(),
        }
    }

    fn base_distance(&self) -> DistanceFn {
        let bounds = self.data.db.bounds();
        match self.cfg.mechanism {
            MechanismKind::NoisyAverage => DistanceFn::abs_scaled(bounds[0]),
            MechanismKind::Rnm | MechanismKind::ExpMechMode => DistanceFn::Discrete,
            MechanismKind::DpLloyd | MechanismKind::KMedian => DistanceFn::l2_scaled(bounds),
        }
    }

    /// Average base distance per unit.
    fn average_distances(&self) -> Vec<f64> {
        let dist = self.base_distance();
        match &self.scalar {
            Some(s) => {
                let n = self.data.db.len() as f64;
                let recs: Vec<Record> = s.values.iter().map(|v| Record::scalar(*v)).collect();
                recs.par_iter()
                    .map(|x| {
                        recs.iter()
                            .zip(&s.counts)
                            .map(|(y, c)| *c as f64 * dist.eval(x, y))
                            .sum::<f64>()
                            / n
                    })
                    .collect()
            }
            None => average_distances(&self.data.db, &dist),
        }
    }

    fn run_rep<R: Rng>(&self, params: PrivacyParams, keep: &Keep, rng: &mut R) -> Result<f64> {
        let cfg = self.cfg;
        if let Some(s) = &self.scalar {
            let kept: Vec<u64> = match keep {
                Keep::All => s.counts.clone(),
                Keep::Probs(q) => s
                    .counts
                    .iter()
                    .zip(q)
                    .map(|(&n, &q)| binomial(n, q, rng))
                    .collect::<Result<_>>()?,
            };
            return match &s.mode {
                None => {
                    let sum: f64 = s.values.iter().zip(&kept).map(|(v, c)| v * *c as f64).sum();
                    let count: u64 = kept.iter().sum();
                    let noisy =
                        noisy_average_stats(sum, count as f64, s.max_abs, params, cfg.noise, rng)?;
                    metric_mpe(s.true_mean, noisy)
                }
                Some(layout) => {
                    let mut hist = vec![0.0; layout.bins];
                    for (&b, &c) in layout.bin_of_group.iter().zip(&kept) {
                        hist[b] += c as f64;
                    }
                    let variant = match cfg.mechanism {
                        MechanismKind::Rnm => ModeVariant::Rnm(cfg.noise),
                        _ => ModeVariant::ExpMech,
                    };
                    let out = compute_mode_from_histogram(layout.lower, &hist, variant, params, rng)?;
                    Ok(if out == layout.true_mode { 0.0 } else { 1.0 })
                }
            };
        }
        let db = &self.data.db;
        let input = match keep {
            Keep::All => db.clone(),
            Keep::Probs(q) => db.filter_occurrences(|i, _| rng.random::<f64>() < q[i]),
        };
        match cfg.mechanism {
            MechanismKind::DpLloyd => {
                let res = dp_lloyd(&input, cfg.k, params, cfg.iterations, cfg.noise, rng)?;
                metric_nicv(db, &res.centers)
            }
            MechanismKind::KMedian => {
                let candidates = self.data.candidates.as_deref().unwrap_or_default();
                let res = dp_kmedian(&input, candidates, cfg.k, params, cfg.iterations, rng)?;
                metric_kmedian_cost(db, &res.centers)
            }
            _ => unreachable!("scalar mechanisms handled above"),
        }
    }

    fn row(&self, cell: &Cell) -> ExperimentRow {
        ExperimentRow {
            dataset: self.data.dataset.clone(),
            column: self.data.column.clone(),
            mechanism: self.cfg.mechanism,
            noise: self.cfg.noise,
            epsilon: cell.epsilon,
            delta: self.delta,
            p: cell.p,
            m: cell.mm.map(|x| x.m),
            big_m: cell.mm.map(|x| x.big_m),
            variant: cell.variant,
            metric: UtilityKind::for_mechanism(self.cfg.mechanism),
            mean: None,
            ci_low: None,
            ci_high: None,
            reps: 0,
            infeasible: false,
        }
    }

    fn stream(&self, cell: &Cell) -> RandomStream {
        let coords = match (cell.p, cell.mm) {
            (Some(p), _) => format!("p={p}"),
            (None, Some(mm)) => format!("m={},M={}", mm.m, mm.big_m),
            (None, None) => "none".to_string(),
        };
        RandomStream::new(self.cfg.seed)
            .child(&self.data.dataset)
            .child(&self.data.column)
            .child(format!("{:?}/{:?}", self.cfg.mechanism, self.cfg.noise))
            .child(format!("eps={}", cell.epsilon))
            .child(format!("{:?}", cell.variant))
            .child(coords)
    }

    fn run_cell(&self, cell: &Cell) -> Result<ExperimentRow> {
        let mut row = self.row(cell);
        let Some(params) = cell.params else {
            row.infeasible = true;
            return Ok(row);
        };
        let keep = match &cell.keep {
            CellKeep::All => Keep::All,
            CellKeep::Uniform(p) => Keep::Probs(vec![*p; self.units()]),
            CellKeep::Scores { mm, avg } => Keep::Probs(
                avg.iter()
                    .map(|a| (1.0 - (mm.m + (mm.big_m - mm.m) * a)).clamp(0.0, 1.0))
                    .collect(),
            ),
        };
        let stream = self.stream(cell);
        let utilities: Vec<f64> = (0..self.cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = stream.child(rep).rng();
                self.run_rep(params, &keep, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (mean, lo, hi) = if row.metric == UtilityKind::ModeError {
            let failures = utilities.iter().filter(|u| **u > 0.5).count() as u64;
            let n = utilities.len() as u64;
            let (lo, hi) = wilson_ci(failures, n, CI_LEVEL)?;
            (failures as f64 / n as f64, lo, hi)
        } else {
            normal_ci(&utilities, CI_LEVEL)?
        };
        row.mean = Some(mean);
        row.ci_low = Some(lo);
        row.ci_high = Some(hi);
        row.reps = utilities.len();
        Ok(row)
    }
}

fn binomial<R: Rng>(n: u64, p: f64, rng: &mut R) -> Result<u64> {
    if p >= 1.0 {
        return Ok(n);
    }
    if p <= 0.0 || n == 0 {
        return Ok(0);
    }
    Binomial::new(n, p)
        .map(|b| b.sample(rng))
        .map_err(|e| Error::InvalidParameter(e.to_string()))
}

#[derive(Debug, Clone)]
enum CellKeep {
    All,
    Uniform(f64),
    Scores { mm: MMParams, avg: std::sync::Arc<Vec<f64>> },
}

#[derive(Debug, Clone)]
struct Cell {
    epsilon: f64,
    p: Option<f64>,
    mm: Option<MMParams>,
    variant: Variant,
    /// Budget handed to the mechanism; `None` marks an infeasible cell.
    params: Option<PrivacyParams>,
    keep: CellKeep,
}

fn plain_cell(epsilon: f64, delta: f64) -> Result<Cell> {
    Ok(Cell {
        epsilon,
        p: None,
        mm: None,
        variant: Variant::Plain,
        params: Some(PrivacyParams::new(epsilon, delta)?),
        keep: CellKeep::All,
    })
}

fn preprocessed_variant(recalibrate: bool) -> Variant {
    if recalibrate {
        Variant::PreprocessedRecalibrated
    } else {
        Variant::Preprocessed
    }
}

/// Calibrations that fail, or that leave no budget for the mechanism, mark
/// the cell infeasible.
fn feasible(r: Result<PrivacyParams>) -> Result<Option<PrivacyParams>> {
    match r {
        Ok(p) if p.epsilon > 0.0 => Ok(Some(p)),
        Ok(_) => Ok(None),
        Err(Error::Infeasible(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_cells(w: &Workload, cells: &[Cell]) -> Result<Vec<ExperimentRow>> {
    cells.par_iter().map(|c| w.run_cell(c)).collect()
}

/// Plain mechanism against the mechanism preceded by Poisson sampling, for
/// every epsilon and keep probability. Recalibrated cells run the mechanism
/// at the budget whose amplified value meets the target.
pub fn run_sampling_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    let w = Workload::prepare(cfg)?;
    let mut cells = Vec::new();
    for &eps in &cfg.epsilons {
        let target = PrivacyParams::new(eps, w.delta)?;
        cells.push(plain_cell(eps, w.delta)?);
        for &p in &cfg.p_grid {
            let params = if cfg.recalibrate {
                feasible(calibrate_sampling(target, p))?
            } else {
                Some(target)
            };
            cells.push(Cell {
                epsilon: eps,
                p: Some(p),
                mm: None,
                variant: preprocessed_variant(cfg.recalibrate),
                params,
                keep: CellKeep::Uniform(p),
            });
        }
    }
    run_cells(&w, &cells)
}

/// Plain mechanism against the mechanism preceded by outlier-score
/// suppression, for every epsilon and `(m, M)` with `m <= M`.
pub fn run_suppression_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    let w = Workload::prepare(cfg)?;
    let avg = std::sync::Arc::new(w.average_distances());
    let mut cells = Vec::new();
    for &eps in &cfg.epsilons {
        let target = PrivacyParams::new(eps, w.delta)?;
        cells.push(plain_cell(eps, w.delta)?);
        for &m in &cfg.mm_grid {
            for &big_m in cfg.mm_grid.iter().filter(|v| **v >= m) {
                let mm = MMParams::new(m, big_m)?;
                let params = if cfg.recalibrate {
                    feasible(calibrate_suppression(target, mm))?
                } else {
                    Some(target)
                };
                cells.push(Cell {
                    epsilon: eps,
                    p: None,
                    mm: Some(mm),
                    variant: preprocessed_variant(cfg.recalibrate),
                    params,
                    keep: CellKeep::Scores {
                        mm,
                        avg: avg.clone(),
                    },
                });
            }
        }
    }
    run_cells(&w, &cells)
}

// ---------------------------------------------------------------------------
// Post-processing and output

/// `u(M, D) - u(M∘S, D)` for one preprocessed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDifference {
    pub epsilon: f64,
    pub p: Option<f64>,
    pub m: Option<f64>,
    #[serde(rename = "M")]
    pub big_m: Option<f64>,
    pub variant: Variant,
    pub difference: Option<f64>,
    /// Half-width of the difference interval, combining both half-widths in
    /// quadrature.
    pub half_width: Option<f64>,
}

/// Pairs every preprocessed row with the plain row of the same dataset,
/// mechanism and epsilon.
pub fn utility_differences(rows: &[ExperimentRow]) -> Vec<CellDifference> {
    let key = |r: &ExperimentRow| {
        (
            r.dataset.clone(),
            r.column.clone(),
            format!("{:?}/{:?}", r.mechanism, r.noise),
            r.epsilon.to_bits(),
        )
    };
    let plain: BTreeMap<_, &ExperimentRow> = rows
        .iter()
        .filter(|r| r.variant == Variant::Plain)
        .map(|r| (key(r), r))
        .collect();
    let half = |r: &ExperimentRow| match (r.ci_low, r.ci_high) {
        (Some(lo), Some(hi)) => Some((hi - lo) / 2.0),
        _ => None,
    };
    rows.iter()
        .filter(|r| r.variant != Variant::Plain)
        .map(|r| {
            let base = plain.get(&key(r));
            let difference = match (base.and_then(|b| b.mean), r.mean) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            let half_width = match (base.and_then(|b| half(b)), half(r)) {
                (Some(a), Some(b)) => Some(a.hypot(b)),
                _ => None,
            };
            CellDifference {
                epsilon: r.epsilon,
                p: r.p,
                m: r.m,
                big_m: r.big_m,
                variant: r.variant,
                difference,
                half_width,
            }
        })
        .collect()
}

/// Differences of suppression cells as `epsilon,m,M,value` CSV; infeasible
/// cells leave the value empty.
pub fn contour_csv(diffs: &[CellDifference]) -> String {
    let mut out = String::from("epsilon,m,M,value\n");
    for d in diffs {
        if let (Some(m), Some(big_m)) = (d.m, d.big_m) {
            let v = d.difference.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{m},{big_m},{v}\n", d.epsilon));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(OutputFormat::Jsonl),
            "csv" => Ok(OutputFormat::Csv),
            _ => invalid(format!("unknown format {s:?}, expected jsonl or csv")),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Jsonl => "jsonl",
            OutputFormat::Csv => "csv",
        })
    }
}

/// Writes serializable rows as JSON lines or as CSV with a header.
pub fn write_rows<T: Serialize, W: Write>(rows: &[T], format: OutputFormat, out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Data(e.to_string());
    match format {
        OutputFormat::Jsonl => {
            let mut out = out;
            for r in rows {
                let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
                writeln!(out, "{line}").map_err(io)?;
            }
            out.flush().map_err(io)
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
            }
            w.flush().map_err(io)
        }
    }
}
