//! Domain types shared by every module: privacy parameters, records,
//! multiset databases and deterministic random streams.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// An `(epsilon, delta)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return invalid(format!("epsilon must be >= 0, got {epsilon}"));
        }
        if !(0.0..=1.0).contains(&delta) {
            return invalid(format!("delta must lie in [0, 1], got {delta}"));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn pure(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, 0.0)
    }

    /// True when `self` is at least as strong a guarantee as `other` in both coordinates.
    pub fn dominates(&self, other: &PrivacyParams) -> bool {
        self.epsilon <= other.epsilon && self.delta <= other.delta
    }
}

/// Closed interval of admissible values for one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueBounds {
    pub lower: f64,
    pub upper: f64,
}

impl ValueBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return invalid(format!("bounds need lower < upper, got [{lower}, {upper}]"));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    /// Largest absolute value inside the interval.
    pub fn max_abs(&self) -> f64 {
        self.lower.abs().max(self.upper.abs())
    }
}

/// A point of the data universe. Equality is exact coordinate equality and
/// ordering is lexicographic under `f64::total_cmp`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record(pub Vec<f64>);

impl Record {
    pub fn new(values: Vec<f64>) -> Self {
        Record(values)
    }

    pub fn scalar(v: f64) -> Self {
        Record(vec![v])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl PartialEq for Record {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Record {}

impl PartialOrd for Record {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Record {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl Hash for Record {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for v in &self.0 {
            v.to_bits().hash(state);
        }
        self.0.len().hash(state);
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// A finite multiset of records with per-dimension bounds.
///
/// Records are kept in the order they were supplied so that callers can
/// address individual occurrences; comparisons and hashing use the canonical
/// (sorted) multiset.
#[derive(Debug, Clone)]
pub struct Database {
    records: Vec<Record>,
    bounds: Vec<ValueBounds>,
}

impl Database {
    pub fn new(records: Vec<Record>, bounds: Vec<ValueBounds>) -> Result<Self> {
        if bounds.is_empty() {
            return invalid("a database needs at least one dimension");
        }
        for r in &records {
            check_record(r, &bounds)?;
        }
        Ok(Self { records, bounds })
    }

    pub fn empty(bounds: Vec<ValueBounds>) -> Result<Self> {
        Self::new(Vec::new(), bounds)
    }

    /// One-dimensional database from raw values.
    pub fn from_values(values: &[f64], bounds: ValueBounds) -> Result<Self> {
        Self::new(values.iter().map(|&v| Record::scalar(v)).collect(), vec![bounds])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn bounds(&self) -> &[ValueBounds] {
        &self.bounds
    }

    /// Values of one coordinate, in occurrence order.
    pub fn column(&self, dim: usize) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(move |r| r.0[dim])
    }

    pub fn sum(&self, dim: usize) -> f64 {
        self.column(dim).sum()
    }

    pub fn mean(&self, dim: usize) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        Ok(self.sum(dim) / self.len() as f64)
    }

    /// Records sorted in canonical order.
    pub fn canonical(&self) -> Vec<Record> {
        let mut v = self.records.clone();
        v.sort();
        v
    }

    /// Distinct records with their multiplicities, in canonical order.
    pub fn multiplicities(&self) -> Vec<(Record, usize)> {
        let mut out: Vec<(Record, usize)> = Vec::new();
        for r in self.canonical() {
            match out.last_mut() {
                Some((last, c)) if *last == r => *c += 1,
                _ => out.push((r, 1)),
            }
        }
        out
    }

    pub fn count_of(&self, r: &Record) -> usize {
        self.records.iter().filter(|x| *x == r).count()
    }

    /// Copy with `r` appended as the last occurrence.
    pub fn with_record(&self, r: Record) -> Result<Database> {
        check_record(&r, &self.bounds)?;
        let mut records = self.records.clone();
        records.push(r);
        Ok(Database {
            records,
            bounds: self.bounds.clone(),
        })
    }

    /// Copy with the last occurrence of `r` removed, if any.
    pub fn without_record(&self, r: &Record) -> Option<Database> {
        let idx = self.records.iter().rposition(|x| x == r)?;
        let mut records = self.records.clone();
        records.remove(idx);
        Some(Database {
            records,
            bounds: self.bounds.clone(),
        })
    }

    /// Sub-multiset keeping the occurrences for which `keep` is true.
    pub fn filter_occurrences(&self, mut keep: impl FnMut(usize, &Record) -> bool) -> Database {
        let records = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| keep(*i, r))
            .map(|(_, r)| r.clone())
            .collect();
        Database {
            records,
            bounds: self.bounds.clone(),
        }
    }

    /// Sub-multiset selected by a bitmask over occurrence indices.
    pub fn select_mask(&self, mask: u64) -> Database {
        self.filter_occurrences(|i, _| mask >> i & 1 == 1)
    }

    /// Same records, sorted canonically.
    pub fn canonicalized(&self) -> Database {
        Database {
            records: self.canonical(),
            bounds: self.bounds.clone(),
        }
    }

    /// Multiset inclusion.
    pub fn is_submultiset_of(&self, other: &Database) -> bool {
        let a = self.canonical();
        let b = other.canonical();
        let mut j = 0;
        for r in &a {
            while j < b.len() && b[j] < *r {
                j += 1;
            }
            if j == b.len() || b[j] != *r {
                return false;
            }
            j += 1;
        }
        true
    }

    fn bounds_cmp(&self, other: &Database) -> Ordering {
        let key = |b: &ValueBounds| (b.lower.to_bits(), b.upper.to_bits());
        self.bounds
            .iter()
            .map(key)
            .cmp(other.bounds.iter().map(key))
    }
}

fn check_record(r: &Record, bounds: &[ValueBounds]) -> Result<()> {
    if r.dim() != bounds.len() {
        return Err(Error::DimensionMismatch {
            expected: bounds.len(),
            found: r.dim(),
        });
    }
    for (dim, (&v, b)) in r.0.iter().zip(bounds).enumerate() {
        if !b.contains(v) {
            return Err(Error::OutOfBounds {
                dim,
                value: v,
                lower: b.lower,
                upper: b.upper,
            });
        }
    }
    Ok(())
}

impl PartialEq for Database {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Database {}

impl PartialOrd for Database {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Database {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical()
            .cmp(&other.canonical())
            .then_with(|| self.bounds_cmp(other))
    }
}

impl Hash for Database {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.canonical().hash(state);
    }
}

impl fmt::Display for Database {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, r) in self.canonical().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, "}}")
    }
}

/// Size of the multiset symmetric difference of two databases.
pub fn symmetric_difference_size(d1: &Database, d2: &Database) -> Result<usize> {
    if d1.dim() != d2.dim() {
        return Err(Error::DimensionMismatch {
            expected: d1.dim(),
            found: d2.dim(),
        });
    }
    let a = d1.canonical();
    let b = d2.canonical();
    let (mut i, mut j, mut diff) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Equal => {
                i += 1;
                j += 1;
            }
            Ordering::Less => {
                diff += 1;
                i += 1;
            }
            Ordering::Greater => {
                diff += 1;
                j += 1;
            }
        }
    }
    Ok(diff + (a.len() - i) + (b.len() - j))
}

/// All unbounded neighbors of `d`: one occurrence of each distinct record
/// removed, then each universe record added. Results are canonicalized and
/// de-duplicated as multisets.
pub fn enumerate_unbounded_neighbors(d: &Database, universe: &[Record]) -> Result<Vec<Database>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (r, _) in d.multiplicities() {
        let n = d.without_record(&r).expect("record present").canonicalized();
        if seen.insert(n.clone()) {
            out.push(n);
        }
    }
    for r in universe {
        let n = d.with_record(r.clone())?.canonicalized();
        if seen.insert(n.clone()) {
            out.push(n);
        }
    }
    Ok(out)
}

/// Generator used throughout the crate.
pub type StreamRng = ChaCha20Rng;

/// A reproducible random stream addressed by a master seed and a path of labels.
///
/// The generator seed is the SHA-256 digest of the master seed and the
/// length-prefixed labels, so distinct paths give unrelated streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomStream {
    pub master_seed: u64,
    pub path: Vec<String>,
}

impl RandomStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
        }
    }

    pub fn child(&self, label: impl fmt::Display) -> RandomStream {
        let mut path = self.path.clone();
        path.push(label.to_string());
        RandomStream {
            master_seed: self.master_seed,
            path,
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut h = Sha256::new();
        h.update(self.master_seed.to_le_bytes());
        for label in &self.path {
            h.update((label.len() as u64).to_le_bytes());
            h.update(label.as_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(seed)
    }
}
