//! Input file formats of the oracle subcommands.
//!
//! Kernel file: one `mask, probability` entry per line. Bit `i` of the mask
//! set means record `i` of the base database survives. Masks are decimal or
//! `0b`-prefixed binary. For the kernel of `D + y`, `y` is the last record.
//!
//! Table file: one output distribution per line, as comma-separated
//! probabilities. Line `i` (counting non-comment lines from 0) is input `i`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_mask(s: &str) -> Result<u64> {
    let s = s.trim();
    let v = match s.strip_prefix("0b") {
        Some(bits) => u64::from_str_radix(bits, 2),
        None => s.parse(),
    };
    v.with_context(|| format!("bad mask {s:?}"))
}

pub fn parse_kernel(text: &str) -> Result<Vec<(u64, f64)>> {
    content_lines(text)
        .map(|(n, line)| {
            let Some((mask, p)) = line.split_once(',') else {
                bail!("kernel line {n}: expected `mask, probability`");
            };
            let p: f64 = p
                .trim()
                .parse()
                .with_context(|| format!("kernel line {n}: bad probability"))?;
            Ok((parse_mask(mask).with_context(|| format!("kernel line {n}"))?, p))
        })
        .collect()
}

pub fn parse_tables(text: &str) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (idx, (n, line)) in content_lines(text).enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("table line {n}: bad probability"))?;
        out.insert(idx, row);
    }
    if out.len() < 2 {
        bail!("a table file needs at least two distributions");
    }
    Ok(out)
}

/// `a:b` pairs separated by commas.
pub fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let Some((a, b)) = p.split_once(':') else {
                bail!("expected a:b, got {p:?}");
            };
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}
