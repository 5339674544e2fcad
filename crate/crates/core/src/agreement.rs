//! Inter-annotator agreement for ordering answers.
//!
//! Ordinal Krippendorff's alpha is computed from a coincidence matrix in exact
//! integer arithmetic, so perfect agreement gives exactly 1. Confidence
//! intervals come from a percentile bootstrap over items.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfts::draw_rng;
use crate::qa::Task;
use crate::verify::Fraction;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub annotator_id: String,
    /// Labels in the order the annotator placed them.
    pub answer: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// How permutation answers become ordinal units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitMode {
    /// One unit per (item, candidate label); the value is the rank given to it.
    #[default]
    Slot,
    /// One unit per item; the value is the lexicographic rank of the permutation.
    Item,
}

impl std::str::FromStr for UnitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slot" => Ok(UnitMode::Slot),
            "item" => Ok(UnitMode::Item),
            _ => Err(Error::InvalidConfig(format!("unknown unit mode {s:?}"))),
        }
    }
}

fn check_permutation(r: &AnnotationRecord) -> Result<()> {
    let n = r.answer.len();
    let distinct: BTreeSet<usize> = r.answer.iter().copied().collect();
    if n == 0 || distinct.len() != n || distinct.iter().any(|&l| l == 0 || l > n) {
        return Err(Error::InvalidPermutation(format!(
            "{} by {}: {:?}",
            r.item_id, r.annotator_id, r.answer
        )));
    }
    Ok(())
}

/// Zero-based lexicographic rank of a permutation of `1..=n`.
pub fn lehmer_rank(perm: &[usize]) -> u64 {
    let n = perm.len();
    let mut rank = 0u64;
    for i in 0..n {
        let smaller_after = perm[i + 1..].iter().filter(|&&x| x < perm[i]).count() as u64;
        rank = rank * (n - i) as u64 + smaller_after;
    }
    rank
}

/// Values grouped by unit, in deterministic order. Each unit's values come
/// from distinct annotators.
pub type Units = Vec<Vec<u64>>;

/// Units per item, keyed by item id.
pub fn units_by_item(records: &[AnnotationRecord], mode: UnitMode) -> Result<BTreeMap<String, Units>> {
    let mut seen = BTreeSet::new();
    let mut per_item: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        check_permutation(r)?;
        if !seen.insert((&r.item_id, &r.annotator_id)) {
            return Err(Error::InvalidConfig(format!(
                "{} answered {} more than once",
                r.annotator_id, r.item_id
            )));
        }
        per_item.entry(&r.item_id).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (item, rs) in per_item {
        let units = match mode {
            UnitMode::Item => vec![rs.iter().map(|r| lehmer_rank(&r.answer)).collect()],
            UnitMode::Slot => {
                let width = rs.iter().map(|r| r.answer.len()).max().unwrap_or(0);
                if rs.iter().any(|r| r.answer.len() != width) {
                    return Err(Error::InvalidPermutation(format!("{item}: answers of different lengths")));
                }
                (1..=width)
                    .map(|label| {
                        rs.iter()
                            .map(|r| 1 + r.answer.iter().position(|&l| l == label).expect("checked permutation") as u64)
                            .collect()
                    })
                    .collect()
            }
        };
        out.insert(item.to_owned(), units);
    }
    Ok(out)
}

/// Ordinal alpha over `units`. Units with fewer than two values are ignored.
pub fn alpha_from_units<'a>(units: impl IntoIterator<Item = &'a Vec<u64>>) -> Result<f64> {
    let units: Vec<&Vec<u64>> = units.into_iter().filter(|u| u.len() >= 2).collect();
    if units.is_empty() {
        return Err(Error::NoCoannotatedUnits);
    }
    let values: BTreeSet<u64> = units.iter().flat_map(|u| u.iter().copied()).collect();
    let index: BTreeMap<u64, usize> = values.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let v = values.len();

    // Coincidences scaled by the lcm of all (m_u - 1) so they stay integral.
    let scale: u64 = units.iter().fold(1u64, |l, u| l.lcm(&(u.len() as u64 - 1)));
    let mut o = vec![vec![0i128; v]; v];
    for u in &units {
        let w = (scale / (u.len() as u64 - 1)) as i128;
        for (a, &x) in u.iter().enumerate() {
            for (b, &y) in u.iter().enumerate() {
                if a != b {
                    o[index[&x]][index[&y]] += w;
                }
            }
        }
    }
    // n_c: number of pairable values equal to c
    let mut nc = vec![0i128; v];
    for u in &units {
        for x in u.iter() {
            nc[index[x]] += 1;
        }
    }
    let n: i128 = nc.iter().sum();

    // 4·δ²_ck = (2·Σ_{g=c..k} n_g − n_c − n_k)²
    let delta4 = |c: usize, k: usize| -> i128 {
        let (lo, hi) = if c <= k { (c, k) } else { (k, c) };
        let span: i128 = nc[lo..=hi].iter().sum();
        let d = 2 * span - nc[c] - nc[k];
        d * d
    };

    let mut observed = BigInt::zero();
    let mut expected = BigInt::zero();
    for c in 0..v {
        for k in 0..v {
            let d = delta4(c, k);
            if d == 0 {
                continue;
            }
            observed += BigInt::from(o[c][k]) * BigInt::from(d);
            expected += BigInt::from(nc[c] * nc[k]) * BigInt::from(d);
        }
    }
    if expected.is_zero() {
        // a single value throughout: no disagreement is possible
        return Ok(1.0);
    }
    // α = 1 − (n − 1)·Σ o δ² / Σ n_c n_k δ², with o carrying the scale factor
    let num = observed * BigInt::from(n - 1);
    let den = expected * BigInt::from(scale);
    if num.is_zero() {
        return Ok(1.0);
    }
    Ok(1.0 - ratio_f64(&num, &den))
}

fn ratio_f64(num: &BigInt, den: &BigInt) -> f64 {
    // 64 fractional bits of the quotient, then a single rounding
    let q = (num << 64u32) / den;
    q.to_f64().unwrap_or(f64::INFINITY) / 2f64.powi(64)
}

pub fn krippendorff_alpha(records: &[AnnotationRecord], mode: UnitMode) -> Result<f64> {
    let by_item = units_by_item(records, mode)?;
    alpha_from_units(by_item.values().flatten())
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval of alpha over item-level resamples with replacement.
/// Resamples without any co-annotated unit are skipped.
pub fn bootstrap_ci(records: &[AnnotationRecord], mode: UnitMode, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if resamples == 0 {
        return Err(Error::InvalidConfig("resamples must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {level}")));
    }
    let by_item: Vec<Units> = units_by_item(records, mode)?.into_values().collect();
    if by_item.is_empty() {
        return Err(Error::NoCoannotatedUnits);
    }
    let mut alphas: Vec<f64> = (0..resamples as u64)
        .filter_map(|r| {
            let mut rng = draw_rng(seed, r);
            let picks: Vec<&Vec<u64>> = (0..by_item.len())
                .flat_map(|_| by_item[rng.gen_range(0..by_item.len())].iter())
                .collect();
            alpha_from_units(picks).ok()
        })
        .collect();
    if alphas.is_empty() {
        return Err(Error::NoCoannotatedUnits);
    }
    alphas.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&alphas, tail), quantile(&alphas, 1.0 - tail)))
}

/// Alpha for every annotator pair with co-annotated units, keyed `a|b`.
pub fn pairwise_alphas(records: &[AnnotationRecord], mode: UnitMode) -> Result<BTreeMap<String, f64>> {
    let annotators: BTreeSet<&str> = records.iter().map(|r| r.annotator_id.as_str()).collect();
    let annotators: Vec<&str> = annotators.into_iter().collect();
    let mut out = BTreeMap::new();
    for (i, a) in annotators.iter().enumerate() {
        for b in &annotators[i + 1..] {
            let subset: Vec<AnnotationRecord> = records
                .iter()
                .filter(|r| r.annotator_id == *a || r.annotator_id == *b)
                .cloned()
                .collect();
            match krippendorff_alpha(&subset, mode) {
                Ok(alpha) => {
                    out.insert(format!("{a}|{b}"), alpha);
                }
                Err(Error::NoCoannotatedUnits) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Share of items on which every annotator gave the same permutation.
pub fn perfect_agreement_rate(records: &[AnnotationRecord]) -> Result<Fraction> {
    let mut per_item: BTreeMap<&str, Vec<&Vec<usize>>> = BTreeMap::new();
    for r in records {
        per_item.entry(&r.item_id).or_default().push(&r.answer);
    }
    if per_item.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let counts: BTreeSet<usize> = per_item.values().map(Vec::len).collect();
    if counts.len() > 1 {
        return Err(Error::RaggedAnnotations(format!("annotation counts per item: {counts:?}")));
    }
    let unanimous = per_item.values().filter(|a| a.iter().all(|x| *x == a[0])).count();
    Ok(Fraction::new(unanimous as u64, per_item.len() as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub unit: UnitMode,
    pub items: usize,
    pub annotators: usize,
    pub alpha: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub resamples: usize,
    pub pairwise_alphas: BTreeMap<String, f64>,
    pub perfect_agreement_rate: Fraction,
}

pub fn agreement_report(records: &[AnnotationRecord], mode: UnitMode, resamples: usize, level: f64, seed: u64) -> Result<AgreementReport> {
    let alpha = krippendorff_alpha(records, mode)?;
    let (ci_low, ci_high) = bootstrap_ci(records, mode, resamples, level, seed)?;
    Ok(AgreementReport {
        unit: mode,
        items: records.iter().map(|r| &r.item_id).collect::<BTreeSet<_>>().len(),
        annotators: records.iter().map(|r| &r.annotator_id).collect::<BTreeSet<_>>().len(),
        alpha,
        ci_low,
        ci_high,
        level,
        resamples,
        pairwise_alphas: pairwise_alphas(records, mode)?,
        perfect_agreement_rate: perfect_agreement_rate(records)?,
    })
}

/// An item available for agreement sampling, with the annotator who
/// answered it in the main study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub item_id: String,
    pub task: Task,
    pub steps: usize,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IaaAssignment {
    pub item_id: String,
    pub task: Task,
    pub steps: usize,
    pub source_annotator: String,
    /// Annotators who label the item again.
    pub assigned_to: Vec<String>,
}

/// Draws `per_cell` items from every (task, length, source annotator) cell
/// and hands each to all other annotators.
pub fn stratified_iaa_sample(
    corpus: &[CorpusEntry],
    per_cell: usize,
    lengths: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<IaaAssignment>> {
    let annotators: BTreeSet<&str> = corpus.iter().map(|e| e.annotator.as_str()).collect();
    if annotators.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut cells: BTreeMap<(Task, usize, &str), Vec<&CorpusEntry>> = BTreeMap::new();
    for e in corpus {
        cells.entry((e.task, e.steps, &e.annotator)).or_default().push(e);
    }
    let mut out = Vec::new();
    let mut stream = 0u64;
    for task in Task::BOTH {
        for steps in lengths.clone() {
            for &annotator in &annotators {
                let mut pool: Vec<&CorpusEntry> = cells.get(&(task, steps, annotator)).cloned().unwrap_or_default();
                if pool.len() < per_cell {
                    return Err(Error::UnderfullCell {
                        cell: format!("task={task},steps={steps},annotator={annotator}"),
                        available: pool.len(),
                        required: per_cell,
                    });
                }
                pool.sort_by(|a, b| a.item_id.cmp(&b.item_id));
                let mut rng = draw_rng(seed, stream);
                stream += 1;
                let mut picked: Vec<&CorpusEntry> = index::sample(&mut rng, pool.len(), per_cell)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                picked.shuffle(&mut rng);
                out.extend(picked.into_iter().map(|e| IaaAssignment {
                    item_id: e.item_id.clone(),
                    task,
                    steps,
                    source_annotator: annotator.to_owned(),
                    assigned_to: annotators.iter().filter(|&&a| a != annotator).map(|a| a.to_string()).collect(),
                }));
            }
        }
    }
    Ok(out)
}
