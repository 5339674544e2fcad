//! Answer parsing, the subset-semantics verifier and corpus metrics.
//!
//! Forward answers order future frames; a step is correct when the predicted
//! frame pair's full change covers the reference's visible change. Inverse
//! answers order actions; a step is correct when the chosen action is
//! contained in the reference's full change.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::{QaItem, Task};
use crate::scenegraph::{diff, SceneGraph, SceneGraphDiff};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum ParseError {
    #[error("no bracketed integer list found")]
    NoList,
    #[error("label {value} appears more than once")]
    Duplicate { value: i64 },
    #[error("label {value} is outside 1..={max}")]
    OutOfRange { value: i64, max: usize },
    #[error("expected {expected} labels, got {}", values.len())]
    WrongLength { expected: usize, values: Vec<usize> },
}

fn list_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*(-?\d+(?:\s*,\s*-?\d+)*)?\s*,?\s*\]").expect("valid regex"))
}

/// Checks raw labels against `1..=n`. Range and duplicate errors come before
/// length errors.
pub fn check_labels(values: &[i64], n: usize) -> std::result::Result<Vec<usize>, ParseError> {
    let mut seen = BTreeSet::new();
    for &v in values {
        if v < 1 || v as u64 > n as u64 {
            return Err(ParseError::OutOfRange { value: v, max: n });
        }
        if !seen.insert(v) {
            return Err(ParseError::Duplicate { value: v });
        }
    }
    let labels: Vec<usize> = values.iter().map(|&v| v as usize).collect();
    if labels.len() != n {
        return Err(ParseError::WrongLength {
            expected: n,
            values: labels,
        });
    }
    Ok(labels)
}

/// Reads the last bracketed integer list in `raw` as labels over `1..=n`.
pub fn parse_answer(raw: &str, n: usize) -> std::result::Result<Vec<usize>, ParseError> {
    let caps = list_regex().captures_iter(raw).last().ok_or(ParseError::NoList)?;
    let values: Vec<i64> = match caps.get(1) {
        None => Vec::new(),
        Some(m) => m
            .as_str()
            .split(',')
            .map(|s| s.trim().parse::<i64>().unwrap_or(i64::MAX))
            .collect(),
    };
    check_labels(&values, n)
}

/// Inverse of [`parse_answer`] on valid labels.
pub fn format_answer(labels: &[usize]) -> String {
    let parts: Vec<String> = labels.iter().map(usize::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// A model or human answer for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<i64>>,
}

impl Prediction {
    pub fn from_text(item_id: &str, raw: &str) -> Self {
        Prediction {
            item_id: item_id.to_owned(),
            raw_text: Some(raw.to_owned()),
            permutation: None,
        }
    }

    pub fn from_labels(item_id: &str, labels: &[usize]) -> Self {
        Prediction {
            item_id: item_id.to_owned(),
            raw_text: None,
            permutation: Some(labels.iter().map(|&l| l as i64).collect()),
        }
    }

    /// An explicit permutation wins over raw text.
    pub fn labels(&self, n: usize) -> std::result::Result<Vec<usize>, ParseError> {
        match (&self.permutation, &self.raw_text) {
            (Some(p), _) => check_labels(p, n),
            (None, Some(t)) => parse_answer(t, n),
            (None, None) => Err(ParseError::NoList),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMode {
    Exact,
    Semantic,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub task: Task,
    pub steps: usize,
    pub accepted: bool,
    pub mode: VerdictMode,
    /// One flag per reference transition.
    pub pair_correct: Vec<bool>,
    /// `(reference step, predicted step)`, 1-based, for length-mismatched answers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aligned_pairs: Vec<(usize, usize)>,
    /// Set on semantically accepted answers where the subset relation is strict.
    pub strict_subset_flags: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseError>,
}

impl Verdict {
    pub fn transitions(&self) -> usize {
        self.pair_correct.len()
    }

    pub fn correct_pairs(&self) -> usize {
        self.pair_correct.iter().filter(|&&c| c).count()
    }

    fn rejected(item: &QaItem, err: ParseError) -> Self {
        Verdict {
            item_id: item.id.clone(),
            task: item.task,
            steps: item.steps,
            accepted: false,
            mode: VerdictMode::Rejected,
            pair_correct: vec![false; item.transitions()],
            aligned_pairs: Vec::new(),
            strict_subset_flags: vec![false; item.transitions()],
            parse_error: Some(err),
        }
    }
}

/// Frames in the order implied by forward labels, context first.
pub fn predicted_frames<'a>(item: &'a QaItem, labels: &[usize]) -> Vec<&'a SceneGraph> {
    std::iter::once(&item.frame_graphs[0])
        .chain(labels.iter().map(|&l| &item.frame_graphs[item.candidate_order[l - 1]]))
        .collect()
}

/// Full changes between consecutive predicted frames.
pub fn predicted_full_diffs(item: &QaItem, labels: &[usize]) -> Vec<SceneGraphDiff> {
    predicted_frames(item, labels)
        .windows(2)
        .map(|w| diff(w[0], w[1]))
        .collect()
}

/// Step relation for reference step `i` against predicted change `p`
/// (0-based), as `(holds, strict)`.
fn relation(item: &QaItem, i: usize, p: &SceneGraphDiff) -> (bool, bool) {
    let sig = &item.step_signatures[i];
    match item.task {
        Task::Forward => (sig.visible.is_subset(p), sig.visible.is_subset(p) && sig.visible != *p),
        Task::Inverse => (p.is_subset(&sig.full), p.is_subset(&sig.full) && *p != sig.full),
    }
}

/// Predicted per-step changes: full frame diffs (forward) or chosen actions (inverse).
fn predicted_changes(item: &QaItem, labels: &[usize]) -> Vec<SceneGraphDiff> {
    match item.task {
        Task::Forward => predicted_full_diffs(item, labels),
        Task::Inverse => labels.iter().map(|&l| item.candidate_action(l).clone()).collect(),
    }
}

/// Order-preserving matching of reference steps to predicted steps that
/// maximizes satisfied pairs. Among optimal matchings, the leftmost one.
pub fn monotone_alignment(sat: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let t = sat.len();
    let n = sat.first().map_or(0, Vec::len);
    // best[i][k]: most pairs using reference i.. and predicted k..
    let mut best = vec![vec![0usize; n + 1]; t + 1];
    for i in (0..t).rev() {
        for k in (0..n).rev() {
            let take = if sat[i][k] { 1 + best[i + 1][k + 1] } else { 0 };
            best[i][k] = take.max(best[i + 1][k]).max(best[i][k + 1]);
        }
    }
    let mut out = Vec::new();
    let (mut i, mut k) = (0, 0);
    while i < t && k < n && best[i][k] > 0 {
        if sat[i][k] && best[i][k] == 1 + best[i + 1][k + 1] {
            out.push((i, k));
            i += 1;
            k += 1;
        } else if best[i][k + 1] == best[i][k] {
            k += 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Scores labels that already passed range and duplicate checks.
pub fn verify_labels(item: &QaItem, labels: &[usize]) -> Verdict {
    let t = item.transitions();
    let changes = predicted_changes(item, labels);
    let mut v = Verdict {
        item_id: item.id.clone(),
        task: item.task,
        steps: item.steps,
        accepted: false,
        mode: VerdictMode::Rejected,
        pair_correct: vec![false; t],
        aligned_pairs: Vec::new(),
        strict_subset_flags: vec![false; t],
        parse_error: None,
    };

    if labels.len() != t {
        v.parse_error = Some(ParseError::WrongLength {
            expected: t,
            values: labels.to_vec(),
        });
        let sat: Vec<Vec<bool>> = (0..t)
            .map(|i| changes.iter().map(|p| relation(item, i, p).0).collect())
            .collect();
        for (i, k) in monotone_alignment(&sat) {
            v.pair_correct[i] = true;
            v.aligned_pairs.push((i + 1, k + 1));
        }
        return v;
    }

    let relations: Vec<(bool, bool)> = changes.iter().enumerate().map(|(i, p)| relation(item, i, p)).collect();
    v.pair_correct = relations.iter().map(|r| r.0).collect();
    if labels == item.ground_truth {
        v.accepted = true;
        v.mode = VerdictMode::Exact;
    } else if v.pair_correct.iter().all(|&c| c) {
        v.accepted = true;
        v.mode = VerdictMode::Semantic;
        v.strict_subset_flags = relations.iter().map(|r| r.1).collect();
    }
    debug_assert!(!v.accepted || v.pair_correct.iter().all(|&c| c));
    v
}

pub fn verify_forward(item: &QaItem, sigma: &[usize]) -> Verdict {
    debug_assert_eq!(item.task, Task::Forward);
    verify_labels(item, sigma)
}

pub fn verify_inverse(item: &QaItem, tau: &[usize]) -> Verdict {
    debug_assert_eq!(item.task, Task::Inverse);
    verify_labels(item, tau)
}

/// Parses and scores a prediction. Unparseable answers score zero pairs.
pub fn verify(item: &QaItem, pred: &Prediction) -> Verdict {
    match pred.labels(item.transitions()) {
        Ok(labels) => verify_labels(item, &labels),
        Err(ParseError::WrongLength { values, .. }) => verify_labels(item, &values),
        Err(e) => Verdict::rejected(item, e),
    }
}

/// Fraction of correct pairs for one verdict.
pub fn pairwise_score(v: &Verdict) -> Fraction {
    Fraction::new(v.correct_pairs() as u64, v.transitions() as u64)
}

/// An exact ratio rendered with half-up decimal rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
}

impl Fraction {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Fraction { numerator, denominator }
    }

    /// Zero when the denominator is zero.
    pub fn value(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }

    pub fn render(&self, places: u32) -> String {
        let scale = 10u128.pow(places);
        let (n, d) = (self.numerator as u128, self.denominator as u128);
        let scaled = if d == 0 { 0 } else { (2 * n * scale + d) / (2 * d) };
        if places == 0 {
            return scaled.to_string();
        }
        format!("{}.{:0width$}", scaled / scale, scaled % scale, width = places as usize)
    }

    /// Compares `a/b` with `c/d` exactly.
    pub fn le(&self, other: &Fraction) -> bool {
        (self.numerator as u128) * (other.denominator as u128) <= (other.numerator as u128) * (self.denominator as u128)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(2))
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Fraction", 3)?;
        st.serialize_field("numerator", &self.numerator)?;
        st.serialize_field("denominator", &self.denominator)?;
        st.serialize_field("value", &self.render(2))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            numerator: u64,
            denominator: u64,
        }
        let r = Repr::deserialize(d)?;
        Ok(Fraction::new(r.numerator, r.denominator))
    }
}

pub fn task_accuracy(verdicts: &[Verdict]) -> Result<Fraction> {
    if verdicts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let accepted = verdicts.iter().filter(|v| v.accepted).count();
    Ok(Fraction::new(accepted as u64, verdicts.len() as u64))
}

/// Micro-average: correct pairs over reference transitions.
pub fn pairwise_accuracy(verdicts: &[Verdict]) -> Result<Fraction> {
    if verdicts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let correct: usize = verdicts.iter().map(Verdict::correct_pairs).sum();
    let total: usize = verdicts.iter().map(Verdict::transitions).sum();
    Ok(Fraction::new(correct as u64, total as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MismatchRates {
    /// Accepted items with at least one strict-subset step.
    pub data_level: Fraction,
    /// Strict-subset steps among steps of accepted items.
    pub pair_level: Fraction,
}

pub fn mismatch_rates(verdicts: &[Verdict]) -> MismatchRates {
    let accepted: Vec<&Verdict> = verdicts.iter().filter(|v| v.accepted).collect();
    let flagged_items = accepted
        .iter()
        .filter(|v| v.strict_subset_flags.iter().any(|&f| f))
        .count();
    let flagged_pairs: usize = accepted
        .iter()
        .map(|v| v.strict_subset_flags.iter().filter(|&&f| f).count())
        .sum();
    let pairs: usize = accepted.iter().map(|v| v.transitions()).sum();
    MismatchRates {
        data_level: Fraction::new(flagged_items as u64, accepted.len() as u64),
        pair_level: Fraction::new(flagged_pairs as u64, pairs as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub items: usize,
    pub task_accuracy: Fraction,
    pub pairwise_accuracy: Fraction,
    pub mismatch_rates: MismatchRates,
}

impl MetricsBlock {
    pub fn of(verdicts: &[Verdict]) -> Result<Self> {
        Ok(MetricsBlock {
            items: verdicts.len(),
            task_accuracy: task_accuracy(verdicts)?,
            pairwise_accuracy: pairwise_accuracy(verdicts)?,
            mismatch_rates: mismatch_rates(verdicts),
        })
    }
}

/// Grouping keys for metric breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Steps,
    Task,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(GroupKey::Steps),
            "task" => Ok(GroupKey::Task),
            _ => Err(Error::InvalidConfig(format!("unknown grouping key {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricsBlock,
    /// Keyed by group labels such as `task=forward,steps=3`.
    pub groups: BTreeMap<String, MetricsBlock>,
}

fn group_label(v: &Verdict, keys: &[GroupKey]) -> String {
    keys.iter()
        .map(|k| match k {
            GroupKey::Steps => format!("steps={:02}", v.steps),
            GroupKey::Task => format!("task={}", v.task),
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn metrics_report(verdicts: &[Verdict], by: &[GroupKey]) -> Result<MetricsReport> {
    let overall = MetricsBlock::of(verdicts)?;
    let mut buckets: BTreeMap<String, Vec<Verdict>> = BTreeMap::new();
    if !by.is_empty() {
        for v in verdicts {
            buckets.entry(group_label(v, by)).or_default().push(v.clone());
        }
    }
    let groups = buckets
        .into_iter()
        .map(|(k, vs)| Ok((k, MetricsBlock::of(&vs)?)))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { overall, groups })
}
