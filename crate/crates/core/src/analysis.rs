//! Fine-grained error analysis of predicted action sequences.
//!
//! Each predicted step is compared with its reference as sets of components,
//! giving missing, matched and hallucinated parts. Missing and hallucinated
//! components are then paired into polarity inversions, predicate
//! substitutions and entity substitutions; whatever stays unpaired is an
//! omission or a hallucination. A separate pass counts left/right hand mixups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::{QaItem, Task};
use crate::scenegraph::{visible_delta, Component, PredicateClass, SceneGraphDiff};
use crate::verify::{ParseError, Prediction};

/// Visible changes between consecutive frames in the predicted order, context first.
pub fn predicted_actions_forward(item: &QaItem, sigma: &[usize]) -> Vec<SceneGraphDiff> {
    let order: Vec<usize> = std::iter::once(0)
        .chain(sigma.iter().map(|&l| item.candidate_order[l - 1]))
        .collect();
    order
        .windows(2)
        .map(|w| {
            visible_delta(
                &item.frame_graphs[w[0]],
                &item.frame_graphs[w[1]],
                &item.frame_visibility[w[0]],
                &item.frame_visibility[w[1]],
            )
        })
        .collect()
}

/// The chosen actions in the predicted order.
pub fn predicted_actions_inverse(item: &QaItem, tau: &[usize]) -> Vec<SceneGraphDiff> {
    tau.iter().map(|&l| item.candidate_action(l).clone()).collect()
}

pub fn predicted_actions(item: &QaItem, labels: &[usize]) -> Vec<SceneGraphDiff> {
    match item.task {
        Task::Forward => predicted_actions_forward(item, labels),
        Task::Inverse => predicted_actions_inverse(item, labels),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentTriple {
    pub missing: BTreeSet<Component>,
    pub matched: BTreeSet<Component>,
    pub hallucinated: BTreeSet<Component>,
}

pub fn pairwise_components(gt: &SceneGraphDiff, pred: &SceneGraphDiff) -> ComponentTriple {
    let (g, p) = (gt.components(), pred.components());
    ComponentTriple {
        missing: g.difference(p).cloned().collect(),
        matched: g.intersection(p).cloned().collect(),
        hallucinated: p.difference(g).cloned().collect(),
    }
}

/// A triple with the step it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTriple {
    pub item_id: String,
    pub task: Task,
    pub steps: usize,
    /// 1-based transition index.
    pub step: usize,
    #[serde(flatten)]
    pub triple: ComponentTriple,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardCounts {
    pub unparseable: usize,
    pub length_mismatch: usize,
    pub no_prediction: usize,
}

impl DiscardCounts {
    pub fn total(&self) -> usize {
        self.unparseable + self.length_mismatch + self.no_prediction
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCorpus {
    pub analyzed_items: usize,
    pub discarded: DiscardCounts,
    pub triples: Vec<StepTriple>,
}

/// Step triples for every prediction whose sequence length matches the
/// reference. Other predictions are discarded and counted.
pub fn collect_triples<'a>(items: &[QaItem], predictions: impl IntoIterator<Item = &'a Prediction>) -> ParsedCorpus {
    let by_id: BTreeMap<&str, &Prediction> = predictions.into_iter().map(|p| (p.item_id.as_str(), p)).collect();
    let mut out = ParsedCorpus::default();
    for item in items {
        let Some(pred) = by_id.get(item.id.as_str()) else {
            out.discarded.no_prediction += 1;
            continue;
        };
        let labels = match pred.labels(item.transitions()) {
            Ok(l) => l,
            Err(ParseError::WrongLength { .. }) => {
                out.discarded.length_mismatch += 1;
                continue;
            }
            Err(_) => {
                out.discarded.unparseable += 1;
                continue;
            }
        };
        out.analyzed_items += 1;
        let predicted = predicted_actions(item, &labels);
        for (k, (sig, p)) in item.step_signatures.iter().zip(&predicted).enumerate() {
            out.triples.push(StepTriple {
                item_id: item.id.clone(),
                task: item.task,
                steps: item.steps,
                step: k + 1,
                triple: pairwise_components(&sig.visible, p),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralCategory {
    EntitySubstitution,
    PolarityInversion,
    PredicateSubstitution,
    Omission,
    Hallucination,
}

impl StructuralCategory {
    pub const ALL: [StructuralCategory; 5] = [
        StructuralCategory::EntitySubstitution,
        StructuralCategory::PolarityInversion,
        StructuralCategory::PredicateSubstitution,
        StructuralCategory::Omission,
        StructuralCategory::Hallucination,
    ];
}

impl fmt::Display for StructuralCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructuralCategory::EntitySubstitution => "entity_substitution",
            StructuralCategory::PolarityInversion => "polarity_inversion",
            StructuralCategory::PredicateSubstitution => "predicate_substitution",
            StructuralCategory::Omission => "omission",
            StructuralCategory::Hallucination => "hallucination",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralErrorRecord {
    pub category: StructuralCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_component: Option<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_component: Option<Component>,
    pub item_id: String,
    pub task: Task,
    pub step: usize,
}

/// Same fact, opposite direction.
pub fn is_polarity_inversion(m: &Component, h: &Component) -> bool {
    match (m, h) {
        (Component::Transition { entity: e1, from: f1, to: t1 }, Component::Transition { entity: e2, from: f2, to: t2 }) => {
            e1 == e2 && f1 == t2 && t1 == f2 && f1 != t1
        }
        (Component::Edge { .. }, Component::Edge { .. }) | (Component::Node { .. }, Component::Node { .. }) => {
            m.op() != h.op() && m.inverse() == *h
        }
        _ => false,
    }
}

/// Same entities and direction, different predicate.
pub fn is_predicate_substitution(m: &Component, h: &Component) -> bool {
    match (m, h) {
        (
            Component::Edge { op: o1, from: a1, predicate: p1, to: b1 },
            Component::Edge { op: o2, from: a2, predicate: p2, to: b2 },
        ) => o1 == o2 && a1 == a2 && b1 == b2 && p1 != p2,
        (
            Component::Node { op: o1, entity: e1, predicate: p1 },
            Component::Node { op: o2, entity: e2, predicate: p2 },
        ) => o1 == o2 && e1 == e2 && p1 != p2,
        (Component::Transition { entity: e1, from: f1, to: t1 }, Component::Transition { entity: e2, from: f2, to: t2 }) => {
            e1 == e2 && (f1, t1) != (f2, t2) && !(f1 == t2 && t1 == f2)
        }
        _ => false,
    }
}

/// Same kind, direction and predicate, at least one different entity.
pub fn is_entity_substitution(m: &Component, h: &Component) -> bool {
    match (m, h) {
        (
            Component::Edge { op: o1, from: a1, predicate: p1, to: b1 },
            Component::Edge { op: o2, from: a2, predicate: p2, to: b2 },
        ) => o1 == o2 && p1 == p2 && (a1 != a2 || b1 != b2),
        (
            Component::Node { op: o1, entity: e1, predicate: p1 },
            Component::Node { op: o2, entity: e2, predicate: p2 },
        ) => o1 == o2 && p1 == p2 && e1 != e2,
        (Component::Transition { entity: e1, from: f1, to: t1 }, Component::Transition { entity: e2, from: f2, to: t2 }) => {
            f1 == f2 && t1 == t2 && e1 != e2
        }
        _ => false,
    }
}

type PairRule = fn(&Component, &Component) -> bool;

const PAIRING: [(StructuralCategory, PairRule); 3] = [
    (StructuralCategory::PolarityInversion, is_polarity_inversion),
    (StructuralCategory::PredicateSubstitution, is_predicate_substitution),
    (StructuralCategory::EntitySubstitution, is_entity_substitution),
];

/// Categorizes one triple. Pairs are formed greedily over canonically sorted
/// components, one rule at a time in precedence order, until no pair is left.
pub fn categorize_triple(t: &ComponentTriple) -> Vec<(StructuralCategory, Option<Component>, Option<Component>)> {
    let mut missing: Vec<Component> = t.missing.iter().cloned().collect();
    let mut halluc: Vec<Component> = t.hallucinated.iter().cloned().collect();
    let mut out = Vec::new();
    for (category, rule) in PAIRING {
        let mut i = 0;
        while i < missing.len() {
            if let Some(j) = halluc.iter().position(|h| rule(&missing[i], h)) {
                let m = missing.remove(i);
                let h = halluc.remove(j);
                out.push((category, Some(m), Some(h)));
            } else {
                i += 1;
            }
        }
    }
    out.extend(missing.into_iter().map(|m| (StructuralCategory::Omission, Some(m), None)));
    out.extend(halluc.into_iter().map(|h| (StructuralCategory::Hallucination, None, Some(h))));
    out
}

pub fn categorize_structural(triples: &[StepTriple]) -> Vec<StructuralErrorRecord> {
    triples
        .iter()
        .flat_map(|st| {
            categorize_triple(&st.triple)
                .into_iter()
                .map(move |(category, gt, pred)| StructuralErrorRecord {
                    category,
                    gt_component: gt,
                    pred_component: pred,
                    item_id: st.item_id.clone(),
                    task: st.task,
                    step: st.step,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticCategory {
    SpatialRelations,
    FunctionalStates,
    MaterialStates,
    AgentInteraction,
}

/// Predicate label to semantic category. Loadable from a JSON object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticCategoryMap(pub BTreeMap<String, SemanticCategory>);

impl Default for SemanticCategoryMap {
    fn default() -> Self {
        use PredicateClass::*;
        use SemanticCategory::*;
        let table = [
            (OnTop, SpatialRelations),
            (Inside, SpatialRelations),
            (Under, SpatialRelations),
            (Contains, SpatialRelations),
            (Covered, SpatialRelations),
            (Open, FunctionalStates),
            (ToggledOn, FunctionalStates),
            (Cooked, MaterialStates),
            (Transition, MaterialStates),
            (LeftGrasping, AgentInteraction),
            (RightGrasping, AgentInteraction),
        ];
        SemanticCategoryMap(table.into_iter().map(|(p, c)| (p.name().to_owned(), c)).collect())
    }
}

impl SemanticCategoryMap {
    pub fn get(&self, predicate: &str) -> Option<SemanticCategory> {
        self.0.get(predicate).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledErrorRecord {
    #[serde(flatten)]
    pub record: StructuralErrorRecord,
    pub semantic: SemanticCategory,
}

/// Labels by the reference component's predicate, or the predicted one when
/// there is no reference component.
pub fn label_semantic(records: &[StructuralErrorRecord], map: &SemanticCategoryMap) -> Result<Vec<LabeledErrorRecord>> {
    let key = |r: &StructuralErrorRecord| {
        r.gt_component
            .as_ref()
            .or(r.pred_component.as_ref())
            .map(|c| c.predicate().as_str().to_owned())
            .unwrap_or_default()
    };
    let unmapped: BTreeSet<String> = records.iter().map(key).filter(|p| map.get(p).is_none()).collect();
    if !unmapped.is_empty() {
        return Err(Error::UnmappedPredicates(unmapped.into_iter().collect()));
    }
    Ok(records
        .iter()
        .map(|r| LabeledErrorRecord {
            semantic: map.get(&key(r)).expect("checked above"),
            record: r.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    fn predicate(self) -> PredicateClass {
        match self {
            Hand::Left => PredicateClass::LeftGrasping,
            Hand::Right => PredicateClass::RightGrasping,
        }
    }

    fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }

    pub fn involves(self, c: &Component) -> bool {
        c.predicate().is(self.predicate())
    }
}

/// A rate with its binomial standard error. Both absent when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: usize,
    pub denominator: usize,
    pub value: Option<f64>,
    pub standard_error: Option<f64>,
}

impl Rate {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        let value = (denominator > 0).then(|| numerator as f64 / denominator as f64);
        Rate {
            numerator,
            denominator,
            value,
            standard_error: value.map(|p| (p * (1.0 - p) / denominator as f64).sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandStats {
    pub matched: usize,
    pub missing: usize,
    pub hallucinated: usize,
    pub precision: Rate,
    pub recall: Rate,
    /// Reference components of this hand attributed to the other hand.
    pub mixing_rate: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandednessReport {
    pub left: HandStats,
    pub right: HandStats,
    pub l2r: usize,
    pub r2l: usize,
}

/// Missing components of `hand` counted as confused with the other hand in one triple.
pub fn confusions(t: &ComponentTriple, hand: Hand) -> Vec<&Component> {
    if !t.missing.iter().any(|m| hand.involves(m)) || t.hallucinated.iter().any(|h| hand.involves(h)) {
        return Vec::new();
    }
    if !t.hallucinated.iter().any(|h| hand.other().involves(h)) {
        return Vec::new();
    }
    t.missing.iter().filter(|m| hand.involves(m)).collect()
}

pub fn hand_mixing<'a>(triples: impl IntoIterator<Item = &'a ComponentTriple>) -> HandednessReport {
    let mut counts: BTreeMap<Hand, [usize; 4]> = BTreeMap::new();
    for t in triples {
        for hand in [Hand::Left, Hand::Right] {
            let c = counts.entry(hand).or_default();
            c[0] += t.matched.iter().filter(|x| hand.involves(x)).count();
            c[1] += t.missing.iter().filter(|x| hand.involves(x)).count();
            c[2] += t.hallucinated.iter().filter(|x| hand.involves(x)).count();
            c[3] += confusions(t, hand).len();
        }
    }
    let stats = |hand: Hand| {
        let [matched, missing, hallucinated, confused] = counts.get(&hand).copied().unwrap_or_default();
        HandStats {
            matched,
            missing,
            hallucinated,
            precision: Rate::new(matched, matched + hallucinated),
            recall: Rate::new(matched, matched + missing),
            mixing_rate: Rate::new(confused, matched + missing),
        }
    };
    let (left, right) = (stats(Hand::Left), stats(Hand::Right));
    HandednessReport {
        l2r: left.mixing_rate.numerator,
        r2l: right.mixing_rate.numerator,
        left,
        right,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram<K: Ord> {
    pub total: usize,
    pub counts: BTreeMap<K, usize>,
    pub percentages: BTreeMap<K, f64>,
}

fn histogram<K: Ord + Copy>(keys: impl IntoIterator<Item = K>) -> Histogram<K> {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    let total = counts.values().sum();
    let percentages = counts
        .iter()
        .map(|(&k, &c)| (k, 100.0 * c as f64 / total as f64))
        .collect();
    Histogram {
        total,
        counts,
        percentages,
    }
}

/// Structural category counts and percentages per task.
pub fn error_distribution(records: &[StructuralErrorRecord]) -> Result<BTreeMap<Task, Histogram<StructuralCategory>>> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut by_task: BTreeMap<Task, Vec<StructuralCategory>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task).or_default().push(r.category);
    }
    Ok(by_task.into_iter().map(|(t, ks)| (t, histogram(ks))).collect())
}

/// Semantic category counts and percentages per task.
pub fn semantic_distribution(records: &[LabeledErrorRecord]) -> Result<BTreeMap<Task, Histogram<SemanticCategory>>> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut by_task: BTreeMap<Task, Vec<SemanticCategory>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.record.task).or_default().push(r.semantic);
    }
    Ok(by_task.into_iter().map(|(t, ks)| (t, histogram(ks))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub analyzed_items: usize,
    pub discarded: DiscardCounts,
    pub step_triples: usize,
    pub structural: BTreeMap<Task, Histogram<StructuralCategory>>,
    pub semantic: BTreeMap<Task, Histogram<SemanticCategory>>,
    pub handedness: BTreeMap<Task, HandednessReport>,
}

/// Runs every analysis stage. Returns the labelled records and the report.
pub fn analyze<'a>(
    items: &[QaItem],
    predictions: impl IntoIterator<Item = &'a Prediction>,
    map: &SemanticCategoryMap,
) -> Result<(Vec<LabeledErrorRecord>, AnalysisReport)> {
    let corpus = collect_triples(items, predictions);
    let records = categorize_structural(&corpus.triples);
    let labeled = label_semantic(&records, map)?;
    let mut handedness = BTreeMap::new();
    for task in Task::BOTH {
        let ts: Vec<&ComponentTriple> = corpus
            .triples
            .iter()
            .filter(|t| t.task == task)
            .map(|t| &t.triple)
            .collect();
        if !ts.is_empty() {
            handedness.insert(task, hand_mixing(ts));
        }
    }
    let report = AnalysisReport {
        analyzed_items: corpus.analyzed_items,
        discarded: corpus.discarded,
        step_triples: corpus.triples.len(),
        structural: if records.is_empty() { BTreeMap::new() } else { error_distribution(&records)? },
        semantic: if labeled.is_empty() { BTreeMap::new() } else { semantic_distribution(&labeled)? },
        handedness,
    };
    Ok((labeled, report))
}
