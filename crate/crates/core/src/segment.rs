//! Raw trajectory to segmented-frame pool.
//!
//! Two passes: [`stabilize`] removes state changes that revert within a frame
//! window, then [`segment`] keeps each frame whose change against its
//! predecessor is nonempty and not a near-duplicate of the last accepted change.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::{
    cosine_similarity, diff, signature_of, ChangeSignature, Component, Polarity, Predicate, SceneGraph,
    SceneGraphDiff, SignatureBasis, VisibleSet,
};

pub const DEFAULT_FRAME_RATE: f64 = 30.0;
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.97;
pub const DEFAULT_WINDOW: u64 = 40;

/// Reference to an image asset. Never decoded by the toolkit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObservationRef(String);

impl ObservationRef {
    pub fn new(path: impl Into<String>) -> Result<Self> {
        Self::try_from(path.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ObservationRef {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::InvalidConfig("observation reference must be nonempty".into()));
        }
        Ok(ObservationRef(s))
    }
}

impl From<ObservationRef> for String {
    fn from(o: ObservationRef) -> String {
        o.0
    }
}

impl fmt::Display for ObservationRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub frame_index: u64,
    #[serde(flatten)]
    pub graph: SceneGraph,
    pub observation: ObservationRef,
    #[serde(default)]
    pub visible: VisibleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawTrajectoryRepr")]
pub struct RawTrajectory {
    #[serde(default = "default_trajectory_id")]
    pub trajectory_id: String,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    pub frames: Vec<RawFrame>,
}

fn default_trajectory_id() -> String {
    "trajectory".to_owned()
}

fn default_frame_rate() -> f64 {
    DEFAULT_FRAME_RATE
}

// Accepts either a bare frame list or the full object.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawTrajectoryRepr {
    Full {
        #[serde(default = "default_trajectory_id")]
        trajectory_id: String,
        #[serde(default = "default_frame_rate")]
        frame_rate: f64,
        frames: Vec<RawFrame>,
    },
    Frames(Vec<RawFrame>),
}

impl From<RawTrajectoryRepr> for RawTrajectory {
    fn from(repr: RawTrajectoryRepr) -> Self {
        match repr {
            RawTrajectoryRepr::Full {
                trajectory_id,
                frame_rate,
                frames,
            } => RawTrajectory {
                trajectory_id,
                frame_rate,
                frames,
            },
            RawTrajectoryRepr::Frames(frames) => RawTrajectory {
                trajectory_id: default_trajectory_id(),
                frame_rate: DEFAULT_FRAME_RATE,
                frames,
            },
        }
    }
}

impl RawTrajectory {
    /// Checks frame ordering and that visibility lists only name real nodes.
    pub fn validate(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                return Err(Error::NonIncreasingFrames {
                    prev: w[0].frame_index,
                    next: w[1].frame_index,
                });
            }
        }
        for f in &self.frames {
            crate::scenegraph::validate_visibility(&f.graph, &f.visible)?;
        }
        Ok(())
    }

    /// Non-built-in predicate labels across all frames.
    pub fn unknown_predicates(&self) -> BTreeSet<String> {
        self.frames.iter().flat_map(|f| f.graph.unknown_predicates()).collect()
    }
}

/// What the near-duplicate gate compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureGrain {
    /// Exact components. Two consecutive changes never share a component, so
    /// at this grain the gate never fires.
    Component,
    /// Components with entity names replaced by their categories, so that the
    /// same kind of change on a sibling object counts as a repeat.
    #[default]
    Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub sim_threshold: f64,
    pub window: u64,
    #[serde(default)]
    pub grain: SignatureGrain,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            window: DEFAULT_WINDOW,
            grain: SignatureGrain::default(),
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sim_threshold must lie in (0, 1], got {}",
                self.sim_threshold
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1 frame".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedFrame {
    pub frame_index: u64,
    #[serde(flatten)]
    pub graph: SceneGraph,
    pub observation: ObservationRef,
    pub visible: VisibleSet,
    pub accepted_signature: ChangeSignature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedFrameSet {
    pub trajectory_id: String,
    pub config: SegmentConfig,
    pub basis: SignatureBasis,
    pub entries: Vec<SegmentedFrame>,
}

impl SegmentedFrameSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Fact {
    State { entity: String, predicate: Predicate },
    Relation { from: String, predicate: Predicate, to: String },
    Category { entity: String },
}

// `Some(..)` when the fact holds (the category for `Category`), `None` otherwise.
type FactValue = Option<String>;

impl Fact {
    fn of(c: &Component) -> Fact {
        match c {
            Component::Node { entity, predicate, .. } => Fact::State {
                entity: entity.clone(),
                predicate: predicate.clone(),
            },
            Component::Edge { from, predicate, to, .. } => Fact::Relation {
                from: from.clone(),
                predicate: predicate.clone(),
                to: to.clone(),
            },
            Component::Transition { entity, .. } => Fact::Category { entity: entity.clone() },
        }
    }

    fn value(&self, g: &SceneGraph) -> FactValue {
        match self {
            Fact::State { entity, predicate } => g.has_state(entity, predicate).then(String::new),
            Fact::Relation { from, predicate, to } => g.has_edge(from, to, predicate).then(String::new),
            Fact::Category { entity } => g.category(entity).map(str::to_owned),
        }
    }

    fn representable(&self, g: &SceneGraph, v: &FactValue) -> bool {
        match (self, v) {
            (_, None) if !matches!(self, Fact::Category { .. }) => true,
            (Fact::State { entity, .. }, Some(_)) => g.contains_node(entity),
            (Fact::Relation { from, to, .. }, Some(_)) => g.contains_node(from) && g.contains_node(to),
            (Fact::Category { entity }, Some(_)) => g.contains_node(entity),
            _ => false,
        }
    }

    /// Component that sets this fact to `v` on a graph where it currently is `cur`.
    fn setter(&self, cur: &FactValue, v: &FactValue) -> Option<Component> {
        if cur == v {
            return None;
        }
        let op = if v.is_some() { Polarity::Add } else { Polarity::Remove };
        match self {
            Fact::State { entity, predicate } => Some(Component::node(op, entity, predicate.clone())),
            Fact::Relation { from, predicate, to } => Some(Component::edge(op, from, predicate.clone(), to)),
            Fact::Category { entity } => match (cur, v) {
                (Some(a), Some(b)) => Some(Component::transition(entity, a, b)),
                _ => None,
            },
        }
    }
}

/// Removes every change that reverses within `window` frames of its onset.
/// Both flanks disappear: frames in between are rewritten to the pre-change
/// value, as if the state had never changed.
pub fn stabilize(t: &RawTrajectory, window: u64) -> RawTrajectory {
    let mut out = t.clone();
    let n = t.frames.len();
    if n < 3 {
        return out;
    }

    let mut facts = BTreeSet::new();
    for w in t.frames.windows(2) {
        for c in &diff(&w[0].graph, &w[1].graph) {
            facts.insert(Fact::of(c));
        }
    }

    let mut overrides: BTreeMap<usize, Vec<(Fact, FactValue)>> = BTreeMap::new();
    for fact in facts {
        let mut values: Vec<FactValue> = t.frames.iter().map(|f| fact.value(&f.graph)).collect();
        let mut i = 1;
        while i < n {
            if values[i] == values[i - 1] {
                i += 1;
                continue;
            }
            let before = values[i - 1].clone();
            let next_change = (i + 1..n).find(|&q| values[q] != values[i]);
            let suppress = next_change.filter(|&q| {
                values[q] == before
                    && t.frames[q].frame_index - t.frames[i].frame_index < window
                    && (i..q).all(|k| fact.representable(&t.frames[k].graph, &before))
            });
            match suppress {
                Some(q) => {
                    for (k, slot) in values.iter_mut().enumerate().take(q).skip(i) {
                        *slot = before.clone();
                        overrides.entry(k).or_default().push((fact.clone(), before.clone()));
                    }
                    i = q + 1;
                }
                None => i += 1,
            }
        }
    }

    for (k, sets) in overrides {
        let graph = &mut out.frames[k].graph;
        for (fact, v) in sets {
            let cur = fact.value(graph);
            if let Some(c) = fact.setter(&cur, &v) {
                let applied = graph.apply(&c);
                debug_assert!(applied, "override {c} not representable");
            }
        }
    }
    out
}

/// Maps a change to the basis the near-duplicate gate works in.
pub fn gate_key(d: &SceneGraphDiff, before: &SceneGraph, after: &SceneGraph, grain: SignatureGrain) -> SceneGraphDiff {
    match grain {
        SignatureGrain::Component => d.clone(),
        SignatureGrain::Category => d
            .iter()
            .map(|c| {
                c.map_entities(|name| {
                    before
                        .category(name)
                        .or_else(|| after.category(name))
                        .unwrap_or(name)
                        .to_owned()
                })
            })
            .collect(),
    }
}

/// Builds the segmented-frame pool.
pub fn segment(t: &RawTrajectory, cfg: &SegmentConfig) -> Result<SegmentedFrameSet> {
    cfg.validate()?;
    if t.frames.len() < 2 {
        return Err(Error::TooFewFrames(t.frames.len()));
    }
    t.validate()?;

    let stable = stabilize(t, cfg.window);
    let frames = &stable.frames;

    let candidates: Vec<(usize, SceneGraphDiff)> = (1..frames.len())
        .filter_map(|k| {
            let d = diff(&frames[k - 1].graph, &frames[k].graph);
            (!d.is_empty()).then(|| (k, gate_key(&d, &frames[k - 1].graph, &frames[k].graph, cfg.grain)))
        })
        .collect();
    let basis = SignatureBasis::from_diffs(candidates.iter().map(|(_, d)| d));

    let mut entries: Vec<SegmentedFrame> = Vec::new();
    for (k, key) in &candidates {
        let sig = signature_of(key, &basis)?;
        let frame = &frames[*k];
        let accept = match entries.last() {
            None => true,
            Some(last) => {
                cosine_similarity(&sig, &last.accepted_signature)? < cfg.sim_threshold
                    && !diff(&last.graph, &frame.graph).is_empty()
            }
        };
        if accept {
            entries.push(SegmentedFrame {
                frame_index: frame.frame_index,
                graph: frame.graph.clone(),
                observation: frame.observation.clone(),
                visible: frame.visible.clone(),
                accepted_signature: sig,
            });
        }
    }

    Ok(SegmentedFrameSet {
        trajectory_id: t.trajectory_id.clone(),
        config: *cfg,
        basis,
        entries,
    })
}
