//! Forward and inverse reordering questions built from key-frame trajectories.
//!
//! Candidates are labelled `1..=L-1` in presentation order. An answer lists
//! labels in chronological order, so `ground_truth[k]` is the label of the
//! candidate that belongs at step `k + 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfts::{draw_rng, KeyFrameTrajectory};
use crate::scenegraph::{Arity, Component, Polarity, PredicateClass, SceneGraph, SceneGraphDiff, VisibleSet};
use crate::segment::ObservationRef;

pub const FORWARD_TEMPLATE: &str = include_str!("../templates/forward_prompt.txt");
pub const INVERSE_TEMPLATE: &str = include_str!("../templates/inverse_prompt.txt");
pub const FORWARD_PLACEHOLDER: &str = "{STATE_CHANGES}";
pub const INVERSE_PLACEHOLDER: &str = "{SHUFFLED_ACTIONS}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forward,
    Inverse,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Forward, Task::Inverse];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Forward => "forward",
            Task::Inverse => "inverse",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Task::Forward),
            "inverse" => Ok(Task::Inverse),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    #[default]
    Natural,
    Symbolic,
    Emoji,
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(EncodingMode::Natural),
            "symbolic" => Ok(EncodingMode::Symbolic),
            "emoji" => Ok(EncodingMode::Emoji),
            _ => Err(Error::InvalidConfig(format!("unknown encoding {s:?}"))),
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncodingMode::Natural => "natural",
            EncodingMode::Symbolic => "symbolic",
            EncodingMode::Emoji => "emoji",
        })
    }
}

/// One row of the natural-language table. `polarity` is absent for
/// transitions. Placeholders: `{entity}` for unary states, `{from}` and `{to}`
/// for relations, all three for transitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub predicate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    pub arity: Arity,
    pub template: String,
}

type TemplateKey = (String, Option<Polarity>, Arity);

/// Natural-language clause templates keyed by (predicate, polarity, arity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateTable {
    entries: BTreeMap<TemplateKey, String>,
}

impl Serialize for TemplateTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<TemplateEntry> = self
            .entries
            .iter()
            .map(|((predicate, polarity, arity), template)| TemplateEntry {
                predicate: predicate.clone(),
                polarity: *polarity,
                arity: *arity,
                template: template.clone(),
            })
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TemplateTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<TemplateEntry>::deserialize(d)?;
        let mut table = TemplateTable::empty();
        for r in rows {
            table.insert(r);
        }
        Ok(table)
    }
}

impl Default for TemplateTable {
    fn default() -> Self {
        use PredicateClass::*;
        use Polarity::{Add, Remove};
        let mut t = TemplateTable::empty();
        let mut rel = |p: PredicateClass, add: &str, remove: &str| {
            t.set(p.name(), Some(Add), Arity::Relational, add);
            t.set(p.name(), Some(Remove), Arity::Relational, remove);
        };
        rel(RightGrasping, "grasp {to} with the right hand", "release {to} from the right hand");
        rel(LeftGrasping, "grasp {to} with the left hand", "release {to} from the left hand");
        rel(OnTop, "{from} is now on top of {to}", "{from} is no longer on top of {to}");
        rel(Inside, "{from} is now inside {to}", "{from} is no longer inside {to}");
        rel(Under, "{from} is now under {to}", "{from} is no longer under {to}");
        rel(Contains, "{from} now contains {to}", "{from} no longer contains {to}");
        rel(Covered, "{from} is now covered by {to}", "{from} is no longer covered by {to}");
        let mut unary = |p: PredicateClass, add: &str, remove: &str| {
            t.set(p.name(), Some(Add), Arity::Unary, add);
            t.set(p.name(), Some(Remove), Arity::Unary, remove);
        };
        unary(Open, "open {entity}", "close {entity}");
        unary(ToggledOn, "toggle on {entity}", "toggle off {entity}");
        unary(Cooked, "{entity} becomes cooked", "{entity} is no longer cooked");
        t.set(Transition.name(), None, Arity::Transition, "{entity} turns from {from} into {to}");
        t
    }
}

impl TemplateTable {
    pub fn empty() -> Self {
        TemplateTable {
            entries: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, predicate: &str, polarity: Option<Polarity>, arity: Arity, template: &str) {
        self.entries
            .insert((predicate.to_owned(), polarity, arity), template.to_owned());
    }

    pub fn insert(&mut self, e: TemplateEntry) {
        self.entries.insert((e.predicate, e.polarity, e.arity), e.template);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self, c: &Component) -> Result<String> {
        let (key, fills): (TemplateKey, Vec<(&str, &str)>) = match c {
            Component::Edge { op, from, predicate, to } => (
                (predicate.as_str().to_owned(), Some(*op), Arity::Relational),
                vec![("{from}", from), ("{to}", to)],
            ),
            Component::Node { op, entity, predicate } => (
                (predicate.as_str().to_owned(), Some(*op), Arity::Unary),
                vec![("{entity}", entity)],
            ),
            Component::Transition { entity, from, to } => (
                (PredicateClass::Transition.name().to_owned(), None, Arity::Transition),
                vec![("{entity}", entity), ("{from}", from), ("{to}", to)],
            ),
        };
        let template = self.entries.get(&key).ok_or_else(|| Error::MissingTemplate {
            predicate: key.0.clone(),
            polarity: key.1.map_or("-", Polarity::as_str).to_owned(),
            arity: key.2.to_string(),
        })?;
        Ok(fills
            .into_iter()
            .fold(template.clone(), |s, (slot, value)| s.replace(slot, value)))
    }
}

/// How actions are shown to the answerer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionEncoding {
    pub mode: EncodingMode,
    #[serde(default)]
    pub templates: TemplateTable,
}

impl ActionEncoding {
    pub fn new(mode: EncodingMode) -> Self {
        ActionEncoding {
            mode,
            templates: TemplateTable::default(),
        }
    }
}

fn glyph(class: PredicateClass) -> &'static str {
    use PredicateClass::*;
    match class {
        RightGrasping => "🫱",
        LeftGrasping => "🫲",
        OnTop => "⬆️",
        Inside => "📥",
        Under => "⬇️",
        Contains => "🫙",
        Covered => "🧺",
        Open => "🔓",
        ToggledOn => "💡",
        Cooked => "🍳",
        Transition => "🔄",
    }
}

fn polarity_glyph(op: Polarity) -> &'static str {
    match op {
        Polarity::Add => "➕",
        Polarity::Remove => "➖",
    }
}

fn render_emoji(c: &Component) -> Result<String> {
    let missing = || Error::MissingTemplate {
        predicate: c.predicate().as_str().to_owned(),
        polarity: c.op().map_or("-", Polarity::as_str).to_owned(),
        arity: "emoji".to_owned(),
    };
    let g = c.predicate().class().map(glyph).ok_or_else(missing)?;
    Ok(match c {
        Component::Edge { op, from, to, .. } => format!("{}{g}({from}, {to})", polarity_glyph(*op)),
        Component::Node { op, entity, .. } => format!("{}{g}({entity})", polarity_glyph(*op)),
        Component::Transition { entity, from, to } => format!("{g}({entity}: {from} → {to})"),
    })
}

/// Renders a nonempty action as clauses in canonical component order.
pub fn render_action(d: &SceneGraphDiff, enc: &ActionEncoding) -> Result<String> {
    if d.is_empty() {
        return Err(Error::EmptyAction);
    }
    let clauses = d
        .iter()
        .map(|c| match enc.mode {
            EncodingMode::Natural => enc.templates.render(c),
            EncodingMode::Symbolic => Ok(c.to_string()),
            EncodingMode::Emoji => render_emoji(c),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(clauses.join("; "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSignature {
    pub visible: SceneGraphDiff,
    pub full: SceneGraphDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub trajectory_id: String,
    pub task: Task,
    pub steps: usize,
    pub encoding: EncodingMode,
    /// First observation, shown as the starting state.
    pub context: ObservationRef,
    /// Inverse items: observations after the context in true order.
    #[serde(default)]
    pub ordered_observations: Vec<ObservationRef>,
    /// Forward items: future observations in presentation order.
    #[serde(default)]
    pub candidate_observations: Vec<ObservationRef>,
    /// Forward: actions in true order. Inverse: actions in presentation order.
    pub actions_rendered: Vec<String>,
    /// Chronological step (1-based) of the candidate at each label.
    pub candidate_order: Vec<usize>,
    /// Labels in chronological order: the expected answer.
    pub ground_truth: Vec<usize>,
    pub step_signatures: Vec<StepSignature>,
    pub frame_graphs: Vec<SceneGraph>,
    pub frame_visibility: Vec<VisibleSet>,
    #[serde(default)]
    pub frame_indices: Vec<u64>,
}

impl QaItem {
    /// Number of transitions.
    pub fn transitions(&self) -> usize {
        self.steps - 1
    }

    /// Visible change of the action shown under `label` (1-based).
    pub fn candidate_action(&self, label: usize) -> &SceneGraphDiff {
        &self.step_signatures[self.candidate_order[label - 1] - 1].visible
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaOptions {
    pub min_steps: usize,
    /// Allow the unshuffled order to be presented.
    pub allow_identity: bool,
}

impl Default for QaOptions {
    fn default() -> Self {
        QaOptions {
            min_steps: 3,
            allow_identity: false,
        }
    }
}

/// Uniform presentation order over `n` candidates, never the identity when
/// `n ≥ 2` unless `allow_identity`. Entry `p` is the 1-based step shown at
/// label `p + 1`.
pub fn shuffle_candidates(n: usize, rng: &mut impl RngCore, allow_identity: bool) -> Vec<usize> {
    let identity: Vec<usize> = (1..=n).collect();
    let mut order = identity.clone();
    loop {
        order.shuffle(rng);
        if allow_identity || n < 2 || order != identity {
            return order;
        }
    }
}

/// Labels in chronological order for a presentation order.
pub fn labels_in_chronological_order(candidate_order: &[usize]) -> Vec<usize> {
    let mut gt = vec![0; candidate_order.len()];
    for (p, &step) in candidate_order.iter().enumerate() {
        gt[step - 1] = p + 1;
    }
    gt
}

fn collisions(rendered: &[String]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..rendered.len() {
        for j in i + 1..rendered.len() {
            if rendered[i] == rendered[j] {
                out.push((i + 1, j + 1));
            }
        }
    }
    out
}

pub fn item_id(traj: &KeyFrameTrajectory, task: Task, mode: EncodingMode) -> String {
    let path: Vec<String> = traj.indices.iter().map(usize::to_string).collect();
    format!("{}-L{}-{}-{}-{}", traj.trajectory_id, traj.steps(), path.join("."), task, mode)
}

fn make_item(traj: &KeyFrameTrajectory, task: Task, enc: &ActionEncoding, seed: u64, opts: &QaOptions) -> Result<QaItem> {
    let steps = traj.steps();
    if steps < opts.min_steps.max(2) {
        return Err(Error::InvalidConfig(format!(
            "trajectory has {steps} frames, at least {} required",
            opts.min_steps.max(2)
        )));
    }
    if let Some(k) = traj.actions.iter().position(SceneGraphDiff::is_empty) {
        return Err(Error::EmptyStep(k + 1));
    }
    let rendered = traj
        .actions
        .iter()
        .map(|a| render_action(a, enc))
        .collect::<Result<Vec<_>>>()?;
    let clashes = collisions(&rendered);
    if !clashes.is_empty() {
        return Err(Error::RenderCollision(clashes));
    }

    let mut rng = draw_rng(seed, 0);
    let candidate_order = shuffle_candidates(steps - 1, &mut rng, opts.allow_identity);
    let ground_truth = labels_in_chronological_order(&candidate_order);
    let observations: Vec<ObservationRef> = traj.frames.iter().map(|f| f.observation.clone()).collect();
    let (ordered_observations, candidate_observations, actions_rendered) = match task {
        Task::Forward => (
            Vec::new(),
            candidate_order.iter().map(|&s| observations[s].clone()).collect(),
            rendered,
        ),
        Task::Inverse => (
            observations[1..].to_vec(),
            Vec::new(),
            candidate_order.iter().map(|&s| rendered[s - 1].clone()).collect(),
        ),
    };

    Ok(QaItem {
        id: item_id(traj, task, enc.mode),
        trajectory_id: traj.trajectory_id.clone(),
        task,
        steps,
        encoding: enc.mode,
        context: observations[0].clone(),
        ordered_observations,
        candidate_observations,
        actions_rendered,
        candidate_order,
        ground_truth,
        step_signatures: traj
            .actions
            .iter()
            .zip(&traj.full_actions)
            .map(|(v, f)| StepSignature {
                visible: v.clone(),
                full: f.clone(),
            })
            .collect(),
        frame_graphs: traj.frames.iter().map(|f| f.graph.clone()).collect(),
        frame_visibility: traj.frames.iter().map(|f| f.visible.clone()).collect(),
        frame_indices: traj.frame_indices(),
    })
}

/// Future observations shuffled, actions in order.
pub fn make_forward_qa(traj: &KeyFrameTrajectory, enc: &ActionEncoding, seed: u64, opts: &QaOptions) -> Result<QaItem> {
    make_item(traj, Task::Forward, enc, seed, opts)
}

/// Observations in order, actions shuffled.
pub fn make_inverse_qa(traj: &KeyFrameTrajectory, enc: &ActionEncoding, seed: u64, opts: &QaOptions) -> Result<QaItem> {
    make_item(traj, Task::Inverse, enc, seed, opts)
}

/// Fills the task template with the item's actions.
pub fn build_prompt(item: &QaItem) -> String {
    match item.task {
        Task::Forward => {
            let block: Vec<String> = item
                .actions_rendered
                .iter()
                .enumerate()
                .map(|(i, a)| format!("{}. {a}", i + 1))
                .collect();
            FORWARD_TEMPLATE.replace(FORWARD_PLACEHOLDER, &block.join("\n"))
        }
        Task::Inverse => {
            let block: Vec<String> = item
                .actions_rendered
                .iter()
                .enumerate()
                .map(|(i, a)| format!("Action {}: {a}", i + 1))
                .collect();
            INVERSE_TEMPLATE.replace(INVERSE_PLACEHOLDER, &block.join("\n"))
        }
    }
}

/// A trajectory that produced no item for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QaBatch {
    pub items: Vec<QaItem>,
    pub skipped: Vec<SkippedItem>,
}

/// One forward and one inverse item per trajectory, sharing the trajectory id.
/// Trajectories whose actions cannot be told apart once rendered are skipped
/// and reported.
pub fn generate_qa(trajs: &[KeyFrameTrajectory], enc: &ActionEncoding, seed: u64, opts: &QaOptions) -> Result<QaBatch> {
    let mut batch = QaBatch::default();
    for (k, traj) in trajs.iter().enumerate() {
        for (t, task) in Task::BOTH.into_iter().enumerate() {
            let item_seed = draw_rng(seed, (2 * k + t) as u64).next_u64();
            match make_item(traj, task, enc, item_seed, opts) {
                Ok(item) => batch.items.push(item),
                Err(e @ Error::RenderCollision(_)) => {
                    tracing::warn!(trajectory = %traj.trajectory_id, %task, error = %e, "skipping item");
                    batch.skipped.push(SkippedItem {
                        id: item_id(traj, task, enc.mode),
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfts::{build_dag, sample_trajectories, SamplerConfig};
    use crate::scenegraph::PredicateClass::*;
    use crate::segment::{segment, SegmentConfig};
    use crate::synthetic;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trajectories(steps: usize) -> Vec<KeyFrameTrajectory> {
        let seg = segment(&synthetic::kitchen_episode(), &SegmentConfig::default()).unwrap();
        let dag = build_dag(&seg).unwrap();
        let cfg = SamplerConfig {
            steps,
            samples: 40,
            seed: 3,
        };
        sample_trajectories(&seg, &dag, &cfg)
            .unwrap()
            .trajectories
            .into_iter()
            .map(|s| s.trajectory)
            .collect()
    }

    fn grasp() -> SceneGraphDiff {
        [Component::edge(Polarity::Add, "robot_r1", RightGrasping, "plate_93")]
            .into_iter()
            .collect()
    }

    #[test]
    fn renders_in_each_mode() {
        let d = grasp();
        assert_eq!(
            render_action(&d, &ActionEncoding::new(EncodingMode::Natural)).unwrap(),
            "grasp plate_93 with the right hand"
        );
        assert_eq!(
            render_action(&d, &ActionEncoding::new(EncodingMode::Symbolic)).unwrap(),
            "add RightGrasping(robot_r1, plate_93)"
        );
        assert_eq!(
            render_action(&d, &ActionEncoding::new(EncodingMode::Emoji)).unwrap(),
            "➕🫱(robot_r1, plate_93)"
        );
    }

    #[test]
    fn multi_clause_actions_follow_component_order() {
        let d: SceneGraphDiff = [
            Component::node(Polarity::Add, "fridge", Open),
            Component::edge(Polarity::Remove, "plate", OnTop, "table"),
            Component::transition("apple", "apple", "apple_slices"),
        ]
        .into_iter()
        .collect();
        assert_eq!(
            render_action(&d, &ActionEncoding::new(EncodingMode::Natural)).unwrap(),
            "plate is no longer on top of table; open fridge; apple turns from apple into apple_slices"
        );
    }

    #[test]
    fn every_class_has_both_polarities() {
        let table = TemplateTable::default();
        for class in PredicateClass::ALL {
            let cs = match class.arity() {
                Arity::Relational => vec![
                    Component::edge(Polarity::Add, "a", class, "b"),
                    Component::edge(Polarity::Remove, "a", class, "b"),
                ],
                Arity::Unary => vec![
                    Component::node(Polarity::Add, "a", class),
                    Component::node(Polarity::Remove, "a", class),
                ],
                Arity::Transition => vec![Component::transition("a", "x", "y")],
            };
            let texts: Vec<String> = cs.iter().map(|c| table.render(c).unwrap()).collect();
            assert!(texts.iter().all(|t| !t.contains('{')), "{texts:?}");
            if texts.len() == 2 {
                assert_ne!(texts[0], texts[1]);
            }
        }
    }

    #[test]
    fn empty_and_unknown_actions_rejected() {
        let enc = ActionEncoding::new(EncodingMode::Natural);
        assert!(matches!(render_action(&SceneGraphDiff::new(), &enc), Err(Error::EmptyAction)));
        let d: SceneGraphDiff = [Component::node(Polarity::Add, "a", crate::scenegraph::Predicate::parse("Frozen"))].into_iter().collect();
        assert!(matches!(render_action(&d, &enc), Err(Error::MissingTemplate { .. })));
        assert!(render_action(&d, &ActionEncoding::new(EncodingMode::Emoji)).is_err());
        assert_eq!(
            render_action(&d, &ActionEncoding::new(EncodingMode::Symbolic)).unwrap(),
            "add Frozen(a)"
        );
    }

    #[test]
    fn template_table_round_trips() {
        let t = TemplateTable::default();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<TemplateTable>(&json).unwrap(), t);
        assert_eq!(t.len(), 21);
    }

    #[test]
    fn forward_item_structure() {
        let traj = &trajectories(3)[0];
        let item = make_forward_qa(traj, &ActionEncoding::default(), 5, &QaOptions::default()).unwrap();
        assert_eq!(item.candidate_observations.len(), 2);
        assert_eq!(item.actions_rendered.len(), 2);
        assert!(item.ordered_observations.is_empty());
        assert_eq!(item.context, traj.frames[0].observation);
        assert_eq!(item.candidate_order, vec![2, 1]);
        // answering with the ground truth yields chronological frames
        let answered: Vec<&ObservationRef> = item
            .ground_truth
            .iter()
            .map(|&l| &item.candidate_observations[l - 1])
            .collect();
        let expected: Vec<&ObservationRef> = traj.frames[1..].iter().map(|f| &f.observation).collect();
        assert_eq!(answered, expected);
    }

    #[test]
    fn inverse_item_structure() {
        let traj = &trajectories(4)[0];
        let item = make_inverse_qa(traj, &ActionEncoding::default(), 5, &QaOptions::default()).unwrap();
        assert_eq!(item.ordered_observations.len(), 3);
        assert!(item.candidate_observations.is_empty());
        let answered: Vec<&String> = item.ground_truth.iter().map(|&l| &item.actions_rendered[l - 1]).collect();
        let expected: Vec<String> = traj
            .actions
            .iter()
            .map(|a| render_action(a, &ActionEncoding::default()).unwrap())
            .collect();
        assert_eq!(answered, expected.iter().collect::<Vec<_>>());
        for (l, _) in item.actions_rendered.iter().enumerate() {
            let step = item.candidate_order[l];
            assert_eq!(item.candidate_action(l + 1), &traj.actions[step - 1]);
        }
    }

    #[test]
    fn shuffles_are_seed_reproducible_and_never_identity() {
        for traj in trajectories(5) {
            let a = make_inverse_qa(&traj, &ActionEncoding::default(), 9, &QaOptions::default()).unwrap();
            let b = make_inverse_qa(&traj, &ActionEncoding::default(), 9, &QaOptions::default()).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.candidate_order, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn encoding_changes_only_strings() {
        let traj = &trajectories(5)[1];
        let opts = QaOptions::default();
        let n = make_forward_qa(traj, &ActionEncoding::new(EncodingMode::Natural), 4, &opts).unwrap();
        let e = make_forward_qa(traj, &ActionEncoding::new(EncodingMode::Emoji), 4, &opts).unwrap();
        assert_eq!(n.candidate_order, e.candidate_order);
        assert_eq!(n.ground_truth, e.ground_truth);
        assert_eq!(n.step_signatures, e.step_signatures);
        assert_ne!(n.actions_rendered, e.actions_rendered);
    }

    #[test]
    fn colliding_renders_are_reported() {
        let mut traj = trajectories(3)[0].clone();
        let mut table = TemplateTable::default();
        for class in PredicateClass::ALL {
            for op in [Polarity::Add, Polarity::Remove] {
                table.set(class.name(), Some(op), class.arity(), "something happens");
            }
        }
        table.set("Transition", None, Arity::Transition, "something happens");
        let enc = ActionEncoding {
            mode: EncodingMode::Natural,
            templates: table,
        };
        let err = make_forward_qa(&traj, &enc, 1, &QaOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RenderCollision(ref p) if p == &vec![(1, 2)]));
        let batch = generate_qa(std::slice::from_ref(&traj), &enc, 1, &QaOptions::default()).unwrap();
        assert!(batch.items.is_empty());
        assert_eq!(batch.skipped.len(), 2);

        traj.actions[0] = SceneGraphDiff::new();
        assert!(matches!(
            make_forward_qa(&traj, &ActionEncoding::default(), 1, &QaOptions::default()),
            Err(Error::EmptyStep(1))
        ));
    }

    #[test]
    fn generate_pairs_forward_and_inverse() {
        let trajs = trajectories(4);
        let batch = generate_qa(&trajs, &ActionEncoding::default(), 2, &QaOptions::default()).unwrap();
        assert_eq!(batch.items.len(), 2 * trajs.len());
        for pair in batch.items.chunks(2) {
            assert_eq!(pair[0].task, Task::Forward);
            assert_eq!(pair[1].task, Task::Inverse);
            assert_eq!(pair[0].trajectory_id, pair[1].trajectory_id);
            assert_ne!(pair[0].id, pair[1].id);
        }
    }

    #[test]
    fn prompt_substitutes_only_the_action_block() {
        let trajs = trajectories(4);
        let f = make_forward_qa(&trajs[0], &ActionEncoding::default(), 1, &QaOptions::default()).unwrap();
        let p = build_prompt(&f);
        let block = f
            .actions_rendered
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}. {a}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(p.replace(&block, FORWARD_PLACEHOLDER), FORWARD_TEMPLATE);
        let i = make_inverse_qa(&trajs[0], &ActionEncoding::default(), 1, &QaOptions::default()).unwrap();
        assert!(build_prompt(&i).contains("Action 3: "));
        assert_eq!(build_prompt(&f), build_prompt(&f.clone()));
    }

    #[test]
    fn shuffle_positions_are_uniform_without_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 10_000;
        let mut counts = [[0usize; 3]; 3];
        for _ in 0..draws {
            let order = shuffle_candidates(3, &mut rng, true);
            for (p, &s) in order.iter().enumerate() {
                counts[p][s - 1] += 1;
            }
        }
        let expected = draws as f64 / 3.0;
        for row in counts {
            let chi2: f64 = row.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            // 2 degrees of freedom, upper 0.001 quantile
            assert!(chi2 < 13.816, "{row:?} chi2 = {chi2}");
        }
    }

    #[test]
    fn rejection_is_uniform_over_non_identity_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws = 10_000;
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(shuffle_candidates(3, &mut rng, false)).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        assert!(!counts.contains_key(&vec![1, 2, 3]));
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, upper 0.001 quantile
        assert!(chi2 < 18.467, "{counts:?} chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn ground_truth_inverts_candidate_order(n in 1usize..9, seed in any::<u64>(), allow in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let order = shuffle_candidates(n, &mut rng, allow);
            let gt = labels_in_chronological_order(&order);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (1..=n).collect::<Vec<_>>());
            for (k, &label) in gt.iter().enumerate() {
                prop_assert_eq!(order[label - 1], k + 1);
            }
            if !allow && n >= 2 {
                prop_assert_ne!(order, (1..=n).collect::<Vec<_>>());
            }
        }
    }
}
