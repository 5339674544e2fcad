//! Symbolic scene graphs and the difference operator over them.
//!
//! A [`SceneGraph`] holds named entities with unary states and directed
//! relational edges. [`diff`] turns two graphs into a [`SceneGraphDiff`], a set
//! of atomic [`Component`]s, which doubles as the action representation.
//! [`visible_delta`] narrows a diff to what both flanking observations can see,
//! and [`SignatureBasis`] / [`cosine_similarity`] give the binary change
//! signatures used for near-duplicate detection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The built-in predicate classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredicateClass {
    RightGrasping,
    LeftGrasping,
    OnTop,
    Inside,
    Under,
    Contains,
    Covered,
    Open,
    ToggledOn,
    Cooked,
    Transition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Unary,
    Relational,
    Transition,
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arity::Unary => "unary",
            Arity::Relational => "relational",
            Arity::Transition => "transition",
        })
    }
}

impl PredicateClass {
    pub const ALL: [PredicateClass; 11] = [
        PredicateClass::RightGrasping,
        PredicateClass::LeftGrasping,
        PredicateClass::OnTop,
        PredicateClass::Inside,
        PredicateClass::Under,
        PredicateClass::Contains,
        PredicateClass::Covered,
        PredicateClass::Open,
        PredicateClass::ToggledOn,
        PredicateClass::Cooked,
        PredicateClass::Transition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredicateClass::RightGrasping => "RightGrasping",
            PredicateClass::LeftGrasping => "LeftGrasping",
            PredicateClass::OnTop => "OnTop",
            PredicateClass::Inside => "Inside",
            PredicateClass::Under => "Under",
            PredicateClass::Contains => "Contains",
            PredicateClass::Covered => "Covered",
            PredicateClass::Open => "Open",
            PredicateClass::ToggledOn => "ToggledOn",
            PredicateClass::Cooked => "Cooked",
            PredicateClass::Transition => "Transition",
        }
    }

    pub fn arity(self) -> Arity {
        match self {
            PredicateClass::Open | PredicateClass::ToggledOn | PredicateClass::Cooked => Arity::Unary,
            PredicateClass::Transition => Arity::Transition,
            _ => Arity::Relational,
        }
    }
}

impl FromStr for PredicateClass {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        PredicateClass::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or(())
    }
}

/// A predicate label as it appears in a scene graph. Labels outside the
/// built-in classes are kept verbatim so that loaders can flag, rather than
/// reject, unfamiliar states.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Predicate {
    Known(PredicateClass),
    Other(String),
}

impl Predicate {
    pub fn parse(label: &str) -> Self {
        match label.parse::<PredicateClass>() {
            Ok(class) => Predicate::Known(class),
            Err(()) => Predicate::Other(label.to_owned()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Predicate::Known(class) => class.name(),
            Predicate::Other(label) => label,
        }
    }

    pub fn class(&self) -> Option<PredicateClass> {
        match self {
            Predicate::Known(class) => Some(*class),
            Predicate::Other(_) => None,
        }
    }

    pub fn is(&self, class: PredicateClass) -> bool {
        self.class() == Some(class)
    }
}

impl From<PredicateClass> for Predicate {
    fn from(class: PredicateClass) -> Self {
        Predicate::Known(class)
    }
}

// Alphabetical by label, so canonical output does not depend on enum order.
impl Ord for Predicate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl PartialOrd for Predicate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let label = String::deserialize(deserializer)?;
        Ok(Predicate::parse(&label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Add,
    Remove,
}

impl Polarity {
    pub fn flip(self) -> Self {
        match self {
            Polarity::Add => Polarity::Remove,
            Polarity::Remove => Polarity::Add,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Add => "add",
            Polarity::Remove => "remove",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub category: String,
    pub states: BTreeSet<Predicate>,
}

/// A symbolic scene graph. Entity identity is the node name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    nodes: BTreeMap<String, Node>,
    edges: BTreeMap<(String, String), BTreeSet<Predicate>>,
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node, replacing the category of an existing one.
    pub fn add_node(&mut self, name: impl Into<String>, category: impl Into<String>) -> &mut Self {
        let category = category.into();
        self.nodes
            .entry(name.into())
            .and_modify(|n| n.category = category.clone())
            .or_insert_with(|| Node {
                category,
                states: BTreeSet::new(),
            });
        self
    }

    pub fn set_state(&mut self, name: &str, state: impl Into<Predicate>) -> Result<&mut Self> {
        let node = self
            .nodes
            .get_mut(name)
            .ok_or_else(|| Error::InvalidGraph(format!("no node named {name}")))?;
        node.states.insert(state.into());
        Ok(self)
    }

    pub fn add_edge(&mut self, from: &str, to: &str, state: impl Into<Predicate>) -> Result<&mut Self> {
        for end in [from, to] {
            if !self.nodes.contains_key(end) {
                return Err(Error::InvalidGraph(format!("edge endpoint {end} is not a node")));
            }
        }
        self.edges
            .entry((from.to_owned(), to.to_owned()))
            .or_default()
            .insert(state.into());
        Ok(self)
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.get(name)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains_node(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn category(&self, name: &str) -> Option<&str> {
        self.nodes.get(name).map(|n| n.category.as_str())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// All `(from, to, predicate)` relational triples.
    pub fn edge_triples(&self) -> impl Iterator<Item = (&str, &str, &Predicate)> {
        self.edges
            .iter()
            .flat_map(|((from, to), preds)| preds.iter().map(move |p| (from.as_str(), to.as_str(), p)))
    }

    pub fn has_edge(&self, from: &str, to: &str, predicate: &Predicate) -> bool {
        self.edges
            .get(&(from.to_owned(), to.to_owned()))
            .is_some_and(|s| s.contains(predicate))
    }

    pub fn has_state(&self, name: &str, predicate: &Predicate) -> bool {
        self.nodes.get(name).is_some_and(|n| n.states.contains(predicate))
    }

    /// Labels that are not built-in classes, or built-in classes used with the
    /// wrong arity (e.g. `OnTop` as a node state).
    pub fn unknown_predicates(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for node in self.nodes.values() {
            for p in &node.states {
                if p.class().map(|c| c.arity()) != Some(Arity::Unary) {
                    out.insert(p.as_str().to_owned());
                }
            }
        }
        for (_, _, p) in self.edge_triples() {
            if p.class().map(|c| c.arity()) != Some(Arity::Relational) {
                out.insert(p.as_str().to_owned());
            }
        }
        out
    }

    /// Applies one component in place. Returns `false` when the component
    /// cannot be represented (a missing endpoint or entity).
    pub fn apply(&mut self, component: &Component) -> bool {
        match component {
            Component::Edge { op, from, predicate, to } => {
                if !self.nodes.contains_key(from) || !self.nodes.contains_key(to) {
                    return false;
                }
                let key = (from.clone(), to.clone());
                match op {
                    Polarity::Add => {
                        self.edges.entry(key).or_default().insert(predicate.clone());
                    }
                    Polarity::Remove => {
                        if let Some(set) = self.edges.get_mut(&key) {
                            set.remove(predicate);
                            if set.is_empty() {
                                self.edges.remove(&key);
                            }
                        }
                    }
                }
                true
            }
            Component::Node { op, entity, predicate } => match self.nodes.get_mut(entity) {
                Some(node) => {
                    match op {
                        Polarity::Add => node.states.insert(predicate.clone()),
                        Polarity::Remove => node.states.remove(predicate),
                    };
                    true
                }
                None => false,
            },
            Component::Transition { entity, to, .. } => match self.nodes.get_mut(entity) {
                Some(node) => {
                    node.category = to.clone();
                    true
                }
                None => false,
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    category: String,
    name: String,
    #[serde(default)]
    states: Vec<Predicate>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    from: String,
    #[serde(default)]
    states: Vec<Predicate>,
    to: String,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    #[serde(default, alias = "Edges")]
    edges: Vec<EdgeRecord>,
    nodes: Vec<NodeRecord>,
}

impl TryFrom<GraphRecord> for SceneGraph {
    type Error = Error;

    fn try_from(record: GraphRecord) -> Result<Self> {
        let mut graph = SceneGraph::new();
        for node in record.nodes {
            if graph.nodes.contains_key(&node.name) {
                return Err(Error::InvalidGraph(format!("duplicate node name {}", node.name)));
            }
            let mut states = BTreeSet::new();
            for s in node.states {
                if !states.insert(s.clone()) {
                    return Err(Error::InvalidGraph(format!("state {s} repeated on {}", node.name)));
                }
            }
            graph.nodes.insert(
                node.name,
                Node {
                    category: node.category,
                    states,
                },
            );
        }
        for edge in record.edges {
            for s in edge.states {
                if graph.has_edge(&edge.from, &edge.to, &s) {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({}, {s}, {}) repeated",
                        edge.from, edge.to
                    )));
                }
                graph.add_edge(&edge.from, &edge.to, s)?;
            }
        }
        Ok(graph)
    }
}

impl From<&SceneGraph> for GraphRecord {
    fn from(graph: &SceneGraph) -> Self {
        GraphRecord {
            edges: graph
                .edges
                .iter()
                .map(|((from, to), states)| EdgeRecord {
                    from: from.clone(),
                    states: states.iter().cloned().collect(),
                    to: to.clone(),
                })
                .collect(),
            nodes: graph
                .nodes
                .iter()
                .map(|(name, n)| NodeRecord {
                    category: n.category.clone(),
                    name: name.clone(),
                    states: n.states.iter().cloned().collect(),
                })
                .collect(),
        }
    }
}

impl Serialize for SceneGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        GraphRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let record = GraphRecord::deserialize(deserializer)?;
        SceneGraph::try_from(record).map_err(serde::de::Error::custom)
    }
}

/// An atomic state change.
///
/// The derived ordering (kind, then fields in declaration order) is the
/// canonical component order used for rendering and deterministic pairing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Edge {
        op: Polarity,
        from: String,
        predicate: Predicate,
        to: String,
    },
    Node {
        op: Polarity,
        entity: String,
        predicate: Predicate,
    },
    Transition {
        entity: String,
        from: String,
        to: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Edge,
    Node,
    Transition,
}

impl Component {
    pub fn edge(op: Polarity, from: &str, predicate: impl Into<Predicate>, to: &str) -> Self {
        Component::Edge {
            op,
            from: from.to_owned(),
            predicate: predicate.into(),
            to: to.to_owned(),
        }
    }

    pub fn node(op: Polarity, entity: &str, predicate: impl Into<Predicate>) -> Self {
        Component::Node {
            op,
            entity: entity.to_owned(),
            predicate: predicate.into(),
        }
    }

    pub fn transition(entity: &str, from: &str, to: &str) -> Self {
        Component::Transition {
            entity: entity.to_owned(),
            from: from.to_owned(),
            to: to.to_owned(),
        }
    }

    pub fn kind(&self) -> ComponentKind {
        match self {
            Component::Edge { .. } => ComponentKind::Edge,
            Component::Node { .. } => ComponentKind::Node,
            Component::Transition { .. } => ComponentKind::Transition,
        }
    }

    pub fn op(&self) -> Option<Polarity> {
        match self {
            Component::Edge { op, .. } | Component::Node { op, .. } => Some(*op),
            Component::Transition { .. } => None,
        }
    }

    pub fn predicate(&self) -> Predicate {
        match self {
            Component::Edge { predicate, .. } | Component::Node { predicate, .. } => predicate.clone(),
            Component::Transition { .. } => Predicate::Known(PredicateClass::Transition),
        }
    }

    pub fn entities(&self) -> Vec<&str> {
        match self {
            Component::Edge { from, to, .. } => vec![from, to],
            Component::Node { entity, .. } | Component::Transition { entity, .. } => vec![entity],
        }
    }

    /// The same change viewed in reverse time.
    pub fn inverse(&self) -> Component {
        match self {
            Component::Edge { op, from, predicate, to } => Component::Edge {
                op: op.flip(),
                from: from.clone(),
                predicate: predicate.clone(),
                to: to.clone(),
            },
            Component::Node { op, entity, predicate } => Component::Node {
                op: op.flip(),
                entity: entity.clone(),
                predicate: predicate.clone(),
            },
            Component::Transition { entity, from, to } => Component::Transition {
                entity: entity.clone(),
                from: to.clone(),
                to: from.clone(),
            },
        }
    }

    /// Rewrites every entity name through `rename`.
    pub fn map_entities(&self, mut rename: impl FnMut(&str) -> String) -> Component {
        match self {
            Component::Edge { op, from, predicate, to } => Component::Edge {
                op: *op,
                from: rename(from),
                predicate: predicate.clone(),
                to: rename(to),
            },
            Component::Node { op, entity, predicate } => Component::Node {
                op: *op,
                entity: rename(entity),
                predicate: predicate.clone(),
            },
            Component::Transition { entity, from, to } => Component::Transition {
                entity: rename(entity),
                from: from.clone(),
                to: to.clone(),
            },
        }
    }

    /// Key identifying the underlying fact regardless of polarity.
    fn fact_key(&self) -> Component {
        match self {
            Component::Edge { op: Polarity::Remove, .. } | Component::Node { op: Polarity::Remove, .. } => {
                self.inverse()
            }
            _ => self.clone(),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Edge { op, from, predicate, to } => write!(f, "{op} {predicate}({from}, {to})"),
            Component::Node { op, entity, predicate } => write!(f, "{op} {predicate}({entity})"),
            Component::Transition { entity, from, to } => write!(f, "transition {entity}({from} -> {to})"),
        }
    }
}

/// A set of components: the difference between two scene graphs, or an action.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneGraphDiff {
    components: BTreeSet<Component>,
}

impl SceneGraphDiff {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a diff, rejecting sets that add and remove the same fact.
    pub fn from_components(components: impl IntoIterator<Item = Component>) -> Result<Self> {
        let components: BTreeSet<Component> = components.into_iter().collect();
        for c in &components {
            if c.op() == Some(Polarity::Add) && components.contains(&c.inverse()) {
                return Err(Error::ConflictingPolarity(c.clone()));
            }
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &BTreeSet<Component> {
        &self.components
    }

    pub fn iter(&self) -> impl Iterator<Item = &Component> {
        self.components.iter()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn contains(&self, c: &Component) -> bool {
        self.components.contains(c)
    }

    pub fn is_subset(&self, other: &SceneGraphDiff) -> bool {
        self.components.is_subset(&other.components)
    }

    pub fn inverse(&self) -> SceneGraphDiff {
        SceneGraphDiff {
            components: self.components.iter().map(Component::inverse).collect(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&Component) -> bool) -> SceneGraphDiff {
        SceneGraphDiff {
            components: self.components.iter().filter(|c| keep(c)).cloned().collect(),
        }
    }
}

impl FromIterator<Component> for SceneGraphDiff {
    /// Collects without the polarity check; use [`SceneGraphDiff::from_components`]
    /// for untrusted input.
    fn from_iter<I: IntoIterator<Item = Component>>(iter: I) -> Self {
        SceneGraphDiff {
            components: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a SceneGraphDiff {
    type Item = &'a Component;
    type IntoIter = std::collections::btree_set::Iter<'a, Component>;

    fn into_iter(self) -> Self::IntoIter {
        self.components.iter()
    }
}

#[derive(Serialize, Deserialize, Default)]
struct DiffNodeRecord {
    name: String,
    states: Vec<Predicate>,
}

#[derive(Serialize, Deserialize, Default)]
struct DiffSide {
    #[serde(default)]
    edges: Vec<EdgeRecord>,
    #[serde(default)]
    nodes: Vec<DiffNodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    from: String,
    name: String,
    to: String,
}

#[derive(Serialize, Deserialize)]
struct DiffRecord {
    #[serde(default)]
    add: DiffSide,
    #[serde(default)]
    remove: DiffSide,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    transitions: Vec<TransitionRecord>,
    #[serde(rename = "type")]
    kind: String,
}

fn side_of(diff: &SceneGraphDiff, polarity: Polarity) -> DiffSide {
    let mut edges: BTreeMap<(&str, &str), Vec<Predicate>> = BTreeMap::new();
    let mut nodes: BTreeMap<&str, Vec<Predicate>> = BTreeMap::new();
    for c in diff.iter() {
        match c {
            Component::Edge { op, from, predicate, to } if *op == polarity => {
                edges.entry((from, to)).or_default().push(predicate.clone());
            }
            Component::Node { op, entity, predicate } if *op == polarity => {
                nodes.entry(entity).or_default().push(predicate.clone());
            }
            _ => {}
        }
    }
    DiffSide {
        edges: edges
            .into_iter()
            .map(|((from, to), mut states)| {
                states.sort();
                EdgeRecord {
                    from: from.to_owned(),
                    states,
                    to: to.to_owned(),
                }
            })
            .collect(),
        nodes: nodes
            .into_iter()
            .map(|(name, mut states)| {
                states.sort();
                DiffNodeRecord {
                    name: name.to_owned(),
                    states,
                }
            })
            .collect(),
    }
}

impl Serialize for SceneGraphDiff {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let transitions = self
            .iter()
            .filter_map(|c| match c {
                Component::Transition { entity, from, to } => Some(TransitionRecord {
                    from: from.clone(),
                    name: entity.clone(),
                    to: to.clone(),
                }),
                _ => None,
            })
            .collect();
        DiffRecord {
            add: side_of(self, Polarity::Add),
            remove: side_of(self, Polarity::Remove),
            transitions,
            kind: "diff".to_owned(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SceneGraphDiff {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let record = DiffRecord::deserialize(deserializer)?;
        if record.kind != "diff" {
            return Err(serde::de::Error::custom(format!("expected type \"diff\", got {:?}", record.kind)));
        }
        let mut components = Vec::new();
        for (side, op) in [(record.add, Polarity::Add), (record.remove, Polarity::Remove)] {
            for e in side.edges {
                for p in e.states {
                    components.push(Component::edge(op, &e.from, p, &e.to));
                }
            }
            for n in side.nodes {
                for p in n.states {
                    components.push(Component::node(op, &n.name, p));
                }
            }
        }
        for t in record.transitions {
            components.push(Component::transition(&t.name, &t.from, &t.to));
        }
        SceneGraphDiff::from_components(components).map_err(serde::de::Error::custom)
    }
}

/// Pretty JSON with a trailing newline. Graphs and diffs emit keys and
/// entries in sorted order, so equal values print identically.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("plain data serializes");
    out.push('\n');
    out
}

/// Frame-indexed diffs, serialized as `{"<frame>": {"type": "diff", ...}}`.
pub type FrameDiffs = BTreeMap<u64, SceneGraphDiff>;

/// The set of entity names visible in one frame.
pub type VisibleSet = BTreeSet<String>;

/// Per-frame visibility, keyed by frame index.
pub type VisibilityMap = BTreeMap<u64, VisibleSet>;

/// Checks that every visible identifier names a node of `graph`.
pub fn validate_visibility(graph: &SceneGraph, visible: &VisibleSet) -> Result<()> {
    match visible.iter().find(|name| !graph.contains_node(name)) {
        Some(name) => Err(Error::InvalidGraph(format!("visible entity {name} is not a node"))),
        None => Ok(()),
    }
}

/// The change from `a` to `b`: removals are facts of `a` missing from `b`,
/// additions the converse. A persisting node whose category changed yields a
/// transition component.
pub fn diff(a: &SceneGraph, b: &SceneGraph) -> SceneGraphDiff {
    let mut out = BTreeSet::new();
    let empty = BTreeSet::new();

    let names: BTreeSet<&String> = a.nodes.keys().chain(b.nodes.keys()).collect();
    for name in names {
        let before = a.nodes.get(name);
        let after = b.nodes.get(name);
        let sa = before.map_or(&empty, |n| &n.states);
        let sb = after.map_or(&empty, |n| &n.states);
        for p in sa.difference(sb) {
            out.insert(Component::node(Polarity::Remove, name, p.clone()));
        }
        for p in sb.difference(sa) {
            out.insert(Component::node(Polarity::Add, name, p.clone()));
        }
        if let (Some(x), Some(y)) = (before, after) {
            if x.category != y.category {
                out.insert(Component::transition(name, &x.category, &y.category));
            }
        }
    }

    let keys: BTreeSet<&(String, String)> = a.edges.keys().chain(b.edges.keys()).collect();
    for key in keys {
        let sa = a.edges.get(key).unwrap_or(&empty);
        let sb = b.edges.get(key).unwrap_or(&empty);
        for p in sa.difference(sb) {
            out.insert(Component::edge(Polarity::Remove, &key.0, p.clone(), &key.1));
        }
        for p in sb.difference(sa) {
            out.insert(Component::edge(Polarity::Add, &key.0, p.clone(), &key.1));
        }
    }

    SceneGraphDiff { components: out }
}

/// Keeps the components whose entities are visible in both frames; transition
/// components only need the entity visible in one of them.
pub fn filter_visible(d: &SceneGraphDiff, vis_a: &VisibleSet, vis_b: &VisibleSet) -> SceneGraphDiff {
    d.filter(|c| match c {
        Component::Transition { entity, .. } => vis_a.contains(entity) || vis_b.contains(entity),
        _ => c.entities().iter().all(|e| vis_a.contains(*e) && vis_b.contains(*e)),
    })
}

pub fn visible_delta(a: &SceneGraph, b: &SceneGraph, vis_a: &VisibleSet, vis_b: &VisibleSet) -> SceneGraphDiff {
    filter_visible(&diff(a, b), vis_a, vis_b)
}

/// An ordered universe of components, fixed per trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SignatureBasis {
    components: Vec<Component>,
    index: HashMap<Component, usize>,
}

impl SignatureBasis {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the basis from diffs, in order of first appearance.
    pub fn from_diffs<'a>(diffs: impl IntoIterator<Item = &'a SceneGraphDiff>) -> Self {
        let mut basis = Self::new();
        for d in diffs {
            basis.observe(d);
        }
        basis
    }

    pub fn observe(&mut self, d: &SceneGraphDiff) {
        for c in d {
            self.insert(c.clone());
        }
    }

    pub fn insert(&mut self, c: Component) -> usize {
        if let Some(&i) = self.index.get(&c) {
            return i;
        }
        let i = self.components.len();
        self.index.insert(c.clone(), i);
        self.components.push(c);
        i
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn position(&self, c: &Component) -> Option<usize> {
        self.index.get(c).copied()
    }
}

impl Serialize for SignatureBasis {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.components.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SignatureBasis {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let components = Vec::<Component>::deserialize(deserializer)?;
        let mut basis = SignatureBasis::new();
        for c in components {
            basis.insert(c);
        }
        Ok(basis)
    }
}

/// Binary indicator vector over a [`SignatureBasis`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChangeSignature(Vec<u8>);

impl ChangeSignature {
    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b != 0).count()
    }
}

impl From<Vec<u8>> for ChangeSignature {
    fn from(bits: Vec<u8>) -> Self {
        ChangeSignature(bits.into_iter().map(|b| u8::from(b != 0)).collect())
    }
}

pub fn signature_of(d: &SceneGraphDiff, basis: &SignatureBasis) -> Result<ChangeSignature> {
    let mut bits = vec![0u8; basis.len()];
    for c in d {
        let i = basis.position(c).ok_or_else(|| Error::UnknownComponent(c.clone()))?;
        bits[i] = 1;
    }
    Ok(ChangeSignature(bits))
}

pub fn cosine_similarity(x: &ChangeSignature, y: &ChangeSignature) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::SignatureLengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let (nx, ny) = (x.count_ones(), y.count_ones());
    if nx == 0 || ny == 0 {
        return Err(Error::ZeroSignature);
    }
    let dot = x.0.iter().zip(&y.0).filter(|(a, b)| **a != 0 && **b != 0).count();
    Ok(dot as f64 / ((nx * ny) as f64).sqrt())
}

/// True when no fact occurs with both polarities.
pub fn is_consistent(d: &SceneGraphDiff) -> bool {
    let mut seen = BTreeSet::new();
    d.iter()
        .filter(|c| c.op().is_some())
        .all(|c| seen.insert(c.fact_key()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PredicateClass::*;

    fn kitchen() -> SceneGraph {
        let mut g = SceneGraph::new();
        g.add_node("robot_r1", "agent")
            .add_node("fridge", "fridge")
            .add_node("pen", "pen")
            .add_node("desk", "desk")
            .add_node("pineapple_1", "pineapple");
        g
    }

    #[test]
    fn exactly_eleven_classes_with_expected_arity() {
        assert_eq!(PredicateClass::ALL.len(), 11);
        let unary: Vec<_> = PredicateClass::ALL.iter().filter(|p| p.arity() == Arity::Unary).collect();
        assert_eq!(unary, [&Open, &ToggledOn, &Cooked]);
        let trans: Vec<_> = PredicateClass::ALL
            .iter()
            .filter(|p| p.arity() == Arity::Transition)
            .collect();
        assert_eq!(trans, [&Transition]);
        for p in PredicateClass::ALL {
            assert_eq!(p.name().parse::<PredicateClass>(), Ok(p));
        }
    }

    #[test]
    fn identity_diff_is_empty() {
        let g = kitchen();
        assert!(diff(&g, &g).is_empty());
    }

    #[test]
    fn category_change_is_a_transition() {
        let a = kitchen();
        let mut b = kitchen();
        b.add_node("pineapple_1", "diced_pineapple");
        let d = diff(&a, &b);
        assert_eq!(
            d.components().iter().cloned().collect::<Vec<_>>(),
            vec![Component::transition("pineapple_1", "pineapple", "diced_pineapple")]
        );
    }

    #[test]
    fn vanished_node_drops_its_states() {
        let mut a = kitchen();
        a.set_state("fridge", Open).unwrap();
        let mut b = SceneGraph::new();
        b.add_node("robot_r1", "agent");
        let d = diff(&a, &b);
        assert!(d.contains(&Component::node(Polarity::Remove, "fridge", Open)));
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn visibility_filters_per_component() {
        let a = kitchen();
        let mut b = kitchen();
        b.set_state("fridge", Open).unwrap();
        b.add_edge("pen", "desk", OnTop).unwrap();
        let all: VisibleSet = ["fridge", "pen", "desk"].iter().map(|s| s.to_string()).collect();
        let no_pen: VisibleSet = ["fridge", "desk"].iter().map(|s| s.to_string()).collect();
        let d = visible_delta(&a, &b, &all, &no_pen);
        assert_eq!(d.len(), 1);
        assert!(d.contains(&Component::node(Polarity::Add, "fridge", Open)));
        assert_eq!(visible_delta(&a, &b, &all, &all), diff(&a, &b));
    }

    #[test]
    fn transition_survives_one_sided_occlusion() {
        let a = kitchen();
        let mut b = kitchen();
        b.add_node("pineapple_1", "diced_pineapple");
        let seen: VisibleSet = ["pineapple_1".to_string()].into();
        let d = visible_delta(&a, &b, &seen, &VisibleSet::new());
        assert_eq!(d.len(), 1);
        assert!(visible_delta(&a, &b, &VisibleSet::new(), &VisibleSet::new()).is_empty());
    }

    #[test]
    fn signature_examples() {
        let a = Component::node(Polarity::Add, "fridge", Open);
        let b = Component::edge(Polarity::Add, "pen", OnTop, "desk");
        let c = Component::transition("pineapple_1", "pineapple", "diced_pineapple");
        let mut basis = SignatureBasis::new();
        for x in [&a, &b, &c] {
            basis.insert(x.clone());
        }
        let ab: SceneGraphDiff = [a.clone(), b.clone()].into_iter().collect();
        assert_eq!(signature_of(&ab, &basis).unwrap().bits(), &[1, 1, 0]);
        assert_eq!(signature_of(&SceneGraphDiff::new(), &basis).unwrap().bits(), &[0, 0, 0]);

        let stranger: SceneGraphDiff = [Component::node(Polarity::Add, "pen", Cooked)].into_iter().collect();
        match signature_of(&stranger, &basis) {
            Err(Error::UnknownComponent(x)) => assert_eq!(x.to_string(), "add Cooked(pen)"),
            other => panic!("expected UnknownComponent, got {other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        let ab = ChangeSignature::from(vec![1, 1, 0]);
        let ac = ChangeSignature::from(vec![1, 0, 1]);
        let c = ChangeSignature::from(vec![0, 0, 1]);
        let a = ChangeSignature::from(vec![1, 0, 0]);
        assert_eq!(cosine_similarity(&ab, &ab).unwrap(), 1.0);
        assert!((cosine_similarity(&ab, &ac).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(cosine_similarity(&a, &c).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&a, &ChangeSignature::from(vec![0, 0, 0])),
            Err(Error::ZeroSignature)
        ));
        assert!(matches!(
            cosine_similarity(&a, &ChangeSignature::from(vec![1])),
            Err(Error::SignatureLengthMismatch { .. })
        ));
    }

    #[test]
    fn conflicting_polarity_rejected() {
        let add = Component::node(Polarity::Add, "fridge", Open);
        let err = SceneGraphDiff::from_components([add.clone(), add.inverse()]).unwrap_err();
        assert!(matches!(err, Error::ConflictingPolarity(_)));
        assert!(!is_consistent(&[add.clone(), add.inverse()].into_iter().collect()));
    }

    #[test]
    fn loader_rejects_dangling_edges_and_duplicates() {
        let dangling = r#"{"nodes":[{"name":"a","category":"x","states":[]}],
            "edges":[{"from":"a","to":"b","states":["OnTop"]}]}"#;
        assert!(serde_json::from_str::<SceneGraph>(dangling).is_err());
        let dup = r#"{"nodes":[{"name":"a","category":"x"},{"name":"a","category":"y"}],"edges":[]}"#;
        assert!(serde_json::from_str::<SceneGraph>(dup).is_err());
        let repeated = r#"{"nodes":[{"name":"a","category":"x","states":["Open","Open"]}]}"#;
        assert!(serde_json::from_str::<SceneGraph>(repeated).is_err());
    }

    #[test]
    fn unknown_labels_are_kept_and_flagged() {
        let json = r#"{"nodes":[{"name":"a","category":"x","states":["Frozen","Open"]},
            {"name":"b","category":"y"}],
            "Edges":[{"from":"a","to":"b","states":["NextTo","OnTop"]}]}"#;
        let g: SceneGraph = serde_json::from_str(json).unwrap();
        assert!(g.has_state("a", &Predicate::Other("Frozen".into())));
        assert_eq!(
            g.unknown_predicates().into_iter().collect::<Vec<_>>(),
            vec!["Frozen".to_string(), "NextTo".to_string()]
        );
    }

    #[test]
    fn diff_json_keeps_transitions() {
        let d: SceneGraphDiff = [
            Component::transition("pineapple_1", "pineapple", "diced_pineapple"),
            Component::node(Polarity::Remove, "fridge", Open),
        ]
        .into_iter()
        .collect();
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(
            json,
            r#"{"add":{"edges":[],"nodes":[]},"remove":{"edges":[],"nodes":[{"name":"fridge","states":["Open"]}]},"transitions":[{"from":"pineapple","name":"pineapple_1","to":"diced_pineapple"}],"type":"diff"}"#
        );
        let back: SceneGraphDiff = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn apply_replays_a_diff() {
        let a = kitchen();
        let mut b = kitchen();
        b.set_state("fridge", Open).unwrap();
        b.add_edge("pen", "desk", OnTop).unwrap();
        b.add_node("pineapple_1", "diced_pineapple");
        let mut replay = a.clone();
        for c in &diff(&a, &b) {
            assert!(replay.apply(c));
        }
        assert_eq!(replay, b);
    }
}
