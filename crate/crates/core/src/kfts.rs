//! Key-frame trajectory sampling.
//!
//! Segmented frames form a DAG whose edges join frame pairs with a nonempty
//! visible change. Length-`L` paths are counted exactly by dynamic programming
//! and drawn uniformly by weighted backtracking from the end node.

use std::collections::BTreeMap;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::{diff, visible_delta, SceneGraph, SceneGraphDiff, VisibleSet};
use crate::segment::{ObservationRef, SegmentedFrameSet};

/// Largest `C(M, L)` that [`enumerate_paths`] will scan by default.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Forward edges over `m` frames. Only `i < j` pairs can be edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagRecord", into = "DagRecord")]
pub struct TransitionDag {
    m: usize,
    // preds[j] lists every i < j with E_ij = 1, ascending
    preds: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct DagRecord {
    m: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<DagRecord> for TransitionDag {
    type Error = Error;

    fn try_from(r: DagRecord) -> Result<Self> {
        TransitionDag::from_edges(r.m, r.edges)
    }
}

impl From<TransitionDag> for DagRecord {
    fn from(d: TransitionDag) -> Self {
        DagRecord {
            m: d.m,
            edges: d.edges().collect(),
        }
    }
}

impl TransitionDag {
    pub fn empty(m: usize) -> Self {
        TransitionDag {
            m,
            preds: vec![Vec::new(); m],
        }
    }

    pub fn from_edges(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut dag = Self::empty(m);
        for (i, j) in edges {
            if i >= j || j >= m {
                return Err(Error::InvalidConfig(format!(
                    "edge ({i}, {j}) is not a forward pair on {m} nodes"
                )));
            }
            dag.preds[j].push(i);
        }
        for p in &mut dag.preds {
            p.sort_unstable();
            p.dedup();
        }
        Ok(dag)
    }

    /// Every forward pair is an edge.
    pub fn complete(m: usize) -> Self {
        TransitionDag {
            m,
            preds: (0..m).map(|j| (0..j).collect()).collect(),
        }
    }

    /// Only consecutive pairs are edges.
    pub fn chain(m: usize) -> Self {
        TransitionDag {
            m,
            preds: (0..m).map(|j| if j == 0 { vec![] } else { vec![j - 1] }).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        j < self.m && self.preds[j].binary_search(&i).is_ok()
    }

    pub fn predecessors(&self, j: usize) -> &[usize] {
        &self.preds[j]
    }

    pub fn edge_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    /// Edges ordered by `(i, j)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut all: Vec<(usize, usize)> = self
            .preds
            .iter()
            .enumerate()
            .flat_map(|(j, ps)| ps.iter().map(move |&i| (i, j)))
            .collect();
        all.sort_unstable();
        all.into_iter()
    }

    pub fn is_path(&self, path: &[usize]) -> bool {
        path.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }
}

/// `E_ij = 1` iff the change from frame `i` to frame `j` has a component whose
/// entities are visible in both frames (a category transition needs its
/// entity visible in either).
pub fn build_dag(frames: &SegmentedFrameSet) -> Result<TransitionDag> {
    let m = frames.len();
    if m < 2 {
        return Err(Error::TooFewFrames(m));
    }
    let e = &frames.entries;
    let mut dag = TransitionDag::empty(m);
    for j in 1..m {
        for i in 0..j {
            if !visible_delta(&e[i].graph, &e[j].graph, &e[i].visible, &e[j].visible).is_empty() {
                dag.preds[j].push(i);
            }
        }
    }
    Ok(dag)
}

/// `dp[ℓ][i]`: number of length-`ℓ` paths ending at node `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCountTable {
    steps: usize,
    dp: Vec<Vec<BigUint>>,
}

impl PathCountTable {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Count for path length `ell` (1-based) ending at node `i`.
    pub fn get(&self, ell: usize, i: usize) -> &BigUint {
        &self.dp[ell - 1][i]
    }

    /// Row of counts for length `ell`.
    pub fn row(&self, ell: usize) -> &[BigUint] {
        &self.dp[ell - 1]
    }

    pub fn total(&self) -> BigUint {
        self.dp[self.steps - 1].iter().sum()
    }
}

pub fn count_paths(dag: &TransitionDag, steps: usize) -> Result<PathCountTable> {
    if steps == 0 {
        return Err(Error::InvalidConfig("path length must be at least 1".into()));
    }
    let m = dag.m;
    let mut dp = Vec::with_capacity(steps);
    dp.push(vec![BigUint::one(); m]);
    for ell in 1..steps {
        let prev: &Vec<BigUint> = &dp[ell - 1];
        let row = (0..m)
            .map(|i| dag.preds[i].iter().map(|&j| &prev[j]).sum())
            .collect();
        dp.push(row);
    }
    Ok(PathCountTable { steps, dp })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidConfig(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent generator for draw `draw` under `seed`.
pub fn draw_rng(seed: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    rng
}

fn weighted_pick<'a>(
    rng: &mut ChaCha8Rng,
    options: impl Iterator<Item = (usize, &'a BigUint)> + Clone,
) -> Option<usize> {
    let total: BigUint = options.clone().map(|(_, w)| w).sum();
    if total.is_zero() {
        return None;
    }
    let mut x = rng.gen_biguint_below(&total);
    for (i, w) in options {
        if x < *w {
            return Some(i);
        }
        x -= w;
    }
    unreachable!("draw below total always lands on an option")
}

/// One backtracking draw. `None` when the DAG has no path of the table's length.
pub fn draw_path(dag: &TransitionDag, table: &PathCountTable, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let steps = table.steps;
    let end = weighted_pick(rng, table.row(steps).iter().enumerate())?;
    let mut path = vec![end];
    let mut cur = end;
    for ell in (2..=steps).rev() {
        let weights = table.row(ell - 1);
        let Some(prev) = weighted_pick(rng, dag.preds[cur].iter().map(|&j| (j, &weights[j]))) else {
            break;
        };
        path.push(prev);
        cur = prev;
    }
    (path.len() == steps).then(|| {
        path.reverse();
        path
    })
}

/// All `cfg.samples` draws in draw order, duplicates kept.
pub fn draw_paths(dag: &TransitionDag, table: &PathCountTable, seed: u64, samples: usize) -> Vec<Vec<usize>> {
    (0..samples as u64)
        .filter_map(|r| draw_path(dag, table, &mut draw_rng(seed, r)))
        .collect()
}

/// A frame on a sampled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    pub frame_index: u64,
    #[serde(flatten)]
    pub graph: SceneGraph,
    pub observation: ObservationRef,
    pub visible: VisibleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrameTrajectory {
    pub trajectory_id: String,
    /// Positions in the segmented-frame pool, strictly increasing.
    pub indices: Vec<usize>,
    pub frames: Vec<KeyFrame>,
    /// Visible change per step.
    pub actions: Vec<SceneGraphDiff>,
    /// Unfiltered change per step.
    pub full_actions: Vec<SceneGraphDiff>,
}

impl KeyFrameTrajectory {
    pub fn steps(&self) -> usize {
        self.indices.len()
    }

    pub fn frame_indices(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }
}

/// Materializes the trajectory for `path`. Every step must be a DAG edge.
pub fn trajectory_from_path(frames: &SegmentedFrameSet, dag: &TransitionDag, path: &[usize]) -> Result<KeyFrameTrajectory> {
    if path.len() < 2 {
        return Err(Error::InvalidConfig("a trajectory needs at least 2 frames".into()));
    }
    if let Some(w) = path.windows(2).find(|w| !dag.has_edge(w[0], w[1])) {
        return Err(Error::InvalidConfig(format!("({}, {}) is not a DAG edge", w[0], w[1])));
    }
    let entries = &frames.entries;
    let picked: Vec<KeyFrame> = path
        .iter()
        .map(|&i| {
            let e = &entries[i];
            KeyFrame {
                frame_index: e.frame_index,
                graph: e.graph.clone(),
                observation: e.observation.clone(),
                visible: e.visible.clone(),
            }
        })
        .collect();
    let mut actions = Vec::with_capacity(path.len() - 1);
    let mut full_actions = Vec::with_capacity(path.len() - 1);
    for w in picked.windows(2) {
        let a = visible_delta(&w[0].graph, &w[1].graph, &w[0].visible, &w[1].visible);
        if a.is_empty() {
            return Err(Error::EmptyStep(actions.len()));
        }
        actions.push(a);
        full_actions.push(diff(&w[0].graph, &w[1].graph));
    }
    Ok(KeyFrameTrajectory {
        trajectory_id: frames.trajectory_id.clone(),
        indices: path.to_vec(),
        frames: picked,
        actions,
        full_actions,
    })
}

/// A distinct sampled path and how many draws produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    pub count: usize,
    pub trajectory: KeyFrameTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub config: SamplerConfig,
    pub total_paths: BigUint,
    pub draws: usize,
    /// Distinct paths in lexicographic index order.
    pub trajectories: Vec<SampledTrajectory>,
}

/// Draws `cfg.samples` paths and returns the distinct ones with counts.
/// Empty when the DAG has no path of length `cfg.steps`.
pub fn sample_trajectories(frames: &SegmentedFrameSet, dag: &TransitionDag, cfg: &SamplerConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let table = count_paths(dag, cfg.steps)?;
    let total_paths = table.total();
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for p in draw_paths(dag, &table, cfg.seed, cfg.samples) {
        *counts.entry(p).or_default() += 1;
    }
    let trajectories = counts
        .into_iter()
        .map(|(path, count)| {
            Ok(SampledTrajectory {
                count,
                trajectory: trajectory_from_path(frames, dag, &path)?,
            })
        })
        .collect::<Result<_>>()?;
    tracing::debug!(%total_paths, draws = cfg.samples, "sampled key-frame trajectories");
    Ok(SampleSet {
        config: *cfg,
        total_paths,
        draws: cfg.samples,
        trajectories,
    })
}

/// Every valid length-`steps` path, found by scanning all increasing index
/// tuples. Refuses when `C(M, steps)` exceeds `cap`.
pub fn enumerate_paths(dag: &TransitionDag, steps: usize, cap: u64) -> Result<Vec<Vec<usize>>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("path length must be at least 1".into()));
    }
    let m = dag.m;
    let candidates = if steps > m {
        BigUint::zero()
    } else {
        num_integer::binomial(BigUint::from(m), BigUint::from(steps))
    };
    if candidates > BigUint::from(cap) {
        return Err(Error::EnumerationCap { candidates, cap });
    }
    let mut out = Vec::new();
    if steps > m {
        return Ok(out);
    }
    let mut tuple: Vec<usize> = (0..steps).collect();
    loop {
        if dag.is_path(&tuple) {
            out.push(tuple.clone());
        }
        // next combination in lexicographic order
        let Some(k) = (0..steps).rev().find(|&k| tuple[k] < m - steps + k) else {
            break;
        };
        tuple[k] += 1;
        for t in k + 1..steps {
            tuple[t] = tuple[t - 1] + 1;
        }
    }
    Ok(out)
}

/// Every valid path of the table's length, walking only prefixes that can be
/// completed. Cost is proportional to the number of paths.
pub fn list_paths(dag: &TransitionDag, table: &PathCountTable) -> Vec<Vec<usize>> {
    fn extend(dag: &TransitionDag, table: &PathCountTable, ell: usize, node: usize, tail: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        tail.push(node);
        if ell == 1 {
            out.push(tail.iter().rev().copied().collect());
        } else {
            for &j in dag.predecessors(node) {
                if !table.get(ell - 1, j).is_zero() {
                    extend(dag, table, ell - 1, j, tail, out);
                }
            }
        }
        tail.pop();
    }

    let steps = table.steps;
    let mut out = Vec::new();
    let mut tail = Vec::with_capacity(steps);
    for i in 0..dag.m {
        if !table.get(steps, i).is_zero() {
            extend(dag, table, steps, i, &mut tail, &mut out);
        }
    }
    out.sort();
    out
}
