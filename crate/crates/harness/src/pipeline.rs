//! Segment, sample and generate QA items end to end.
//!
//! Quotas are per trajectory, per length and per task. When a length has no
//! more paths than the quota, every path is taken; otherwise distinct paths
//! are drawn until the quota is met or the draw budget runs out. Seeds for
//! each (trajectory, length) are derived from the run seed and the
//! trajectory id, so staged runs and single runs emit the same bytes.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wmbench_core::kfts::{build_dag, count_paths, draw_path, draw_rng, list_paths, trajectory_from_path, KeyFrameTrajectory, TransitionDag};
use wmbench_core::qa::{generate_qa, ActionEncoding, EncodingMode, QaItem, QaOptions, SkippedItem, Task};
use wmbench_core::segment::{segment, RawTrajectory, SegmentConfig, SegmentedFrameSet};

use crate::error::{HarnessError, Result, Stage};

/// Lower bound on the draw budget for one length.
const MIN_DRAW_BUDGET: usize = 1024;
/// Draws allowed per requested path.
const DRAWS_PER_PATH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub segment: SegmentConfig,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Items per trajectory, length and task.
    pub per_step: usize,
    pub encoding: EncodingMode,
    pub allow_identity: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segment: SegmentConfig::default(),
            min_steps: 3,
            max_steps: 10,
            per_step: 560,
            encoding: EncodingMode::Natural,
            allow_identity: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn steps(&self) -> RangeInclusive<usize> {
        self.min_steps..=self.max_steps
    }

    pub fn validate(&self) -> Result<(), wmbench_core::Error> {
        self.segment.validate()?;
        if self.min_steps < 2 || self.min_steps > self.max_steps {
            return Err(wmbench_core::Error::InvalidConfig(format!(
                "step range {}..={} must be nonempty and start at 2 or more",
                self.min_steps, self.max_steps
            )));
        }
        if self.per_step == 0 {
            return Err(wmbench_core::Error::InvalidConfig("per_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seed for one trajectory, length and purpose, independent of input order.
pub fn derive_seed(seed: u64, trajectory_id: &str, steps: usize, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((trajectory_id.len() as u64).to_le_bytes());
    h.update(trajectory_id.as_bytes());
    h.update((steps as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Paths of one length chosen under a quota.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotaPaths {
    pub total_paths: BigUint,
    pub draws: usize,
    /// Distinct paths in lexicographic order.
    pub paths: Vec<Vec<usize>>,
}

pub fn paths_under_quota(dag: &TransitionDag, steps: usize, quota: usize, seed: u64) -> Result<QuotaPaths, wmbench_core::Error> {
    let table = count_paths(dag, steps)?;
    let total_paths = table.total();
    if total_paths <= BigUint::from(quota) {
        return Ok(QuotaPaths {
            total_paths,
            draws: 0,
            paths: list_paths(dag, &table),
        });
    }
    let budget = (quota * DRAWS_PER_PATH).max(MIN_DRAW_BUDGET);
    let mut chosen = BTreeSet::new();
    let mut draws = 0;
    while chosen.len() < quota && draws < budget {
        if let Some(p) = draw_path(dag, &table, &mut draw_rng(seed, draws as u64)) {
            chosen.insert(p);
        }
        draws += 1;
    }
    Ok(QuotaPaths {
        total_paths,
        draws,
        paths: chosen.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSample {
    pub steps: usize,
    pub quota: usize,
    /// Decimal, since counts can exceed 64 bits.
    pub total_paths: String,
    pub draws: usize,
    pub shortfall: usize,
    pub trajectories: Vec<KeyFrameTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySamples {
    pub trajectory_id: String,
    pub segmented_frames: usize,
    pub dag_edges: usize,
    pub lengths: Vec<LengthSample>,
}

pub fn sample_stage(frames: &SegmentedFrameSet, steps: RangeInclusive<usize>, quota: usize, seed: u64) -> Result<TrajectorySamples, wmbench_core::Error> {
    let dag = build_dag(frames)?;
    let mut lengths = Vec::new();
    for l in steps {
        let chosen = paths_under_quota(&dag, l, quota, derive_seed(seed, &frames.trajectory_id, l, "sample"))?;
        let trajectories = chosen
            .paths
            .iter()
            .map(|p| trajectory_from_path(frames, &dag, p))
            .collect::<wmbench_core::Result<Vec<_>>>()?;
        if trajectories.len() < quota {
            tracing::warn!(
                trajectory = %frames.trajectory_id,
                steps = l,
                quota,
                found = trajectories.len(),
                "path quota not met"
            );
        }
        lengths.push(LengthSample {
            steps: l,
            quota,
            total_paths: chosen.total_paths.to_string(),
            draws: chosen.draws,
            shortfall: quota.saturating_sub(trajectories.len()),
            trajectories,
        });
    }
    Ok(TrajectorySamples {
        trajectory_id: frames.trajectory_id.clone(),
        segmented_frames: frames.len(),
        dag_edges: dag.edge_count(),
        lengths,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthReport {
    pub trajectory_id: String,
    pub steps: usize,
    pub quota: usize,
    pub total_paths: String,
    pub sampled_paths: usize,
    pub forward_items: usize,
    pub inverse_items: usize,
    pub forward_shortfall: usize,
    pub inverse_shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QaStageOutput {
    pub items: Vec<QaItem>,
    pub skipped: Vec<SkippedItem>,
    pub lengths: Vec<LengthReport>,
}

/// Forward and inverse items for every sampled trajectory.
pub fn qa_stage(samples: &TrajectorySamples, encoding: EncodingMode, allow_identity: bool, seed: u64) -> Result<QaStageOutput, wmbench_core::Error> {
    let enc = ActionEncoding::new(encoding);
    let opts = QaOptions {
        allow_identity,
        ..QaOptions::default()
    };
    let mut out = QaStageOutput::default();
    for l in &samples.lengths {
        let batch = generate_qa(&l.trajectories, &enc, derive_seed(seed, &samples.trajectory_id, l.steps, "qa"), &opts)?;
        let count = |t: Task| batch.items.iter().filter(|i| i.task == t).count();
        let (fwd, inv) = (count(Task::Forward), count(Task::Inverse));
        out.lengths.push(LengthReport {
            trajectory_id: samples.trajectory_id.clone(),
            steps: l.steps,
            quota: l.quota,
            total_paths: l.total_paths.clone(),
            sampled_paths: l.trajectories.len(),
            forward_items: fwd,
            inverse_items: inv,
            forward_shortfall: l.quota.saturating_sub(fwd),
            inverse_shortfall: l.quota.saturating_sub(inv),
        });
        out.items.extend(batch.items);
        out.skipped.extend(batch.skipped);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub trajectory_id: String,
    pub raw_frames: usize,
    pub segmented_frames: usize,
    pub dag_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub trajectories: Vec<TrajectorySummary>,
    pub lengths: Vec<LengthReport>,
    pub skipped: Vec<SkippedItem>,
    pub forward_items: usize,
    pub inverse_items: usize,
    pub total_shortfall: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub segmented: Vec<SegmentedFrameSet>,
    pub samples: Vec<TrajectorySamples>,
    pub items: Vec<QaItem>,
    pub report: PipelineReport,
}

struct PerTrajectory {
    segmented: SegmentedFrameSet,
    samples: TrajectorySamples,
    qa: QaStageOutput,
}

fn stage<T>(stage: Stage, trajectory: &str, r: Result<T, wmbench_core::Error>) -> Result<T> {
    r.map_err(|source| HarnessError::Stage {
        stage,
        trajectory: trajectory.to_owned(),
        source,
    })
}

fn run_one(t: &RawTrajectory, cfg: &PipelineConfig) -> Result<PerTrajectory> {
    let id = &t.trajectory_id;
    let segmented = stage(Stage::Segment, id, segment(t, &cfg.segment))?;
    let samples = stage(Stage::Sample, id, sample_stage(&segmented, cfg.steps(), cfg.per_step, cfg.seed))?;
    let qa = stage(Stage::GenQa, id, qa_stage(&samples, cfg.encoding, cfg.allow_identity, cfg.seed))?;
    Ok(PerTrajectory { segmented, samples, qa })
}

/// Runs every stage for each trajectory, in parallel across trajectories.
/// Output order follows input order.
pub fn run_pipeline(inputs: &[RawTrajectory], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut ids = BTreeSet::new();
    for t in inputs {
        if !ids.insert(&t.trajectory_id) {
            return Err(wmbench_core::Error::InvalidConfig(format!("duplicate trajectory id {}", t.trajectory_id)).into());
        }
    }
    let results: Vec<PerTrajectory> = inputs.par_iter().map(|t| run_one(t, cfg)).collect::<Result<_>>()?;

    let mut out = PipelineOutput {
        segmented: Vec::new(),
        samples: Vec::new(),
        items: Vec::new(),
        report: PipelineReport {
            config: cfg.clone(),
            trajectories: Vec::new(),
            lengths: Vec::new(),
            skipped: Vec::new(),
            forward_items: 0,
            inverse_items: 0,
            total_shortfall: 0,
        },
    };
    for (t, r) in inputs.iter().zip(results) {
        out.report.trajectories.push(TrajectorySummary {
            trajectory_id: t.trajectory_id.clone(),
            raw_frames: t.frames.len(),
            segmented_frames: r.samples.segmented_frames,
            dag_edges: r.samples.dag_edges,
        });
        out.report.lengths.extend(r.qa.lengths);
        out.report.skipped.extend(r.qa.skipped);
        out.items.extend(r.qa.items);
        out.segmented.push(r.segmented);
        out.samples.push(r.samples);
    }
    out.report.forward_items = out.items.iter().filter(|i| i.task == Task::Forward).count();
    out.report.inverse_items = out.items.len() - out.report.forward_items;
    out.report.total_shortfall = out.report.lengths.iter().map(|l| l.forward_shortfall + l.inverse_shortfall).sum();
    tracing::info!(
        items = out.items.len(),
        shortfall = out.report.total_shortfall,
        "pipeline finished"
    );
    Ok(out)
}
