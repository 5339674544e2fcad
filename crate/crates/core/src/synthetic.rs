//! Scripted trajectories for tests, demos and smoke runs.

use std::collections::VecDeque;

use crate::error::Result;
use crate::kfts::{build_dag, count_paths, draw_paths, trajectory_from_path};
use crate::qa::{make_forward_qa, make_inverse_qa, ActionEncoding, EncodingMode, QaItem, QaOptions, Task};
use crate::scenegraph::{Component, Polarity, PredicateClass::*, SceneGraph, VisibleSet};
use crate::segment::{segment, ObservationRef, RawFrame, RawTrajectory, SegmentConfig};

/// Key frames the default segmenter keeps on [`segmentation_fixture`].
pub const SEGMENTATION_FIXTURE_KEY_FRAMES: [u64; 3] = [30, 100, 220];

/// A scripted change: the frame position it starts at and its components.
struct Event {
    at: usize,
    changes: Vec<Component>,
}

fn play(
    id: &str,
    initial: SceneGraph,
    frame_count: usize,
    stride: u64,
    events: &[Event],
    visible: impl Fn(usize, &SceneGraph) -> VisibleSet,
) -> RawTrajectory {
    let mut graph = initial;
    let mut frames = Vec::with_capacity(frame_count);
    for k in 0..frame_count {
        for e in events.iter().filter(|e| e.at == k) {
            for c in &e.changes {
                assert!(graph.apply(c), "scripted change {c} not applicable");
            }
        }
        let index = k as u64 * stride;
        frames.push(RawFrame {
            frame_index: index,
            visible: visible(k, &graph),
            graph: graph.clone(),
            observation: ObservationRef::new(format!("{id}/frame_{index:05}.png")).expect("nonempty"),
        });
    }
    RawTrajectory {
        trajectory_id: id.to_owned(),
        frame_rate: 30.0,
        frames,
    }
}

fn everything(_: usize, g: &SceneGraph) -> VisibleSet {
    g.nodes().map(|(n, _)| n.to_owned()).collect()
}

use Polarity::{Add, Remove};

/// Thirty frames, ten simulator frames apart, holding one fridge flicker
/// shorter than the default window, one repeat of an already accepted kind of
/// change (a second pizza finishing), and three distinct changes.
pub fn segmentation_fixture() -> RawTrajectory {
    let mut g = SceneGraph::new();
    g.add_node("robot_r1", "agent")
        .add_node("plate_93", "plate")
        .add_node("pizza_89", "pizza")
        .add_node("pizza_90", "pizza")
        .add_node("fridge_petcxr_0", "fridge")
        .add_node("breakfast_table", "breakfast_table");
    g.add_edge("plate_93", "breakfast_table", OnTop).expect("nodes exist");

    let events = [
        Event {
            at: 3,
            changes: vec![
                Component::edge(Add, "robot_r1", RightGrasping, "plate_93"),
                Component::edge(Remove, "plate_93", OnTop, "breakfast_table"),
            ],
        },
        Event {
            at: 5,
            changes: vec![Component::node(Add, "fridge_petcxr_0", Open)],
        },
        Event {
            at: 6,
            changes: vec![Component::node(Remove, "fridge_petcxr_0", Open)],
        },
        Event {
            at: 10,
            changes: vec![Component::node(Add, "pizza_89", Cooked)],
        },
        Event {
            at: 15,
            changes: vec![Component::node(Add, "pizza_90", Cooked)],
        },
        Event {
            at: 22,
            changes: vec![
                Component::edge(Remove, "robot_r1", RightGrasping, "plate_93"),
                Component::edge(Add, "plate_93", OnTop, "breakfast_table"),
            ],
        },
    ];
    play("segmentation_fixture", g, 30, 10, &events, everything)
}

/// A longer kitchen episode with twelve distinct changes, a short flicker,
/// partial visibility and one occluded category transition. Segments into
/// twelve key frames under the default configuration.
pub fn kitchen_episode() -> RawTrajectory {
    let mut g = SceneGraph::new();
    g.add_node("robot_r1", "agent")
        .add_node("plate_93", "plate")
        .add_node("bowl_92", "bowl")
        .add_node("soup_1", "soup")
        .add_node("pineapple_1", "pineapple")
        .add_node("fridge_petcxr_0", "fridge")
        .add_node("counter_1", "countertop")
        .add_node("stove_1", "stove")
        .add_node("tray_1", "tray")
        .add_node("breakfast_table", "breakfast_table");
    g.add_edge("plate_93", "counter_1", OnTop).expect("nodes exist");
    g.add_edge("pineapple_1", "counter_1", OnTop).expect("nodes exist");
    g.add_edge("bowl_92", "fridge_petcxr_0", Inside).expect("nodes exist");
    g.add_edge("soup_1", "bowl_92", Inside).expect("nodes exist");

    let step = |i: usize| 3 + 4 * i;
    let events = vec![
        Event {
            at: step(0),
            changes: vec![
                Component::edge(Add, "robot_r1", RightGrasping, "plate_93"),
                Component::edge(Remove, "plate_93", OnTop, "counter_1"),
            ],
        },
        // plate briefly registers on the tray while carried
        Event {
            at: step(0) + 1,
            changes: vec![Component::edge(Add, "plate_93", OnTop, "tray_1")],
        },
        Event {
            at: step(0) + 2,
            changes: vec![Component::edge(Remove, "plate_93", OnTop, "tray_1")],
        },
        Event {
            at: step(1),
            changes: vec![Component::node(Add, "fridge_petcxr_0", Open)],
        },
        Event {
            at: step(2),
            changes: vec![
                Component::edge(Add, "robot_r1", LeftGrasping, "bowl_92"),
                Component::edge(Remove, "bowl_92", Inside, "fridge_petcxr_0"),
            ],
        },
        Event {
            at: step(3),
            changes: vec![Component::node(Remove, "fridge_petcxr_0", Open)],
        },
        Event {
            at: step(4),
            changes: vec![
                Component::edge(Remove, "robot_r1", RightGrasping, "plate_93"),
                Component::edge(Add, "plate_93", OnTop, "breakfast_table"),
            ],
        },
        Event {
            at: step(5),
            changes: vec![Component::node(Add, "stove_1", ToggledOn)],
        },
        Event {
            at: step(6),
            changes: vec![
                Component::edge(Remove, "robot_r1", LeftGrasping, "bowl_92"),
                Component::edge(Add, "bowl_92", OnTop, "stove_1"),
            ],
        },
        Event {
            at: step(7),
            changes: vec![Component::transition("pineapple_1", "pineapple", "diced_pineapple")],
        },
        Event {
            at: step(8),
            changes: vec![Component::node(Add, "soup_1", Cooked)],
        },
        Event {
            at: step(9),
            changes: vec![
                Component::edge(Add, "robot_r1", RightGrasping, "pineapple_1"),
                Component::edge(Remove, "pineapple_1", OnTop, "counter_1"),
            ],
        },
        Event {
            at: step(10),
            changes: vec![Component::node(Remove, "stove_1", ToggledOn)],
        },
        Event {
            at: step(11),
            changes: vec![
                Component::edge(Remove, "robot_r1", RightGrasping, "pineapple_1"),
                Component::edge(Add, "pineapple_1", OnTop, "plate_93"),
            ],
        },
    ];

    let fridge_window = step(1)..=step(3);
    let stove_from = step(5);
    let pineapple_hidden = step(7);
    play("kitchen_episode", g, step(11) + 4, 15, &events, move |k, g| {
        g.nodes()
            .map(|(n, _)| n)
            .filter(|n| match *n {
                "fridge_petcxr_0" => fridge_window.contains(&k),
                "stove_1" => k >= stove_from,
                "pineapple_1" => k != pineapple_hidden,
                _ => true,
            })
            .map(str::to_owned)
            .collect()
    })
}

/// A lamp is switched on, then the fridge opens while the plate is picked up, closes, and opens again
/// before the plate is put back. The repeated opening lets forward answers
/// that visit the two open states out of order still satisfy every action.
pub fn toggle_episode() -> RawTrajectory {
    let mut g = SceneGraph::new();
    g.add_node("robot_r1", "agent")
        .add_node("fridge_1", "fridge")
        .add_node("plate_1", "plate")
        .add_node("table_1", "table")
        .add_node("lamp_1", "lamp");
    g.add_edge("plate_1", "table_1", OnTop).expect("nodes exist");
    let events = vec![
        Event {
            at: 1,
            changes: vec![Component::node(Add, "lamp_1", ToggledOn)],
        },
        Event {
            at: 2,
            changes: vec![
                Component::node(Add, "fridge_1", Open),
                Component::edge(Add, "robot_r1", RightGrasping, "plate_1"),
                Component::edge(Remove, "plate_1", OnTop, "table_1"),
            ],
        },
        Event {
            at: 3,
            changes: vec![Component::node(Remove, "fridge_1", Open)],
        },
        Event {
            at: 4,
            changes: vec![Component::node(Add, "fridge_1", Open)],
        },
        Event {
            at: 5,
            changes: vec![
                Component::edge(Remove, "robot_r1", RightGrasping, "plate_1"),
                Component::edge(Add, "plate_1", OnTop, "table_1"),
            ],
        },
    ];
    play("toggle_episode", g, 7, 100, &events, everything)
}

/// Up to `count` symbolic items from `episode` with distinct ids. Lengths
/// `3..=max_steps` take turns; each drawn path yields a forward item, then an
/// inverse one.
pub fn episode_items(episode: &RawTrajectory, count: usize, max_steps: usize, seed: u64) -> Result<Vec<QaItem>> {
    let frames = segment(episode, &SegmentConfig::default())?;
    let dag = build_dag(&frames)?;
    let enc = ActionEncoding::new(EncodingMode::Symbolic);
    let opts = QaOptions::default();
    let mut queues = Vec::new();
    for steps in 3..=max_steps.max(3) {
        let table = count_paths(&dag, steps)?;
        let mut distinct: Vec<Vec<usize>> = Vec::new();
        for p in draw_paths(&dag, &table, seed ^ steps as u64, count) {
            if !distinct.contains(&p) {
                distinct.push(p);
            }
        }
        let pairs: VecDeque<(Vec<usize>, Task)> = distinct
            .into_iter()
            .flat_map(|p| [(p.clone(), Task::Forward), (p, Task::Inverse)])
            .collect();
        queues.push(pairs);
    }
    let mut items = Vec::with_capacity(count);
    while items.len() < count && queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if items.len() == count {
                break;
            }
            let Some((path, task)) = q.pop_front() else { continue };
            let traj = trajectory_from_path(&frames, &dag, &path)?;
            let item_seed = seed.wrapping_add(items.len() as u64);
            items.push(match task {
                Task::Forward => make_forward_qa(&traj, &enc, item_seed, &opts)?,
                Task::Inverse => make_inverse_qa(&traj, &enc, item_seed, &opts)?,
            });
        }
    }
    Ok(items)
}

/// Fifty items of up to five frames: forty from [`kitchen_episode`] and ten
/// from [`toggle_episode`].
pub fn verifier_fixture_items(seed: u64) -> Result<Vec<QaItem>> {
    let mut items = episode_items(&kitchen_episode(), 40, 5, seed)?;
    items.extend(episode_items(&toggle_episode(), 10, 5, seed)?);
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{segment, SegmentConfig};

    #[test]
    fn kitchen_episode_segments_into_twelve() {
        let t = kitchen_episode();
        t.validate().unwrap();
        let seg = segment(&t, &SegmentConfig::default()).unwrap();
        assert_eq!(seg.len(), 12);
    }

    #[test]
    fn kitchen_items_cover_lengths_and_tasks() {
        let items = episode_items(&kitchen_episode(), 12, 5, 3).unwrap();
        assert_eq!(items.len(), 12);
        let lengths: std::collections::BTreeSet<usize> = items.iter().map(|i| i.steps).collect();
        assert_eq!(lengths.into_iter().collect::<Vec<_>>(), vec![3, 4, 5]);
        assert!(Task::BOTH.iter().all(|t| items.iter().any(|i| i.task == *t)));
        assert_eq!(items, episode_items(&kitchen_episode(), 12, 5, 3).unwrap());
    }

    #[test]
    fn toggle_episode_keeps_every_change() {
        let seg = segment(&toggle_episode(), &SegmentConfig::default()).unwrap();
        assert_eq!(seg.len(), 5);
        for seed in 0..5 {
            let items = verifier_fixture_items(seed).unwrap();
            assert_eq!(items.len(), 50);
            let ids: std::collections::BTreeSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
            assert_eq!(ids.len(), 50);
        }
    }
}
