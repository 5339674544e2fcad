use sha2::{Digest, Sha256};
use wmbench_core::kfts::{build_dag, count_paths, list_paths, trajectory_from_path};
use wmbench_core::qa::{build_prompt, make_forward_qa, make_inverse_qa, ActionEncoding, EncodingMode, QaOptions, FORWARD_TEMPLATE, INVERSE_TEMPLATE};
use wmbench_core::scenegraph::{canonical_json, diff, Component, FrameDiffs, Polarity::*, PredicateClass::*, SceneGraph, SceneGraphDiff};
use wmbench_core::segment::{segment, SegmentConfig};
use wmbench_core::synthetic::kitchen_episode;

const GRAPH: &str = include_str!("fixtures/scene_graph.json");
const DIFF: &str = include_str!("fixtures/scene_graph_diff.json");
const FORWARD_EXPECTED: &str = include_str!("fixtures/forward_prompt_expected.txt");
const INVERSE_EXPECTED: &str = include_str!("fixtures/inverse_prompt_expected.txt");

fn sha256(s: &str) -> String {
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn scene_graph_round_trip_is_byte_stable() {
    let g: SceneGraph = serde_json::from_str(GRAPH).unwrap();
    assert_eq!(g.node_count(), 13);
    assert_eq!(g.edge_triples().count(), 10);
    assert_eq!(canonical_json(&g), GRAPH);
}

#[test]
fn diff_round_trip_is_byte_stable() {
    let d: FrameDiffs = serde_json::from_str(DIFF).unwrap();
    assert_eq!(d[&2442].len(), 3);
    assert_eq!(canonical_json(&d), DIFF);
}

#[test]
fn diff_order_in_input_does_not_matter() {
    let shuffled = r#"{"type": "diff",
        "remove": {"edges": [
            {"from": "plate_93", "to": "pizza_89", "states": ["Under"]},
            {"from": "plate_93", "to": "breakfast_table_xftrki_0", "states": ["OnTop"]}], "nodes": []},
        "add": {"nodes": [], "edges": [{"from": "robot_r1", "to": "plate_93", "states": ["RightGrasping"]}]}}"#;
    let d: SceneGraphDiff = serde_json::from_str(shuffled).unwrap();
    let fixture: FrameDiffs = serde_json::from_str(DIFF).unwrap();
    assert_eq!(d, fixture[&2442]);
}

#[test]
fn exemplar_diff_is_the_grasp_of_plate_93() {
    // the frame before: plate_93 still on the table under the pizza, not held
    let after: SceneGraph = serde_json::from_str(GRAPH).unwrap();
    let mut before = after.clone();
    before.apply(&Component::edge(Remove, "robot_r1", RightGrasping, "plate_93"));
    before.apply(&Component::edge(Add, "plate_93", Under, "pizza_89"));
    before.apply(&Component::edge(Add, "plate_93", OnTop, "breakfast_table_xftrki_0"));
    let fixture: FrameDiffs = serde_json::from_str(DIFF).unwrap();
    assert_eq!(diff(&before, &after), fixture[&2442]);
}

#[test]
fn templates_are_pinned() {
    assert_eq!(FORWARD_TEMPLATE.len(), 1440);
    assert_eq!(INVERSE_TEMPLATE.len(), 1259);
    assert_eq!(sha256(FORWARD_TEMPLATE), "5b4130ff50826234f8e9077cfabbef94eca6e877de4c2eb1eec95ea0eec6da57");
    assert_eq!(sha256(INVERSE_TEMPLATE), "38ffc7132941a06469e0249f5db38f1b78caee7753929d1a2206253ab1716d77");
}

#[test]
fn prompts_match_fixtures_byte_for_byte() {
    let frames = segment(&kitchen_episode(), &SegmentConfig::default()).unwrap();
    let dag = build_dag(&frames).unwrap();
    let path = list_paths(&dag, &count_paths(&dag, 4).unwrap()).remove(0);
    let traj = trajectory_from_path(&frames, &dag, &path).unwrap();
    let enc = ActionEncoding::new(EncodingMode::Natural);
    let actions = [
        "grasp plate_93 with the right hand",
        "open fridge_petcxr_0",
        "place plate_93 on top of breakfast_table_xftrki_0",
    ];

    let mut fwd = make_forward_qa(&traj, &enc, 1, &QaOptions::default()).unwrap();
    fwd.actions_rendered = actions.iter().map(|s| s.to_string()).collect();
    assert_eq!(build_prompt(&fwd), FORWARD_EXPECTED);

    let mut inv = make_inverse_qa(&traj, &enc, 1, &QaOptions::default()).unwrap();
    inv.actions_rendered = actions.iter().map(|s| s.to_string()).collect();
    assert_eq!(build_prompt(&inv), INVERSE_EXPECTED);
}
