//! Loading datasets and predictions, and scoring whole corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use wmbench_core::qa::QaItem;
use wmbench_core::verify::{verify, Prediction, Verdict};

use crate::error::Result;
use crate::io::read_jsonl;

pub fn load_items(path: &Path) -> Result<Vec<QaItem>> {
    read_jsonl(path)
}

#[derive(Deserialize)]
struct PredictionLine {
    #[serde(flatten)]
    prediction: Prediction,
    #[serde(default)]
    responder_id: Option<String>,
}

/// Predictions from a predictions file or an answer log. With `responder`,
/// only that responder's lines are used. The first line per item wins.
pub fn load_predictions(path: &Path, responder: Option<&str>) -> Result<Vec<Prediction>> {
    let lines: Vec<PredictionLine> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for l in lines {
        if responder.is_some_and(|who| l.responder_id.as_deref() != Some(who)) {
            continue;
        }
        if seen.insert(l.prediction.item_id.clone()) {
            out.push(l.prediction);
        } else {
            tracing::warn!(item = %l.prediction.item_id, "ignoring repeated prediction");
        }
    }
    Ok(out)
}

/// One verdict per item, in item order. Items without a prediction are
/// rejected as unparseable.
pub fn verify_corpus(items: &[QaItem], predictions: &[Prediction]) -> Vec<Verdict> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.item_id.as_str(), p)).collect();
    let known: BTreeSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let stray = by_id.keys().filter(|k| !known.contains(*k)).count();
    if stray > 0 {
        tracing::warn!(stray, "predictions for unknown items ignored");
    }
    items
        .iter()
        .map(|item| match by_id.get(item.id.as_str()) {
            Some(p) => verify(item, p),
            None => verify(
                item,
                &Prediction {
                    item_id: item.id.clone(),
                    raw_text: None,
                    permutation: None,
                },
            ),
        })
        .collect()
}
