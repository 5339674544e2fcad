//! Append-only answer log.
//!
//! Each answer is one JSON line, flushed before `append` returns. Existing
//! lines are never rewritten; reopening the file replays them.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use wmbench_core::agreement::AnnotationRecord;
use wmbench_core::verify::Prediction;

use crate::error::{io_err, HarnessError, Result};
use crate::io::{ensure_parent, read_jsonl};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub responder_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<i64>>,
    pub received_at: String,
    /// The run manifest this answer belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl AnswerRecord {
    pub fn now(item_id: &str, responder_id: &str) -> Self {
        AnswerRecord {
            item_id: item_id.to_owned(),
            responder_id: responder_id.to_owned(),
            raw_text: None,
            permutation: None,
            received_at: timestamp(Utc::now()),
            run_id: None,
        }
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            item_id: self.item_id.clone(),
            raw_text: self.raw_text.clone(),
            permutation: self.permutation.clone(),
        }
    }

    /// The answer as an annotation, when it holds a usable permutation.
    pub fn annotation(&self) -> Option<AnnotationRecord> {
        let labels = self.permutation.as_ref()?.iter().map(|&v| usize::try_from(v).ok()).collect::<Option<Vec<_>>>()?;
        Some(AnnotationRecord {
            item_id: self.item_id.clone(),
            annotator_id: self.responder_id.clone(),
            answer: labels,
            timestamp: Some(self.received_at.clone()),
        })
    }
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Inner {
    file: File,
    records: Vec<AnswerRecord>,
}

pub struct AnswerStore {
    path: PathBuf,
    known_items: Option<BTreeSet<String>>,
    inner: Mutex<Inner>,
}

impl AnswerStore {
    /// Opens or creates the log. With `known_items`, appends naming other
    /// items are refused.
    pub fn open(path: &Path, known_items: Option<BTreeSet<String>>) -> Result<Self> {
        let records = if path.exists() { read_jsonl(path)? } else { Vec::new() };
        ensure_parent(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(AnswerStore {
            path: path.to_owned(),
            known_items,
            inner: Mutex::new(Inner { file, records }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: AnswerRecord) -> Result<()> {
        if let Some(known) = &self.known_items {
            if !known.contains(&record.item_id) {
                return Err(HarnessError::UnknownItem(record.item_id));
            }
        }
        let mut line = serde_json::to_vec(&record).expect("plain data serializes");
        line.push(b'\n');
        let mut inner = self.inner.lock().expect("store lock");
        inner.file.write_all(&line).map_err(io_err(&self.path))?;
        inner.file.sync_data().map_err(io_err(&self.path))?;
        inner.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> Vec<AnswerRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_answer(&self, item_id: &str, responder_id: &str) -> bool {
        self.inner
            .lock()
            .expect("store lock")
            .records
            .iter()
            .any(|r| r.item_id == item_id && r.responder_id == responder_id)
    }
}

/// First answer per item, optionally restricted to one responder.
pub fn predictions_from(records: &[AnswerRecord], responder: Option<&str>) -> Vec<Prediction> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .filter(|r| responder.is_none_or(|who| r.responder_id == who))
        .filter(|r| seen.insert(r.item_id.clone()))
        .map(AnswerRecord::prediction)
        .collect()
}
