//! Run manifests: one per results file, written next to it.

use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wmbench_core::qa::EncodingMode;

use crate::error::{io_err, Result};
use crate::store::timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePreprocessing {
    pub width: u32,
    pub height: u32,
    pub filter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointInfo {
    pub url: String,
    pub model: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoding: Option<EncodingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<EndpointInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_preprocessing: Option<ImagePreprocessing>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let now = Utc::now();
        RunManifest {
            run_id: format!("{command}-{}", now.format("%Y%m%dT%H%M%S%.3fZ")),
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_at: timestamp(now),
            finished_at: None,
            dataset: None,
            dataset_sha256: None,
            responder: None,
            encoding: None,
            seed: None,
            endpoint: None,
            image_preprocessing: None,
            outputs: Vec::new(),
        }
    }

    pub fn with_dataset(mut self, path: &Path) -> Result<Self> {
        self.dataset_sha256 = Some(file_sha256(path)?);
        self.dataset = Some(path.to_owned());
        Ok(self)
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(timestamp(Utc::now()));
    }

    /// Where the manifest for `output` lives: `<output>.manifest.json`, or
    /// `manifest.json` inside an output directory.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            output.join("manifest.json")
        } else {
            let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.json");
            output.with_file_name(name)
        }
    }

    pub fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::path_for(output);
        crate::io::write_json(&path, self)?;
        Ok(path)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
