//! Model querying: a schema-driven HTTP adapter and an offline source.
//!
//! The request body is a JSON template whose string leaves may hold
//! `{{model}}`, `{{prompt}}`, `{{temperature}}` and `{{images}}`. The answer
//! text is read from `response_path`, a dotted path where numeric segments
//! index arrays. The API key is only ever read from the environment variable
//! named by `api_key_env`.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use wmbench_core::qa::{build_prompt, QaItem, Task};
use wmbench_core::verify::Prediction;

use crate::error::{HarnessError, Result};
use crate::store::{AnswerRecord, AnswerStore};

pub const DEFAULT_IMAGE_SIZE: u32 = 512;
pub const RESIZE_FILTER: FilterType = FilterType::Lanczos3;
pub const RESIZE_FILTER_NAME: &str = "lanczos3";

fn default_request() -> Value {
    serde_json::json!({
        "model": "{{model}}",
        "temperature": "{{temperature}}",
        "messages": [{
            "role": "user",
            "content": ["{{images}}", {"type": "text", "text": "{{prompt}}"}]
        }]
    })
}

fn default_image_part() -> Value {
    serde_json::json!({"type": "image_url", "image_url": {"url": "{{image_url}}"}})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "default_request")]
    pub request_template: Value,
    #[serde(default = "default_image_part")]
    pub image_part: Value,
    #[serde(default = "default_response_path")]
    pub response_path: String,
    /// Square edge length images are resized to; `None` sends them as stored.
    #[serde(default = "default_image_size")]
    pub image_size: Option<u32>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
}

fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}
fn default_response_path() -> String {
    "choices.0.message.content".into()
}
fn default_image_size() -> Option<u32> {
    Some(DEFAULT_IMAGE_SIZE)
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    4
}
fn default_backoff() -> u64 {
    500
}
fn default_backoff_max() -> u64 {
    16_000
}

impl EndpointConfig {
    pub fn new(url: &str, model: &str) -> Self {
        EndpointConfig {
            url: url.to_owned(),
            model: model.to_owned(),
            api_key_env: None,
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            request_template: default_request(),
            image_part: default_image_part(),
            response_path: default_response_path(),
            image_size: default_image_size(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            backoff_max_ms: default_backoff_max(),
        }
    }

    pub fn from_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// Delay before retry `attempt` (0-based): doubling, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.backoff_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.backoff_max_ms))
    }

    fn headers(&self) -> Result<Vec<(String, String)>> {
        match &self.api_key_env {
            None => Ok(Vec::new()),
            Some(var) => {
                let key = std::env::var(var).map_err(|_| HarnessError::MissingCredential(var.clone()))?;
                Ok(vec![(self.auth_header.clone(), format!("{}{}", self.auth_prefix, key))])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure {
    pub message: String,
    /// Worth retrying: timeouts, connection errors, 429 and 5xx.
    pub transient: bool,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value, timeout: Duration) -> Result<Value, TransportFailure>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder().build().map_err(|e| HarnessError::Endpoint {
            message: e.to_string(),
            transient: false,
        })?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value, timeout: Duration) -> Result<Value, TransportFailure> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| TransportFailure {
            message: e.to_string(),
            transient: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportFailure {
                message: format!("HTTP {status}: {}", text.chars().take(300).collect::<String>()),
                transient: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        resp.json().map_err(|e| TransportFailure {
            message: format!("invalid JSON response: {e}"),
            transient: false,
        })
    }
}

/// Observations shown with the item, context first.
pub fn item_images(item: &QaItem) -> Vec<&str> {
    let rest = match item.task {
        Task::Forward => &item.candidate_observations,
        Task::Inverse => &item.ordered_observations,
    };
    std::iter::once(&item.context).chain(rest).map(|o| o.as_str()).collect()
}

/// A PNG data URL of the image, resized to `size`×`size` when given.
pub fn encode_image(path: &Path, size: Option<u32>) -> Result<String> {
    let err = |message: String| HarnessError::Image {
        path: path.to_owned(),
        message,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let img = match size {
        Some(s) => img.resize_exact(s, s, RESIZE_FILTER),
        None => img,
    };
    let mut png = Vec::new();
    img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| err(e.to_string()))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

fn fill(template: &Value, vars: &BTreeMap<&str, Value>) -> Value {
    match template {
        Value::String(s) => {
            if let Some(v) = s.strip_prefix("{{").and_then(|r| r.strip_suffix("}}")).and_then(|k| vars.get(k)) {
                return v.clone();
            }
            let mut out = s.clone();
            for (k, v) in vars {
                if let Value::String(text) = v {
                    out = out.replace(&format!("{{{{{k}}}}}"), text);
                }
            }
            Value::String(out)
        }
        Value::Array(xs) => {
            let mut out = Vec::new();
            for x in xs {
                // an "{{images}}" entry expands in place
                match (x, vars.get("images")) {
                    (Value::String(s), Some(Value::Array(imgs))) if s == "{{images}}" => out.extend(imgs.iter().cloned()),
                    _ => out.push(fill(x, vars)),
                }
            }
            Value::Array(out)
        }
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), fill(v, vars))).collect()),
        other => other.clone(),
    }
}

/// The request body for one item.
pub fn build_request(cfg: &EndpointConfig, item: &QaItem, image_urls: &[String]) -> Value {
    let images: Vec<Value> = image_urls
        .iter()
        .map(|u| fill(&cfg.image_part, &BTreeMap::from([("image_url", Value::String(u.clone()))])))
        .collect();
    let vars = BTreeMap::from([
        ("model", Value::String(cfg.model.clone())),
        ("prompt", Value::String(build_prompt(item))),
        ("temperature", serde_json::json!(cfg.temperature)),
        ("images", Value::Array(images)),
    ]);
    fill(&cfg.request_template, &vars)
}

/// Follows a dotted path such as `choices.0.message.content`.
pub fn extract_text(response: &Value, path: &str) -> Option<String> {
    let mut cur = response;
    for seg in path.split('.').filter(|s| !s.is_empty()) {
        cur = match seg.parse::<usize>() {
            Ok(i) => cur.get(i)?,
            Err(_) => cur.get(seg)?,
        };
    }
    match cur {
        Value::String(s) => Some(s.clone()),
        Value::Null => None,
        other => Some(other.to_string()),
    }
}

/// Sends `body`, retrying transient failures with capped exponential backoff.
pub fn post_with_retry(
    transport: &dyn Transport,
    cfg: &EndpointConfig,
    body: &Value,
    sleep: &dyn Fn(Duration),
) -> Result<String> {
    let headers = cfg.headers()?;
    let timeout = Duration::from_secs(cfg.timeout_secs);
    let mut attempt = 0;
    loop {
        match transport.post_json(&cfg.url, &headers, body, timeout) {
            Ok(resp) => {
                return extract_text(&resp, &cfg.response_path).ok_or_else(|| HarnessError::Endpoint {
                    message: format!("no text at {}", cfg.response_path),
                    transient: false,
                })
            }
            Err(f) if f.transient && attempt < cfg.max_retries => {
                let wait = cfg.backoff(attempt);
                tracing::warn!(attempt, ?wait, error = %f.message, "transient endpoint failure, retrying");
                sleep(wait);
                attempt += 1;
            }
            Err(f) => {
                return Err(HarnessError::Endpoint {
                    message: f.message,
                    transient: f.transient,
                })
            }
        }
    }
}

pub enum ResponseSource<'a> {
    /// Answers read from a predictions file; no network.
    Offline(BTreeMap<String, Prediction>),
    Remote {
        cfg: &'a EndpointConfig,
        transport: &'a dyn Transport,
        /// Root that observation paths are relative to.
        data_dir: PathBuf,
        sleep: &'a dyn Fn(Duration),
    },
}

/// Obtains the answer to one item.
pub fn query_model(item: &QaItem, source: &ResponseSource<'_>) -> Result<Prediction> {
    match source {
        ResponseSource::Offline(preds) => preds.get(&item.id).cloned().ok_or_else(|| HarnessError::Endpoint {
            message: "no prediction in file".into(),
            transient: false,
        }),
        ResponseSource::Remote {
            cfg,
            transport,
            data_dir,
            sleep,
        } => {
            let urls = item_images(item)
                .into_iter()
                .map(|p| encode_image(&data_dir.join(p), cfg.image_size))
                .collect::<Result<Vec<_>>>()?;
            let body = build_request(cfg, item, &urls);
            let text = post_with_retry(*transport, cfg, &body, *sleep)?;
            Ok(Prediction::from_text(&item.id, &text))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unanswered {
    pub item_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryReport {
    pub answered: usize,
    pub already_stored: usize,
    /// Items with no usable answer; they score as rejections.
    pub unanswered: Vec<Unanswered>,
}

/// Queries every item not yet answered by `responder` and appends each
/// answer to the store. Failures are reported per item and do not stop the run.
pub fn query_items(
    items: &[QaItem],
    source: &ResponseSource<'_>,
    store: &AnswerStore,
    responder: &str,
    run_id: Option<&str>,
) -> Result<QueryReport> {
    let mut report = QueryReport::default();
    for item in items {
        if store.has_answer(&item.id, responder) {
            report.already_stored += 1;
            continue;
        }
        match query_model(item, source) {
            Ok(pred) => {
                let mut rec = AnswerRecord::now(&item.id, responder);
                rec.raw_text = pred.raw_text;
                rec.permutation = pred.permutation;
                rec.run_id = run_id.map(str::to_owned);
                store.append(rec)?;
                report.answered += 1;
            }
            Err(e @ (HarnessError::Endpoint { .. } | HarnessError::Image { .. })) => {
                tracing::warn!(item = %item.id, error = %e, "item left unanswered");
                report.unanswered.push(Unanswered {
                    item_id: item.id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
