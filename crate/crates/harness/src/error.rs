use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("stage {stage} failed for {trajectory}: {source}")]
    Stage {
        stage: Stage,
        trajectory: String,
        #[source]
        source: wmbench_core::Error,
    },

    #[error(transparent)]
    Core(#[from] wmbench_core::Error),

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("environment variable {0} is not set")]
    MissingCredential(String),

    #[error("endpoint request failed: {message}")]
    Endpoint { message: String, transient: bool },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Pipeline stage, for error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Segment,
    Sample,
    GenQa,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Segment => "segment",
            Stage::Sample => "sample",
            Stage::GenQa => "gen-qa",
        })
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
