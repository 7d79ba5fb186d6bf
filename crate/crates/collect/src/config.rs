use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use crate::error::ApiError;

pub const ENV_BIND: &str = "VKT_BIND";
pub const ENV_DATASET_DIR: &str = "VKT_DATASET_DIR";
pub const ENV_OUTPUT: &str = "VKT_OUTPUT";
pub const ENV_ABANDONED: &str = "VKT_ABANDONED_OUTPUT";
pub const ENV_TIMEOUT: &str = "VKT_SESSION_TIMEOUT_SECS";

#[derive(Clone, Debug)]
pub struct Config {
    pub bind: SocketAddr,
    /// Either a dataset directory (holding `manifest.json`) or a directory
    /// of them.
    pub dataset_dir: PathBuf,
    /// Completed sessions, one JSON record per line.
    pub output: PathBuf,
    /// Abandoned sessions, kept apart from the training data.
    pub abandoned: PathBuf,
    /// Inactivity after which an active session is abandoned.
    pub timeout: Duration,
}

impl Config {
    pub fn new(dataset_dir: PathBuf, output: PathBuf) -> Self {
        let abandoned = abandoned_path(&output);
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            dataset_dir,
            output,
            abandoned,
            timeout: Duration::from_secs(60 * 60),
        }
    }

    /// Reads the environment. Only the dataset directory is required.
    pub fn from_env() -> Result<Self, ApiError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let dataset_dir = var(ENV_DATASET_DIR)
            .map(PathBuf::from)
            .ok_or_else(|| ApiError::config(format!("{ENV_DATASET_DIR} is not set")))?;
        let output = var(ENV_OUTPUT)
            .map(PathBuf::from)
            .unwrap_or_else(|| "sessions.jsonl".into());
        let mut cfg = Self::new(dataset_dir, output);
        if let Some(b) = var(ENV_BIND) {
            cfg.bind = b
                .parse()
                .map_err(|e| ApiError::config(format!("{ENV_BIND}='{b}': {e}")))?;
        }
        if let Some(a) = var(ENV_ABANDONED) {
            cfg.abandoned = a.into();
        }
        if let Some(t) = var(ENV_TIMEOUT) {
            let secs: u64 = t
                .parse()
                .map_err(|e| ApiError::config(format!("{ENV_TIMEOUT}='{t}': {e}")))?;
            cfg.timeout = Duration::from_secs(secs);
        }
        Ok(cfg)
    }
}

/// `out.jsonl` -> `out.abandoned.jsonl`.
pub fn abandoned_path(output: &std::path::Path) -> PathBuf {
    let stem = output
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sessions");
    output.with_file_name(format!("{stem}.abandoned.jsonl"))
}
