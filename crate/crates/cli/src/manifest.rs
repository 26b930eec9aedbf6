//! Run manifests: every artifact-producing command records what it is about
//! to do — resolved configuration, seed, code version, start time — in
//! `manifest.json` before any heavy work starts, so interrupted runs still
//! leave an audit trail.

use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use prose_fd::datagen::BuildConfig;
use prose_fd::model::ModelConfig;
use prose_fd::train::TrainConfig;

use crate::errors::CliError;

#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// `git describe --always --dirty`, or "unknown" outside a repository.
    pub code_version: String,
    pub started_unix: u64,
    pub out_dir: String,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate: Option<BuildConfig>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, out_dir: &Path, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            code_version: git_describe(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            out_dir: out_dir.display().to_string(),
            threads,
            model: None,
            train: None,
            generate: None,
        }
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Creates `dir` if needed and writes `dir/manifest.json`.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Io(format!("cannot encode manifest: {e}")))?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
