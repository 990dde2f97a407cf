//! `run_manifest.json`: what ran, with which inputs, and what it wrote.

use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `git describe --always --dirty` of the working directory, or
    /// `unknown` outside a repository.
    pub git_describe: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
    pub exit_code: i32,
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Collects the manifest while a command runs.
pub struct RunRecord {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    started: DateTime<Utc>,
}

impl RunRecord {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            config: None,
            seed: None,
            outputs: Vec::new(),
            started: Utc::now(),
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self, dir: &Path, exit_code: i32) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            git_describe: git_describe(),
            started: timestamp(self.started),
            finished: timestamp(Utc::now()),
            outputs: self.outputs,
            exit_code,
        };
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
