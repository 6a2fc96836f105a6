use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Cli, Failure, DEFAULT_OUT};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run, written next to its outputs. `invocation` holds the
/// fully resolved flags (config file already merged), so `replay` needs
/// nothing else besides the input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub invocation: Cli,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    /// Per EM phase, for `estimate`.
    pub converged: Option<Vec<bool>>,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn out_dir(&self) -> PathBuf {
        self.invocation.common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn write(&self) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::other(e.to_string()))?;
        labordyn_core::write_atomic(&self.out_dir().join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
    }
}
