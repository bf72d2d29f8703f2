use std::path::{Path, PathBuf};
use std::time::Duration;

use eeg_dcvit::dataio::write_atomic;
use serde::{Deserialize, Serialize};

use crate::commands::CliError;
use crate::config::RunConfig;

/// Record of one invocation, written next to its outputs. Passing it back
/// via `--config` with the same command line reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: RunConfig) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            config,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            duration_s: 0.0,
        }
    }

    pub fn write(mut self, prefix: &Path, elapsed: Duration) -> Result<PathBuf, CliError> {
        self.duration_s = elapsed.as_secs_f64();
        let path = derived(prefix, "manifest.json");
        let json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        write_atomic(&path, &json)?;
        Ok(path)
    }
}

/// `prefix` with a known data extension removed.
pub fn prefix_of(out: &Path) -> PathBuf {
    match out.extension().and_then(|e| e.to_str()) {
        Some("eegd" | "eegds" | "dcvt") => out.with_extension(""),
        _ => out.to_path_buf(),
    }
}

/// `<prefix>.<suffix>`.
pub fn derived(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
