//! Every command drops a `manifest.json` in its output directory recording
//! what ran, against which data, with the complete effective configuration.
//! The report command stitches runs together from these files alone.

use std::collections::BTreeMap;
use std::path::Path;

use pathstar::error::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Which subcommand produced this directory.
    pub command: String,
    pub version: String,
    /// Digest of the fully resolved configuration below.
    pub config_fingerprint: String,
    /// Digest of the dataset the command generated or consumed.
    pub dataset_fingerprint: String,
    /// True when training fell back to the escalated dimensions.
    #[serde(default)]
    pub escalated: bool,
    /// "ok", "stopped_early", "epoch_budget_exhausted", or "diverged".
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_epoch: Option<u32>,
    pub wall_clock_seconds: f64,
    /// Relative paths of files this command wrote, keyed by role.
    pub artifacts: BTreeMap<String, String>,
    /// The complete effective configuration, defaults and overrides applied.
    pub config: ExperimentConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version_string() -> String {
    format!("pathstar-cli {}", env!("CARGO_PKG_VERSION"))
}

pub fn write(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, json + "\n")?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })
}
