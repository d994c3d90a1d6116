//! Run manifests: the single record tying a command's artifacts to the
//! exact configuration and seed that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hdrfusion::io::write_atomic;

use crate::CliError;

pub const RUN_FORMAT: &str = "hdr-fusion/run";
pub const RUN_VERSION: u32 = 1;
pub const RUN_FILE: &str = "run.json";

/// Written atomically as the last artifact of every command. Each file a
/// command creates is referenced by exactly one manifest: frames and
/// ground truth by their dataset manifest, everything else here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub status: String,
    pub config: serde_json::Value,
    /// Named input paths (dataset, checkpoint, ...), as given.
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the run directory, in creation order.
    pub artifacts: Vec<String>,
    pub wall_clock_s: f64,
    /// Command-specific summary numbers.
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            format: RUN_FORMAT.to_string(),
            version: RUN_VERSION,
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            status: "ok".to_string(),
            config,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            wall_clock_s: 0.0,
            details: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn artifact(&mut self, rel: impl Into<String>) -> &mut Self {
        self.artifacts.push(rel.into());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(&dir.join(RUN_FILE), &bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid manifest {}: {e}", path.display())))?;
        if m.format != RUN_FORMAT {
            return Err(CliError::Input(format!(
                "{} is not a run manifest (format {})",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}
