//! Run manifests.
//!
//! Every subcommand writes one: the config digest, every resolved value,
//! digests of every input and output file, and the tool version. A
//! manifest contains no timestamps, so re-running with identical inputs
//! reproduces identical manifests byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use scout_core::digest::fnv1a64_hex;
use scout_core::Result;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool_version: &'static str,
    pub command: String,
    pub config_digest: String,
    /// Every resolved configuration value the run used.
    pub resolved: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_digest: String, resolved: serde_json::Value) -> Manifest {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_digest,
            resolved,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    /// Write `manifest-<command>.json` under `dir` and return its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("manifest-{}.json", self.command));
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(fnv1a64_hex(&std::fs::read(path)?))
}
