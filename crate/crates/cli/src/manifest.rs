use std::path::Path;

use serde::{Deserialize, Serialize};

use calibayes::Result;

pub const FILE_NAME: &str = "manifest.json";

/// Everything needed to rerun a command. Timing, thread count and the output
/// directory are left out so that reruns write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// The command-line arguments as parsed.
    pub args: serde_json::Value,
    /// Derived configuration actually used (defaults filled in).
    #[serde(default)]
    pub resolved: serde_json::Value,
}

impl RunManifest {
    pub fn new<A: Serialize, R: Serialize>(command: &str, seed: u64, args: &A, resolved: &R) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            args: serde_json::to_value(args)?,
            resolved: serde_json::to_value(resolved)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(FILE_NAME), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
