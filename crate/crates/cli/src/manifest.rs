use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPLETION_FILE: &str = "completion.json";

/// Content hash of the sources this binary was built from.
pub const CODE_HASH: &str = env!("STAR_CODE_HASH");

/// Written once, before any work starts, and never rewritten.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub code_hash: String,
    pub started: String,
    /// Resolved settings of the command.
    pub config: Value,
    /// Every seed the outputs depend on, by name.
    pub seeds: BTreeMap<String, u64>,
    /// Output paths relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Completion {
    pub finished: String,
    pub summary: Value,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            code_hash: CODE_HASH.into(),
            started: now(),
            config,
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn artifact(mut self, name: &str, path: &str) -> Self {
        self.artifacts.insert(name.into(), path.into());
        self
    }

    /// Writes `file` under `dir`; an existing file is never replaced.
    pub fn write_new(&self, dir: &Path, file: &str) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(file);
        if path.exists() {
            return Err(crate::exit::artifact(format!("{} already exists; manifests are never rewritten", path.display())));
        }
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn write_completion(dir: &Path, summary: Value) -> Result<()> {
    let c = Completion { finished: now(), summary };
    let path = dir.join(COMPLETION_FILE);
    fs::write(&path, serde_json::to_string_pretty(&c)? + "\n").with_context(|| format!("writing {}", path.display()))
}
