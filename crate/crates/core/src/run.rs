//! Run manifests: what a command was run with and what it produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::config_hash;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Unix seconds.
    pub started: u64,
    pub finished: Option<u64>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        let hash = config_hash(config_text);
        let started = now();
        RunManifest {
            run_id: format!("{command}-{started}-{}", &hash[..8]),
            command: command.to_owned(),
            config_hash: hash,
            seed,
            started,
            finished: None,
            artifacts: Vec::new(),
        }
    }

    /// Writes `dir/run.json` via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        self.write_to(&path)?;
        Ok(path)
    }

    /// Like [`RunManifest::write`] but at an explicit file path.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn finish(&mut self, dir: &Path, artifacts: Vec<PathBuf>) -> Result<PathBuf> {
        self.finished = Some(now());
        self.artifacts = artifacts;
        self.write(dir)
    }

    pub fn finish_to(&mut self, path: &Path, artifacts: Vec<PathBuf>) -> Result<()> {
        self.finished = Some(now());
        self.artifacts = artifacts;
        self.write_to(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(e.column() as u64, format!("bad run manifest: {e}")))
    }
}
