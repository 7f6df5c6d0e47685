//! `manifest.json`: what a command ran with and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: Vec::new(),
            started: now(),
            finished: None,
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let sha256 = file_sha256(path)?;
        self.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Stamps the end time and writes `dir/manifest.json`, replacing any
    /// earlier manifest.
    pub fn finish(&mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished = Some(now());
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serialises"))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, "abc").unwrap();
        assert_eq!(
            file_sha256(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut m = RunManifest::start("synth", serde_json::json!({"n": 3}));
        m.add_input(&f).unwrap();
        let p = m.finish(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.finished.unwrap() >= back.started);
    }
}
