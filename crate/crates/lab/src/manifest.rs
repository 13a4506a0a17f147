//! `manifest.json`: every artifact in an output directory with the hash of
//! the config that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub command: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads the manifest in `dir`, or an empty one if there is none.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| LabError::io(&path, e.into())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(LabError::io(&path, e)),
        }
    }

    /// Adds or replaces the entry for `file`.
    pub fn record(&mut self, file: &str, command: &str, config_hash: &str) {
        let entry = ManifestEntry {
            file: file.to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
        };
        match self.entries.iter_mut().find(|e| e.file == file) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_replaces_by_file() {
        let mut m = Manifest::default();
        m.record("b.csv", "eval", "h1");
        m.record("a.csv", "eval", "h1");
        m.record("b.csv", "eval", "h2");
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].file, "a.csv");
        assert_eq!(m.entries[1].config_hash, "h2");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), Manifest::default());
        let mut m = Manifest::default();
        m.record("x.ckpt", "pretrain", "abc");
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }
}
