use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Label, Modality};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub label: Label,
    pub counts: BTreeMap<Modality, usize>,
}

impl ManifestEntry {
    pub fn count(&self, m: Modality) -> Option<usize> {
        self.counts.get(&m).copied()
    }

    /// Relative directory holding one modality's slices.
    pub fn modality_dir(&self, m: Modality) -> PathBuf {
        Path::new(&self.scan_id).join(m.dir_name())
    }
}

/// The scan index of a dataset root: `<root>/manifest.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest {
            root: root.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        Manifest::new(root, entries)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.scan_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate scan_id '{}'",
                    e.scan_id
                )));
            }
            for m in Modality::ALL {
                match e.count(m) {
                    None => {
                        return Err(Error::InvalidManifest(format!(
                            "scan '{}' has no count for {m}",
                            e.scan_id
                        )))
                    }
                    Some(0) => {
                        return Err(Error::InvalidManifest(format!(
                            "scan '{}' declares zero slices for {m}",
                            e.scan_id
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
