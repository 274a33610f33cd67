//! Catalog of recordings, annotations and window caches.
//!
//! Relative paths in a manifest file are resolved against the directory that
//! holds it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_cache, IngestError, Result, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub record_id: String,
    pub patient_id: String,
    pub split: Split,
    pub raw_path: PathBuf,
    pub annotation_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub records: Vec<RecordEntry>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relativize(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

impl Manifest {
    /// Record ids are unique and no patient appears in both splits.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            if r.record_id.is_empty() || r.record_id.contains(['/', '\\']) {
                return Err(IngestError::Manifest(format!("invalid record id {:?}", r.record_id)));
            }
            if !ids.insert(r.record_id.as_str()) {
                return Err(IngestError::Manifest(format!("duplicate record id {:?}", r.record_id)));
            }
            if let Some(&s) = split_of.get(r.patient_id.as_str()) {
                if s != r.split {
                    return Err(IngestError::Manifest(format!(
                        "patient {:?} appears in both train and test splits",
                        r.patient_id
                    )));
                }
            }
            split_of.insert(&r.patient_id, r.split);
        }
        Ok(())
    }

    /// Sorted distinct patient ids of one split.
    pub fn patients(&self, split: Split) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.patient_id.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut m.records {
            r.raw_path = resolve(base, &r.raw_path);
            r.annotation_path = resolve(base, &r.annotation_path);
            r.cache_path = r.cache_path.as_deref().map(|p| resolve(base, p));
        }
        m.validate()?;
        Ok(m)
    }

    /// Writes JSON with paths relative to the manifest directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut m = self.clone();
        for r in &mut m.records {
            r.raw_path = relativize(base, &r.raw_path);
            r.annotation_path = relativize(base, &r.annotation_path);
            r.cache_path = r.cache_path.as_deref().map(|p| relativize(base, p));
        }
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        super::write_atomic(path, text.as_bytes()).map_err(|e| IngestError::io(path, e))
    }

    /// Windows of every record in `split`, grouped by patient, in manifest order.
    pub fn load_windows(&self, split: Split) -> Result<BTreeMap<String, Vec<Window>>> {
        let mut out: BTreeMap<String, Vec<Window>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            let path = r.cache_path.as_ref().ok_or_else(|| {
                IngestError::Manifest(format!("record {:?} has no window cache; run preprocess first", r.record_id))
            })?;
            out.entry(r.patient_id.clone()).or_default().extend(load_cache(path)?);
        }
        Ok(out)
    }
}
