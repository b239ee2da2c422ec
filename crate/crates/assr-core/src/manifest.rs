//! Dataset manifests: which patients exist, where their signal and hypnogram
//! files live, and (optionally) a train/test split.
//!
//! Manifests are JSON documents with paths stored relative to the manifest
//! file so a dataset directory can be moved wholesale.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// One patient's files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub signal: PathBuf,
    pub hypnogram: PathBuf,
}

/// A reproducible patient-level train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            entries,
            split: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.patient_id.as_str()) {
                return Err(Error::DuplicatePatient(entry.patient_id.clone()));
            }
        }
        if let Some(split) = &self.split {
            for id in split.train.iter().chain(&split.test) {
                if !seen.contains(id.as_str()) {
                    return Err(Error::InsufficientPatients {
                        needed: 1,
                        available: 0,
                    });
                }
            }
            let train: BTreeSet<_> = split.train.iter().collect();
            for id in &split.test {
                if train.contains(id) {
                    return Err(Error::OverlappingSplit(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, patient_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.patient_id == patient_id)
    }

    /// Loads a manifest and resolves its relative paths against the manifest's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::SchemaVersion {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        if let Some(dir) = path.parent() {
            for entry in &mut manifest.entries {
                if entry.signal.is_relative() {
                    entry.signal = dir.join(&entry.signal);
                }
                if entry.hypnogram.is_relative() {
                    entry.hypnogram = dir.join(&entry.hypnogram);
                }
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Draws disjoint train/test patient sets uniformly at random. The same
/// manifest and seed always produce the same split; both sides come back
/// sorted.
pub fn split_patients(
    manifest: &DatasetManifest,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let mut ids: Vec<String> = manifest.entries.iter().map(|e| e.patient_id.clone()).collect();
    ids.sort();
    if ids.len() < n_train + n_test {
        return Err(Error::InsufficientPatients {
            needed: n_train + n_test,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut train: Vec<String> = ids[..n_train].to_vec();
    let mut test: Vec<String> = ids[n_train..n_train + n_test].to_vec();
    train.sort();
    test.sort();
    Ok(SplitSpec { train, test, seed })
}

/// Scans a directory for `(signal, hypnogram)` pairs. A signal file is
/// anything ending in `.edf` or `.rec`; its hypnogram is `<stem>_stage.txt`,
/// falling back to `<stem>.txt`. The patient id is the file stem.
pub fn scan_data_dir(dir: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<PathBuf> = read
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .collect();
    files.sort();
    for path in files {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("edf") | Some("rec")) {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        let candidates = [
            path.with_file_name(format!("{stem}_stage.txt")),
            path.with_file_name(format!("{stem}.txt")),
        ];
        if let Some(hyp) = candidates.iter().find(|p| p.exists()) {
            entries.push(ManifestEntry {
                patient_id: stem,
                signal: path.clone(),
                hypnogram: hyp.clone(),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataDir(dir.display().to_string()));
    }
    DatasetManifest::new(entries)
}

/// Rewrites entry paths relative to `base` where possible (used when saving a
/// manifest next to the data it describes).
pub fn relativize(manifest: &mut DatasetManifest, base: &Path) {
    for entry in &mut manifest.entries {
        if let Ok(rel) = entry.signal.strip_prefix(base) {
            entry.signal = rel.to_path_buf();
        }
        if let Ok(rel) = entry.hypnogram.strip_prefix(base) {
            entry.hypnogram = rel.to_path_buf();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_with(n: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                patient_id: format!("P{i:03}"),
                signal: PathBuf::from(format!("P{i:03}.edf")),
                hypnogram: PathBuf::from(format!("P{i:03}_stage.txt")),
            })
            .collect();
        DatasetManifest::new(entries).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let manifest = manifest_with(13);
        let a = split_patients(&manifest, 10, 3, 42).unwrap();
        let b = split_patients(&manifest, 10, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 10);
        assert_eq!(a.test.len(), 3);
        for id in &a.test {
            assert!(!a.train.contains(id));
        }
        let c = split_patients(&manifest, 10, 3, 43).unwrap();
        assert!(a.train != c.train || a.test != c.test);
    }

    #[test]
    fn split_rejects_small_datasets() {
        let manifest = manifest_with(5);
        assert!(matches!(
            split_patients(&manifest, 10, 3, 1).unwrap_err(),
            Error::InsufficientPatients { needed: 13, available: 5 }
        ));
    }

    #[test]
    fn duplicate_patients_are_rejected() {
        let mut manifest = manifest_with(3);
        manifest.entries.push(manifest.entries[0].clone());
        assert!(matches!(
            manifest.validate().unwrap_err(),
            Error::DuplicatePatient(_)
        ));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut manifest = manifest_with(4);
        manifest.split = Some(SplitSpec {
            train: vec!["P000".into(), "P001".into()],
            test: vec!["P001".into()],
            seed: 0,
        });
        assert!(matches!(
            manifest.validate().unwrap_err(),
            Error::OverlappingSplit(_)
        ));
    }

    #[test]
    fn save_load_roundtrip_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = manifest_with(2);
        manifest.split = Some(SplitSpec {
            train: vec!["P000".into()],
            test: vec!["P001".into()],
            seed: 7,
        });
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.entries[0].signal, dir.path().join("P000.edf"));
        assert_eq!(loaded.split, manifest.split);
    }

    #[test]
    fn scan_pairs_signals_with_hypnograms() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.edf"), b"x").unwrap();
        std::fs::write(dir.path().join("a_stage.txt"), b"0").unwrap();
        std::fs::write(dir.path().join("b.rec"), b"x").unwrap();
        std::fs::write(dir.path().join("b.txt"), b"0").unwrap();
        std::fs::write(dir.path().join("c.edf"), b"x").unwrap();
        let manifest = scan_data_dir(dir.path()).unwrap();
        let ids: Vec<_> = manifest.entries.iter().map(|e| e.patient_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(manifest.entries[0].hypnogram.ends_with("a_stage.txt"));
    }
}
