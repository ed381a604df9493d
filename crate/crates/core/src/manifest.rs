//! Dataset manifests: a JSON header line with per-origin counts followed by
//! one JSON entry per line. Counts are always recomputed on read and the
//! file is rejected if they disagree with the header.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::SceneLabel;

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How an entry was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    T2i,
    Rendered,
}

impl Origin {
    pub const ALL: [Origin; 3] = [Origin::Real, Origin::T2i, Origin::Rendered];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_ref: String,
    pub label: SceneLabel,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split) -> Self {
        DatasetManifest {
            name: name.into(),
            split,
            entries: Vec::new(),
        }
    }

    /// Per-origin entry tallies, derived from the entries themselves.
    pub fn counts(&self) -> BTreeMap<Origin, usize> {
        let mut counts: BTreeMap<Origin, usize> =
            Origin::ALL.iter().map(|&origin| (origin, 0)).collect();
        for entry in &self.entries {
            *counts.get_mut(&entry.origin).unwrap() += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.image_ref.as_str()) {
                return Err(ManifestError::DuplicateImageRef {
                    image_ref: entry.image_ref.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    split: Split,
    counts: BTreeMap<Origin, usize>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("header counts {expected:?} do not match entry tallies {actual:?}")]
    CountMismatch {
        expected: BTreeMap<Origin, usize>,
        actual: BTreeMap<Origin, usize>,
    },
    #[error("duplicate image_ref {image_ref:?} within split")]
    DuplicateImageRef { image_ref: String },
}

/// Writes the manifest: header line with derived counts, then entries.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    manifest.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        name: manifest.name.clone(),
        split: manifest.split,
        counts: manifest.counts(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())?;
    for entry in &manifest.entries {
        writeln!(out, "{}", serde_json::to_string(entry).unwrap())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest, recomputing counts and rejecting mismatches or
/// duplicate image refs.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(ManifestError::Parse {
            line: 1,
            message: "missing header line".to_string(),
        })??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| ManifestError::Parse {
            line: 1,
            message: e.to_string(),
        })?;

    let mut manifest = DatasetManifest::new(header.name.clone(), header.split);
    for (index, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
                line: index + 2,
                message: e.to_string(),
            })?;
        manifest.entries.push(entry);
    }

    manifest.validate()?;
    let actual = manifest.counts();
    if actual != header.counts {
        return Err(ManifestError::CountMismatch {
            expected: header.counts,
            actual,
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LabelSource, SceneLabel};

    fn entry(image_ref: &str, origin: Origin) -> ManifestEntry {
        ManifestEntry {
            image_ref: image_ref.to_string(),
            label: SceneLabel::empty(LabelSource::GroundTruth),
            origin,
        }
    }

    #[test]
    fn empty_manifest_round_trips_with_zero_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let manifest = DatasetManifest::new("empty", Split::Train);
        write_manifest(&manifest, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, manifest);
        assert!(back.counts().values().all(|&n| n == 0));
    }

    #[test]
    fn counts_match_entry_tallies() {
        let mut manifest = DatasetManifest::new("mix", Split::Train);
        for i in 0..5 {
            manifest.entries.push(entry(&format!("real{i}"), Origin::Real));
        }
        for i in 0..3 {
            manifest.entries.push(entry(&format!("t2i{i}"), Origin::T2i));
        }
        let counts = manifest.counts();
        assert_eq!(counts[&Origin::Real], 5);
        assert_eq!(counts[&Origin::T2i], 3);
        assert_eq!(counts[&Origin::Rendered], 0);
    }

    #[test]
    fn real_train_split_counts_match_at_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let mut manifest = DatasetManifest::new("real-train", Split::Train);
        for i in 0..19_360 {
            manifest.entries.push(entry(&format!("img://real/{i:06}"), Origin::Real));
        }
        write_manifest(&manifest, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        let counts = back.counts();
        assert_eq!(counts[&Origin::Real], 19_360);
        assert_eq!(counts[&Origin::T2i], 0);
        assert_eq!(counts[&Origin::Rendered], 0);
        assert_eq!(back.entries.len(), 19_360);
    }

    #[test]
    fn tampered_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut manifest = DatasetManifest::new("bad", Split::Test);
        manifest.entries.push(entry("a", Origin::Real));
        write_manifest(&manifest, &path).unwrap();

        // Drop an entry line, leaving the header claiming one real entry.
        let contents = std::fs::read_to_string(&path).unwrap();
        let header_only: String = contents.lines().take(1).collect::<Vec<_>>().join("\n") + "\n";
        std::fs::write(&path, header_only).unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(ManifestError::CountMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_image_ref_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let mut manifest = DatasetManifest::new("dup", Split::Train);
        manifest.entries.push(entry("same", Origin::Real));
        manifest.entries.push(entry("same", Origin::T2i));
        assert!(matches!(
            write_manifest(&manifest, &path),
            Err(ManifestError::DuplicateImageRef { .. })
        ));
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbled.jsonl");
        let mut manifest = DatasetManifest::new("g", Split::Train);
        manifest.entries.push(entry("a", Origin::Real));
        write_manifest(&manifest, &path).unwrap();
        let mut contents = std::fs::read_to_string(&path).unwrap();
        contents.push_str("{not json\n");
        std::fs::write(&path, contents).unwrap();
        match read_manifest(&path) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
