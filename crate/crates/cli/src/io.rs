//! JSONL file helpers for frames and per-source labels, plus run metadata.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drivescene_core::types::{FrameRecord, SceneLabel};

use crate::errors::RunError;

/// One line of a label JSONL file, keyed by both frame and image for joins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub frame_id: String,
    pub image_ref: String,
    pub label: SceneLabel,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let file = File::open(path)
        .map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            RunError::input(format!("{} line {}: {e}", path.display(), index + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), RunError> {
    let file = File::create(path)
        .map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
    }
    out.flush()
        .map_err(|e| RunError::input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, body + "\n")
        .map_err(|e| RunError::input(format!("{}: {e}", path.display())))
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameRecord>, RunError> {
    read_jsonl(path)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, RunError> {
    read_jsonl(path)
}

/// SHA-256 of a file, for reproducibility checks.
pub fn file_digest(path: &Path) -> Result<String, RunError> {
    let bytes =
        std::fs::read(path).map_err(|e| RunError::input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Per-run metadata. Holds the only wall-clock timestamp a run writes;
/// data artifacts stay byte-identical across reruns with the same seed and
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub crate_version: String,
    pub started_at_ms: u128,
    /// Fixed stage order, recorded for audit (mining only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_order: Option<Vec<String>>,
}

impl RunMetadata {
    pub fn new(stage: &str, seed: u64, config_digest: String) -> Self {
        RunMetadata {
            stage: stage.to_string(),
            seed,
            config_digest,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or_default(),
            stage_order: None,
        }
    }

    pub fn with_stage_order(mut self, order: &[&str]) -> Self {
        self.stage_order = Some(order.iter().map(|s| s.to_string()).collect());
        self
    }
}

pub fn ensure_dir(path: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(path)
        .map_err(|e| RunError::input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use drivescene_core::types::LabelSource;

    #[test]
    fn jsonl_round_trips_label_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let records: Vec<LabelRecord> = (0..5)
            .map(|i| LabelRecord {
                frame_id: format!("f{i}"),
                image_ref: format!("img://{i}"),
                label: SceneLabel::empty(LabelSource::Vlm),
            })
            .collect();
        write_jsonl(&path, &records).unwrap();
        let back: Vec<LabelRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn jsonl_parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"frame_id\": \"a\"\n").unwrap();
        let err = read_labels(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "got: {err}");
    }

    #[test]
    fn digest_changes_with_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file");
        std::fs::write(&path, b"abc").unwrap();
        let a = file_digest(&path).unwrap();
        std::fs::write(&path, b"abd").unwrap();
        let b = file_digest(&path).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }
}
