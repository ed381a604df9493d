//! Soft-label store: per-position teacher logits, persisted as a JSON index
//! followed by shape-prefixed little-endian f64 arrays. Reload is
//! bit-identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DistillError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub pair_index: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftRow {
    pub key: RowKey,
    pub logits: Vec<f64>,
}

/// Teacher logits for every (pair, target position) of a corpus, in corpus
/// order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SoftLabelStore {
    pub vocab: usize,
    pub rows: Vec<SoftRow>,
    index: HashMap<(usize, usize), usize>,
}

impl SoftLabelStore {
    pub fn new(vocab: usize) -> Self {
        SoftLabelStore {
            vocab,
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, pair_index: usize, position: usize, logits: Vec<f64>) {
        self.index.insert((pair_index, position), self.rows.len());
        self.rows.push(SoftRow {
            key: RowKey {
                pair_index,
                position,
            },
            logits,
        });
    }

    pub fn logits_at(&self, pair_index: usize, position: usize) -> Option<&[f64]> {
        self.index
            .get(&(pair_index, position))
            .map(|&i| self.rows[i].logits.as_slice())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreIndex {
    vocab: usize,
    keys: Vec<RowKey>,
}

/// File layout: u64 LE index length, JSON index, then per row a u32 LE
/// element count followed by that many f64 LE values.
pub fn save_store(store: &SoftLabelStore, path: &Path) -> Result<(), DistillError> {
    let mut out = BufWriter::new(File::create(path)?);
    let index = StoreIndex {
        vocab: store.vocab,
        keys: store.rows.iter().map(|r| r.key.clone()).collect(),
    };
    let index_bytes = serde_json::to_vec(&index).unwrap();
    out.write_all(&(index_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&index_bytes)?;
    for row in &store.rows {
        out.write_all(&(row.logits.len() as u32).to_le_bytes())?;
        for &v in &row.logits {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<SoftLabelStore, DistillError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    let mut index_bytes = vec![0u8; index_len];
    input.read_exact(&mut index_bytes)?;
    let index: StoreIndex =
        serde_json::from_slice(&index_bytes).map_err(|e| DistillError::StoreFormat {
            reason: e.to_string(),
        })?;

    let mut store = SoftLabelStore::new(index.vocab);
    for key in index.keys {
        let mut count_bytes = [0u8; 4];
        input.read_exact(&mut count_bytes)?;
        let count = u32::from_le_bytes(count_bytes) as usize;
        let mut logits = Vec::with_capacity(count);
        let mut value = [0u8; 8];
        for _ in 0..count {
            input.read_exact(&mut value)?;
            logits.push(f64::from_le_bytes(value));
        }
        store.push(key.pair_index, key.position, logits);
    }
    Ok(store)
}
