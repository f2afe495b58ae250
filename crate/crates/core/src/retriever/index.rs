use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::head::{EmbeddingHead, EmbeddingVector};
use crate::binfmt;
use crate::corpus::{CorpusEntry, Split};
use crate::error::{Error, Result};
use crate::featurizer::FeatureSet;

pub const INDEX_MAGIC: &[u8; 4] = b"BHDX";

const UNIT_NORM_TOL: f64 = 1e-5;

/// Exact cosine index over unit-norm float32 rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineIndex {
    ids: Vec<String>,
    rows: Vec<f32>,
    embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub slice_id: String,
    pub similarity: f64,
}

/// Descending similarity, then ascending id.
fn rank(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl CosineIndex {
    pub fn from_rows(ids: Vec<String>, rows: Vec<f32>, embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 || rows.len() != ids.len() * embed_dim {
            return Err(Error::InvalidConfig(format!(
                "{} values for {} rows of dim {embed_dim}",
                rows.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateSlice(id.clone()));
            }
        }
        for (id, row) in ids.iter().zip(rows.chunks_exact(embed_dim)) {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidConfig(format!("row {id} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { ids, rows, embed_dim })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Cosine similarity of row `i` with a unit-norm query; a plain
    /// left-to-right f64 dot product.
    pub fn similarity(&self, i: usize, query: &[f64]) -> f64 {
        let mut acc = 0.0f64;
        for (&r, &q) in self.row(i).iter().zip(query) {
            acc += r as f64 * q;
        }
        acc
    }

    /// Exact top-`k` by cosine similarity, descending; ties go to the smaller id.
    pub fn search_topk(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>> {
        self.search_topk_filtered(query, k, |_| true)
    }

    /// As [`search_topk`](Self::search_topk), over rows where `keep(row)` holds.
    pub fn search_topk_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: impl Fn(usize) -> bool,
    ) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.dim() != self.embed_dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.embed_dim,
                found: query.dim(),
            });
        }
        let q = query.values();
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| keep(i))
            .map(|i| (self.similarity(i, q), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| rank((a.0, &self.ids[a.1]), (b.0, &self.ids[b.1]));
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(similarity, i)| Hit {
                slice_id: self.ids[i].clone(),
                similarity,
            })
            .collect())
    }
}

/// Embeds every entry in manifest order. Entries must belong to the train split.
pub fn build_index(entries: &[CorpusEntry], features: &FeatureSet, head: &EmbeddingHead) -> Result<CosineIndex> {
    let mut ids = Vec::with_capacity(entries.len());
    let mut rows = Vec::with_capacity(entries.len() * head.embed_dim());
    for entry in entries {
        let id = entry.slice_id();
        if entry.slice.split != Split::Train {
            return Err(Error::LeakageError(format!("test slice {id} offered to the retrieval index")));
        }
        let f = features
            .get(id)
            .ok_or_else(|| Error::MissingFeature(id.to_string()))?;
        let y = head.embed(f)?;
        ids.push(id.to_string());
        rows.extend(y.values().iter().map(|&v| v as f32));
    }
    CosineIndex::from_rows(ids, rows, head.embed_dim())
}

pub fn save_index(path: &Path, index: &CosineIndex) -> Result<()> {
    let records: Vec<(&str, &[f32])> = (0..index.len())
        .map(|i| (index.ids[i].as_str(), index.row(i)))
        .collect();
    binfmt::write_records(path, INDEX_MAGIC, index.embed_dim, &records)
}

pub fn load_index(path: &Path) -> Result<CosineIndex> {
    let (dim, records) = binfmt::read_records(path, INDEX_MAGIC)?;
    let mut ids = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len() * dim);
    for (id, values) in records {
        ids.push(id);
        rows.extend(values);
    }
    CosineIndex::from_rows(ids, rows, dim)
}
