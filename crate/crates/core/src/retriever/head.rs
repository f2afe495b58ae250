use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binfmt::{Reader, Writer, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::featurizer::FeatureVector;

pub const HEAD_MAGIC: &[u8; 4] = b"BHDH";

/// Linear projection `W f + b`, followed by L2 normalization in [`EmbeddingHead::embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    embed_dim: usize,
    feature_dim: usize,
    /// Row-major `embed_dim x feature_dim`.
    pub(crate) weight: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

/// A unit-norm vector in cosine space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `raw`; a zero or non-finite input is degenerate.
    pub fn normalize(raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Self {
            values: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

impl EmbeddingHead {
    pub fn new(embed_dim: usize, feature_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if embed_dim < 2 || feature_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "head dims {embed_dim}x{feature_dim}: embed_dim must be >= 2 and feature_dim >= 1"
            )));
        }
        if weight.len() != embed_dim * feature_dim || bias.len() != embed_dim {
            return Err(Error::InvalidConfig("head parameter lengths do not match dims".into()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("head parameters must be finite".into()));
        }
        Ok(Self {
            embed_dim,
            feature_dim,
            weight,
            bias,
        })
    }

    /// Gaussian weights with std `1/sqrt(feature_dim)`, zero bias.
    pub fn init(embed_dim: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = 1.0 / (feature_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..embed_dim * feature_dim).map(|_| normal.sample(rng)).collect();
        Self::new(embed_dim, feature_dim, weight, vec![0.0; embed_dim])
    }

    pub fn init_seeded(embed_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        Self::init(embed_dim, feature_dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Square identity projection with zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self::new(dim, dim, weight, vec![0.0; dim])
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Every parameter multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.embed_dim,
            self.feature_dim,
            self.weight.iter().map(|w| w * c).collect(),
            self.bias.iter().map(|b| b * c).collect(),
        )
    }

    /// Pre-normalization output `W f + b`.
    pub fn project(&self, features: &[f32]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.feature_dim,
                found: features.len(),
            });
        }
        Ok(self
            .weight
            .chunks_exact(self.feature_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                row.iter()
                    .zip(features)
                    .fold(*b, |acc, (w, &f)| acc + w * f as f64)
            })
            .collect())
    }

    pub fn embed_values(&self, features: &[f32]) -> Result<EmbeddingVector> {
        EmbeddingVector::normalize(self.project(features)?)
    }

    pub fn embed(&self, features: &FeatureVector) -> Result<EmbeddingVector> {
        self.embed_values(&features.values)
    }
}

/// Writes the head checkpoint: magic, version, `u32` embed_dim, `u32`
/// feature_dim, then W row-major and b as little-endian f64.
pub fn save_head(path: &Path, head: &EmbeddingHead) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    let mut w = Writer::new(BufWriter::new(file));
    w.bytes(HEAD_MAGIC).map_err(io)?;
    w.u32(FORMAT_VERSION).map_err(io)?;
    w.u32(head.embed_dim as u32).map_err(io)?;
    w.u32(head.feature_dim as u32).map_err(io)?;
    w.f64s(&head.weight).map_err(io)?;
    w.f64s(&head.bias).map_err(io)?;
    w.finish().map_err(io)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<EmbeddingHead> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(HEAD_MAGIC)?;
    let embed_dim = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let weight = r.f64s(embed_dim * feature_dim)?;
    let bias = r.f64s(embed_dim)?;
    r.expect_eof()?;
    EmbeddingHead::new(embed_dim, feature_dim, weight, bias)
}
