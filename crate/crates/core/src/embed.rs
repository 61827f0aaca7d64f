//! Deterministic text embeddings.
//!
//! [`HashedTfIdf`] weights tokens by TF-IDF and maps each token to a fixed
//! signed pseudo-random direction chosen by hashing the token with the
//! projection seed. The sum is L2-normalized. Nothing is learned except
//! document frequencies, so the same statistics and seed always give the
//! same vectors on every platform.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIMENSION: usize = 300;
pub const DEFAULT_PROJECTION_SEED: u64 = 0x005E_ED0F_7E47;
const SIDECAR_FORMAT: &str = "r2d2-embedder";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot fit an embedder: no tokens in {0} texts")]
    NoTokens(usize),
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unsupported embedder file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// An embedding vector plus a flag for texts that produced no tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Anything that turns text into fixed-width vectors.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding;
}

/// Lowercases, splits on non-alphanumerics and drops tokens shorter than 2.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedTfIdf {
    dimension: usize,
    seed: u64,
    documents: usize,
    doc_freq: BTreeMap<String, u32>,
}

impl HashedTfIdf {
    /// Counts token document frequencies over `texts`.
    pub fn fit<S: AsRef<str>>(texts: &[S], dimension: usize, seed: u64) -> Result<Self, EmbedError> {
        if dimension == 0 {
            return Err(EmbedError::ZeroDimension);
        }
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        for text in texts {
            let mut tokens = tokenize(text.as_ref());
            tokens.sort_unstable();
            tokens.dedup();
            for token in tokens {
                *doc_freq.entry(token).or_insert(0) += 1;
            }
        }
        if doc_freq.is_empty() {
            return Err(EmbedError::NoTokens(texts.len()));
        }
        Ok(Self {
            dimension,
            seed,
            documents: texts.len(),
            doc_freq,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn doc_freq(&self, token: &str) -> u32 {
        self.doc_freq.get(token).copied().unwrap_or(0)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.doc_freq.len()
    }

    /// `ln((N + 1) / df)`, with unseen tokens treated as `df = 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq(token).max(1) as f64;
        ((self.documents as f64 + 1.0) / df).ln()
    }

    /// The unit-scaled ±1/√d direction assigned to `token`.
    pub fn token_direction(&self, token: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        self.add_direction(token, 1.0, &mut out);
        out
    }

    fn add_direction(&self, token: &str, weight: f64, out: &mut [f64]) {
        let scale = weight / (self.dimension as f64).sqrt();
        let mut state = fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17);
        let mut bits = 0u64;
        for (i, slot) in out.iter_mut().enumerate() {
            if i % 64 == 0 {
                bits = splitmix64(&mut state);
            }
            let sign = if (bits >> (i % 64)) & 1 == 1 { 1.0 } else { -1.0 };
            *slot += sign * scale;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let sidecar = Sidecar {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            embedder: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(path)?)?;
        if sidecar.format != SIDECAR_FORMAT || sidecar.version != SIDECAR_VERSION {
            return Err(EmbedError::Format(format!("{} v{}", sidecar.format, sidecar.version)));
        }
        Ok(sidecar.embedder)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    embedder: HashedTfIdf,
}

impl Embedder for HashedTfIdf {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Embedding {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for token in tokenize(text) {
            *counts.entry(token).or_insert(0) += 1;
        }
        let mut values = vec![0.0; self.dimension];
        if counts.is_empty() {
            return Embedding {
                values,
                degenerate: true,
            };
        }
        for (token, tf) in &counts {
            self.add_direction(token, f64::from(*tf) * self.idf(token), &mut values);
        }
        let n = norm(&values);
        if n == 0.0 || !n.is_finite() {
            values.iter_mut().for_each(|v| *v = 0.0);
            return Embedding {
                values,
                degenerate: true,
            };
        }
        values.iter_mut().for_each(|v| *v /= n);
        Embedding {
            values,
            degenerate: false,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
