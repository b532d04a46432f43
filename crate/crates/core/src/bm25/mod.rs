//! Okapi BM25 over an in-memory inverted index.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·dl/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! Query terms are summed per occurrence, so a repeated query term counts twice.

mod index;
mod persist;

pub use index::{Bm25Index, Candidate, CandidateList};
pub use persist::{read_index, write_index, INDEX_FORMAT_VERSION};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum Bm25Error {
    #[error("invalid BM25 parameters: k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("the index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidCutoff,
    #[error("duplicate document `{0}`")]
    DuplicateDocument(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self, Bm25Error> {
        let p = Bm25Params { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), Bm25Error> {
        if self.k1.is_finite() && self.k1 > 0.0 && (0.0..=1.0).contains(&self.b) {
            Ok(())
        } else {
            Err(Bm25Error::InvalidParams {
                k1: self.k1,
                b: self.b,
            })
        }
    }
}

/// Lowercase and split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub(crate) fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub(crate) fn term_weight(params: &Bm25Params, tf: u32, doc_len: u32, avg_doc_len: f64) -> f64 {
    let tf = f64::from(tf);
    let norm = 1.0 - params.b + params.b * f64::from(doc_len) / avg_doc_len;
    tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}
