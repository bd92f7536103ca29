//! Token embedding table and its nearest-row decode.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub type TokenId = u32;

pub const DEFAULT_EMBED_DIM: usize = 16;

/// Borrowed view of a `(V, d)` embedding matrix.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable<'a> {
    weights: &'a Mat,
}

impl<'a> EmbeddingTable<'a> {
    pub fn new(weights: &'a Mat) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &'a Mat {
        self.weights
    }

    pub fn vocab(&self) -> usize {
        self.weights.rows
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }

    /// Rows of the table for each token, shape `(L, d)`.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Mat> {
        let d = self.dim();
        let mut out = Mat::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            let id = tok as usize;
            if id >= self.vocab() {
                return Err(Error::TokenRange { id, vocab: self.vocab() });
            }
            out.row_mut(i).copy_from_slice(self.weights.row(id));
        }
        Ok(out)
    }

    /// Token whose row is closest in squared Euclidean distance; ties go to the lowest id.
    pub fn nearest_token(&self, vector: &[f64]) -> TokenId {
        let mut best = (f64::INFINITY, 0);
        for v in 0..self.vocab() {
            let dist: f64 = self.weights.row(v).iter().zip(vector).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, v);
            }
        }
        best.1 as TokenId
    }

    /// Whether every pair of rows differs (the embedding is invertible on tokens).
    pub fn rows_distinct(&self) -> bool {
        let mut rows: Vec<&[f64]> = (0..self.vocab()).map(|v| self.weights.row(v)).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        rows.windows(2).all(|w| w[0] != w[1])
    }
}

/// Rows drawn i.i.d. from `N(0, I / d)`.
pub fn init_table<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Mat {
    Mat::randn(vocab, dim, 1.0 / (dim as f64).sqrt(), rng)
}
