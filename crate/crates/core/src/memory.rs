//! Fixed-budget token memory with similarity-based eviction.
//!
//! The memory is an ordered list of feature rows, each tagged with its
//! stream position and modality. Appends are cheap; when the list grows
//! past its budget, the eviction pass scores every row by the cosine
//! similarity to its immediate successor,
//!
//! ```text
//! s_n = cos(z_n, z_{n+1}),   s_last = −∞,
//! ```
//!
//! and removes the rows with the largest scores (ties broken toward the
//! lower index) in a single pass over the scores computed once — scores
//! are *not* recomputed between removals. The most recent row can never
//! be evicted. A merging variant is kept as a baseline: it repeatedly
//! averages the most similar adjacent pair instead of dropping rows.

use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::matrix::{cosine_similarity, Matrix};
use crate::real::Real;
use crate::ttt::Modality;

/// Where a memory row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub stream_index: u64,
    pub modality: Modality,
}

/// Ordered token store with a hard row budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    budget: usize,
    tokens: Matrix<T>,
    provenance: Vec<Provenance>,
}

impl<T: Real> MemoryState<T> {
    pub fn new(budget: usize, dim: usize) -> CoreResult<Self> {
        if budget == 0 || dim == 0 {
            return Err(CoreError::InvalidArgument {
                context: "MemoryState::new: budget and dim must be positive",
            });
        }
        Ok(MemoryState {
            budget,
            tokens: Matrix::zeros(0, dim),
            provenance: Vec::new(),
        })
    }

    /// Rebuilds a state from stored rows (for snapshot loading). The row
    /// count must already respect the budget.
    pub fn from_parts(
        budget: usize,
        tokens: Matrix<T>,
        provenance: Vec<Provenance>,
    ) -> CoreResult<Self> {
        if budget == 0 || tokens.cols() == 0 {
            return Err(CoreError::InvalidArgument {
                context: "MemoryState::from_parts: budget and dim must be positive",
            });
        }
        if tokens.rows() != provenance.len() {
            return Err(CoreError::ShapeMismatch {
                context: "MemoryState::from_parts: provenance length != row count",
            });
        }
        if tokens.rows() > budget {
            return Err(CoreError::ContractViolation {
                context: "MemoryState::from_parts: row count exceeds budget",
            });
        }
        if !tokens.is_finite() {
            return Err(CoreError::NonFinite {
                context: "MemoryState::from_parts: rows have non-finite entries",
            });
        }
        Ok(MemoryState {
            budget,
            tokens,
            provenance,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Appends rows in order without enforcing the budget; row `i` of the
    /// block is tagged `first_index + i`. Call [`Self::enforce_budget`]
    /// (or the merge variant) afterwards to shrink back down.
    pub fn append(
        &mut self,
        rows: &Matrix<T>,
        first_index: u64,
        modality: Modality,
    ) -> CoreResult<()> {
        let tags: Vec<Provenance> = (0..rows.rows() as u64)
            .map(|i| Provenance {
                stream_index: first_index + i,
                modality,
            })
            .collect();
        self.append_with_provenance(rows, &tags)
    }

    /// Appends rows with an explicit tag per row, for blocks whose stream
    /// indices are not contiguous (e.g. features derived from frames that
    /// had other tokens interleaved between them).
    pub fn append_with_provenance(
        &mut self,
        rows: &Matrix<T>,
        provenance: &[Provenance],
    ) -> CoreResult<()> {
        if rows.cols() != self.dim() {
            return Err(CoreError::ShapeMismatch {
                context: "MemoryState::append: row width != memory dim",
            });
        }
        if rows.rows() != provenance.len() {
            return Err(CoreError::ShapeMismatch {
                context: "MemoryState::append: provenance length != row count",
            });
        }
        if !rows.is_finite() {
            return Err(CoreError::NonFinite {
                context: "MemoryState::append: rows have non-finite entries",
            });
        }
        self.tokens = self.tokens.vstack(rows)?;
        self.provenance.extend_from_slice(provenance);
        Ok(())
    }

    /// Eviction scores: `s_n = cos(row_n, row_{n+1})`, last row `−∞`.
    pub fn similarity_scores(&self) -> Vec<T> {
        let n = self.len();
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            if i + 1 < n {
                scores.push(cosine_similarity(self.tokens.row(i), self.tokens.row(i + 1)));
            } else {
                scores.push(T::neg_infinity());
            }
        }
        scores
    }

    /// Discards the most redundant rows until the budget holds. Returns
    /// the removed indices (into the pre-eviction ordering), ascending.
    pub fn enforce_budget(&mut self) -> CoreResult<Vec<usize>> {
        let n = self.len();
        if n <= self.budget {
            return Ok(Vec::new());
        }
        let excess = n - self.budget;
        let scores = self.similarity_scores();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&a, &b| {
            scores[b].total_order(scores[a]).then(a.cmp(&b))
        });
        let mut removed: Vec<usize> = order[..excess].to_vec();
        removed.sort_unstable();
        self.retain_complement(&removed)?;
        Ok(removed)
    }

    /// Merging baseline: while over budget, replaces the most similar
    /// adjacent pair by its elementwise mean (ties toward the lower
    /// index), keeping the earlier row's provenance. Scores are
    /// recomputed after every merge. Returns the number of merges.
    pub fn enforce_budget_merge(&mut self) -> CoreResult<usize> {
        let mut merges = 0;
        while self.len() > self.budget {
            let n = self.len();
            let mut best = 0usize;
            let mut best_score = T::neg_infinity();
            for i in 0..n - 1 {
                let s = cosine_similarity(self.tokens.row(i), self.tokens.row(i + 1));
                if s.total_order(best_score) == core::cmp::Ordering::Greater {
                    best_score = s;
                    best = i;
                }
            }
            let half = T::of(0.5);
            let merged: Vec<T> = self
                .tokens
                .row(best)
                .iter()
                .zip(self.tokens.row(best + 1))
                .map(|(&a, &b)| half * (a + b))
                .collect();
            self.tokens.row_mut(best).copy_from_slice(&merged);
            self.retain_complement(&[best + 1])?;
            merges += 1;
        }
        Ok(merges)
    }

    fn retain_complement(&mut self, removed_sorted: &[usize]) -> CoreResult<()> {
        let n = self.len();
        let d = self.dim();
        let mut data = Vec::with_capacity((n - removed_sorted.len()) * d);
        let mut prov = Vec::with_capacity(n - removed_sorted.len());
        let mut cursor = 0usize;
        for i in 0..n {
            if cursor < removed_sorted.len() && removed_sorted[cursor] == i {
                cursor += 1;
                continue;
            }
            data.extend_from_slice(self.tokens.row(i));
            prov.push(self.provenance[i]);
        }
        self.tokens = Matrix::from_vec(n - removed_sorted.len(), d, data)?;
        self.provenance = prov;
        Ok(())
    }
}
