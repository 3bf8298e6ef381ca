//! Prompt-dependent KV-cache compression over a toy causal attention
//! stack.
//!
//! The stack is deliberately minimal: `L` residual blocks of multi-head
//! dot-product attention plus a two-layer feed-forward, no positional
//! encoding (ordering enters only through the causal mask), and a tied
//! vocabulary matrix used both to embed prompt tokens and to read out
//! logits. Memory rows enter the stack as raw feature vectors.
//!
//! Streaming prefill walks the memory in chunks of `m` rows. Each chunk
//! is forwarded over the retained cache, its keys/values are appended,
//! and then the *prompt* is forwarded (read-only) to score every cache
//! entry by the attention mass it receives:
//!
//! ```text
//! a_j = Σ_s (1/H) Σ_h A[h, s, j]        (post-softmax)
//! ```
//!
//! Of the chunk's own `m·L` new entries, only the top
//! `K' = max(1, ⌊m·L·M/N⌋)` across all layers survive (ties prefer the
//! lower layer, then the lower position); earlier selections are never
//! revisited. With `M = N` nothing is ever dropped and the compressed
//! prefill reproduces the one-pass full cache bit for bit, because the
//! attention set of every position is identical in both schedules.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, CoreResult};
use crate::matrix::{dot, Matrix};
use crate::mlp::Activation;
use crate::real::Real;
use crate::rng;

/// Weights of one residual attention + feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ff1: Matrix<T>,
    pub ffb1: Vec<T>,
    pub ff2: Matrix<T>,
    pub ffb2: Vec<T>,
}

impl<T: Real> LayerWeights<T> {
    fn init(r: &mut impl Rng, dim: usize, ff_hidden: usize, noise: f64) -> Self {
        LayerWeights {
            wq: rng::identity_plus_noise(r, dim, noise),
            wk: rng::identity_plus_noise(r, dim, noise),
            wv: rng::identity_plus_noise(r, dim, noise),
            wo: rng::identity_plus_noise(r, dim, noise),
            ff1: rng::normal_matrix(r, dim, ff_hidden, 0.02),
            ffb1: rng::normal_vec(r, ff_hidden, 0.02),
            ff2: rng::normal_matrix(r, ff_hidden, dim, 0.02),
            ffb2: rng::normal_vec(r, dim, 0.02),
        }
    }

    fn validate(&self, dim: usize) -> CoreResult<()> {
        for m in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if m.rows() != dim || m.cols() != dim {
                return Err(CoreError::ShapeMismatch {
                    context: "LayerWeights: attention matrices must be dim x dim",
                });
            }
        }
        let f = self.ff1.cols();
        if self.ff1.rows() != dim
            || self.ffb1.len() != f
            || self.ff2.rows() != f
            || self.ff2.cols() != dim
            || self.ffb2.len() != dim
        {
            return Err(CoreError::ShapeMismatch {
                context: "LayerWeights: feed-forward shapes are inconsistent",
            });
        }
        Ok(())
    }
}

/// The full reader stack: attention blocks plus the tied vocabulary
/// matrix (one embedding row per token id).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStackParams<T> {
    pub layers: Vec<LayerWeights<T>>,
    pub vocab: Matrix<T>,
    pub heads: usize,
}

impl<T: Real> ToyStackParams<T> {
    pub fn init(
        r: &mut impl Rng,
        dim: usize,
        n_layers: usize,
        heads: usize,
        ff_hidden: usize,
        vocab_size: usize,
        noise: f64,
    ) -> CoreResult<Self> {
        if dim == 0 || n_layers == 0 || heads == 0 || ff_hidden == 0 || vocab_size == 0 {
            return Err(CoreError::InvalidArgument {
                context: "ToyStackParams::init: all sizes must be positive",
            });
        }
        if dim % heads != 0 {
            return Err(CoreError::InvalidArgument {
                context: "ToyStackParams::init: heads must divide dim",
            });
        }
        let layers = (0..n_layers)
            .map(|_| LayerWeights::init(r, dim, ff_hidden, noise))
            .collect();
        let embed_std = 1.0 / libm::sqrt(dim as f64);
        let stack = ToyStackParams {
            layers,
            vocab: rng::normal_matrix(r, vocab_size, dim, embed_std),
            heads,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn dim(&self) -> usize {
        self.vocab.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.rows()
    }

    pub fn validate(&self) -> CoreResult<()> {
        let d = self.dim();
        if self.layers.is_empty() || self.heads == 0 || d == 0 || self.vocab.rows() == 0 {
            return Err(CoreError::InvalidArgument {
                context: "ToyStackParams: stack must have layers, heads and a vocabulary",
            });
        }
        if d % self.heads != 0 {
            return Err(CoreError::InvalidArgument {
                context: "ToyStackParams: heads must divide dim",
            });
        }
        for l in &self.layers {
            l.validate(d)?;
        }
        Ok(())
    }

    /// Embedding row for one token id.
    pub fn embed(&self, id: usize) -> CoreResult<Vec<T>> {
        if id >= self.vocab.rows() {
            return Err(CoreError::InvalidArgument {
                context: "ToyStackParams::embed: token id out of vocabulary",
            });
        }
        Ok(self.vocab.row(id).to_vec())
    }

    /// Tied readout: logits of a final-layer hidden state.
    pub fn logits(&self, hidden: &[T]) -> CoreResult<Vec<T>> {
        self.vocab.mul_vec(hidden)
    }
}

/// Embeds a prompt id sequence into a row matrix.
pub fn embed_prompt<T: Real>(stack: &ToyStackParams<T>, ids: &[usize]) -> CoreResult<Matrix<T>> {
    let mut out = Matrix::zeros(ids.len(), stack.dim());
    for (i, &id) in ids.iter().enumerate() {
        let e = stack.embed(id)?;
        out.row_mut(i).copy_from_slice(&e);
    }
    Ok(out)
}

/// One cached key/value pair at a known stream position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry<T> {
    pub position: u64,
    pub key: Vec<T>,
    pub value: Vec<T>,
}

/// Per-layer KV cache; positions within a layer are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct KvStore<T> {
    layers: Vec<Vec<KvEntry<T>>>,
}

impl<T: Real> KvStore<T> {
    pub fn new(n_layers: usize) -> Self {
        KvStore {
            layers: (0..n_layers).map(|_| Vec::new()).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[KvEntry<T>] {
        &self.layers[l]
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn positions(&self, l: usize) -> Vec<u64> {
        self.layers[l].iter().map(|e| e.position).collect()
    }

    /// First position that is strictly after everything stored.
    pub fn next_position(&self) -> u64 {
        self.layers
            .iter()
            .filter_map(|l| l.last().map(|e| e.position + 1))
            .max()
            .unwrap_or(0)
    }

    fn push(&mut self, l: usize, entry: KvEntry<T>) -> CoreResult<()> {
        if let Some(last) = self.layers[l].last() {
            if entry.position <= last.position {
                return Err(CoreError::ContractViolation {
                    context: "KvStore: positions must be strictly increasing",
                });
            }
        }
        self.layers[l].push(entry);
        Ok(())
    }

    fn remove_indices(&mut self, l: usize, removed_sorted: &[usize]) {
        if removed_sorted.is_empty() {
            return;
        }
        let mut cursor = 0usize;
        let mut kept = Vec::with_capacity(self.layers[l].len() - removed_sorted.len());
        for (i, e) in self.layers[l].drain(..).enumerate() {
            if cursor < removed_sorted.len() && removed_sorted[cursor] == i {
                cursor += 1;
            } else {
                kept.push(e);
            }
        }
        self.layers[l] = kept;
    }
}

/// Streaming read budget: chunk length `m` and the average number of
/// retained positions per layer `M` the compressed cache may keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReaderBudget {
    pub chunk: usize,
    pub avg_tokens: usize,
}

impl ReaderBudget {
    pub fn validate(&self) -> CoreResult<()> {
        if self.chunk == 0 || self.avg_tokens == 0 {
            return Err(CoreError::InvalidArgument {
                context: "ReaderBudget: chunk and avg_tokens must be positive",
            });
        }
        Ok(())
    }

    /// Entries kept from each chunk's `m·L` candidates:
    /// `K' = max(1, ⌊m·L·M/N⌋)`.
    pub fn per_chunk_keep(&self, n_layers: usize, memory_len: usize) -> usize {
        let raw = self.chunk * n_layers * self.avg_tokens / memory_len.max(1);
        raw.max(1)
    }
}

/// Runs attention + feed-forward for `xs` (one row per new position) in
/// one layer. Row `i` attends every `cache` entry plus rows `0..=i` of
/// the block itself. Returns the block's outputs and its per-row (k, v)
/// pairs; when `importance` is given, each cache entry accumulates the
/// head-averaged attention weight it received.
fn attend_rows<T: Real>(
    heads: usize,
    lw: &LayerWeights<T>,
    cache: &[KvEntry<T>],
    xs: &Matrix<T>,
    mut importance: Option<&mut [T]>,
) -> CoreResult<(Matrix<T>, Vec<(Vec<T>, Vec<T>)>)> {
    let d = xs.cols();
    let dh = d / heads;
    let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
    let inv_heads = T::one() / T::of(heads as f64);

    let mut kvs: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(xs.rows());
    let mut queries: Vec<Vec<T>> = Vec::with_capacity(xs.rows());
    for x in xs.row_iter() {
        queries.push(lw.wq.mul_vec(x)?);
        kvs.push((lw.wk.mul_vec(x)?, lw.wv.mul_vec(x)?));
    }

    let mut out = Matrix::zeros(xs.rows(), d);
    for (i, x) in xs.row_iter().enumerate() {
        let visible = cache.len() + i + 1;
        let mut ctx = vec![T::zero(); d];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let q = &queries[i][span.clone()];
            let mut scores = Vec::with_capacity(visible);
            for e in cache {
                scores.push(dot(q, &e.key[span.clone()]) * inv_sqrt);
            }
            for kv in kvs.iter().take(i + 1) {
                scores.push(dot(q, &kv.0[span.clone()]) * inv_sqrt);
            }
            let mut max = scores[0];
            for &s in &scores[1..] {
                if s > max {
                    max = s;
                }
            }
            if !max.is_finite() {
                return Err(CoreError::NonFinite {
                    context: "attention: scores are not finite",
                });
            }
            let mut total = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total = total + *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = *s / total;
                let v = if j < cache.len() {
                    &cache[j].value[span.clone()]
                } else {
                    &kvs[j - cache.len()].1[span.clone()]
                };
                for (c, &vv) in ctx[span.clone()].iter_mut().zip(v) {
                    *c = *c + w * vv;
                }
                if j < cache.len() {
                    if let Some(acc) = importance.as_deref_mut() {
                        acc[j] = acc[j] + w * inv_heads;
                    }
                }
            }
        }
        let attn = lw.wo.mul_vec(&ctx)?;
        let row = out.row_mut(i);
        for ((o, &xv), &a) in row.iter_mut().zip(x).zip(&attn) {
            *o = xv + a;
        }
        // Residual feed-forward on the attended state.
        let mut a = lw.ff1.tr_mul_vec(row)?;
        for (ai, &b) in a.iter_mut().zip(&lw.ffb1) {
            *ai = *ai + b;
        }
        for ai in a.iter_mut() {
            *ai = Activation::Gelu.value(*ai);
        }
        let mut f = lw.ff2.tr_mul_vec(&a)?;
        for (fi, &b) in f.iter_mut().zip(&lw.ffb2) {
            *fi = *fi + b;
        }
        for (o, &fv) in row.iter_mut().zip(&f) {
            *o = *o + fv;
        }
    }
    Ok((out, kvs))
}

/// Forwards new positions through every layer, appending their keys and
/// values to the cache. Returns the final-layer hidden states.
pub fn forward_append<T: Real>(
    stack: &ToyStackParams<T>,
    cache: &mut KvStore<T>,
    inputs: &Matrix<T>,
    first_position: u64,
) -> CoreResult<Matrix<T>> {
    stack.validate()?;
    if inputs.cols() != stack.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "forward_append: input width != stack dim",
        });
    }
    if cache.n_layers() != stack.n_layers() {
        return Err(CoreError::ShapeMismatch {
            context: "forward_append: cache layer count != stack depth",
        });
    }
    let mut xs = inputs.clone();
    for (l, lw) in stack.layers.iter().enumerate() {
        let (out, kvs) = attend_rows(stack.heads, lw, cache.layer(l), &xs, None)?;
        for (i, (k, v)) in kvs.into_iter().enumerate() {
            cache.push(
                l,
                KvEntry {
                    position: first_position + i as u64,
                    key: k,
                    value: v,
                },
            )?;
        }
        xs = out;
    }
    if !xs.is_finite() {
        return Err(CoreError::NonFinite {
            context: "forward_append: hidden states are not finite",
        });
    }
    Ok(xs)
}

/// Result of a read-only prompt pass: final hidden states and, per layer,
/// the attention mass each cache entry collected from the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPass<T> {
    pub hidden: Matrix<T>,
    pub importance: Vec<Vec<T>>,
}

/// Forwards the prompt over the cache without storing its keys/values.
/// Prompt rows attend the whole cache plus their own prefix.
pub fn prompt_forward<T: Real>(
    stack: &ToyStackParams<T>,
    cache: &KvStore<T>,
    prompt: &Matrix<T>,
) -> CoreResult<PromptPass<T>> {
    stack.validate()?;
    if prompt.rows() == 0 {
        return Err(CoreError::InvalidArgument {
            context: "prompt_forward: empty prompt",
        });
    }
    if prompt.cols() != stack.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "prompt_forward: prompt width != stack dim",
        });
    }
    if cache.n_layers() != stack.n_layers() {
        return Err(CoreError::ShapeMismatch {
            context: "prompt_forward: cache layer count != stack depth",
        });
    }
    let mut xs = prompt.clone();
    let mut importance = Vec::with_capacity(stack.n_layers());
    for (l, lw) in stack.layers.iter().enumerate() {
        let mut imp = vec![T::zero(); cache.layer(l).len()];
        let (out, _) = attend_rows(stack.heads, lw, cache.layer(l), &xs, Some(&mut imp))?;
        importance.push(imp);
        xs = out;
    }
    Ok(PromptPass {
        hidden: xs,
        importance,
    })
}

/// Global top-K selection over the newest entries of each layer.
/// `new_from[l]` is the index where layer `l`'s fresh entries start;
/// entries below it are already retained and not candidates. Returns the
/// per-layer sorted index lists to *remove*. Ties prefer the higher
/// score, then the lower layer, then the lower position.
pub fn select_chunk_entries<T: Real>(
    importance: &[Vec<T>],
    new_from: &[usize],
    keep: usize,
) -> CoreResult<Vec<Vec<usize>>> {
    if keep == 0 {
        return Err(CoreError::InvalidArgument {
            context: "select_chunk_entries: keep count must be positive",
        });
    }
    if importance.len() != new_from.len() {
        return Err(CoreError::ShapeMismatch {
            context: "select_chunk_entries: layer counts differ",
        });
    }
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (l, imp) in importance.iter().enumerate() {
        for j in new_from[l]..imp.len() {
            candidates.push((l, j));
        }
    }
    let mut order = candidates.clone();
    order.sort_unstable_by(|&(la, ja), &(lb, jb)| {
        importance[lb][jb]
            .total_order(importance[la][ja])
            .then(la.cmp(&lb))
            .then(ja.cmp(&jb))
    });
    let keep = keep.min(order.len());
    let dropped = &order[keep..];
    let mut removed: Vec<Vec<usize>> = vec![Vec::new(); importance.len()];
    for &(l, j) in dropped {
        removed[l].push(j);
    }
    for r in removed.iter_mut() {
        r.sort_unstable();
    }
    Ok(removed)
}

/// Compressed-prefill outcome: the retained cache and how many entries
/// each chunk kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressOutcome<T> {
    pub cache: KvStore<T>,
    pub kept_per_chunk: Vec<usize>,
}

/// Streams the memory rows through the stack in chunks, scoring each
/// chunk's new cache entries with the prompt and keeping only the top
/// `K'` of them.
pub fn prefill_compressed<T: Real>(
    stack: &ToyStackParams<T>,
    memory: &Matrix<T>,
    prompt_ids: &[usize],
    budget: &ReaderBudget,
) -> CoreResult<CompressOutcome<T>> {
    stack.validate()?;
    budget.validate()?;
    if memory.rows() == 0 {
        return Err(CoreError::InvalidArgument {
            context: "prefill_compressed: empty memory",
        });
    }
    if memory.cols() != stack.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "prefill_compressed: memory width != stack dim",
        });
    }
    if prompt_ids.is_empty() {
        return Err(CoreError::InvalidArgument {
            context: "prefill_compressed: empty prompt",
        });
    }
    let prompt = embed_prompt(stack, prompt_ids)?;
    let keep = budget.per_chunk_keep(stack.n_layers(), memory.rows());
    let mut cache = KvStore::new(stack.n_layers());
    let mut kept_per_chunk = Vec::new();

    let mut start = 0usize;
    while start < memory.rows() {
        let len = budget.chunk.min(memory.rows() - start);
        let block = memory.row_block(start, len)?;
        let new_from: Vec<usize> = (0..stack.n_layers())
            .map(|l| cache.layer(l).len())
            .collect();
        forward_append(stack, &mut cache, &block, start as u64)?;
        let pass = prompt_forward(stack, &cache, &prompt)?;
        let removed = select_chunk_entries(&pass.importance, &new_from, keep)?;
        let mut dropped = 0usize;
        for (l, r) in removed.iter().enumerate() {
            dropped += r.len();
            cache.remove_indices(l, r);
        }
        kept_per_chunk.push(len * stack.n_layers() - dropped);
        start += len;
    }
    Ok(CompressOutcome {
        cache,
        kept_per_chunk,
    })
}

/// Reference prefill: the whole memory as one causal pass, nothing
/// dropped.
pub fn prefill_full<T: Real>(
    stack: &ToyStackParams<T>,
    memory: &Matrix<T>,
) -> CoreResult<KvStore<T>> {
    stack.validate()?;
    if memory.rows() == 0 {
        return Err(CoreError::InvalidArgument {
            context: "prefill_full: empty memory",
        });
    }
    let mut cache = KvStore::new(stack.n_layers());
    forward_append(stack, &mut cache, memory, 0)?;
    Ok(cache)
}

/// Logits at the last prompt position over the given cache (the cache is
/// not modified).
pub fn prompt_logits<T: Real>(
    stack: &ToyStackParams<T>,
    cache: &KvStore<T>,
    prompt_ids: &[usize],
) -> CoreResult<Vec<T>> {
    if prompt_ids.is_empty() {
        return Err(CoreError::InvalidArgument {
            context: "prompt_logits: empty prompt",
        });
    }
    let prompt = embed_prompt(stack, prompt_ids)?;
    let pass = prompt_forward(stack, cache, &prompt)?;
    stack.logits(pass.hidden.row(pass.hidden.rows() - 1))
}

fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v.total_order(values[best]) == core::cmp::Ordering::Greater {
            best = i;
        }
    }
    best
}

/// Greedy decoding over a session copy of the cache: the prompt and each
/// generated token append their keys/values to the copy; the caller's
/// cache is untouched. Returns the generated token ids.
pub fn decode_greedy<T: Real>(
    stack: &ToyStackParams<T>,
    cache: &KvStore<T>,
    prompt_ids: &[usize],
    steps: usize,
) -> CoreResult<Vec<usize>> {
    if steps == 0 {
        return Err(CoreError::InvalidArgument {
            context: "decode_greedy: step count must be positive",
        });
    }
    if prompt_ids.is_empty() {
        return Err(CoreError::InvalidArgument {
            context: "decode_greedy: empty prompt",
        });
    }
    let mut session = cache.clone();
    let mut position = session.next_position();
    let prompt = embed_prompt(stack, prompt_ids)?;
    let hidden = forward_append(stack, &mut session, &prompt, position)?;
    position += prompt.rows() as u64;

    let mut last = hidden.row(hidden.rows() - 1).to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = stack.logits(&last)?;
        let id = argmax(&logits);
        out.push(id);
        let e = stack.embed(id)?;
        let x = Matrix::from_vec(1, stack.dim(), e)?;
        let hidden = forward_append(stack, &mut session, &x, position)?;
        position += 1;
        last = hidden.row(0).to_vec();
    }
    Ok(out)
}
