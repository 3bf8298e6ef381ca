//! Reader evaluation: prompt-conditioned cache compression versus the
//! full cache, swept over retention budgets.
//!
//! The toy attention stack is built deterministically from the run seed
//! with derived sizes (feed-forward width `2·dim`, vocabulary of 256
//! ids, projection noise 0.05). For each budget `M` the memory snapshot
//! is prefilled in compressing chunks, then compared against the
//! uncompressed reference: maximum absolute logit difference at the last
//! prompt position, retained-entry counts, and whether greedy decoding
//! agrees. A budget equal to the memory size must reproduce the full
//! cache bit-for-bit (asserted here, tolerance 1e-6 on logits).

use anyhow::{bail, ensure, Result};
use rand::Rng;
use vstream_core::reader::{
    decode_greedy, prefill_compressed, prefill_full, prompt_logits, KvStore, ReaderBudget,
    ToyStackParams,
};
use vstream_core::real::Real;
use vstream_core::rng::seeded_rng;
use vstream_core::Matrix;

use crate::config::RunConfig;

/// Vocabulary size of the derived toy stack.
pub const VOCAB_SIZE: usize = 256;
/// Feed-forward width multiplier of the derived toy stack.
pub const FF_MULT: usize = 2;
/// Projection-noise scale of the derived toy stack.
pub const STACK_NOISE: f64 = 0.05;

/// One budget's comparison against the full cache.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderReportRow {
    pub avg_tokens: usize,
    pub per_chunk_keep: usize,
    pub retained_total: usize,
    pub candidate_total: usize,
    pub compression_ratio: f64,
    pub logit_divergence: f64,
    pub decode_matches_full: bool,
}

/// Builds the derived toy stack for this config.
pub fn build_stack<T: Real>(cfg: &RunConfig) -> Result<ToyStackParams<T>> {
    let mut r = seeded_rng(cfg.seed);
    Ok(ToyStackParams::init(
        &mut r,
        cfg.dim,
        cfg.stack.layers,
        cfg.stack.heads,
        FF_MULT * cfg.dim,
        VOCAB_SIZE,
        STACK_NOISE,
    )?)
}

/// A deterministic default prompt: eight ids drawn from the seed.
pub fn derive_prompt(seed: u64, vocab: usize, len: usize) -> Vec<usize> {
    let mut r = seeded_rng(seed ^ 0x7073);
    (0..len).map(|_| r.gen_range(0..vocab)).collect()
}

/// Parses a comma-separated budget list (positive, strictly ascending).
pub fn parse_budgets(list: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for raw in list.split(',') {
        let s = raw.trim();
        if s.is_empty() {
            continue;
        }
        let v: usize = s
            .parse()
            .map_err(|_| anyhow::anyhow!("bad budget value {s:?}"))?;
        if v == 0 {
            bail!("budgets must be positive");
        }
        out.push(v);
    }
    if out.is_empty() {
        bail!("budget list is empty");
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        bail!("budget list must be strictly ascending");
    }
    Ok(out)
}

/// Evaluates compression at each budget over the given memory rows.
pub fn reader_eval<T: Real>(
    cfg: &RunConfig,
    memory: &Matrix<T>,
    budgets: &[usize],
    prompt: &[usize],
    decode_steps: usize,
) -> Result<(Vec<ReaderReportRow>, Vec<usize>, Option<KvStore<T>>)> {
    cfg.validate()?;
    if memory.rows() == 0 {
        bail!("memory snapshot is empty; nothing to read");
    }
    if memory.cols() != cfg.dim {
        bail!("snapshot dim {} != configured dim {}", memory.cols(), cfg.dim);
    }
    if prompt.iter().any(|&id| id >= VOCAB_SIZE) {
        bail!("prompt ids must be below the vocabulary size {VOCAB_SIZE}");
    }
    let stack: ToyStackParams<T> = build_stack(cfg)?;

    let full_cache = prefill_full(&stack, memory)?;
    let full_logits = prompt_logits(&stack, &full_cache, prompt)?;
    let full_decode = decode_greedy(&stack, &full_cache, prompt, decode_steps)?;
    let candidate_total = full_cache.total_entries();

    let mut rows = Vec::new();
    let mut last_cache = None;
    for &m in budgets {
        let budget = ReaderBudget {
            chunk: cfg.reader.chunk,
            avg_tokens: m,
        };
        let outcome = prefill_compressed(&stack, memory, prompt, &budget)?;
        let keep = budget.per_chunk_keep(stack.n_layers(), memory.rows());
        let logits = prompt_logits(&stack, &outcome.cache, prompt)?;
        let divergence = logits
            .iter()
            .zip(&full_logits)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0f64, f64::max);
        let decode = decode_greedy(&stack, &outcome.cache, prompt, decode_steps)?;
        let retained_total = outcome.cache.total_entries();

        if m >= memory.rows() {
            ensure!(
                divergence <= 1e-6,
                "no-compression equivalence violated: budget {m} diverges by {divergence}"
            );
            ensure!(
                decode == full_decode,
                "no-compression decode mismatch at budget {m}"
            );
        }
        rows.push(ReaderReportRow {
            avg_tokens: m,
            per_chunk_keep: keep,
            retained_total,
            candidate_total,
            compression_ratio: retained_total as f64 / candidate_total as f64,
            logit_divergence: divergence,
            decode_matches_full: decode == full_decode,
        });
        last_cache = Some(outcome.cache);
    }
    Ok((rows, full_decode, last_cache))
}

/// Debug export of a cache: one JSON object per entry with `layer`,
/// `position`, `key`, `value`. Not a stability-guaranteed format.
pub fn export_kv_jsonl<T: Real>(cache: &KvStore<T>) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Line<'a> {
        layer: usize,
        position: u64,
        key: &'a [f64],
        value: &'a [f64],
    }
    let mut out = String::new();
    for l in 0..cache.n_layers() {
        for e in cache.layer(l) {
            let key: Vec<f64> = e.key.iter().map(|&v| Real::to_f64(v)).collect();
            let value: Vec<f64> = e.value.iter().map(|&v| Real::to_f64(v)).collect();
            out.push_str(&serde_json::to_string(&Line {
                layer: l,
                position: e.position,
                key: &key,
                value: &value,
            })?);
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vstream_core::rng::normal_matrix;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.dim = 16;
        c.stack.layers = 2;
        c.stack.heads = 2;
        c.reader.chunk = 8;
        c.memory_budget = 32;
        c
    }

    fn memory(c: &RunConfig, rows: usize) -> Matrix<f64> {
        let mut r = seeded_rng(c.seed + 1000);
        normal_matrix(&mut r, rows, c.dim, c.token_std())
    }

    #[test]
    fn full_budget_row_reports_zero_divergence() {
        let c = cfg();
        let mem = memory(&c, 32);
        let prompt = derive_prompt(c.seed, VOCAB_SIZE, 6);
        let (rows, full_decode, last) =
            reader_eval(&c, &mem, &[8, 16, 32], &prompt, 5).unwrap();
        assert_eq!(rows.len(), 3);
        let full = &rows[2];
        assert_eq!(full.avg_tokens, 32);
        assert_eq!(full.logit_divergence, 0.0);
        assert!(full.decode_matches_full);
        assert_eq!(full.retained_total, full.candidate_total);
        assert_eq!(full_decode.len(), 5);
        assert!(full_decode.iter().all(|&id| id < VOCAB_SIZE));
        assert!(last.is_some());
        // Tighter budgets keep monotonically fewer entries.
        assert!(rows[0].retained_total <= rows[1].retained_total);
        assert!(rows[1].retained_total <= rows[2].retained_total);
    }

    #[test]
    fn budget_lists_and_prompts_are_validated() {
        assert_eq!(parse_budgets("8, 16,32").unwrap(), vec![8, 16, 32]);
        assert!(parse_budgets("0,4").is_err());
        assert!(parse_budgets("8,8").is_err());
        assert!(parse_budgets("").is_err());
        let c = cfg();
        let mem = memory(&c, 16);
        assert!(reader_eval(&c, &mem, &[16], &[VOCAB_SIZE], 2).is_err());
        let empty: Matrix<f64> = Matrix::zeros(0, 16);
        assert!(reader_eval(&c, &empty, &[16], &[1], 2).is_err());
    }

    #[test]
    fn derived_prompt_is_stable_and_in_range() {
        let a = derive_prompt(9, VOCAB_SIZE, 8);
        let b = derive_prompt(9, VOCAB_SIZE, 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|&id| id < VOCAB_SIZE));
        assert_ne!(a, derive_prompt(10, VOCAB_SIZE, 8));
    }

    #[test]
    fn kv_export_lists_every_retained_entry() {
        let c = cfg();
        let mem = memory(&c, 16);
        let prompt = derive_prompt(c.seed, VOCAB_SIZE, 4);
        let (_, _, last) = reader_eval(&c, &mem, &[4], &prompt, 2).unwrap();
        let cache = last.unwrap();
        let text = export_kv_jsonl(&cache).unwrap();
        assert_eq!(text.lines().count(), cache.total_entries());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("layer").is_some());
        assert!(first.get("position").is_some());
        assert_eq!(first.get("key").unwrap().as_array().unwrap().len(), c.dim);
    }
}
