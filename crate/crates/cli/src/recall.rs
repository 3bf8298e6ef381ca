//! Associative-recall evaluation: did streaming a token leave a usable
//! trace in the fast weights?
//!
//! The associative stream cycles a codebook of tokens; each token is one
//! key→value pair under the layer's projections (key `θ_K x`, value
//! `θ_V x`), and every update trains the fast weights to map the one to
//! the other. After streaming, each codebook token is probed:
//! `‖f(θ_K x; W) − θ_V x‖ / ‖θ_V x‖` under the final weights versus
//! under the untouched initial weights `W₀`. Retention shows up as the
//! final weights beating the control. The last-streamed pair's error is
//! also reported (recency), without being asserted on.

use anyhow::{bail, Result};
use vstream_core::real::Real;
use vstream_core::rng::seeded_rng;
use vstream_core::ttt::{init_fast_weights, probe_errors, ttt_step, TokenBatch, TttLayerParams};
use vstream_core::Matrix;

use crate::analysis::{stream_batches, OptimizerChoice};
use crate::config::RunConfig;
use crate::formats::{StreamFile, StreamMeta};
use crate::stream_gen::associative_codebook;

/// One probed codebook entry under one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub optimizer: String,
    pub key_index: usize,
    pub updated_error: f64,
    pub frozen_error: f64,
}

/// Aggregate recall report per optimizer.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RecallSummary {
    pub optimizer: String,
    pub pairs: usize,
    pub mean_updated_error: f64,
    pub mean_frozen_error: f64,
    /// Fraction of keys whose updated-weights error beats the frozen
    /// control.
    pub improved_fraction: f64,
    /// Probe error of the most recently streamed pair (report-only).
    pub last_pair_updated_error: f64,
}

/// Streams the file through the fast-weight layer once per optimizer and
/// probes every codebook entry against the frozen-initialization control.
pub fn recall_eval<T: Real>(
    cfg: &RunConfig,
    stream: &StreamFile,
    meta: &StreamMeta,
    optimizers: &[OptimizerChoice],
) -> Result<(Vec<ProbeRow>, Vec<RecallSummary>)> {
    cfg.validate()?;
    if meta.kind != "associative-pairs" {
        bail!(
            "recall evaluation needs an associative-pairs stream, got kind {:?}",
            meta.kind
        );
    }
    let Some(pair_count) = meta.pair_count else {
        bail!("stream metadata is missing pair_count");
    };
    if pair_count == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if meta.dim != cfg.dim {
        bail!("stream dim {} != configured dim {}", meta.dim, cfg.dim);
    }

    let codebook_f32 = associative_codebook(meta.seed, pair_count, cfg.dim);
    let codebook: Matrix<T> = Matrix::from_vec(
        pair_count,
        cfg.dim,
        codebook_f32
            .as_slice()
            .iter()
            .map(|&v| T::of(v as f64))
            .collect(),
    )?;

    let mut r = seeded_rng(cfg.seed);
    let params: TttLayerParams<T> = TttLayerParams::init(
        &mut r,
        cfg.dim,
        cfg.ttt.heads,
        cfg.ttt.hidden,
        cfg.ttt.theta_noise,
        T::of(cfg.optimizer.eta),
        vstream_core::mlp::Activation::Gelu,
    )?;
    let fw0 = init_fast_weights(&mut r, &params);
    let frozen = probe_errors(&codebook, &params, &fw0)?;

    let visual: Matrix<T> = stream.visual_matrix()?;
    if visual.rows() == 0 {
        bail!("associative stream has no visual rows to train on");
    }
    let batches = stream_batches(&visual, cfg.batch_size);
    let last_pair = (visual.rows() - 1) % pair_count;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for choice in optimizers {
        let spec = choice.spec::<T>(cfg);
        let mut fw = fw0.clone();
        for tokens in &batches {
            let batch = TokenBatch::visual(tokens.clone(), 0);
            let (_, next, _) = ttt_step(&batch, &params, &fw, &spec)?;
            fw = next;
        }
        let updated = probe_errors(&codebook, &params, &fw)?;

        let mut improved = 0usize;
        for i in 0..pair_count {
            if updated[i] < frozen[i] {
                improved += 1;
            }
            rows.push(ProbeRow {
                optimizer: choice.label.clone(),
                key_index: i,
                updated_error: updated[i].to_f64(),
                frozen_error: frozen[i].to_f64(),
            });
        }
        let mean = |v: &[T]| v.iter().map(|&e| Real::to_f64(e)).sum::<f64>() / v.len() as f64;
        summaries.push(RecallSummary {
            optimizer: choice.label.clone(),
            pairs: pair_count,
            mean_updated_error: mean(&updated),
            mean_frozen_error: mean(&frozen),
            improved_fraction: improved as f64 / pair_count as f64,
            last_pair_updated_error: updated[last_pair].to_f64(),
        });
    }
    Ok((rows, summaries))
}
