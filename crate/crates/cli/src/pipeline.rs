//! The end-to-end streaming pipeline: fast-weight updates feeding the
//! fixed-budget token memory.
//!
//! Frames arrive in stream order. Visual rows queue for the trainer;
//! once `batch_size` of them are pending, the batch runs one fast-weight
//! step and its *outputs* are appended to the memory, tagged with the
//! original stream indices of their source rows. Audio rows bypass the
//! trainer: they queue as-is and are appended (after the batch's output
//! rows) at the next batch boundary, then the budget is enforced once
//! and one metrics record is emitted. A final partial batch and any
//! remaining audio are flushed by [`Pipeline::finish`].
//!
//! Resident state is one memory (≤ budget rows), one set of fast
//! weights, and the pending queues (< batch size + queued audio) —
//! independent of how many frames have been streamed.

use std::time::Instant;

use anyhow::{bail, Result};
use vstream_core::memory::{MemoryState, Provenance};
use vstream_core::optim::OptimizerSpec;
use vstream_core::real::Real;
use vstream_core::rng::seeded_rng;
use vstream_core::ttt::{
    init_fast_weights, ttt_step, FastWeights, Modality, TokenBatch, TttLayerParams,
};
use vstream_core::Matrix;

use crate::config::RunConfig;
use crate::formats::{StreamFile, StreamFrame};
use crate::metrics::StepMetrics;

/// How the memory sheds excess rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaintenanceMode {
    /// Discard the most redundant rows (the default).
    Discard,
    /// Merge the most similar adjacent pairs (baseline for comparison).
    Merge,
}

/// Streaming state machine; push frames, collect metrics, read the
/// final memory and weights.
pub struct Pipeline<T: Real> {
    params: TttLayerParams<T>,
    fw: FastWeights<T>,
    spec: OptimizerSpec<T>,
    memory: MemoryState<T>,
    mode: MaintenanceMode,
    timings: bool,
    batch_size: usize,
    dim: usize,
    pending_visual: Vec<T>,
    pending_visual_idx: Vec<u64>,
    pending_audio: Vec<T>,
    pending_audio_prov: Vec<Provenance>,
    next_stream_index: u64,
    step: u64,
}

impl<T: Real> Pipeline<T> {
    pub fn new(cfg: &RunConfig, mode: MaintenanceMode, timings: bool) -> Result<Self> {
        cfg.validate()?;
        let mut r = seeded_rng(cfg.seed);
        let params = TttLayerParams::init(
            &mut r,
            cfg.dim,
            cfg.ttt.heads,
            cfg.ttt.hidden,
            cfg.ttt.theta_noise,
            T::of(cfg.optimizer.eta),
            vstream_core::mlp::Activation::Gelu,
        )?;
        let fw = init_fast_weights(&mut r, &params);
        Ok(Pipeline {
            params,
            fw,
            spec: cfg.optimizer_spec(),
            memory: MemoryState::new(cfg.memory_budget, cfg.dim)?,
            mode,
            timings,
            batch_size: cfg.batch_size,
            dim: cfg.dim,
            pending_visual: Vec::new(),
            pending_visual_idx: Vec::new(),
            pending_audio: Vec::new(),
            pending_audio_prov: Vec::new(),
            next_stream_index: 0,
            step: 0,
        })
    }

    pub fn memory(&self) -> &MemoryState<T> {
        &self.memory
    }

    pub fn fast_weights(&self) -> &FastWeights<T> {
        &self.fw
    }

    pub fn steps_run(&self) -> u64 {
        self.step
    }

    /// Logical resident-state size in stored scalars and tags. Constant
    /// across stream length once the budget is saturated and the queues
    /// are at the same fill level.
    pub fn state_footprint(&self) -> usize {
        let weights: usize = self.fw.heads.iter().map(|h| h.param_count()).sum();
        self.memory.len() * self.dim
            + self.memory.provenance().len()
            + weights
            + self.pending_visual.len()
            + self.pending_visual_idx.len()
            + self.pending_audio.len()
            + self.pending_audio_prov.len()
    }

    /// Queues one frame (visual rows first, then audio, matching file
    /// order) and runs as many full batches as the queue now holds.
    pub fn push_frame(&mut self, visual: &Matrix<T>, audio: &Matrix<T>) -> Result<Vec<StepMetrics>> {
        if visual.rows() > 0 && visual.cols() != self.dim {
            bail!("frame visual width {} != configured dim {}", visual.cols(), self.dim);
        }
        if audio.rows() > 0 && audio.cols() != self.dim {
            bail!("frame audio width {} != configured dim {}", audio.cols(), self.dim);
        }
        self.pending_visual.extend_from_slice(visual.as_slice());
        for _ in 0..visual.rows() {
            self.pending_visual_idx.push(self.next_stream_index);
            self.next_stream_index += 1;
        }
        self.pending_audio.extend_from_slice(audio.as_slice());
        for _ in 0..audio.rows() {
            self.pending_audio_prov.push(Provenance {
                stream_index: self.next_stream_index,
                modality: Modality::Audio,
            });
            self.next_stream_index += 1;
        }

        let mut out = Vec::new();
        while self.pending_visual_idx.len() >= self.batch_size {
            out.push(self.run_batch(self.batch_size)?);
        }
        Ok(out)
    }

    /// Convenience wrapper over stored `f32` frames.
    pub fn push_stored_frame(&mut self, dim: usize, frame: &StreamFrame) -> Result<Vec<StepMetrics>> {
        let widen = |rows: &[f32]| -> Result<Matrix<T>> {
            let data: Vec<T> = rows.iter().map(|&v| T::of(v as f64)).collect();
            Ok(Matrix::from_vec(rows.len() / dim, dim, data)?)
        };
        let visual = widen(&frame.visual)?;
        let audio = widen(&frame.audio)?;
        self.push_frame(&visual, &audio)
    }

    /// Flushes a final partial batch and any queued audio. Idempotent;
    /// returns the flush's metrics record if a batch ran.
    pub fn finish(&mut self) -> Result<Option<StepMetrics>> {
        if !self.pending_visual_idx.is_empty() {
            let n = self.pending_visual_idx.len();
            return Ok(Some(self.run_batch(n)?));
        }
        if !self.pending_audio_prov.is_empty() {
            self.flush_audio()?;
            self.enforce()?;
        }
        Ok(None)
    }

    fn run_batch(&mut self, take: usize) -> Result<StepMetrics> {
        let started = Instant::now();
        let data: Vec<T> = self.pending_visual.drain(..take * self.dim).collect();
        let idx: Vec<u64> = self.pending_visual_idx.drain(..take).collect();
        let tokens = Matrix::from_vec(take, self.dim, data)?;
        let batch = TokenBatch::visual(tokens, idx[0]);

        let (output, next_fw, info) = ttt_step(&batch, &self.params, &self.fw, &self.spec)?;
        self.fw = next_fw;

        let prov: Vec<Provenance> = idx
            .iter()
            .map(|&stream_index| Provenance {
                stream_index,
                modality: Modality::Visual,
            })
            .collect();
        self.memory.append_with_provenance(&output, &prov)?;
        self.flush_audio()?;
        self.enforce()?;

        let metrics = StepMetrics {
            step: self.step,
            loss_before: info.loss_before.to_f64(),
            loss_after: info.loss_after.to_f64(),
            update_norm: info.update_norm.to_f64(),
            relative_output_change: info.relative_output_change.to_f64(),
            cg_iterations: info.cg_iterations as u64,
            wall_time: if self.timings {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.step += 1;
        Ok(metrics)
    }

    fn flush_audio(&mut self) -> Result<()> {
        if self.pending_audio_prov.is_empty() {
            return Ok(());
        }
        let rows = Matrix::from_vec(
            self.pending_audio_prov.len(),
            self.dim,
            std::mem::take(&mut self.pending_audio),
        )?;
        let prov = std::mem::take(&mut self.pending_audio_prov);
        self.memory.append_with_provenance(&rows, &prov)?;
        Ok(())
    }

    fn enforce(&mut self) -> Result<()> {
        match self.mode {
            MaintenanceMode::Discard => {
                self.memory.enforce_budget()?;
            }
            MaintenanceMode::Merge => {
                self.memory.enforce_budget_merge()?;
            }
        }
        Ok(())
    }
}

/// Full results of one streamed run.
pub struct RunOutcome<T: Real> {
    pub metrics: Vec<StepMetrics>,
    pub memory: MemoryState<T>,
    pub fast_weights: FastWeights<T>,
}

/// Streams a whole stored file through a fresh pipeline.
pub fn run_stream<T: Real>(
    cfg: &RunConfig,
    stream: &StreamFile,
    mode: MaintenanceMode,
    timings: bool,
) -> Result<RunOutcome<T>> {
    if !stream.frames.is_empty() && stream.dim as usize != cfg.dim {
        bail!(
            "stream dim {} != configured dim {}",
            stream.dim,
            cfg.dim
        );
    }
    let mut p = Pipeline::<T>::new(cfg, mode, timings)?;
    let mut metrics = Vec::new();
    for frame in &stream.frames {
        metrics.extend(p.push_stored_frame(cfg.dim, frame)?);
    }
    if let Some(m) = p.finish()? {
        metrics.push(m);
    }
    Ok(RunOutcome {
        metrics,
        memory: p.memory.clone(),
        fast_weights: p.fw.clone(),
    })
}
