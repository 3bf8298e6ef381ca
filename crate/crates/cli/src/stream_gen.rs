//! Synthetic stream generation: deterministic token streams for the
//! pipeline and the analysis commands.
//!
//! Three kinds are supported:
//!
//! * `random` — every row i.i.d. normal with per-coordinate std `1/√d`
//!   (expected row norm ≈ 1);
//! * `associative-pairs` — visual rows cycle a fixed codebook in order.
//!   Each codebook row is one key→value pair as the fast-weight layer
//!   sees it: the key is the row's key projection, the value its value
//!   projection. The codebook is the generator's *first* draw, so
//!   analysis commands rebuild it from the recorded seed alone;
//! * `needle` — a random stream with one distinguished high-norm row
//!   planted at a seed-chosen position, recorded in the metadata.
//!
//! Generation always samples in `f32` (the stream format's storage
//! width), so files are identical regardless of the run precision.

use anyhow::{bail, Result};
use rand::Rng;
use vstream_core::rng::{normal_matrix, normal_vec, seeded_rng};
use vstream_core::Matrix;

use crate::config::RunConfig;
use crate::formats::{StreamFile, StreamFrame, StreamMeta};

/// Which generator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Random,
    AssociativePairs,
    Needle,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Random => "random",
            StreamKind::AssociativePairs => "associative-pairs",
            StreamKind::Needle => "needle",
        }
    }
}

impl std::str::FromStr for StreamKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(StreamKind::Random),
            "associative-pairs" => Ok(StreamKind::AssociativePairs),
            "needle" => Ok(StreamKind::Needle),
            other => bail!(
                "unknown stream kind {other:?} (expected random, associative-pairs, or needle)"
            ),
        }
    }
}

/// A generated stream plus the sidecar describing it.
#[derive(Debug, Clone)]
pub struct GeneratedStream {
    pub file: StreamFile,
    pub meta: StreamMeta,
}

/// The associative codebook for `pair_count` pairs: row `i` is the token
/// whose key/value projections form pair `i`. Must match the generator's
/// first draws so it can be rebuilt from the seed.
///
/// Codebook entries are unit-scale normals (row norm ≈ √dim), unlike the
/// 1/√dim scale of random filler tokens: recall probes train the inner
/// MLP through features proportional to the key norm, and at 1/√dim the
/// key-conditioned channel is too shallow to fit in a desk-scale run.
pub fn associative_codebook(seed: u64, pair_count: usize, dim: usize) -> Matrix<f32> {
    let mut r = seeded_rng(seed);
    normal_matrix(&mut r, pair_count, dim, 1.0)
}

/// Deterministically generates a stream of `cfg.frames` frames with
/// `cfg.tokens_per_frame` visual and `cfg.audio_per_frame` audio rows
/// each. `pairs` is only read by the associative kind.
pub fn generate(cfg: &RunConfig, kind: StreamKind, pairs: usize) -> Result<GeneratedStream> {
    cfg.validate()?;
    let d = cfg.dim;
    let std = cfg.token_std();
    let mut r = seeded_rng(cfg.seed);
    let mut meta = StreamMeta {
        kind: kind.as_str().to_string(),
        seed: cfg.seed,
        dim: d,
        frames: cfg.frames,
        tokens_per_frame: cfg.tokens_per_frame,
        audio_per_frame: cfg.audio_per_frame,
        frame_rate: cfg.frame_rate.clone(),
        pair_count: None,
        needle_stream_index: None,
    };

    // The codebook is drawn first, so `associative_codebook` rebuilds it
    // from the seed alone.
    let codebook = match kind {
        StreamKind::AssociativePairs => {
            meta.pair_count = Some(pairs);
            Some(normal_matrix::<f32>(&mut r, pairs, d, 1.0))
        }
        _ => None,
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut visual_ordinal = 0usize;
    for _ in 0..cfg.frames {
        let visual = match &codebook {
            Some(cb) if cb.rows() > 0 => {
                let mut rows = Vec::with_capacity(cfg.tokens_per_frame * d);
                for _ in 0..cfg.tokens_per_frame {
                    rows.extend_from_slice(cb.row(visual_ordinal % cb.rows()));
                    visual_ordinal += 1;
                }
                rows
            }
            Some(_) => Vec::new(),
            None => {
                let m: Matrix<f32> = normal_matrix(&mut r, cfg.tokens_per_frame, d, std);
                visual_ordinal += cfg.tokens_per_frame;
                m.as_slice().to_vec()
            }
        };
        let audio: Matrix<f32> = normal_matrix(&mut r, cfg.audio_per_frame, d, std);
        frames.push(StreamFrame {
            visual,
            audio: audio.as_slice().to_vec(),
        });
    }

    if kind == StreamKind::Needle {
        let total_visual = visual_ordinal;
        if total_visual == 0 {
            bail!("needle stream needs at least one visual token");
        }
        let needle: Vec<f32> = normal_vec::<f32>(&mut r, d, std)
            .into_iter()
            .map(|v| 3.0 * v)
            .collect();
        let target = r.gen_range(0..total_visual);
        let frame = target / cfg.tokens_per_frame;
        let slot = target % cfg.tokens_per_frame;
        frames[frame].visual[slot * d..(slot + 1) * d].copy_from_slice(&needle);
        // File-order stream index: every earlier frame contributes its
        // visual and audio rows before this frame's visual block.
        let per_frame = (cfg.tokens_per_frame + cfg.audio_per_frame) as u64;
        meta.needle_stream_index = Some(frame as u64 * per_frame + slot as u64);
    }

    Ok(GeneratedStream {
        file: StreamFile {
            dim: d as u32,
            frames,
        },
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.frames = 8;
        c.tokens_per_frame = 4;
        c.dim = 16;
        c.audio_per_frame = 2;
        c
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [StreamKind::Random, StreamKind::AssociativePairs, StreamKind::Needle] {
            let a = generate(&cfg(), kind, 5).unwrap();
            let b = generate(&cfg(), kind, 5).unwrap();
            assert_eq!(a.file, b.file, "{}", kind.as_str());
            assert_eq!(a.meta, b.meta);
            let mut other = cfg();
            other.seed += 1;
            let c = generate(&other, kind, 5).unwrap();
            assert_ne!(a.file, c.file);
        }
    }

    #[test]
    fn random_token_norms_match_target_within_ten_percent() {
        let mut c = cfg();
        c.frames = 250;
        c.audio_per_frame = 0;
        let g = generate(&c, StreamKind::Random, 0).unwrap();
        let d = c.dim;
        let mut norms = Vec::new();
        for f in &g.file.frames {
            for row in f.visual.chunks_exact(d) {
                norms.push(row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt());
            }
        }
        assert_eq!(norms.len(), 1000);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean norm {mean}");
    }

    #[test]
    fn associative_stream_cycles_the_codebook_exactly() {
        let c = cfg();
        let g = generate(&c, StreamKind::AssociativePairs, 5).unwrap();
        assert_eq!(g.meta.pair_count, Some(5));
        let cb = associative_codebook(c.seed, 5, c.dim);
        let mut t = 0usize;
        for f in &g.file.frames {
            for row in f.visual.chunks_exact(c.dim) {
                assert_eq!(row, cb.row(t % 5), "token {t}");
                t += 1;
            }
        }
        assert_eq!(t, c.frames * c.tokens_per_frame);
    }

    #[test]
    fn zero_pairs_yield_empty_visual_rows() {
        let g = generate(&cfg(), StreamKind::AssociativePairs, 0).unwrap();
        assert_eq!(g.meta.pair_count, Some(0));
        assert!(g.file.frames.iter().all(|f| f.visual.is_empty()));
        assert!(g.file.frames.iter().all(|f| !f.audio.is_empty()));
    }

    #[test]
    fn needle_is_planted_where_the_metadata_says() {
        let c = cfg();
        let g = generate(&c, StreamKind::Needle, 0).unwrap();
        let idx = g.meta.needle_stream_index.unwrap();
        let per_frame = (c.tokens_per_frame + c.audio_per_frame) as u64;
        let frame = (idx / per_frame) as usize;
        let slot = (idx % per_frame) as usize;
        assert!(slot < c.tokens_per_frame, "needle index must be a visual row");
        let row = &g.file.frames[frame].visual[slot * c.dim..(slot + 1) * c.dim];
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        // The planted row is 3× the generator scale; ordinary rows
        // concentrate near norm 1.
        assert!(norm > 1.8, "needle norm {norm}");
        let plain = generate(&c, StreamKind::Random, 0).unwrap();
        assert_ne!(plain.file.frames[frame].visual, g.file.frames[frame].visual);
    }
}
