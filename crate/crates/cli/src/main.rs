//! `vstream`: deterministic driver for the streaming memory stack.
//!
//! Global flags: `--config PATH` (required), `--seed U64` and
//! `--precision {f32,f64}` (override the config), `--out DIR` (output
//! directory, default `.`). Subcommands:
//!
//! * `gen-synthetic` — write `stream.vstr` (+ `stream.meta.json`);
//! * `stream-run`    — write `metrics.jsonl` + `memory.vsms`;
//! * `sweep-norm`    — write `sweep.csv` (loss per optimizer × norm);
//! * `ttt-stats`     — write `ttt_stats.csv` (matched-norm series);
//! * `recall-eval`   — write `recall.csv` + `recall_summary.json`;
//! * `reader-eval`   — write `reader.csv` (+ `kv_dump.jsonl`).
//!
//! Every run is a pure function of (config, flags): outputs are
//! byte-identical across repeats unless `--timings` is given.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vstream_cli::analysis::{
    parse_norm_grid, parse_optimizers, sweep_update_norm, ttt_statistics, stream_batches,
};
use vstream_cli::config::{Precision, RunConfig};
use vstream_cli::formats::{
    atomic_write, read_meta, read_snapshot, read_stream, write_meta, write_snapshot, write_stream,
    SnapshotFile,
};
use vstream_cli::metrics::{write_csv, write_jsonl};
use vstream_cli::pipeline::{run_stream, MaintenanceMode};
use vstream_cli::reader_eval::{derive_prompt, export_kv_jsonl, parse_budgets, reader_eval, VOCAB_SIZE};
use vstream_cli::recall::recall_eval;
use vstream_cli::stream_gen::{generate, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Random,
    AssociativePairs,
    Needle,
}

impl KindArg {
    fn kind(self) -> StreamKind {
        match self {
            KindArg::Random => StreamKind::Random,
            KindArg::AssociativePairs => StreamKind::AssociativePairs,
            KindArg::Needle => StreamKind::Needle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl PrecisionArg {
    fn precision(self) -> Precision {
        match self {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vstream",
    about = "Streaming fast-weight memory harness",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the config's precision.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic stream file plus its metadata sidecar.
    GenSynthetic {
        #[arg(long, value_enum, default_value = "random")]
        kind: KindArg,
        /// Codebook size for associative-pairs streams.
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Stream a file through the fast-weight layer into the token memory.
    StreamRun {
        #[arg(long, value_name = "PATH")]
        stream: PathBuf,
        /// Merge similar adjacent rows instead of discarding.
        #[arg(long)]
        merge: bool,
        /// Record real wall-clock times (breaks byte-identical replays).
        #[arg(long)]
        timings: bool,
    },
    /// Rescale each optimizer's update over a norm grid and tabulate loss.
    SweepNorm {
        #[arg(long, default_value_t = 50)]
        instances: u64,
        /// Comma-separated ascending norms; 0 reports the pre-update loss.
        #[arg(long, default_value = "0,0.005,0.01,0.02,0.05,0.1,0.2,0.5,1,2")]
        norms: String,
        #[arg(long, default_value = "sgd,muon,hf2,hf3")]
        optimizers: String,
    },
    /// Per-step loss and output-change series at one matched update norm.
    TttStats {
        #[arg(long, value_name = "PATH")]
        stream: PathBuf,
        #[arg(long)]
        matched_norm: f64,
        #[arg(long, default_value = "sgd,muon,hf3")]
        optimizers: String,
    },
    /// Probe fast-weight retention of an associative-pairs stream.
    RecallEval {
        #[arg(long, value_name = "PATH")]
        stream: PathBuf,
        #[arg(long, default_value = "hf3,sgd")]
        optimizers: String,
    },
    /// Compare compressed cache reading against the full cache.
    ReaderEval {
        #[arg(long, value_name = "PATH")]
        snapshot: PathBuf,
        /// Comma-separated ascending retention budgets (average tokens).
        #[arg(long, default_value = "64,128,256")]
        budgets: String,
        /// Comma-separated prompt token ids (default: derived from seed).
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 8)]
        decode_steps: usize,
        /// Also export the last budget's cache as JSON-lines.
        #[arg(long)]
        dump_kv: bool,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let Some(config_path) = &cli.config else {
        bail!("--config is required");
    };
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p.precision();
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    match &cli.cmd {
        Cmd::GenSynthetic { kind, pairs } => cmd_gen(&cfg, &out, kind.kind(), *pairs),
        Cmd::StreamRun {
            stream,
            merge,
            timings,
        } => cmd_stream_run(&cfg, &out, stream, *merge, *timings),
        Cmd::SweepNorm {
            instances,
            norms,
            optimizers,
        } => cmd_sweep(&cfg, &out, *instances, norms, optimizers),
        Cmd::TttStats {
            stream,
            matched_norm,
            optimizers,
        } => cmd_stats(&cfg, &out, stream, *matched_norm, optimizers),
        Cmd::RecallEval { stream, optimizers } => cmd_recall(&cfg, &out, stream, optimizers),
        Cmd::ReaderEval {
            snapshot,
            budgets,
            prompt,
            decode_steps,
            dump_kv,
        } => cmd_reader(
            &cfg,
            &out,
            snapshot,
            budgets,
            prompt.as_deref(),
            *decode_steps,
            *dump_kv,
        ),
    }
}

fn cmd_gen(cfg: &RunConfig, out: &Path, kind: StreamKind, pairs: usize) -> Result<()> {
    let g = generate(cfg, kind, pairs)?;
    let stream_path = out.join("stream.vstr");
    write_stream(&stream_path, &g.file)?;
    write_meta(&stream_path, &g.meta)?;
    println!(
        "wrote {} ({} frames, dim {}) and {}",
        stream_path.display(),
        g.file.frames.len(),
        g.file.dim,
        stream_path.with_extension("meta.json").display()
    );
    Ok(())
}

fn cmd_stream_run(
    cfg: &RunConfig,
    out: &Path,
    stream_path: &Path,
    merge: bool,
    timings: bool,
) -> Result<()> {
    let stream = read_stream(stream_path)?;
    let mode = if merge {
        MaintenanceMode::Merge
    } else {
        MaintenanceMode::Discard
    };
    let (metrics, snapshot) = match cfg.precision {
        Precision::F32 => {
            let r = run_stream::<f32>(cfg, &stream, mode, timings)?;
            (r.metrics, SnapshotFile::from_memory(&r.memory))
        }
        Precision::F64 => {
            let r = run_stream::<f64>(cfg, &stream, mode, timings)?;
            (r.metrics, SnapshotFile::from_memory(&r.memory))
        }
    };
    let metrics_path = out.join("metrics.jsonl");
    let snapshot_path = out.join("memory.vsms");
    write_jsonl(&metrics_path, &metrics)?;
    write_snapshot(&snapshot_path, &snapshot)?;
    println!(
        "wrote {} ({} steps) and {} ({} rows)",
        metrics_path.display(),
        metrics.len(),
        snapshot_path.display(),
        snapshot.provenance.len()
    );
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    out: &Path,
    instances: u64,
    norms: &str,
    optimizers: &str,
) -> Result<()> {
    let norms = parse_norm_grid(norms)?;
    let optimizers = parse_optimizers(optimizers)?;
    let rows = match cfg.precision {
        Precision::F32 => sweep_update_norm::<f32>(cfg, instances, &norms, &optimizers)?,
        Precision::F64 => sweep_update_norm::<f64>(cfg, instances, &norms, &optimizers)?,
    };
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                r.optimizer.clone(),
                r.norm.to_string(),
                r.loss.to_string(),
            ]
        })
        .collect();
    let path = out.join("sweep.csv");
    write_csv(&path, &["instance", "optimizer", "norm", "loss"], &csv_rows)?;
    println!("wrote {} ({} rows)", path.display(), csv_rows.len());
    Ok(())
}

fn cmd_stats(
    cfg: &RunConfig,
    out: &Path,
    stream_path: &Path,
    matched_norm: f64,
    optimizers: &str,
) -> Result<()> {
    let stream = read_stream(stream_path)?;
    let optimizers = parse_optimizers(optimizers)?;
    let rows = match cfg.precision {
        Precision::F32 => {
            let visual = stream.visual_matrix::<f32>()?;
            let batches = stream_batches(&visual, cfg.batch_size);
            ttt_statistics(cfg, &batches, &optimizers, matched_norm)?
        }
        Precision::F64 => {
            let visual = stream.visual_matrix::<f64>()?;
            let batches = stream_batches(&visual, cfg.batch_size);
            ttt_statistics(cfg, &batches, &optimizers, matched_norm)?
        }
    };
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.optimizer.clone(),
                r.loss_before.to_string(),
                r.relative_output_change.to_string(),
                r.update_norm.to_string(),
            ]
        })
        .collect();
    let path = out.join("ttt_stats.csv");
    write_csv(
        &path,
        &[
            "step",
            "optimizer",
            "loss_before",
            "relative_output_change",
            "update_norm",
        ],
        &csv_rows,
    )?;
    println!("wrote {} ({} rows)", path.display(), csv_rows.len());
    Ok(())
}

fn cmd_recall(cfg: &RunConfig, out: &Path, stream_path: &Path, optimizers: &str) -> Result<()> {
    let stream = read_stream(stream_path)?;
    let meta = read_meta(stream_path)?;
    let optimizers = parse_optimizers(optimizers)?;
    let (rows, summaries) = match cfg.precision {
        Precision::F32 => recall_eval::<f32>(cfg, &stream, &meta, &optimizers)?,
        Precision::F64 => recall_eval::<f64>(cfg, &stream, &meta, &optimizers)?,
    };
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.optimizer.clone(),
                r.key_index.to_string(),
                r.updated_error.to_string(),
                r.frozen_error.to_string(),
            ]
        })
        .collect();
    let csv_path = out.join("recall.csv");
    write_csv(
        &csv_path,
        &["optimizer", "key_index", "updated_error", "frozen_error"],
        &csv_rows,
    )?;
    let mut summary_text = String::new();
    for s in &summaries {
        summary_text.push_str(&serde_json::to_string(s)?);
        summary_text.push('\n');
    }
    let summary_path = out.join("recall_summary.json");
    atomic_write(&summary_path, summary_text.as_bytes())?;
    println!(
        "wrote {} ({} probes) and {}",
        csv_path.display(),
        csv_rows.len(),
        summary_path.display()
    );
    for s in &summaries {
        println!(
            "  {}: mean error {:.4} vs frozen {:.4} ({:.0}% of keys improved)",
            s.optimizer,
            s.mean_updated_error,
            s.mean_frozen_error,
            100.0 * s.improved_fraction
        );
    }
    Ok(())
}

fn cmd_reader(
    cfg: &RunConfig,
    out: &Path,
    snapshot_path: &Path,
    budgets: &str,
    prompt: Option<&str>,
    decode_steps: usize,
    dump_kv: bool,
) -> Result<()> {
    let snapshot = read_snapshot(snapshot_path)?;
    let budgets = parse_budgets(budgets)?;
    let prompt_ids = match prompt {
        Some(text) => {
            let ids: Vec<usize> = text
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| anyhow::anyhow!("bad prompt id {s:?}"))
                })
                .collect::<Result<_>>()?;
            if ids.is_empty() {
                bail!("prompt must contain at least one id");
            }
            ids
        }
        None => derive_prompt(cfg.seed, VOCAB_SIZE, 8),
    };

    let (rows, dump) = match cfg.precision {
        Precision::F32 => {
            let mem = snapshot.to_memory::<f32>()?;
            let (rows, _, last) =
                reader_eval(cfg, mem.tokens(), &budgets, &prompt_ids, decode_steps)?;
            let dump = match (dump_kv, last) {
                (true, Some(cache)) => Some(export_kv_jsonl(&cache)?),
                _ => None,
            };
            (rows, dump)
        }
        Precision::F64 => {
            let mem = snapshot.to_memory::<f64>()?;
            let (rows, _, last) =
                reader_eval(cfg, mem.tokens(), &budgets, &prompt_ids, decode_steps)?;
            let dump = match (dump_kv, last) {
                (true, Some(cache)) => Some(export_kv_jsonl(&cache)?),
                _ => None,
            };
            (rows, dump)
        }
    };

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.avg_tokens.to_string(),
                r.per_chunk_keep.to_string(),
                r.retained_total.to_string(),
                r.candidate_total.to_string(),
                r.compression_ratio.to_string(),
                r.logit_divergence.to_string(),
                r.decode_matches_full.to_string(),
            ]
        })
        .collect();
    let path = out.join("reader.csv");
    write_csv(
        &path,
        &[
            "avg_tokens",
            "per_chunk_keep",
            "retained_total",
            "candidate_total",
            "compression_ratio",
            "logit_divergence",
            "decode_matches_full",
        ],
        &csv_rows,
    )?;
    println!("wrote {} ({} budgets)", path.display(), csv_rows.len());
    if let Some(text) = dump {
        let dump_path = out.join("kv_dump.jsonl");
        atomic_write(&dump_path, text.as_bytes())?;
        println!("wrote {}", dump_path.display());
    }
    Ok(())
}
