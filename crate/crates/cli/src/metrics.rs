//! Per-step run metrics and their JSON-lines / CSV serialization.
//!
//! The metrics file is JSON-lines: one object per streamed batch with
//! exactly the fields `step`, `loss_before`, `loss_after`, `update_norm`,
//! `relative_output_change`, `cg_iterations`, `wall_time`. Losses are the
//! square root of the weighted reconstruction objective, matching the
//! per-step diagnostics of the fast-weight layer. `wall_time` is zero
//! unless timings were requested, keeping default runs byte-identical.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::formats::atomic_write;

/// One streamed batch's diagnostics. Field order is the serialization
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub update_norm: f64,
    pub relative_output_change: f64,
    pub cg_iterations: u64,
    pub wall_time: f64,
}

pub fn to_jsonl(rows: &[StepMetrics]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("metrics line {}", i + 1))
        })
        .collect()
}

pub fn write_jsonl(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    atomic_write(path, to_jsonl(rows)?.as_bytes())
}

/// Renders a plot-ready CSV: a header line plus one comma-joined row per
/// record. Values use the shortest round-trip float formatting.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, to_csv(header, rows).as_bytes())
}
