//! Analysis drivers: the update-norm sweep and the matched-norm per-step
//! statistics.
//!
//! Both share one primitive: compute an optimizer's natural update on a
//! batch, rescale it to a target joint Frobenius norm, and measure the
//! loss and output movement of the rescaled step. Rescaling compares
//! update *directions* at equal step sizes, the only fair footing for
//! rules whose natural scales differ by orders of magnitude.

use anyhow::{bail, Result};
use vstream_core::optim::{scale_update, update_norm, OptimizerKind, OptimizerSpec};
use vstream_core::real::Real;
use vstream_core::rng::{normal_matrix, seeded_rng};
use vstream_core::ttt::{
    apply_update, compute_update, init_fast_weights, raw_output, reconstruction_loss,
    FastWeights, TokenBatch, TttLayerParams,
};
use vstream_core::Matrix;

use crate::config::RunConfig;

/// One optimizer named on a command line: `sgd`, `muon`, or `hf<k>`
/// (`hf` alone means `hf` with the configured iteration count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimizerChoice {
    pub label: String,
    pub kind: OptimizerKind,
    pub cg_iters: Option<usize>,
}

impl OptimizerChoice {
    pub fn spec<T: Real>(&self, cfg: &RunConfig) -> OptimizerSpec<T> {
        let iters = self.cg_iters.unwrap_or(cfg.optimizer.cg_iters);
        cfg.spec_of_kind(self.kind, iters)
    }
}

/// Parses a comma-separated optimizer list, preserving order.
pub fn parse_optimizers(list: &str) -> Result<Vec<OptimizerChoice>> {
    let mut out = Vec::new();
    for raw in list.split(',') {
        let name = raw.trim();
        if name.is_empty() {
            continue;
        }
        let choice = match name {
            "sgd" => OptimizerChoice {
                label: name.to_string(),
                kind: OptimizerKind::Sgd,
                cg_iters: None,
            },
            "muon" => OptimizerChoice {
                label: name.to_string(),
                kind: OptimizerKind::Muon,
                cg_iters: None,
            },
            "hf" => OptimizerChoice {
                label: name.to_string(),
                kind: OptimizerKind::Hf,
                cg_iters: None,
            },
            _ => match name.strip_prefix("hf").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => OptimizerChoice {
                    label: name.to_string(),
                    kind: OptimizerKind::Hf,
                    cg_iters: Some(k),
                },
                _ => bail!(
                    "unknown optimizer {name:?} (expected sgd, muon, hf, or hf<iters>)"
                ),
            },
        };
        if out.iter().any(|c: &OptimizerChoice| c.label == choice.label) {
            bail!("optimizer {name:?} listed twice");
        }
        out.push(choice);
    }
    if out.is_empty() {
        bail!("optimizer list is empty");
    }
    Ok(out)
}

/// Parses a comma-separated, ascending, non-negative float list.
pub fn parse_norm_grid(list: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for raw in list.split(',') {
        let s = raw.trim();
        if s.is_empty() {
            continue;
        }
        let v: f64 = s
            .parse()
            .map_err(|_| anyhow::anyhow!("bad norm value {s:?}"))?;
        if !v.is_finite() || v < 0.0 {
            bail!("norm values must be non-negative and finite, got {s}");
        }
        out.push(v);
    }
    if out.is_empty() {
        bail!("norm grid is empty");
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        bail!("norm grid must be strictly ascending");
    }
    Ok(out)
}

/// Diagnostics of one rescaled step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaledStep<T> {
    pub loss_before: T,
    pub loss_after: T,
    pub relative_output_change: T,
    pub update_norm: T,
    pub cg_iterations: usize,
}

/// Computes the natural update, rescales it to `target` joint norm,
/// applies it, and reports the step's diagnostics plus the successor
/// weights. A zero target (or a zero natural update) applies nothing.
/// Losses are reported as the square root of the weighted objective.
pub fn step_at_norm<T: Real>(
    batch: &TokenBatch<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
    spec: &OptimizerSpec<T>,
    target: T,
) -> Result<(FastWeights<T>, RescaledStep<T>)> {
    let loss_before = reconstruction_loss(batch, params, fw)?.sqrt();
    let mut proposal = compute_update(batch, params, fw, spec)?;
    let natural = update_norm(&proposal.deltas);
    if natural > T::zero() && target > T::zero() {
        scale_update(&mut proposal.deltas, target / natural);
    } else {
        scale_update(&mut proposal.deltas, T::zero());
    }
    let next = apply_update(fw, &proposal)?;
    let loss_after = reconstruction_loss(batch, params, &next)?.sqrt();

    let before = raw_output(batch, params, fw)?;
    let after = raw_output(batch, params, &next)?;
    let mut diff = after;
    diff.add_scaled(&before, -T::one())?;
    let denom = before.frobenius_norm();
    let relative_output_change = if denom == T::zero() {
        T::zero()
    } else {
        diff.frobenius_norm() / denom
    };

    Ok((
        next,
        RescaledStep {
            loss_before,
            loss_after,
            relative_output_change,
            update_norm: update_norm(&proposal.deltas),
            cg_iterations: proposal.cg_iterations,
        },
    ))
}

/// A fresh layer + weights + batch for sweep instance `i`, drawn from a
/// per-instance seed so instances are independent but reproducible.
pub fn sweep_instance<T: Real>(
    cfg: &RunConfig,
    instance: u64,
) -> Result<(TttLayerParams<T>, FastWeights<T>, TokenBatch<T>)> {
    let mut r = seeded_rng(cfg.seed.wrapping_add(instance));
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
    let tokens = normal_matrix(&mut r, cfg.batch_size, cfg.dim, cfg.token_std());
    Ok((params, fw, TokenBatch::visual(tokens, 0)))
}

/// One sweep measurement: loss after rescaling `optimizer`'s natural
/// update on instance `instance` to joint norm `norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub instance: u64,
    pub optimizer: String,
    pub norm: f64,
    pub loss: f64,
}

/// Sweeps every optimizer's rescaled-update loss over the norm grid on
/// `instances` independent mini-batches.
pub fn sweep_update_norm<T: Real>(
    cfg: &RunConfig,
    instances: u64,
    norms: &[f64],
    optimizers: &[OptimizerChoice],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for instance in 0..instances {
        let (params, fw, batch) = sweep_instance::<T>(cfg, instance)?;
        for choice in optimizers {
            let spec = choice.spec::<T>(cfg);
            for &norm in norms {
                let (_, step) = step_at_norm(&batch, &params, &fw, &spec, T::of(norm))?;
                rows.push(SweepRow {
                    instance,
                    optimizer: choice.label.clone(),
                    norm,
                    loss: step.loss_after.to_f64(),
                });
            }
        }
    }
    Ok(rows)
}

/// Per-step matched-norm statistics for one optimizer trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub step: u64,
    pub optimizer: String,
    pub loss_before: f64,
    pub relative_output_change: f64,
    pub update_norm: f64,
}

/// Runs each optimizer over the same batch sequence from the same
/// initial weights, rescaling every step to `matched_norm`, and records
/// the per-step series.
pub fn ttt_statistics<T: Real>(
    cfg: &RunConfig,
    batches: &[Matrix<T>],
    optimizers: &[OptimizerChoice],
    matched_norm: f64,
) -> Result<Vec<StatRow>> {
    cfg.validate()?;
    if !(matched_norm.is_finite() && matched_norm > 0.0) {
        bail!("matched norm must be positive and finite");
    }
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

    let mut rows = Vec::new();
    for choice in optimizers {
        let spec = choice.spec::<T>(cfg);
        let mut fw = fw0.clone();
        for (step, tokens) in batches.iter().enumerate() {
            let batch = TokenBatch::visual(tokens.clone(), 0);
            let (next, info) = step_at_norm(&batch, &params, &fw, &spec, T::of(matched_norm))?;
            fw = next;
            rows.push(StatRow {
                step: step as u64,
                optimizer: choice.label.clone(),
                loss_before: info.loss_before.to_f64(),
                relative_output_change: info.relative_output_change.to_f64(),
                update_norm: info.update_norm.to_f64(),
            });
        }
    }
    Ok(rows)
}

/// Splits a stream's visual rows into trainer batches: full
/// `batch_size`-row batches plus a final partial one if rows remain.
pub fn stream_batches<T: Real>(visual: &Matrix<T>, batch_size: usize) -> Vec<Matrix<T>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < visual.rows() {
        let len = batch_size.min(visual.rows() - start);
        out.push(visual.row_block(start, len).expect("in-range block"));
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::desk();
        c.dim = 16;
        c.batch_size = 8;
        c.ttt.hidden = 12;
        c
    }

    #[test]
    fn optimizer_lists_parse_with_cg_overrides() {
        let parsed = parse_optimizers("sgd, muon,hf2,hf3,hf").unwrap();
        assert_eq!(parsed.len(), 5);
        assert_eq!(parsed[2].label, "hf2");
        assert_eq!(parsed[2].cg_iters, Some(2));
        assert_eq!(parsed[4].cg_iters, None);
        let spec = parsed[2].spec::<f64>(&cfg());
        assert_eq!(spec.cg_iters, 2);
        assert!(parse_optimizers("adam").is_err());
        assert!(parse_optimizers("sgd,sgd").is_err());
        assert!(parse_optimizers("hf0").is_err());
        assert!(parse_optimizers("").is_err());
    }

    #[test]
    fn norm_grids_must_ascend() {
        assert_eq!(parse_norm_grid("0,0.1,1").unwrap(), vec![0.0, 0.1, 1.0]);
        assert!(parse_norm_grid("0.1,0.1").is_err());
        assert!(parse_norm_grid("1,0.5").is_err());
        assert!(parse_norm_grid("-1,0").is_err());
        assert!(parse_norm_grid("x").is_err());
    }

    #[test]
    fn zero_norm_step_reports_loss_before() {
        let c = cfg();
        let (params, fw, batch) = sweep_instance::<f64>(&c, 0).unwrap();
        let spec = c.optimizer_spec::<f64>();
        let (next, step) = step_at_norm(&batch, &params, &fw, &spec, 0.0).unwrap();
        assert_eq!(step.loss_after, step.loss_before);
        assert_eq!(step.update_norm, 0.0);
        assert_eq!(step.relative_output_change, 0.0);
        assert_eq!(next.heads, fw.heads);
    }

    #[test]
    fn rescaled_step_hits_the_target_norm() {
        let c = cfg();
        let (params, fw, batch) = sweep_instance::<f64>(&c, 1).unwrap();
        for list in ["sgd", "muon", "hf3"] {
            let choice = &parse_optimizers(list).unwrap()[0];
            let spec = choice.spec::<f64>(&c);
            let (_, step) = step_at_norm(&batch, &params, &fw, &spec, 0.05).unwrap();
            assert!(
                (step.update_norm - 0.05).abs() < 1e-12,
                "{list}: {}",
                step.update_norm
            );
            assert!(step.relative_output_change > 0.0);
        }
    }

    #[test]
    fn sweep_covers_the_full_grid_deterministically() {
        let c = cfg();
        let optimizers = parse_optimizers("sgd,hf2").unwrap();
        let norms = [0.0, 0.01, 0.1];
        let a = sweep_update_norm::<f64>(&c, 3, &norms, &optimizers).unwrap();
        let b = sweep_update_norm::<f64>(&c, 3, &norms, &optimizers).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 2 * 3);
        for row in &a {
            assert!(row.loss.is_finite() && row.loss >= 0.0);
        }
        // A zero-norm entry applies no update, so every optimizer reports
        // the same (pre-update) loss there.
        for instance in 0..3 {
            let zero: Vec<f64> = a
                .iter()
                .filter(|r| r.instance == instance && r.norm == 0.0)
                .map(|r| r.loss)
                .collect();
            assert_eq!(zero.len(), 2);
            assert_eq!(zero[0], zero[1]);
        }
    }

    #[test]
    fn statistics_series_length_matches_steps_times_optimizers() {
        let c = cfg();
        let mut r = seeded_rng(99);
        let batches: Vec<Matrix<f64>> = (0..7)
            .map(|_| normal_matrix(&mut r, c.batch_size, c.dim, c.token_std()))
            .collect();
        let optimizers = parse_optimizers("sgd,muon,hf3").unwrap();
        let rows = ttt_statistics(&c, &batches, &optimizers, 0.05).unwrap();
        assert_eq!(rows.len(), 7 * 3);
        for row in &rows {
            assert!((row.update_norm - 0.05).abs() < 1e-12);
            assert!(row.loss_before > 0.0);
        }
        assert!(ttt_statistics(&c, &batches, &optimizers, 0.0).is_err());
    }

    #[test]
    fn tiny_matched_norm_injects_vanishing_output_change() {
        let c = cfg();
        let (params, fw, batch) = sweep_instance::<f64>(&c, 2).unwrap();
        let spec = c.optimizer_spec::<f64>();
        let (_, big) = step_at_norm(&batch, &params, &fw, &spec, 1e-2).unwrap();
        let (_, small) = step_at_norm(&batch, &params, &fw, &spec, 1e-6).unwrap();
        assert!(small.relative_output_change < big.relative_output_change);
        assert!(small.relative_output_change < 1e-4);
    }

    #[test]
    fn stream_batches_cover_rows_in_order() {
        let m = Matrix::from_vec(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let b = stream_batches(&m, 2);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].rows(), 2);
        assert_eq!(b[2].rows(), 1);
        assert_eq!(b[2].row(0), &[8.0, 9.0]);
    }
}
