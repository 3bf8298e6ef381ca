//! The fast-weight layer: a per-head reconstruction MLP whose parameters
//! are updated on every incoming mini-batch and immediately used to
//! transform that same batch.
//!
//! For a batch `X` (one token per row) the layer projects queries, keys
//! and values with slow matrices `θ_Q, θ_K, θ_V`, splits each projection
//! into `heads` contiguous blocks, and per head minimizes the weighted
//! reconstruction loss
//!
//! ```text
//! L_h(W) = Σ_i η_i · ‖f(k_i; W) − v_i‖²,   η_i = base_lr·σ(x_iᵀ·lr_w + lr_b)
//! ```
//!
//! by one step of the configured rule ([`OptimizerSpec`]). The output is
//! computed *after* the update — `z_i = concat_h f(q_i^h; W_h⁺)` — and
//! blended with the input through a scalar gate
//! `α_i = σ(x_iᵀ·gate_w + gate_b)`:
//!
//! ```text
//! out_i = α_i·z_i + (1 − α_i)·x_i
//! ```
//!
//! Everything slow (θ's, layer norm, gate, rates) lives in
//! [`TttLayerParams`] and is frozen; only [`FastWeights`] move.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, CoreResult};
use crate::matrix::{dot, norm2, Matrix};
use crate::mlp::{
    mlp_forward, mlp_loss_grad, Activation, LayerNormParams, MlpParams,
};
use crate::optim::{
    hf_update, muon_update, sgd_update, update_norm, OptimizerKind, OptimizerSpec,
};
use crate::real::{sigmoid, Real};
use crate::rng;

/// Origin of a token row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
}

/// A contiguous run of same-modality tokens, one per row. `first_index`
/// is the stream position of row 0; row `i` sits at `first_index + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    pub tokens: Matrix<T>,
    pub modality: Modality,
    pub first_index: u64,
}

impl<T: Real> TokenBatch<T> {
    pub fn visual(tokens: Matrix<T>, first_index: u64) -> Self {
        TokenBatch {
            tokens,
            modality: Modality::Visual,
            first_index,
        }
    }

    pub fn audio(tokens: Matrix<T>, first_index: u64) -> Self {
        TokenBatch {
            tokens,
            modality: Modality::Audio,
            first_index,
        }
    }
}

/// Slow (frozen) parameters of the fast-weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TttLayerParams<T> {
    pub theta_q: Matrix<T>,
    pub theta_k: Matrix<T>,
    pub theta_v: Matrix<T>,
    /// Per-head layer norm inside `f`, shared by all heads.
    pub ln: LayerNormParams<T>,
    pub gate_w: Vec<T>,
    pub gate_b: T,
    pub lr_w: Vec<T>,
    pub lr_b: T,
    /// Base step scale multiplying every token rate. The stream harness
    /// keeps this equal to `OptimizerSpec::eta`.
    pub base_lr: T,
    pub heads: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl<T: Real> TttLayerParams<T> {
    /// Random initialization: projections are identity plus scaled noise,
    /// gate and rate maps are near-zero so gating and rates start close
    /// to ½ of their range.
    pub fn init(
        r: &mut impl Rng,
        dim: usize,
        heads: usize,
        hidden: usize,
        theta_noise: f64,
        base_lr: T,
        activation: Activation,
    ) -> CoreResult<Self> {
        if heads == 0 || dim == 0 || hidden == 0 || dim % heads != 0 {
            return Err(CoreError::InvalidArgument {
                context: "TttLayerParams::init: dim must be a positive multiple of heads",
            });
        }
        let params = TttLayerParams {
            theta_q: rng::identity_plus_noise(r, dim, theta_noise),
            theta_k: rng::identity_plus_noise(r, dim, theta_noise),
            theta_v: rng::identity_plus_noise(r, dim, theta_noise),
            ln: LayerNormParams::unit(dim / heads),
            gate_w: rng::normal_vec(r, dim, 0.02),
            gate_b: T::zero(),
            lr_w: rng::normal_vec(r, dim, 0.02),
            lr_b: T::zero(),
            base_lr,
            heads,
            hidden,
            activation,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.theta_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> CoreResult<()> {
        let d = self.dim();
        if self.heads == 0 || d == 0 || d % self.heads != 0 {
            return Err(CoreError::InvalidArgument {
                context: "TttLayerParams: dim must be a positive multiple of heads",
            });
        }
        if self.hidden == 0 {
            return Err(CoreError::InvalidArgument {
                context: "TttLayerParams: hidden width must be positive",
            });
        }
        for (m, context) in [
            (&self.theta_q, "TttLayerParams: theta_q must be dim x dim"),
            (&self.theta_k, "TttLayerParams: theta_k must be dim x dim"),
            (&self.theta_v, "TttLayerParams: theta_v must be dim x dim"),
        ] {
            if m.rows() != d || m.cols() != d {
                return Err(CoreError::ShapeMismatch { context });
            }
        }
        if self.ln.gain.len() != self.head_dim() {
            return Err(CoreError::ShapeMismatch {
                context: "TttLayerParams: layer norm width must equal head dim",
            });
        }
        if self.gate_w.len() != d || self.lr_w.len() != d {
            return Err(CoreError::ShapeMismatch {
                context: "TttLayerParams: gate and rate maps must have length dim",
            });
        }
        if !self.base_lr.is_finite() || self.base_lr < T::zero() {
            return Err(CoreError::InvalidArgument {
                context: "TttLayerParams: base_lr must be finite and non-negative",
            });
        }
        Ok(())
    }
}

/// The trainable state: one reconstruction MLP per head plus the number
/// of completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FastWeights<T> {
    pub heads: Vec<MlpParams<T>>,
    pub step: u64,
}

impl<T: Real> FastWeights<T> {
    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(|h| h.is_finite())
    }

    pub fn frobenius_norm(&self) -> T {
        update_norm(&self.heads)
    }
}

/// Samples initial fast weights: weight matrices i.i.d. normal with
/// standard deviation `0.02 / √hidden`, biases zero, heads drawn
/// sequentially from one stream.
///
/// Zero biases keep the initial inner-MLP output far below the layer
/// norm's variance floor, so the normalized branch starts near zero and
/// an untrained layer approximately reconstructs its input. A bias-sized
/// output would instead sit right at the floor, where normalization both
/// inflates it to full magnitude and has an extremely steep Jacobian.
pub fn init_fast_weights<T: Real>(
    r: &mut impl Rng,
    params: &TttLayerParams<T>,
) -> FastWeights<T> {
    let (dh, hidden) = (params.head_dim(), params.hidden);
    let std = 0.02 / libm::sqrt(hidden as f64);
    let heads = (0..params.heads)
        .map(|_| MlpParams {
            w1: rng::normal_matrix(r, dh, hidden, std),
            b1: vec![T::zero(); hidden],
            w2: rng::normal_matrix(r, hidden, dh, std),
            b2: vec![T::zero(); dh],
        })
        .collect();
    FastWeights { heads, step: 0 }
}

/// Per-token step sizes `η_i = base_lr · σ(x_iᵀ·lr_w + lr_b)`.
pub fn token_learning_rates<T: Real>(
    tokens: &Matrix<T>,
    params: &TttLayerParams<T>,
) -> CoreResult<Vec<T>> {
    if tokens.cols() != params.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "token_learning_rates: token width != layer dim",
        });
    }
    Ok(tokens
        .row_iter()
        .map(|x| params.base_lr * sigmoid(dot(x, &params.lr_w) + params.lr_b))
        .collect())
}

fn require_visual<T>(batch: &TokenBatch<T>) -> CoreResult<()> {
    match batch.modality {
        Modality::Visual => Ok(()),
        Modality::Audio => Err(CoreError::ContractViolation {
            context: "fast-weight layer: audio tokens bypass the trainer",
        }),
    }
}

fn check_batch<T: Real>(batch: &TokenBatch<T>, params: &TttLayerParams<T>) -> CoreResult<()> {
    require_visual(batch)?;
    params.validate()?;
    if batch.tokens.cols() != params.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "fast-weight layer: token width != layer dim",
        });
    }
    if batch.tokens.rows() == 0 {
        return Err(CoreError::InvalidArgument {
            context: "fast-weight layer: empty batch",
        });
    }
    if !batch.tokens.is_finite() {
        return Err(CoreError::NonFinite {
            context: "fast-weight layer: batch has non-finite tokens",
        });
    }
    Ok(())
}

fn check_weights<T: Real>(fw: &FastWeights<T>, params: &TttLayerParams<T>) -> CoreResult<()> {
    if fw.heads.len() != params.heads {
        return Err(CoreError::ShapeMismatch {
            context: "fast-weight layer: head count mismatch",
        });
    }
    for h in &fw.heads {
        if h.dim() != params.head_dim() || h.hidden() != params.hidden {
            return Err(CoreError::ShapeMismatch {
                context: "fast-weight layer: per-head weight shape mismatch",
            });
        }
    }
    Ok(())
}

/// Projects every row of `tokens` with `theta` (`row → θ·row`).
fn project<T: Real>(theta: &Matrix<T>, tokens: &Matrix<T>) -> CoreResult<Matrix<T>> {
    let mut out = Matrix::zeros(tokens.rows(), theta.rows());
    for (i, x) in tokens.row_iter().enumerate() {
        let p = theta.mul_vec(x)?;
        out.row_mut(i).copy_from_slice(&p);
    }
    Ok(out)
}

/// Weighted reconstruction loss summed over heads and tokens, evaluated
/// at the given fast weights (the quantity the update minimizes).
pub fn reconstruction_loss<T: Real>(
    batch: &TokenBatch<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
) -> CoreResult<T> {
    check_batch(batch, params)?;
    check_weights(fw, params)?;
    let eta = token_learning_rates(&batch.tokens, params)?;
    let keys = project(&params.theta_k, &batch.tokens)?;
    let values = project(&params.theta_v, &batch.tokens)?;
    let dh = params.head_dim();
    let mut total = T::zero();
    for (h, w) in fw.heads.iter().enumerate() {
        let kh = keys.column_block(h * dh, dh)?;
        let vh = values.column_block(h * dh, dh)?;
        let (loss, _) = mlp_loss_grad(&kh, &vh, &eta, w, &params.ln, params.activation)?;
        total = total + loss;
    }
    Ok(total)
}

/// Per-row relative reconstruction error of the key→value map,
/// `‖f(θ_K x; W) − θ_V x‖ / ‖θ_V x‖` (heads concatenated, unweighted).
/// This is the retention probe: a row the weights were recently trained
/// on should score lower than under untrained weights. A zero-norm
/// target falls back to the absolute error.
pub fn probe_errors<T: Real>(
    tokens: &Matrix<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
) -> CoreResult<Vec<T>> {
    let batch = TokenBatch::visual(tokens.clone(), 0);
    check_batch(&batch, params)?;
    check_weights(fw, params)?;
    let keys = project(&params.theta_k, tokens)?;
    let values = project(&params.theta_v, tokens)?;
    let dh = params.head_dim();
    let mut errors = Vec::with_capacity(tokens.rows());
    for i in 0..tokens.rows() {
        let k = keys.row(i);
        let v = values.row(i);
        let mut num = T::zero();
        for (h, w) in fw.heads.iter().enumerate() {
            let z = mlp_forward(&k[h * dh..(h + 1) * dh], w, &params.ln, params.activation)?;
            for (zj, &vj) in z.iter().zip(&v[h * dh..(h + 1) * dh]) {
                let d = *zj - vj;
                num = num + d * d;
            }
        }
        let num = num.sqrt();
        let den = norm2(v);
        errors.push(if den == T::zero() { num } else { num / den });
    }
    Ok(errors)
}

/// Concatenated per-head reconstructions of the query projections —
/// the layer output before gating.
pub fn raw_output<T: Real>(
    batch: &TokenBatch<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
) -> CoreResult<Matrix<T>> {
    check_batch(batch, params)?;
    check_weights(fw, params)?;
    let queries = project(&params.theta_q, &batch.tokens)?;
    let dh = params.head_dim();
    let mut out = Matrix::zeros(batch.tokens.rows(), params.dim());
    for i in 0..queries.rows() {
        let q = queries.row(i);
        for (h, w) in fw.heads.iter().enumerate() {
            let z = mlp_forward(&q[h * dh..(h + 1) * dh], w, &params.ln, params.activation)?;
            out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&z);
        }
    }
    Ok(out)
}

/// Gated layer output `α·z + (1−α)·x` at the given fast weights.
pub fn ttt_output<T: Real>(
    batch: &TokenBatch<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
) -> CoreResult<Matrix<T>> {
    let raw = raw_output(batch, params, fw)?;
    let mut out = raw;
    for (i, x) in batch.tokens.row_iter().enumerate() {
        let alpha = sigmoid(dot(x, &params.gate_w) + params.gate_b);
        let row = out.row_mut(i);
        for (o, &xi) in row.iter_mut().zip(x) {
            *o = alpha * *o + (T::one() - alpha) * xi;
        }
    }
    Ok(out)
}

/// One proposed weight change per head plus the solver iteration count
/// (maximum over heads; zero for the first-order rules).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateProposal<T> {
    pub deltas: Vec<MlpParams<T>>,
    pub cg_iterations: usize,
}

/// Computes the per-head weight change for one batch under the given
/// rule, without applying it. Heads are independent: each sees only its
/// own key/value block (token rates are shared).
pub fn compute_update<T: Real>(
    batch: &TokenBatch<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
    spec: &OptimizerSpec<T>,
) -> CoreResult<UpdateProposal<T>> {
    check_batch(batch, params)?;
    check_weights(fw, params)?;
    spec.validate()?;
    let eta = token_learning_rates(&batch.tokens, params)?;
    let keys = project(&params.theta_k, &batch.tokens)?;
    let values = project(&params.theta_v, &batch.tokens)?;
    let dh = params.head_dim();
    let mut deltas = Vec::with_capacity(fw.heads.len());
    let mut cg_iterations = 0;
    for (h, w) in fw.heads.iter().enumerate() {
        let kh = keys.column_block(h * dh, dh)?;
        let vh = values.column_block(h * dh, dh)?;
        let delta = match spec.kind {
            OptimizerKind::Sgd => {
                let (_, grad) =
                    mlp_loss_grad(&kh, &vh, &eta, w, &params.ln, params.activation)?;
                sgd_update(&grad)
            }
            OptimizerKind::Muon => {
                let (_, grad) =
                    mlp_loss_grad(&kh, &vh, &eta, w, &params.ln, params.activation)?;
                muon_update(&grad, spec.eta, spec.ns_iters)?
            }
            OptimizerKind::Hf => {
                let (delta, trace) =
                    hf_update(&kh, &vh, &eta, w, &params.ln, params.activation, spec)?;
                cg_iterations = cg_iterations.max(trace.iterations);
                delta
            }
        };
        deltas.push(delta);
    }
    Ok(UpdateProposal {
        deltas,
        cg_iterations,
    })
}

/// Returns a copy of `fw` with the proposal added and the step counter
/// advanced.
pub fn apply_update<T: Real>(
    fw: &FastWeights<T>,
    proposal: &UpdateProposal<T>,
) -> CoreResult<FastWeights<T>> {
    if proposal.deltas.len() != fw.heads.len() {
        return Err(CoreError::ShapeMismatch {
            context: "apply_update: head count mismatch",
        });
    }
    let mut next = fw.clone();
    for (w, d) in next.heads.iter_mut().zip(&proposal.deltas) {
        w.add_scaled(d, T::one())?;
    }
    if !next.is_finite() {
        return Err(CoreError::NonFinite {
            context: "apply_update: updated weights are not finite",
        });
    }
    next.step = fw.step + 1;
    Ok(next)
}

/// Per-step diagnostics. Losses are reported as the square root of the
/// optimized weighted objective; `relative_output_change` compares the
/// pre-gate outputs before and after the update on the same batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo<T> {
    pub loss_before: T,
    pub loss_after: T,
    pub update_norm: T,
    pub relative_output_change: T,
    pub cg_iterations: usize,
}

/// One full layer step: update the fast weights on the batch, then emit
/// the gated output computed with the *updated* weights. The input state
/// is untouched; the successor state is returned alongside.
pub fn ttt_step<T: Real>(
    batch: &TokenBatch<T>,
    params: &TttLayerParams<T>,
    fw: &FastWeights<T>,
    spec: &OptimizerSpec<T>,
) -> CoreResult<(Matrix<T>, FastWeights<T>, StepInfo<T>)> {
    let loss_before = reconstruction_loss(batch, params, fw)?;
    let proposal = compute_update(batch, params, fw, spec)?;
    let next = apply_update(fw, &proposal)?;
    let loss_after = reconstruction_loss(batch, params, &next)?;

    let before = raw_output(batch, params, fw)?;
    let after = raw_output(batch, params, &next)?;
    let mut diff = after.clone();
    diff.add_scaled(&before, -T::one())?;
    let denom = before.frobenius_norm();
    let relative_output_change = if denom == T::zero() {
        T::zero()
    } else {
        diff.frobenius_norm() / denom
    };

    let out = ttt_output(batch, params, &next)?;
    let info = StepInfo {
        loss_before: loss_before.sqrt(),
        loss_after: loss_after.sqrt(),
        update_norm: update_norm(&proposal.deltas),
        relative_output_change,
        cg_iterations: proposal.cg_iterations,
    };
    Ok((out, next, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::JacobianMode;
    use crate::rng::seeded_rng;
    use alloc::vec;

    fn small_params(seed: u64) -> TttLayerParams<f64> {
        let mut r = seeded_rng(seed);
        TttLayerParams::init(&mut r, 8, 2, 6, 0.05, 0.02, Activation::Gelu).unwrap()
    }

    fn small_batch(seed: u64, rows: usize, dim: usize) -> TokenBatch<f64> {
        let mut r = seeded_rng(seed);
        TokenBatch::visual(crate::rng::normal_matrix(&mut r, rows, dim, 1.0), 0)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let p1 = small_params(11);
        let p2 = small_params(11);
        assert_eq!(p1, p2);
        let mut r1 = seeded_rng(12);
        let mut r2 = seeded_rng(12);
        let f1 = init_fast_weights(&mut r1, &p1);
        let f2 = init_fast_weights(&mut r2, &p1);
        assert_eq!(f1, f2);
        let mut r3 = seeded_rng(13);
        let f3 = init_fast_weights(&mut r3, &p1);
        assert_ne!(f1, f3);
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut r = seeded_rng(1);
        assert!(TttLayerParams::<f64>::init(&mut r, 7, 2, 4, 0.05, 0.01, Activation::Gelu)
            .is_err());
        assert!(TttLayerParams::<f64>::init(&mut r, 8, 0, 4, 0.05, 0.01, Activation::Gelu)
            .is_err());
    }

    #[test]
    fn token_rates_at_zero_map_are_half_base() {
        let mut params = small_params(17);
        params.lr_w = vec![0.0; 8];
        params.lr_b = 0.0;
        let batch = small_batch(18, 4, 8);
        let eta = token_learning_rates(&batch.tokens, &params).unwrap();
        for e in eta {
            assert!((e - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn audio_batches_are_rejected() {
        let params = small_params(19);
        let mut r = seeded_rng(20);
        let fw = init_fast_weights(&mut r, &params);
        let batch = TokenBatch::audio(crate::rng::normal_matrix(&mut r, 3, 8, 1.0), 0);
        let spec = OptimizerSpec::sgd(0.02);
        assert!(matches!(
            reconstruction_loss(&batch, &params, &fw),
            Err(CoreError::ContractViolation { .. })
        ));
        assert!(compute_update(&batch, &params, &fw, &spec).is_err());
        assert!(ttt_step(&batch, &params, &fw, &spec).is_err());
    }

    /// With θ_K = θ_V and zero fast weights, f(k) = k (the zero MLP output
    /// normalizes to the zero vector, and gain/bias leave it at zero), so
    /// the reconstruction is exact and every rule proposes a zero update.
    #[test]
    fn exact_reconstruction_stays_put() {
        let mut params = small_params(23);
        params.theta_v = params.theta_k.clone();
        let fw = FastWeights {
            heads: vec![MlpParams::zeros(4, 6), MlpParams::zeros(4, 6)],
            step: 0,
        };
        let batch = small_batch(24, 5, 8);
        let loss = reconstruction_loss(&batch, &params, &fw).unwrap();
        assert_eq!(loss, 0.0);
        for spec in [
            OptimizerSpec::sgd(0.02),
            OptimizerSpec::muon(0.02),
            OptimizerSpec::hf(0.02, 3, JacobianMode::Mlp, 1e-4),
        ] {
            let (out, next, info) = ttt_step(&batch, &params, &fw, &spec).unwrap();
            assert_eq!(info.loss_before, 0.0);
            assert_eq!(info.loss_after, 0.0);
            assert_eq!(info.update_norm, 0.0);
            assert_eq!(info.relative_output_change, 0.0);
            assert_eq!(next.heads, fw.heads);
            assert_eq!(next.step, 1);
            assert!(out.is_finite());
        }
    }

    /// With θ_K = θ_V and zero fast weights the key→value map is exact,
    /// so every probe error is zero; with distinct projections it is
    /// positive, and training on the probe rows lowers it.
    #[test]
    fn probe_errors_track_training() {
        let mut exact = small_params(27);
        exact.theta_v = exact.theta_k.clone();
        let zero_fw = FastWeights {
            heads: vec![MlpParams::zeros(4, 6), MlpParams::zeros(4, 6)],
            step: 0,
        };
        let rows = small_batch(28, 5, 8).tokens;
        for e in probe_errors(&rows, &exact, &zero_fw).unwrap() {
            assert_eq!(e, 0.0);
        }

        let params = small_params(29);
        let mut r = seeded_rng(30);
        let mut fw = init_fast_weights(&mut r, &params);
        let before = probe_errors(&rows, &params, &fw).unwrap();
        assert_eq!(before.len(), 5);
        assert!(before.iter().all(|&e| e > 0.0));
        // Norm-aware curvature: near the identity the normalization
        // branch dominates the loss geometry, and the inner-MLP-only
        // curvature proxy under-measures it so badly that its steps
        // overshoot. The full-branch mode is the one that trains here.
        let spec = OptimizerSpec::hf(0.05, 3, JacobianMode::Ln, 1e-4);
        let batch = TokenBatch::visual(rows.clone(), 0);
        for _ in 0..20 {
            let (_, next, _) = ttt_step(&batch, &params, &fw, &spec).unwrap();
            fw = next;
        }
        let after = probe_errors(&rows, &params, &fw).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&after) < mean(&before));
    }

    /// Every rule produces a descent *direction*: rescaled to one common
    /// small step norm, each update strictly lowers the loss. The raw
    /// norms differ wildly between rules — a curvature-based solve sets
    /// its own scale — so the guaranteed property is directional.
    #[test]
    fn every_rule_descends_at_matched_update_norm() {
        // Must sit below the stability scale of the stiffest channel: the
        // normalization branch amplifies shared-bias motion by 1/√ε, so
        // descent along any direction is only guaranteed for norms well
        // under ‖∇L‖/λ_max ~ 1e-4 here.
        let step = 1e-6;
        for seed in [31u64, 32, 33] {
            let params = small_params(seed);
            let mut r = seeded_rng(seed + 100);
            let fw = init_fast_weights(&mut r, &params);
            let batch = small_batch(seed + 200, 6, 8);
            let loss_before = reconstruction_loss(&batch, &params, &fw).unwrap();
            for spec in [
                OptimizerSpec::sgd(0.02),
                OptimizerSpec::muon(0.02),
                OptimizerSpec::hf(0.02, 3, JacobianMode::Mlp, 1e-4),
            ] {
                let mut prop = compute_update(&batch, &params, &fw, &spec).unwrap();
                let n = update_norm(&prop.deltas);
                assert!(n > 0.0, "seed {seed} {:?}: zero update", spec.kind);
                crate::optim::scale_update(&mut prop.deltas, step / n);
                let next = apply_update(&fw, &prop).unwrap();
                let loss_after = reconstruction_loss(&batch, &params, &next).unwrap();
                assert!(
                    loss_after < loss_before,
                    "seed {seed} {:?}: {loss_before} -> {loss_after}",
                    spec.kind
                );
            }
        }
    }

    #[test]
    fn step_info_fields_are_consistent() {
        let params = small_params(31);
        let mut r = seeded_rng(131);
        let fw = init_fast_weights(&mut r, &params);
        let batch = small_batch(231, 6, 8);
        let squared = reconstruction_loss(&batch, &params, &fw).unwrap();
        for spec in [
            OptimizerSpec::sgd(0.02),
            OptimizerSpec::muon(0.005),
            OptimizerSpec::hf(0.02, 3, JacobianMode::Mlp, 1e-4),
        ] {
            let (_, next, info) = ttt_step(&batch, &params, &fw, &spec).unwrap();
            assert_eq!(info.loss_before, squared.sqrt());
            assert_eq!(
                info.loss_after,
                reconstruction_loss(&batch, &params, &next).unwrap().sqrt()
            );
            assert!(info.update_norm > 0.0);
            assert!(info.relative_output_change > 0.0);
            if spec.kind == OptimizerKind::Hf {
                assert!(info.cg_iterations >= 1 && info.cg_iterations <= 3);
            } else {
                assert_eq!(info.cg_iterations, 0);
            }
        }
    }

    /// Raw (unrescaled) first-order steps descend when the per-token
    /// rates are gentle enough. The bound is set by the normalization
    /// branch near the identity: its 1/√ε amplification of the shared
    /// output bias makes the loss stiff, so plain gradient descent is
    /// stable only for base rates of roughly 1/(batch·ε⁻¹) and below.
    #[test]
    fn first_order_rules_descend_raw_at_gentle_rates() {
        let mut r = seeded_rng(41);
        let params: TttLayerParams<f64> =
            TttLayerParams::init(&mut r, 8, 2, 6, 0.05, 1e-8, Activation::Gelu).unwrap();
        let mut r = seeded_rng(141);
        let fw = init_fast_weights(&mut r, &params);
        let batch = small_batch(241, 6, 8);
        for spec in [OptimizerSpec::sgd(0.02), OptimizerSpec::muon(1e-10)] {
            let (_, _, info) = ttt_step(&batch, &params, &fw, &spec).unwrap();
            assert!(info.update_norm > 0.0);
            assert!(
                info.loss_after < info.loss_before,
                "{:?}: {} -> {}",
                spec.kind,
                info.loss_before,
                info.loss_after
            );
        }
    }

    /// Heads are independent: the update for head 0 equals the
    /// single-head update computed directly from its key/value block.
    #[test]
    fn per_head_updates_are_isolated() {
        let params = small_params(37);
        let mut r = seeded_rng(38);
        let fw = init_fast_weights(&mut r, &params);
        let batch = small_batch(39, 5, 8);
        let spec = OptimizerSpec::sgd(0.02);
        let proposal = compute_update(&batch, &params, &fw, &spec).unwrap();

        let eta = token_learning_rates(&batch.tokens, &params).unwrap();
        let keys = project(&params.theta_k, &batch.tokens).unwrap();
        let values = project(&params.theta_v, &batch.tokens).unwrap();
        for h in 0..2 {
            let kh = keys.column_block(h * 4, 4).unwrap();
            let vh = values.column_block(h * 4, 4).unwrap();
            let (_, grad) = mlp_loss_grad(
                &kh,
                &vh,
                &eta,
                &fw.heads[h],
                &params.ln,
                params.activation,
            )
            .unwrap();
            let want = sgd_update(&grad);
            assert_eq!(proposal.deltas[h], want);
        }
    }

    #[test]
    fn gate_extremes_select_input_or_reconstruction() {
        let mut params = small_params(41);
        let mut r = seeded_rng(42);
        let fw = init_fast_weights(&mut r, &params);
        let batch = small_batch(43, 4, 8);

        params.gate_w = vec![0.0; 8];
        params.gate_b = -40.0;
        let out = ttt_output(&batch, &params, &fw).unwrap();
        for (o, x) in out.as_slice().iter().zip(batch.tokens.as_slice()) {
            assert!((o - x).abs() < 1e-12);
        }

        params.gate_b = 40.0;
        let out = ttt_output(&batch, &params, &fw).unwrap();
        let raw = raw_output(&batch, &params, &fw).unwrap();
        for (o, z) in out.as_slice().iter().zip(raw.as_slice()) {
            assert!((o - z).abs() < 1e-12);
        }
    }

    #[test]
    fn step_output_uses_updated_weights() {
        let params = small_params(47);
        let mut r = seeded_rng(48);
        let fw = init_fast_weights(&mut r, &params);
        let batch = small_batch(49, 6, 8);
        let spec = OptimizerSpec::hf(0.02, 2, JacobianMode::Ln, 1e-4);
        let (out, next, _) = ttt_step(&batch, &params, &fw, &spec).unwrap();
        let replay = ttt_output(&batch, &params, &next).unwrap();
        assert_eq!(out, replay);
        assert_ne!(out, ttt_output(&batch, &params, &fw).unwrap());
        assert_eq!(next.step, fw.step + 1);
        // The input state is untouched (rollback stays possible).
        assert_eq!(fw.step, 0);
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let params = small_params(53);
        let mut r = seeded_rng(54);
        let fw = init_fast_weights(&mut r, &params);
        let batch = small_batch(55, 6, 8);
        let spec = OptimizerSpec::hf(0.02, 3, JacobianMode::Mlp, 1e-4);
        let (o1, n1, i1) = ttt_step(&batch, &params, &fw, &spec).unwrap();
        let (o2, n2, i2) = ttt_step(&batch, &params, &fw, &spec).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(n1, n2);
        assert_eq!(i1, i2);
    }
}
