//! Two-layer residual MLP with post-MLP layer normalization, and the exact
//! derivative machinery (gradient, parameter-space JVP/VJP) the fast-weight
//! optimizers are built from.
//!
//! The function computed per vector `x` is
//!
//! ```text
//! f(x; W) = x + LN(g(x; W)),      g(x; W) = w2ᵀ·act(w1ᵀ·x + b1) + b2
//! ```
//!
//! where `LN` is layer normalization with affine gain/bias (slow
//! parameters: they are never part of `W`). The fast weights are
//! `W = (w1, b1, w2, b2)`.
//!
//! Derivatives are derived once and used everywhere. With `a = w1ᵀx + b1`,
//! `h = act(a)`, `z = g(x; W)`, `μ = mean(z)`, `s = (var(z) + ε)^(-1/2)`,
//! `n = (z − μ)·s`:
//!
//! * LN input-cotangent for output-cotangent `u`:
//!   `dz = s·(u⊙γ − mean(u⊙γ) − n·mean(u⊙γ⊙n))`
//! * LN tangent for input-tangent `ż` (same symmetric form):
//!   `ṅ = s·(ż − mean(ż) − n·mean(n⊙ż))`, `ẏ = γ⊙ṅ`
//!
//! [`JacobianMode`] selects where parameter Jacobians are taken: at the raw
//! MLP output `z` or at the normalized output `LN(z)`. The residual branch
//! carries no parameters, so the `Ln` mode is also the exact Jacobian of
//! the full `f`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::matrix::{dot, Matrix};
use crate::real::Real;

/// Pointwise nonlinearity of the inner MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact Gaussian-CDF gated linear unit `x·Φ(x)` (erf form).
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn value<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => x * gauss_cdf(x),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gauss_cdf(x) + x * gauss_pdf(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Standard normal CDF via the exact error function.
fn gauss_cdf<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + Real::erf(x / T::of(core::f64::consts::SQRT_2)))
}

/// Standard normal density.
fn gauss_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::of(0.3989422804014327);
    inv_sqrt_2pi * (-(x * x) * T::of(0.5)).exp()
}

/// Affine layer-normalization parameters. These are slow parameters: the
/// fast-weight optimizers never touch them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
    pub epsilon: T,
}

impl<T: Real> LayerNormParams<T> {
    /// Unit gain, zero bias, ε = 1e-6.
    pub fn unit(dim: usize) -> Self {
        LayerNormParams {
            gain: vec![T::one(); dim],
            bias: vec![T::zero(); dim],
            epsilon: T::of(1e-6),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

/// Intermediates of one layer-norm evaluation, kept for derivative passes.
#[derive(Debug, Clone)]
struct LnCache<T> {
    /// `(z − μ)·s`
    normalized: Vec<T>,
    /// `s = (var + ε)^(-1/2)`
    inv_sigma: T,
}

fn ln_forward_cached<T: Real>(z: &[T], p: &LayerNormParams<T>) -> (Vec<T>, LnCache<T>) {
    let d = T::of(z.len() as f64);
    let mean = z.iter().copied().sum::<T>() / d;
    let var = z
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / d;
    let inv_sigma = T::one() / (var + p.epsilon).sqrt();
    let normalized: Vec<T> = z.iter().map(|&v| (v - mean) * inv_sigma).collect();
    let y = normalized
        .iter()
        .zip(p.gain.iter().zip(&p.bias))
        .map(|(&n, (&g, &b))| g * n + b)
        .collect();
    (y, LnCache { normalized, inv_sigma })
}

/// Cotangent of the LN input given the cotangent `u` of its output.
fn ln_backward<T: Real>(cache: &LnCache<T>, gain: &[T], u: &[T]) -> Vec<T> {
    let d = T::of(u.len() as f64);
    let n = &cache.normalized;
    let ug: Vec<T> = u.iter().zip(gain).map(|(&ui, &gi)| ui * gi).collect();
    let mean_ug = ug.iter().copied().sum::<T>() / d;
    let mean_ugn = ug.iter().zip(n).map(|(&a, &b)| a * b).sum::<T>() / d;
    ug.iter()
        .zip(n)
        .map(|(&ugi, &ni)| cache.inv_sigma * (ugi - mean_ug - ni * mean_ugn))
        .collect()
}

/// Tangent of the LN output (including gain) for an input tangent `zdot`.
fn ln_jvp<T: Real>(cache: &LnCache<T>, gain: &[T], zdot: &[T]) -> Vec<T> {
    let d = T::of(zdot.len() as f64);
    let n = &cache.normalized;
    let mean_zd = zdot.iter().copied().sum::<T>() / d;
    let mean_nzd = zdot.iter().zip(n).map(|(&a, &b)| a * b).sum::<T>() / d;
    zdot.iter()
        .zip(n.iter().zip(gain))
        .map(|(&zd, (&ni, &gi))| gi * cache.inv_sigma * (zd - mean_zd - ni * mean_nzd))
        .collect()
}

/// Layer normalization `γ·(z − μ)/√(var + ε) + β`.
pub fn layer_norm_forward<T: Real>(z: &[T], p: &LayerNormParams<T>) -> CoreResult<Vec<T>> {
    if z.len() != p.dim() || p.bias.len() != p.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "layer_norm_forward: input length != parameter dim",
        });
    }
    Ok(ln_forward_cached(z, p).0)
}

/// Fast weights of one head: a two-layer MLP mapping `d → hidden → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    /// `d × hidden`
    pub w1: Matrix<T>,
    /// `hidden`
    pub b1: Vec<T>,
    /// `hidden × d`
    pub w2: Matrix<T>,
    /// `d`
    pub b2: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    /// Zero-initialized parameters for input/output width `dim` and the
    /// given hidden width.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpParams {
            w1: Matrix::zeros(dim, hidden),
            b1: vec![T::zero(); hidden],
            w2: Matrix::zeros(hidden, dim),
            b2: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Validates the four blocks agree on `dim`/`hidden` and that the
    /// output width equals the input width.
    pub fn validate(&self) -> CoreResult<()> {
        let (d, h) = (self.dim(), self.hidden());
        let ok = self.b1.len() == h
            && self.w2.rows() == h
            && self.w2.cols() == d
            && self.b2.len() == d;
        if ok {
            Ok(())
        } else {
            Err(CoreError::ShapeMismatch {
                context: "MlpParams::validate: inconsistent block shapes",
            })
        }
    }

    pub fn param_count(&self) -> usize {
        self.dim() * self.hidden() * 2 + self.hidden() + self.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm over all four blocks jointly.
    pub fn frobenius_norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Inner product over all four blocks jointly.
    pub fn dot(&self, other: &MlpParams<T>) -> T {
        dot(self.w1.as_slice(), other.w1.as_slice())
            + dot(&self.b1, &other.b1)
            + dot(self.w2.as_slice(), other.w2.as_slice())
            + dot(&self.b2, &other.b2)
    }

    pub fn scale_in_place(&mut self, c: T) {
        self.w1.scale_in_place(c);
        self.w2.scale_in_place(c);
        for v in &mut self.b1 {
            *v = *v * c;
        }
        for v in &mut self.b2 {
            *v = *v * c;
        }
    }

    /// `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &MlpParams<T>, c: T) -> CoreResult<()> {
        self.w1.add_scaled(&other.w1, c)?;
        self.w2.add_scaled(&other.w2, c)?;
        if self.b1.len() != other.b1.len() || self.b2.len() != other.b2.len() {
            return Err(CoreError::ShapeMismatch {
                context: "MlpParams::add_scaled: bias lengths differ",
            });
        }
        for (a, &b) in self.b1.iter_mut().zip(&other.b1) {
            *a = *a + c * b;
        }
        for (a, &b) in self.b2.iter_mut().zip(&other.b2) {
            *a = *a + c * b;
        }
        Ok(())
    }

    /// Serializes to one flat vector: `w1` row-major, `b1`, `w2` row-major,
    /// `b2`. The layout is the vector-space coordinate system the CG solver
    /// works in.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    /// Inverse of [`MlpParams::flatten`] for the given widths.
    pub fn from_flat(dim: usize, hidden: usize, flat: &[T]) -> CoreResult<Self> {
        let expected = dim * hidden * 2 + hidden + dim;
        if flat.len() != expected {
            return Err(CoreError::ShapeMismatch {
                context: "MlpParams::from_flat: flat length mismatch",
            });
        }
        let mut at = 0;
        let w1 = Matrix::from_vec(dim, hidden, flat[at..at + dim * hidden].to_vec())?;
        at += dim * hidden;
        let b1 = flat[at..at + hidden].to_vec();
        at += hidden;
        let w2 = Matrix::from_vec(hidden, dim, flat[at..at + hidden * dim].to_vec())?;
        at += hidden * dim;
        let b2 = flat[at..].to_vec();
        Ok(MlpParams { w1, b1, w2, b2 })
    }
}

/// Where parameter Jacobians are taken: at the raw MLP output `z` or at the
/// normalized output `LN(z)`. The second includes the layer-norm Jacobian
/// and is therefore the exact Jacobian of the full residual function `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Mlp,
    Ln,
}

/// Intermediates of one forward evaluation, reused by derivative passes.
struct ForwardCache<T> {
    /// pre-activation `w1ᵀx + b1`
    a: Vec<T>,
    /// `act(a)`
    h: Vec<T>,
    ln: LnCache<T>,
}

fn forward_cached<T: Real>(
    x: &[T],
    w: &MlpParams<T>,
    ln: &LayerNormParams<T>,
    act: Activation,
) -> CoreResult<(Vec<T>, ForwardCache<T>)> {
    if x.len() != w.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "mlp forward: input length != dim",
        });
    }
    if ln.dim() != w.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "mlp forward: layer-norm dim != dim",
        });
    }
    w.validate()?;
    let mut a = w.w1.tr_mul_vec(x)?;
    for (ai, &bi) in a.iter_mut().zip(&w.b1) {
        *ai = *ai + bi;
    }
    let h: Vec<T> = a.iter().map(|&v| act.value(v)).collect();
    let mut z = w.w2.tr_mul_vec(&h)?;
    for (zi, &bi) in z.iter_mut().zip(&w.b2) {
        *zi = *zi + bi;
    }
    let (y, ln_cache) = ln_forward_cached(&z, ln);
    let f: Vec<T> = x.iter().zip(&y).map(|(&xi, &yi)| xi + yi).collect();
    Ok((f, ForwardCache { a, h, ln: ln_cache }))
}

/// Full residual forward pass `f(x; W) = x + LN(g(x; W))`.
pub fn mlp_forward<T: Real>(
    x: &[T],
    w: &MlpParams<T>,
    ln: &LayerNormParams<T>,
    act: Activation,
) -> CoreResult<Vec<T>> {
    forward_cached(x, w, ln, act).map(|(f, _)| f)
}

/// Weighted squared reconstruction loss and its exact parameter gradient:
///
/// ```text
/// L(W) = Σ_i η_i · ‖f(k_i; W) − v_i‖²
/// ```
///
/// Rows of `keys`/`targets` pair up; `eta` holds one non-negative weight
/// per row. Returns `(L, ∇_W L)`.
pub fn mlp_loss_grad<T: Real>(
    keys: &Matrix<T>,
    targets: &Matrix<T>,
    eta: &[T],
    w: &MlpParams<T>,
    ln: &LayerNormParams<T>,
    act: Activation,
) -> CoreResult<(T, MlpParams<T>)> {
    if keys.rows() != targets.rows()
        || keys.cols() != targets.cols()
        || eta.len() != keys.rows()
    {
        return Err(CoreError::ShapeMismatch {
            context: "mlp_loss_grad: keys/targets/eta row counts disagree",
        });
    }
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = MlpParams::zeros(w.dim(), w.hidden());
    for (i, (k, v)) in keys.row_iter().zip(targets.row_iter()).enumerate() {
        let (f, cache) = forward_cached(k, w, ln, act)?;
        let r: Vec<T> = f.iter().zip(v).map(|(&fi, &vi)| fi - vi).collect();
        loss = loss + eta[i] * dot(&r, &r);
        // dL_i/df = 2·η_i·r; the residual branch has no parameters, so the
        // cotangent enters through LN only.
        let u: Vec<T> = r.iter().map(|&ri| two * eta[i] * ri).collect();
        accumulate_vjp(k, w, act, &cache, ln, &u, JacobianMode::Ln, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Jacobian–vector product of the head output with respect to the fast
/// weights, at input `x`, in the given mode.
pub fn mlp_jvp_params<T: Real>(
    x: &[T],
    w: &MlpParams<T>,
    ln: &LayerNormParams<T>,
    act: Activation,
    tangent: &MlpParams<T>,
    mode: JacobianMode,
) -> CoreResult<Vec<T>> {
    if tangent.dim() != w.dim() || tangent.hidden() != w.hidden() {
        return Err(CoreError::ShapeMismatch {
            context: "mlp_jvp_params: tangent shape != weight shape",
        });
    }
    tangent.validate()?;
    let (_, cache) = forward_cached(x, w, ln, act)?;
    let mut adot = tangent.w1.tr_mul_vec(x)?;
    for (ai, &bi) in adot.iter_mut().zip(&tangent.b1) {
        *ai = *ai + bi;
    }
    let hdot: Vec<T> = cache
        .a
        .iter()
        .zip(&adot)
        .map(|(&ai, &adi)| act.derivative(ai) * adi)
        .collect();
    let mut zdot = tangent.w2.tr_mul_vec(&cache.h)?;
    let w2_hdot = w.w2.tr_mul_vec(&hdot)?;
    for ((zi, &wi), &bi) in zdot.iter_mut().zip(&w2_hdot).zip(&tangent.b2) {
        *zi = *zi + wi + bi;
    }
    match mode {
        JacobianMode::Mlp => Ok(zdot),
        JacobianMode::Ln => Ok(ln_jvp(&cache.ln, &ln.gain, &zdot)),
    }
}

/// Vector–Jacobian product (adjoint of [`mlp_jvp_params`]): maps an output
/// cotangent `u` to a gradient-shaped parameter cotangent.
pub fn mlp_vjp_params<T: Real>(
    x: &[T],
    w: &MlpParams<T>,
    ln: &LayerNormParams<T>,
    act: Activation,
    u: &[T],
    mode: JacobianMode,
) -> CoreResult<MlpParams<T>> {
    if u.len() != w.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "mlp_vjp_params: cotangent length != dim",
        });
    }
    let (_, cache) = forward_cached(x, w, ln, act)?;
    let mut out = MlpParams::zeros(w.dim(), w.hidden());
    accumulate_vjp(x, w, act, &cache, ln, u, mode, &mut out)?;
    Ok(out)
}

/// Gradient of the full composition with respect to the *input* `x`:
/// `uᵀ·∂f/∂x = u + w1·(act′(a) ⊙ (w2·LN′ᵀu))`.
pub fn mlp_input_vjp<T: Real>(
    x: &[T],
    w: &MlpParams<T>,
    ln: &LayerNormParams<T>,
    act: Activation,
    u: &[T],
) -> CoreResult<Vec<T>> {
    if u.len() != w.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "mlp_input_vjp: cotangent length != dim",
        });
    }
    let (_, cache) = forward_cached(x, w, ln, act)?;
    let uz = ln_backward(&cache.ln, &ln.gain, u);
    let uh = w.w2.mul_vec(&uz)?;
    let ua: Vec<T> = cache
        .a
        .iter()
        .zip(&uh)
        .map(|(&ai, &ui)| act.derivative(ai) * ui)
        .collect();
    let ux = w.w1.mul_vec(&ua)?;
    Ok(u.iter().zip(&ux).map(|(&a, &b)| a + b).collect())
}

/// Shared VJP kernel; adds the contribution into `acc`.
fn accumulate_vjp<T: Real>(
    x: &[T],
    w: &MlpParams<T>,
    act: Activation,
    cache: &ForwardCache<T>,
    ln: &LayerNormParams<T>,
    u: &[T],
    mode: JacobianMode,
    acc: &mut MlpParams<T>,
) -> CoreResult<()> {
    let uz = match mode {
        JacobianMode::Mlp => u.to_vec(),
        JacobianMode::Ln => ln_backward(&cache.ln, &ln.gain, u),
    };
    // z = w2ᵀh + b2  ⇒  ∂/∂w2[i,j] = h_i·uz_j, ∂/∂b2 = uz, ∂/∂h = w2·uz
    let d = w.dim();
    for i in 0..w.hidden() {
        let hi = cache.h[i];
        if hi != T::zero() {
            let row = acc.w2.row_mut(i);
            for j in 0..d {
                row[j] = row[j] + hi * uz[j];
            }
        }
    }
    for (b, &uzj) in acc.b2.iter_mut().zip(&uz) {
        *b = *b + uzj;
    }
    let uh = w.w2.mul_vec(&uz)?;
    let ua: Vec<T> = cache
        .a
        .iter()
        .zip(&uh)
        .map(|(&ai, &ui)| act.derivative(ai) * ui)
        .collect();
    // a = w1ᵀx + b1  ⇒  ∂/∂w1[i,j] = x_i·ua_j, ∂/∂b1 = ua
    for i in 0..d {
        let xi = x[i];
        if xi != T::zero() {
            let row = acc.w1.row_mut(i);
            for (rj, &uaj) in row.iter_mut().zip(&ua) {
                *rj = *rj + xi * uaj;
            }
        }
    }
    for (b, &uaj) in acc.b1.iter_mut().zip(&ua) {
        *b = *b + uaj;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec::Vec;
    use rand::Rng;

    fn random_mlp(rng: &mut impl Rng, dim: usize, hidden: usize, scale: f64) -> MlpParams<f64> {
        MlpParams {
            w1: rng::normal_matrix(rng, dim, hidden, scale),
            b1: rng::normal_vec(rng, hidden, scale),
            w2: rng::normal_matrix(rng, hidden, dim, scale),
            b2: rng::normal_vec(rng, dim, scale),
        }
    }

    fn flat_forward(x: &[f64], dim: usize, hidden: usize, flat: &[f64]) -> Vec<f64> {
        let w = MlpParams::from_flat(dim, hidden, flat).unwrap();
        mlp_forward(x, &w, &LayerNormParams::unit(dim), Activation::Gelu).unwrap()
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(Activation::Gelu.value(0.0f64), 0.0);
        // x·Φ(x) at x = 1: Φ(1) = 0.8413447460685429
        assert!((Activation::Gelu.value(1.0f64) - 0.8413447460685429).abs() < 1e-12);
        assert!((Activation::Gelu.derivative(0.0f64) - 0.5).abs() < 1e-15);
        assert!((Activation::Gelu.value(30.0f64) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Relu, Activation::Identity] {
            for &x in &[-1.7f64, -0.3, 0.4, 2.2] {
                let h = 1e-6;
                let fd = (act.value(x + h) - act.value(x - h)) / (2.0 * h);
                assert!(
                    (act.derivative(x) - fd).abs() < 1e-8,
                    "{act:?} at {x}: {} vs {}",
                    act.derivative(x),
                    fd
                );
            }
        }
    }

    #[test]
    fn layer_norm_matches_scalar_reference() {
        let p = LayerNormParams {
            gain: vec![1.3f64, 0.2, -0.7, 1.0],
            bias: vec![0.1, -0.2, 0.0, 0.5],
            epsilon: 1e-6,
        };
        let z = [0.3f64, -1.1, 2.4, 0.0];
        let got = layer_norm_forward(&z, &p).unwrap();
        let want = vstream_oracles::layer_norm_ref(&z, &p.gain, &p.bias, 1e-6);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_bias() {
        let mut p = LayerNormParams::unit(3);
        p.bias = vec![0.4f64, -0.1, 0.0];
        let y = layer_norm_forward(&[7.0, 7.0, 7.0], &p).unwrap();
        for (yi, bi) in y.iter().zip(&p.bias) {
            assert!((yi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_passes_through_standardized_input() {
        // [1, -1] already has zero mean, unit variance.
        let mut p = LayerNormParams::unit(2);
        p.epsilon = 1e-12f64;
        let y = layer_norm_forward(&[1.0, -1.0], &p).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-6 && (y[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_inner_mlp_reduces_to_residual_plus_ln_bias() {
        let dim = 4;
        let w = MlpParams::<f64>::zeros(dim, 3);
        let mut ln = LayerNormParams::unit(dim);
        ln.bias = vec![0.5, -0.5, 0.25, 0.0];
        let x = [1.0, 2.0, -3.0, 0.5];
        let f = mlp_forward(&x, &w, &ln, Activation::Gelu).unwrap();
        for i in 0..dim {
            assert!((f[i] - (x[i] + ln.bias[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_independent_composition() {
        let mut r = rng::seeded_rng(11);
        let (dim, hidden) = (5, 7);
        let w = random_mlp(&mut r, dim, hidden, 0.4);
        let ln = LayerNormParams {
            gain: rng::normal_vec(&mut r, dim, 1.0),
            bias: rng::normal_vec(&mut r, dim, 1.0),
            epsilon: 1e-6,
        };
        let x = rng::normal_vec(&mut r, dim, 1.0);
        let f = mlp_forward(&x, &w, &ln, Activation::Gelu).unwrap();

        // Reassemble f from scratch with oracle pieces.
        let a = vstream_oracles::naive_matmul(w.w1.transpose().as_slice(), &x, hidden, dim, 1);
        let h: Vec<f64> = a
            .iter()
            .zip(&w.b1)
            .map(|(&ai, &bi)| Activation::Gelu.value(ai + bi))
            .collect();
        let z = vstream_oracles::naive_matmul(w.w2.transpose().as_slice(), &h, dim, hidden, 1);
        let z: Vec<f64> = z.iter().zip(&w.b2).map(|(&zi, &bi)| zi + bi).collect();
        let y = vstream_oracles::layer_norm_ref(&z, &ln.gain, &ln.bias, 1e-6);
        for i in 0..dim {
            assert!((f[i] - (x[i] + y[i])).abs() < 1e-11);
        }
    }

    #[test]
    fn loss_grad_trivial_cases() {
        let mut r = rng::seeded_rng(3);
        let (dim, hidden, b) = (3, 4, 2);
        let w = random_mlp(&mut r, dim, hidden, 0.3);
        let ln = LayerNormParams::unit(dim);
        let keys = rng::normal_matrix(&mut r, b, dim, 1.0);

        // Zero weights: zero loss, zero gradient.
        let targets = keys.clone();
        let (loss0, grad0) = mlp_loss_grad(
            &keys,
            &targets,
            &[0.0, 0.0],
            &w,
            &ln,
            Activation::Gelu,
        )
        .unwrap();
        assert_eq!(loss0, 0.0);
        assert_eq!(grad0.frobenius_norm(), 0.0);

        // Targets equal to the model output: exact minimum, zero gradient.
        let mut exact = Matrix::zeros(b, dim);
        for i in 0..b {
            let f = mlp_forward(keys.row(i), &w, &ln, Activation::Gelu).unwrap();
            exact.row_mut(i).copy_from_slice(&f);
        }
        let (loss1, grad1) =
            mlp_loss_grad(&keys, &exact, &[0.7, 0.3], &w, &ln, Activation::Gelu).unwrap();
        assert!(loss1 < 1e-28);
        assert!(grad1.frobenius_norm() < 1e-13);
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let mut r = rng::seeded_rng(17);
        let (dim, hidden, b) = (3, 4, 2);
        let w = random_mlp(&mut r, dim, hidden, 0.4);
        let ln = LayerNormParams::unit(dim);
        let keys = rng::normal_matrix(&mut r, b, dim, 1.0);
        let targets = rng::normal_matrix(&mut r, b, dim, 1.0);
        let eta = [0.8, 0.35];

        let (_, grad) =
            mlp_loss_grad(&keys, &targets, &eta, &w, &ln, Activation::Gelu).unwrap();
        let flat = w.flatten();
        let fd = vstream_oracles::fd_grad(
            |p| {
                let wp = MlpParams::from_flat(dim, hidden, p).unwrap();
                let (l, _) =
                    mlp_loss_grad(&keys, &targets, &eta, &wp, &ln, Activation::Gelu).unwrap();
                l
            },
            &flat,
            1e-5,
        );
        let gflat = grad.flatten();
        let num: f64 = gflat
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "relative grad error {}", num / den);
    }

    #[test]
    fn jvp_zero_tangent_and_linearity() {
        let mut r = rng::seeded_rng(23);
        let (dim, hidden) = (4, 5);
        let w = random_mlp(&mut r, dim, hidden, 0.4);
        let ln = LayerNormParams::unit(dim);
        let x = rng::normal_vec(&mut r, dim, 1.0);
        let zero = MlpParams::zeros(dim, hidden);
        for mode in [JacobianMode::Mlp, JacobianMode::Ln] {
            let out = mlp_jvp_params(&x, &w, &ln, Activation::Gelu, &zero, mode).unwrap();
            assert!(out.iter().all(|&v| v == 0.0));

            let v1 = random_mlp(&mut r, dim, hidden, 1.0);
            let v2 = random_mlp(&mut r, dim, hidden, 1.0);
            let mut combo = v1.clone();
            combo.scale_in_place(2.0);
            combo.add_scaled(&v2, -0.5).unwrap();
            let j1 = mlp_jvp_params(&x, &w, &ln, Activation::Gelu, &v1, mode).unwrap();
            let j2 = mlp_jvp_params(&x, &w, &ln, Activation::Gelu, &v2, mode).unwrap();
            let jc = mlp_jvp_params(&x, &w, &ln, Activation::Gelu, &combo, mode).unwrap();
            for i in 0..dim {
                assert!((jc[i] - (2.0 * j1[i] - 0.5 * j2[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut r = rng::seeded_rng(29);
        let (dim, hidden) = (3, 4);
        let w = random_mlp(&mut r, dim, hidden, 0.4);
        let ln = LayerNormParams::unit(dim);
        let x = rng::normal_vec(&mut r, dim, 1.0);
        let v = random_mlp(&mut r, dim, hidden, 1.0);
        let flat = w.flatten();
        let vflat = v.flatten();
        for mode in [JacobianMode::Mlp, JacobianMode::Ln] {
            let jv = mlp_jvp_params(&x, &w, &ln, Activation::Gelu, &v, mode).unwrap();
            // Directional derivative (f(W + h·V) − f(W − h·V)) / 2h of the
            // mode's output point.
            let h = 1e-6;
            let eval = |p: &[f64]| {
                let wp = MlpParams::from_flat(dim, hidden, p).unwrap();
                let (_, cache) = forward_cached(&x, &wp, &ln, Activation::Gelu).unwrap();
                let mut z = wp.w2.tr_mul_vec(&cache.h).unwrap();
                for (zi, &bi) in z.iter_mut().zip(&wp.b2) {
                    *zi += bi;
                }
                match mode {
                    JacobianMode::Mlp => z,
                    JacobianMode::Ln => layer_norm_forward(&z, &ln).unwrap(),
                }
            };
            let plus: Vec<f64> = flat.iter().zip(&vflat).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = flat.iter().zip(&vflat).map(|(a, b)| a - h * b).collect();
            let (fp, fm) = (eval(&plus), eval(&minus));
            for i in 0..dim {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!(
                    (jv[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{mode:?} component {i}: {} vs {}",
                    jv[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let mut r = rng::seeded_rng(31);
        let (dim, hidden) = (3, 4);
        let w = random_mlp(&mut r, dim, hidden, 0.4);
        let ln = LayerNormParams::unit(dim);
        let x = rng::normal_vec(&mut r, dim, 1.0);
        for mode in [JacobianMode::Mlp, JacobianMode::Ln] {
            let g = mlp_vjp_params(&x, &w, &ln, Activation::Gelu, &[0.0; 3], mode).unwrap();
            assert_eq!(g.frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn vjp_is_adjoint_of_jvp() {
        let mut r = rng::seeded_rng(37);
        let (dim, hidden) = (4, 6);
        let w = random_mlp(&mut r, dim, hidden, 0.5);
        let ln = LayerNormParams {
            gain: rng::normal_vec(&mut r, dim, 1.0),
            bias: vec![0.0; dim],
            epsilon: 1e-6,
        };
        for trial in 0..10 {
            let x = rng::normal_vec(&mut r, dim, 1.0);
            let v = random_mlp(&mut r, dim, hidden, 1.0);
            let u = rng::normal_vec(&mut r, dim, 1.0);
            let mode = if trial % 2 == 0 {
                JacobianMode::Mlp
            } else {
                JacobianMode::Ln
            };
            let jv = mlp_jvp_params(&x, &w, &ln, Activation::Gelu, &v, mode).unwrap();
            let jtu = mlp_vjp_params(&x, &w, &ln, Activation::Gelu, &u, mode).unwrap();
            let lhs = dot(&u, &jv);
            let rhs = jtu.dot(&v);
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn vjp_matches_transposed_fd_jacobian() {
        let mut r = rng::seeded_rng(41);
        let (dim, hidden) = (2, 2);
        let w = random_mlp(&mut r, dim, hidden, 0.5);
        let ln = LayerNormParams::unit(dim);
        let x = rng::normal_vec(&mut r, dim, 1.0);
        let u = [0.7, -0.4];
        let flat = w.flatten();
        let jac = vstream_oracles::fd_jacobian(
            |p| flat_forward(&x, dim, hidden, p),
            &flat,
            1e-6,
        );
        let got = mlp_vjp_params(&x, &w, &ln, Activation::Gelu, &u, JacobianMode::Ln)
            .unwrap()
            .flatten();
        for j in 0..flat.len() {
            let want = jac[0][j] * u[0] + jac[1][j] * u[1];
            assert!(
                (got[j] - want).abs() < 1e-5 * (1.0 + want.abs()),
                "param {j}: {} vs {}",
                got[j],
                want
            );
        }
    }

    #[test]
    fn input_vjp_matches_fd_jacobian() {
        let mut r = rng::seeded_rng(43);
        let (dim, hidden) = (3, 5);
        let w = random_mlp(&mut r, dim, hidden, 0.5);
        let ln = LayerNormParams::unit(dim);
        let x = rng::normal_vec(&mut r, dim, 1.0);
        let u = rng::normal_vec(&mut r, dim, 1.0);
        let jac = vstream_oracles::fd_jacobian(
            |xi| mlp_forward(xi, &w, &ln, Activation::Gelu).unwrap(),
            &x,
            1e-6,
        );
        let got = mlp_input_vjp(&x, &w, &ln, Activation::Gelu, &u).unwrap();
        for j in 0..dim {
            let want: f64 = (0..dim).map(|i| jac[i][j] * u[i]).sum();
            let rel = (got[j] - want).abs() / (1.0 + want.abs());
            assert!(rel < 1e-5, "input grad {j}: {} vs {}", got[j], want);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut r = rng::seeded_rng(47);
        let w = random_mlp(&mut r, 3, 4, 1.0);
        let flat = w.flatten();
        assert_eq!(flat.len(), w.param_count());
        let back = MlpParams::from_flat(3, 4, &flat).unwrap();
        assert_eq!(back, w);
    }
}
