//! Run configuration shared by every subcommand.
//!
//! Configs are TOML with a fixed key set (unknown keys are rejected):
//!
//! ```toml
//! dim = 64
//! tokens_per_frame = 16
//! audio_per_frame = 0        # optional, default 0
//! batch_size = 32
//! memory_budget = 256
//! frames = 40
//! seed = 7
//! precision = "f64"          # or "f32"
//! frame_rate = "1fps"        # optional metadata tag
//!
//! [optimizer]
//! kind = "hf"                # sgd | muon | hf
//! cg_iters = 3
//! curvature = "mlp"          # mlp | ln
//! damping = 1e-4
//! ns_iters = 5
//! eta = 0.1
//!
//! [reader]
//! chunk = 64
//! avg_tokens = 64
//!
//! [stack]
//! layers = 4
//! heads = 4
//!
//! [ttt]                      # optional, defaults below
//! heads = 2
//! hidden = 256
//! theta_noise = 0.1
//! ```
//!
//! `optimizer.eta` is the single step-scale knob: it becomes the
//! fast-weight layer's base learning rate (token rates are
//! `eta·σ(x·w+b)`) and, for `muon`, additionally scales the
//! orthogonalized update.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vstream_core::mlp::JacobianMode;
use vstream_core::optim::{OptimizerKind, OptimizerSpec};
use vstream_core::reader::ReaderBudget;
use vstream_core::real::Real;

/// Floating-point width used for all run arithmetic. Stream and snapshot
/// files store `f32` either way; this selects the in-memory type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("unknown precision {other:?} (expected \"f32\" or \"f64\")"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKindConfig {
    Sgd,
    Muon,
    Hf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureConfig {
    Mlp,
    Ln,
}

impl CurvatureConfig {
    pub fn mode(self) -> JacobianMode {
        match self {
            CurvatureConfig::Mlp => JacobianMode::Mlp,
            CurvatureConfig::Ln => JacobianMode::Ln,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKindConfig,
    #[serde(default = "default_cg_iters")]
    pub cg_iters: usize,
    #[serde(default = "default_curvature")]
    pub curvature: CurvatureConfig,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_ns_iters")]
    pub ns_iters: usize,
    pub eta: f64,
}

fn default_cg_iters() -> usize {
    3
}

fn default_curvature() -> CurvatureConfig {
    CurvatureConfig::Mlp
}

fn default_damping() -> f64 {
    1e-4
}

fn default_ns_iters() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderConfig {
    /// Chunk length `m` of the compressing prefill.
    pub chunk: usize,
    /// Average retained tokens `M`; the per-chunk keep budget is
    /// `⌊m·L·M/N⌋` over `N` memory rows and `L` layers.
    pub avg_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TttConfig {
    #[serde(default = "default_ttt_heads")]
    pub heads: usize,
    #[serde(default = "default_ttt_hidden")]
    pub hidden: usize,
    #[serde(default = "default_theta_noise")]
    pub theta_noise: f64,
}

fn default_ttt_heads() -> usize {
    2
}

fn default_ttt_hidden() -> usize {
    256
}

fn default_theta_noise() -> f64 {
    0.1
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            heads: default_ttt_heads(),
            hidden: default_ttt_hidden(),
            theta_noise: default_theta_noise(),
        }
    }
}

fn default_frame_rate() -> String {
    "1fps".to_string()
}

fn default_audio_per_frame() -> usize {
    0
}

/// One run's full parameterization. Every output file is a pure function
/// of this struct (plus the subcommand's own flags).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub tokens_per_frame: usize,
    #[serde(default = "default_audio_per_frame")]
    pub audio_per_frame: usize,
    pub batch_size: usize,
    pub memory_budget: usize,
    pub frames: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Presentation-level tag recorded in stream metadata; never used in
    /// computation.
    #[serde(default = "default_frame_rate")]
    pub frame_rate: String,
    pub optimizer: OptimizerConfig,
    pub reader: ReaderConfig,
    pub stack: StackConfig,
    #[serde(default)]
    pub ttt: TttConfig,
}

impl RunConfig {
    /// Desk-scale defaults used by tests and as a documentation anchor.
    pub fn desk() -> Self {
        RunConfig {
            dim: 64,
            tokens_per_frame: 16,
            audio_per_frame: 0,
            batch_size: 32,
            memory_budget: 256,
            frames: 40,
            seed: 7,
            precision: Precision::F64,
            frame_rate: default_frame_rate(),
            optimizer: OptimizerConfig {
                kind: OptimizerKindConfig::Hf,
                cg_iters: 3,
                curvature: CurvatureConfig::Mlp,
                damping: 1e-4,
                ns_iters: 5,
                eta: 0.1,
            },
            reader: ReaderConfig {
                chunk: 64,
                avg_tokens: 64,
            },
            stack: StackConfig { layers: 4, heads: 4 },
            ttt: TttConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("tokens_per_frame", self.tokens_per_frame),
            ("batch_size", self.batch_size),
            ("memory_budget", self.memory_budget),
            ("optimizer.cg_iters", self.optimizer.cg_iters),
            ("optimizer.ns_iters", self.optimizer.ns_iters),
            ("reader.chunk", self.reader.chunk),
            ("reader.avg_tokens", self.reader.avg_tokens),
            ("stack.layers", self.stack.layers),
            ("stack.heads", self.stack.heads),
            ("ttt.heads", self.ttt.heads),
            ("ttt.hidden", self.ttt.hidden),
        ] {
            if v == 0 {
                bail!("config: {name} must be positive");
            }
        }
        if self.dim % self.ttt.heads != 0 {
            bail!("config: ttt.heads must divide dim");
        }
        if self.dim % self.stack.heads != 0 {
            bail!("config: stack.heads must divide dim");
        }
        if !(self.optimizer.eta.is_finite() && self.optimizer.eta > 0.0) {
            bail!("config: optimizer.eta must be positive and finite");
        }
        if !(self.optimizer.damping.is_finite() && self.optimizer.damping >= 0.0) {
            bail!("config: optimizer.damping must be non-negative and finite");
        }
        if !(self.ttt.theta_noise.is_finite() && self.ttt.theta_noise >= 0.0) {
            bail!("config: ttt.theta_noise must be non-negative and finite");
        }
        Ok(())
    }

    /// The core optimizer spec for this config's `[optimizer]` table.
    pub fn optimizer_spec<T: Real>(&self) -> OptimizerSpec<T> {
        let eta = T::of(self.optimizer.eta);
        match self.optimizer.kind {
            OptimizerKindConfig::Sgd => OptimizerSpec::sgd(eta),
            OptimizerKindConfig::Muon => {
                let mut s = OptimizerSpec::muon(eta);
                s.ns_iters = self.optimizer.ns_iters;
                s
            }
            OptimizerKindConfig::Hf => OptimizerSpec::hf(
                eta,
                self.optimizer.cg_iters,
                self.optimizer.curvature.mode(),
                T::of(self.optimizer.damping),
            ),
        }
    }

    /// A spec of the given kind, inheriting this config's sub-parameters
    /// (used by commands that compare several optimizers per run).
    pub fn spec_of_kind<T: Real>(&self, kind: OptimizerKind, cg_iters: usize) -> OptimizerSpec<T> {
        let eta = T::of(self.optimizer.eta);
        match kind {
            OptimizerKind::Sgd => OptimizerSpec::sgd(eta),
            OptimizerKind::Muon => {
                let mut s = OptimizerSpec::muon(eta);
                s.ns_iters = self.optimizer.ns_iters;
                s
            }
            OptimizerKind::Hf => OptimizerSpec::hf(
                eta,
                cg_iters,
                self.optimizer.curvature.mode(),
                T::of(self.optimizer.damping),
            ),
        }
    }

    pub fn reader_budget(&self) -> ReaderBudget {
        ReaderBudget {
            chunk: self.reader.chunk,
            avg_tokens: self.reader.avg_tokens,
        }
    }

    /// Per-coordinate standard deviation of generated stream tokens,
    /// chosen so the expected token norm is ≈ 1.
    pub fn token_std(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}
