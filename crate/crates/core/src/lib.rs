//! Core algorithms for a desk-scale streaming memory stack.
//!
//! The crate implements three cooperating mechanisms over a token stream:
//!
//! * a **fast-weight layer** (`ttt`): a small per-head residual MLP whose
//!   weights are updated at inference time on each incoming mini-batch by
//!   minimizing a key→value reconstruction loss, with plain gradient,
//!   orthogonalized (`Muon`-style), or Hessian-free conjugate-gradient
//!   updates (`optim`);
//! * a **fixed-budget token memory** (`memory`) that evicts or merges the
//!   most redundant adjacent rows by cosine similarity;
//! * a **prompt-conditioned KV-cache compressor** (`reader`) over a toy
//!   causal attention stack, which scores cached entries by prompt
//!   attention and keeps a global top-K′ per chunk.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`), allocates through
//! `alloc` only, and routes transcendentals through `libm`, so results are
//! bit-reproducible for a fixed seed across platforms and across
//! `std`/`no_std` builds.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod matrix;
pub mod memory;
pub mod mlp;
pub mod optim;
pub mod reader;
pub mod real;
pub mod rng;
pub mod ttt;

pub use error::{CoreError, CoreResult};
pub use matrix::Matrix;
pub use real::Real;
