//! Streaming harness around `vstream-core`: run configuration, binary
//! stream/snapshot formats, metrics serialization, synthetic stream
//! generation, the end-to-end pipeline, and the analysis drivers behind
//! the `vstream` command-line tool.
//!
//! Everything here is deterministic: given the same configuration and
//! seed, every command produces byte-identical output files. Wall-clock
//! timings are therefore opt-in (`--timings`) and default to zero in the
//! logs.

pub mod analysis;
pub mod config;
pub mod formats;
pub mod metrics;
pub mod pipeline;
pub mod reader_eval;
pub mod recall;
pub mod stream_gen;
