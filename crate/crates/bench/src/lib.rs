//! Benchmark-only crate; see `benches/hot_paths.rs`.
//!
//! Hot paths covered: cubic B-spline resampling, phantom generation, the
//! model forward/backward passes and the ROC/DeLong statistics.

pub use vitbench_core as core;
