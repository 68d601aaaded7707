//! Benchmark-only crate; the measurements live in `benches/core_benches.rs`.
//!
//! Run with `cargo bench -p omae-bench`.
