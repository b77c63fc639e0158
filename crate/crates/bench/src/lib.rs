//! Benchmark-only crate; see `benches/dyadic.rs`.
