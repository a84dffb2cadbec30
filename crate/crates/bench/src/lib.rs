//! Benchmarks for the core algorithms live under `benches/`.
