//! Criterion benchmarks for the core hot paths live in `benches/`.
