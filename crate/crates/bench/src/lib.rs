//! Criterion benchmarks for the attention variants; see `benches/`.
