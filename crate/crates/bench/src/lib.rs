//! Criterion benchmarks for the numeric kernel and model passes live in `benches/`.
