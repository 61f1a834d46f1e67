//! Criterion benchmarks for the training and evaluation pipeline live in `benches/`.
