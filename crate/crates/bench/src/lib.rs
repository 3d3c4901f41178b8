//! Criterion benchmarks for the CAC engine live under `benches/`.
