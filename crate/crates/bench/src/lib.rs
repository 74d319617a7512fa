//! Criterion benchmarks for the detection and analytics hot paths; see `benches/`.
