//! Criterion benchmarks for the codec's hot paths; see `benches/`.
