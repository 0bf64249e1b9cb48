//! Criterion benchmarks for the drmrr-core hot paths live in `benches/`.
