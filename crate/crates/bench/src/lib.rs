//! Criterion benchmarks for `podnet-core`; see `benches/`.
