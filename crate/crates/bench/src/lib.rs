//! Criterion benchmarks for the kernels of `insens-core`; see `benches/`.
