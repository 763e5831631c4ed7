//! Criterion benchmarks for the stochavg kernels; see `benches/`.
