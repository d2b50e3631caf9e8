//! Criterion benchmarks for the spikeflow kernels; see `benches/`.
