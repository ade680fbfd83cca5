//! Benchmark harness for the editing kernels; the benchmarks live in `benches/`.
