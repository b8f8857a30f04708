//! Criterion benchmarks live in `benches/`; this crate exports nothing.
