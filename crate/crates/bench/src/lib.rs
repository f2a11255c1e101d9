//! Benchmarks live under `benches/`; this library is intentionally empty.
