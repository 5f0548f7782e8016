//! Benchmark plant.
