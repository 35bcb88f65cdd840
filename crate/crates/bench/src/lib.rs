//! Criterion benchmarks for the estimation kernels live in `benches/`.
//! This crate only provides shared fixtures.

use dnetreg::simulation::{generate, SimConfig};
use dnetreg::DynamicNetworkDataset;

/// A simulated population of the given size with a fixed seed.
pub fn fixture(n: usize, subjects: usize, times: usize) -> DynamicNetworkDataset {
    let cfg = SimConfig {
        n,
        subjects,
        times,
        s0: 0.05_f64.max(4.0 / (n * n) as f64),
        seed: 42,
        ..SimConfig::default()
    };
    generate(&cfg).expect("valid fixture config").0
}
