//! Fixtures shared by the criterion benchmarks.

use dacdm_core::data::{gen_two_moons_shift, TwoMoonsConfig};
use dacdm_core::rng;
use dacdm_core::{ConditionedDenoiser, DenoiserConfig, DomainDataset, NoiseSchedule};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).expect("valid schedule")
}

pub fn moons(n_source: usize, n_target: usize) -> (DomainDataset, DomainDataset) {
    let cfg = TwoMoonsConfig {
        n_source,
        n_target,
        ..TwoMoonsConfig::default()
    };
    gen_two_moons_shift(&cfg, 7).expect("valid moons config")
}

/// Untrained denoiser of the default width (timings do not depend on weights).
pub fn denoiser(sched: &NoiseSchedule) -> ConditionedDenoiser {
    let mut r = rng::stream(11);
    ConditionedDenoiser::new(2, 2, sched.steps(), &DenoiserConfig::default(), &mut r).expect("valid denoiser")
}
