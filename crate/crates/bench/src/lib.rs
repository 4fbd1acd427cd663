//! Fixtures shared by the benchmarks.

use ncm_core::{generate_cf_pairs, generate_mixture, sample_scm, CfPairSet, Dataset, DomainSpec, LatentScm};

/// Default-sized SCM: 100 latents observed in 100 dimensions, 20 spurious.
pub fn default_scm(seed: u64) -> LatentScm {
    let c = 1.0 / 20.0;
    sample_scm(
        100,
        100,
        20,
        vec![
            DomainSpec::train("train_a", 0.1, c, 0.5),
            DomainSpec::train("train_b", 30.0, c, 0.5),
            DomainSpec::test("test", 8.0, c),
        ],
        seed,
    )
    .expect("fixture scm")
}

pub fn mixture(scm: &LatentScm, n: usize, seed: u64) -> Dataset {
    generate_mixture(scm, n, seed).expect("fixture data")
}

pub fn pairs(scm: &LatentScm, k: usize, seed: u64) -> CfPairSet {
    generate_cf_pairs(scm, "train_a", "train_b", k, seed).expect("fixture pairs")
}
