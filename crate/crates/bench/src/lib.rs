//! Shared fixtures for the benchmarks.

use osfsl_core::data::synth_gaussian_features;
use osfsl_core::episodes::sample_episode;
use osfsl_core::{Episode, EpisodeSpec, FeatureSet, SyntheticSpec};

/// The default synthetic pool with the given center scale.
pub fn pool(center_scale: f64) -> FeatureSet {
    synth_gaussian_features(&SyntheticSpec {
        center_scale,
        ..Default::default()
    })
    .expect("valid synthetic spec")
}

/// A standard 5-way 5-shot episode with 150 queries.
pub fn episode(pool: &FeatureSet, seed: u64) -> Episode {
    sample_episode(
        pool,
        &EpisodeSpec {
            seed,
            ..Default::default()
        },
    )
    .expect("pool is large enough")
}
