//! Parallel episode runner and summary reduction.

use osfsl_core::episodes::sample_episode;
use osfsl_core::metrics::MetricsSummary;
use osfsl_core::rng::derive_seed;
use osfsl_core::{run_episode, EpisodeSpec, FeatureSet, MetricValues, Scorer};
use rayon::prelude::*;
use serde::Serialize;

/// Every method's result on one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub index: usize,
    pub seed: u64,
    pub per_method: Vec<Result<MetricValues, String>>,
}

/// Episode `e` uses seed `derive_seed(master, e)`, so results do not depend
/// on scheduling. Output order follows the episode index.
pub fn run_episodes(
    pool: &FeatureSet,
    spec: &EpisodeSpec,
    scorers: &[Scorer],
    episodes: usize,
    master_seed: u64,
    jobs: usize,
) -> anyhow::Result<Vec<EpisodeResult>> {
    let workers = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(workers.install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|index| {
                let seed = derive_seed(master_seed, index as u64);
                let per_method = match sample_episode(pool, &EpisodeSpec { seed, ..*spec }) {
                    Ok(ep) => scorers
                        .iter()
                        .map(|s| {
                            run_episode(&ep, s)
                                .map(|o| o.metrics())
                                .map_err(|e| e.to_string())
                        })
                        .collect(),
                    Err(e) => vec![Err(format!("sampling: {e}")); scorers.len()],
                };
                EpisodeResult {
                    index,
                    seed,
                    per_method,
                }
            })
            .collect()
    }))
}

/// Column `k` of the results: defined metric values of completed episodes.
pub fn method_values(results: &[EpisodeResult], k: usize) -> Vec<MetricValues> {
    results
        .iter()
        .filter_map(|r| r.per_method[k].as_ref().ok().copied())
        .collect()
}

pub fn failures(results: &[EpisodeResult]) -> usize {
    results
        .iter()
        .map(|r| r.per_method.iter().filter(|m| m.is_err()).count())
        .sum()
}

/// Per-method summary in serializable form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub completed: usize,
    pub failed: usize,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: &'static str,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
    pub n: usize,
    pub excluded: usize,
}

impl MethodSummary {
    pub fn new(method: &str, results: &[EpisodeResult], k: usize) -> Self {
        let values = method_values(results, k);
        let summary = MetricsSummary::from_episodes(&values);
        MethodSummary {
            method: method.to_string(),
            completed: values.len(),
            failed: results.len() - values.len(),
            metrics: MetricValues::NAMES
                .iter()
                .map(|&name| {
                    let s = summary.get(name);
                    MetricRow {
                        metric: name,
                        mean: s.map(|s| s.mean),
                        ci95: s.map(|s| s.ci95),
                        n: s.map_or(0, |s| s.n),
                        excluded: s.map_or(values.len(), |s| s.excluded),
                    }
                })
                .collect(),
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.metric == metric)
            .and_then(|r| r.mean)
    }

    pub fn row(&self, metric: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|r| r.metric == metric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use osfsl_core::data::synth_gaussian_features;
    use osfsl_core::SyntheticSpec;

    #[test]
    fn thread_count_does_not_change_results() {
        let pool = synth_gaussian_features(&SyntheticSpec::default()).unwrap();
        let scorers = [Scorer::simpleshot(), Scorer::knn()];
        let spec = EpisodeSpec::default();
        let a = run_episodes(&pool, &spec, &scorers, 12, 5, 1).unwrap();
        let b = run_episodes(&pool, &spec, &scorers, 12, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|r| r.index).collect::<Vec<_>>(),
            (0..12).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sampling_failures_are_recorded_per_method() {
        let pool = synth_gaussian_features(&SyntheticSpec {
            num_classes: 4,
            ..Default::default()
        })
        .unwrap();
        let r = run_episodes(&pool, &EpisodeSpec::default(), &[Scorer::knn()], 3, 0, 1).unwrap();
        assert_eq!(failures(&r), 3);
        let s = MethodSummary::new("knn", &r, 0);
        assert_eq!((s.completed, s.failed), (0, 3));
        assert!(s.mean("auroc").is_none());
    }
}
