//! Open-set episode sampling.
//!
//! An [`Episode`] is split into the [`Task`] that inference code sees and the
//! [`GroundTruth`] that only evaluation code may read.

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::FeatureVec;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_in: usize,
    pub n_out_classes: usize,
    pub k_shot: usize,
    pub k_in_query: usize,
    pub k_out_query: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    /// 5-way 5-shot with five outlier classes and 15 + 15 queries per class.
    fn default() -> Self {
        EpisodeSpec {
            n_in: 5,
            n_out_classes: 5,
            k_shot: 5,
            k_in_query: 15,
            k_out_query: 15,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_in < 2 {
            return Err(Error::param("n_in", "need at least 2 inlier classes"));
        }
        if self.n_out_classes < 1 {
            return Err(Error::param(
                "n_out_classes",
                "need at least 1 outlier class",
            ));
        }
        if self.k_shot < 1 {
            return Err(Error::param(
                "k_shot",
                "need at least 1 support sample per class",
            ));
        }
        if self.k_in_query + self.k_out_query < 1 {
            return Err(Error::param("k_in_query", "query set would be empty"));
        }
        Ok(())
    }

    pub fn support_size(&self) -> usize {
        self.k_shot * self.n_in
    }

    pub fn query_size(&self) -> usize {
        self.k_in_query * self.n_in + self.k_out_query * self.n_out_classes
    }

    pub fn with_preset(self, preset: &ImbalancePreset) -> Self {
        EpisodeSpec {
            k_in_query: preset.k_in_query,
            k_out_query: preset.k_out_query,
            ..self
        }
    }
}

/// Named inlier/outlier query mix for the 5 + 5 class protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImbalancePreset {
    pub name: &'static str,
    pub k_in_query: usize,
    pub k_out_query: usize,
}

impl ImbalancePreset {
    pub fn outlier_fraction(&self) -> f64 {
        self.k_out_query as f64 / (self.k_in_query + self.k_out_query) as f64
    }
}

const PRESETS: [ImbalancePreset; 4] = [
    ImbalancePreset {
        name: "balanced",
        k_in_query: 15,
        k_out_query: 15,
    },
    ImbalancePreset {
        name: "ood20",
        k_in_query: 24,
        k_out_query: 6,
    },
    ImbalancePreset {
        name: "ood50",
        k_in_query: 15,
        k_out_query: 15,
    },
    ImbalancePreset {
        name: "ood80",
        k_in_query: 6,
        k_out_query: 24,
    },
];

pub fn imbalance_presets() -> &'static [ImbalancePreset] {
    &PRESETS
}

pub fn preset(name: &str) -> Option<ImbalancePreset> {
    PRESETS.iter().copied().find(|p| p.name == name)
}

/// What inference is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub n_in: usize,
    pub support: Vec<FeatureVec>,
    /// Class index in `0..n_in` for each support row.
    pub support_labels: Vec<usize>,
    pub query: Vec<FeatureVec>,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.support
            .first()
            .or_else(|| self.query.first())
            .map_or(0, FeatureVec::dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryTruth {
    Inlier(usize),
    Outlier,
}

impl QueryTruth {
    /// `-1` for inliers, `+1` for outliers.
    pub fn flag(self) -> i8 {
        match self {
            QueryTruth::Inlier(_) => -1,
            QueryTruth::Outlier => 1,
        }
    }

    pub fn is_outlier(self) -> bool {
        matches!(self, QueryTruth::Outlier)
    }

    pub fn class_index(self) -> Option<usize> {
        match self {
            QueryTruth::Inlier(c) => Some(c),
            QueryTruth::Outlier => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub query: Vec<QueryTruth>,
    pub inlier_classes: Vec<String>,
    pub outlier_classes: Vec<String>,
    /// Pool record index of every support row, then every query row.
    pub support_records: Vec<usize>,
    pub query_records: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub truth: GroundTruth,
}

/// Samples one episode.
///
/// Draw order from `Rng::new(spec.seed)`: one shuffle of all class positions
/// (the first `n_in` become inliers, the next `n_out_classes` outliers); then
/// per inlier class a shuffle of its members (first `k_shot` to support, next
/// `k_in_query` to query); then per outlier class a shuffle of its members
/// (first `k_out_query` to query); finally a shuffle of the mixed query.
pub fn sample_episode(pool: &FeatureSet, spec: &EpisodeSpec) -> Result<Episode> {
    spec.validate()?;
    let needed = spec.n_in + spec.n_out_classes;
    if pool.num_classes() < needed {
        return Err(Error::Sampling(format!(
            "pool has {} classes, episode needs {needed}",
            pool.num_classes()
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let chosen = rng.choose_indices(pool.num_classes(), needed);
    let (inlier_pos, outlier_pos) = chosen.split_at(spec.n_in);

    let mut support = Vec::with_capacity(spec.support_size());
    let mut support_labels = Vec::with_capacity(spec.support_size());
    let mut support_records = Vec::with_capacity(spec.support_size());
    // (record index, truth) before shuffling
    let mut query: Vec<(usize, QueryTruth)> = Vec::with_capacity(spec.query_size());

    for (class_idx, &pos) in inlier_pos.iter().enumerate() {
        let members = pool.class_members(pos);
        let want = spec.k_shot + spec.k_in_query;
        if members.len() < want {
            return Err(Error::Sampling(format!(
                "inlier class `{}` has {} samples, needs {want}",
                pool.classes()[pos],
                members.len()
            )));
        }
        let picks = rng.choose_indices(members.len(), want);
        for &p in &picks[..spec.k_shot] {
            support.push(pool.records()[members[p]].feature.clone());
            support_labels.push(class_idx);
            support_records.push(members[p]);
        }
        for &p in &picks[spec.k_shot..] {
            query.push((members[p], QueryTruth::Inlier(class_idx)));
        }
    }
    for &pos in outlier_pos {
        let members = pool.class_members(pos);
        if members.len() < spec.k_out_query {
            return Err(Error::Sampling(format!(
                "outlier class `{}` has {} samples, needs {}",
                pool.classes()[pos],
                members.len(),
                spec.k_out_query
            )));
        }
        for p in rng.choose_indices(members.len(), spec.k_out_query) {
            query.push((members[p], QueryTruth::Outlier));
        }
    }
    rng.shuffle(&mut query);

    let class_names = |positions: &[usize]| {
        positions
            .iter()
            .map(|&p| pool.classes()[p].clone())
            .collect::<Vec<_>>()
    };
    Ok(Episode {
        task: Task {
            n_in: spec.n_in,
            support,
            support_labels,
            query: query
                .iter()
                .map(|&(r, _)| pool.records()[r].feature.clone())
                .collect(),
        },
        truth: GroundTruth {
            query: query.iter().map(|&(_, t)| t).collect(),
            inlier_classes: class_names(inlier_pos),
            outlier_classes: class_names(outlier_pos),
            support_records,
            query_records: query.iter().map(|&(r, _)| r).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_features, SyntheticSpec};

    fn pool() -> FeatureSet {
        synth_gaussian_features(&SyntheticSpec {
            num_classes: 12,
            samples_per_class: 40,
            dim: 4,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn flagship_episode_sizes() {
        let ep = sample_episode(&pool(), &EpisodeSpec::default()).unwrap();
        assert_eq!(ep.task.support.len(), 25);
        assert_eq!(ep.task.query.len(), 150);
        assert_eq!(ep.truth.query.len(), 150);
        assert_eq!(ep.truth.query.iter().filter(|t| t.is_outlier()).count(), 75);
    }

    #[test]
    fn closed_set_reduction() {
        let spec = EpisodeSpec {
            k_out_query: 0,
            ..Default::default()
        };
        let ep = sample_episode(&pool(), &spec).unwrap();
        assert_eq!(ep.task.query.len(), 75);
        assert!(ep.truth.query.iter().all(|t| t.flag() == -1));
    }

    #[test]
    fn ood20_mix() {
        let spec = EpisodeSpec {
            k_in_query: 24,
            k_out_query: 6,
            ..Default::default()
        };
        let ep = sample_episode(&pool(), &spec).unwrap();
        let outliers = ep.truth.query.iter().filter(|t| t.is_outlier()).count();
        assert_eq!(ep.task.query.len(), 150);
        assert_eq!(outliers as f64 / 150.0, 0.2);
    }

    #[test]
    fn presets() {
        let names: Vec<_> = imbalance_presets().iter().map(|p| p.name).collect();
        assert_eq!(names, ["balanced", "ood20", "ood50", "ood80"]);
        assert_eq!(preset("ood20").unwrap().outlier_fraction(), 0.2);
        assert_eq!(preset("ood80").unwrap().outlier_fraction(), 0.8);
        assert_eq!(preset("balanced").unwrap().outlier_fraction(), 0.5);
        let base = EpisodeSpec::default();
        for p in imbalance_presets() {
            assert_eq!(base.with_preset(p).query_size(), 150);
        }
        assert!(preset("ood99").is_none());
    }

    #[test]
    fn sampling_errors() {
        let small = synth_gaussian_features(&SyntheticSpec {
            num_classes: 6,
            samples_per_class: 10,
            dim: 3,
            ..Default::default()
        })
        .unwrap();
        let err = sample_episode(&small, &EpisodeSpec::default()).unwrap_err();
        assert!(err.to_string().contains("6 classes"), "{err}");
        let spec = EpisodeSpec {
            n_out_classes: 1,
            ..Default::default()
        };
        let err = sample_episode(&small, &spec).unwrap_err();
        assert!(err.to_string().contains("needs 20"), "{err}");
        assert!(sample_episode(&small, &EpisodeSpec { n_in: 1, ..spec }).is_err());
    }

    #[test]
    fn structure_invariants_hold_across_seeds() {
        let pool = pool();
        for seed in 0..50 {
            let spec = EpisodeSpec {
                seed,
                k_in_query: 7,
                k_out_query: 4,
                ..Default::default()
            };
            let ep = sample_episode(&pool, &spec).unwrap();
            let t = &ep.truth;
            for c in &t.inlier_classes {
                assert!(!t.outlier_classes.contains(c));
            }
            for r in &t.query_records {
                assert!(!t.support_records.contains(r));
            }
            let mut uniq = t.query_records.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), t.query_records.len());
            for class in 0..spec.n_in {
                let s = ep
                    .task
                    .support_labels
                    .iter()
                    .filter(|&&l| l == class)
                    .count();
                let q = t
                    .query
                    .iter()
                    .filter(|q| q.class_index() == Some(class))
                    .count();
                assert_eq!((s, q), (5, 7));
            }
            let records = pool.records();
            for (r, truth) in t.query_records.iter().zip(&t.query) {
                let label = &records[*r].class_label;
                match truth {
                    QueryTruth::Inlier(c) => assert_eq!(label, &t.inlier_classes[*c]),
                    QueryTruth::Outlier => assert!(t.outlier_classes.contains(label)),
                }
            }
            assert_eq!(sample_episode(&pool, &spec).unwrap(), ep);
        }
    }
}
