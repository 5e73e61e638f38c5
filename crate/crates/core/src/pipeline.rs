//! One entry point for scoring a task with any method.

use std::fmt;

use crate::baselines::{knn_baseline, simpleshot_maxprob, TaskScores, DEFAULT_KNN_K};
use crate::episodes::{Episode, Task};
use crate::error::Result;
use crate::losses::LossWeights;
use crate::metrics::EpisodeOutcome;
use crate::model::{calibrated_logits, center_episode, query_posteriors, Method, DEFAULT_ETA0};
use crate::optim::{transduce_embedding, OptimConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// Transductive optimization followed by the method's posterior head.
    Transductive {
        weights: LossWeights,
        optim: OptimConfig,
    },
    SimpleShot {
        eta0: f64,
    },
    Knn {
        k: usize,
    },
}

impl Scorer {
    pub fn transductive(method: Method) -> Self {
        Scorer::Transductive {
            weights: LossWeights::new(method),
            optim: OptimConfig::default(),
        }
    }

    pub fn simpleshot() -> Self {
        Scorer::SimpleShot { eta0: DEFAULT_ETA0 }
    }

    pub fn knn() -> Self {
        Scorer::Knn { k: DEFAULT_KNN_K }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Transductive { weights, .. } => match weights.method {
                Method::Eol => "eol",
                Method::Ostim => "ostim",
            },
            Scorer::SimpleShot { .. } => "simpleshot",
            Scorer::Knn { .. } => "knn",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class predictions and outlier scores for every query row.
pub fn score_task(task: &Task, scorer: &Scorer) -> Result<TaskScores> {
    match scorer {
        Scorer::Transductive { weights, optim } => {
            let te = center_episode(task);
            let (state, _) = transduce_embedding(&te, weights, optim)?;
            let logits = calibrated_logits(&state, &te)?;
            let table = query_posteriors(&state, &logits, te.n_support())?;
            let n = te.n_query();
            Ok(TaskScores {
                predictions: (0..n).map(|i| table.predicted_class(i)).collect(),
                outlier_scores: (0..n).map(|i| table.outlier_probability(i)).collect(),
            })
        }
        Scorer::SimpleShot { eta0 } => simpleshot_maxprob(task, *eta0),
        Scorer::Knn { k } => knn_baseline(task, *k),
    }
}

/// Scores the task half and pairs the result with the ground truth.
pub fn run_episode(episode: &Episode, scorer: &Scorer) -> Result<EpisodeOutcome> {
    let s = score_task(&episode.task, scorer)?;
    EpisodeOutcome::new(s.outlier_scores, s.predictions, episode.truth.query.clone())
}
