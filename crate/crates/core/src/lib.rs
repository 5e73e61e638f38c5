//! Transductive open-set few-shot recognition on fixed feature vectors.
//!
//! Episodes hold `N` inlier classes with a few labeled support shots and an
//! unlabeled query mixing inliers with samples from unseen classes. The
//! transductive methods fit prototypes and calibration on the whole query
//! before scoring it; inductive baselines are included for comparison.

pub mod baselines;
pub mod data;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod rng;

pub use baselines::TaskScores;
pub use data::{FeatureSet, Record, SyntheticSpec, TableFormat};
pub use episodes::{Episode, EpisodeSpec, GroundTruth, ImbalancePreset, QueryTruth, Task};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{EpisodeOutcome, MetricValues, MetricsSummary, Summary};
pub use model::{InlierOrientation, Method, ModelState, PosteriorTable, TaskEmbedding};
pub use numerics::{FeatureVec, Matrix};
pub use optim::{OptimConfig, ParamMask};
pub use pipeline::{run_episode, score_task, Scorer};
pub use rng::Rng;
