//! Inductive reference methods.

use crate::episodes::Task;
use crate::error::{Error, Result};
use crate::model::{argmax, center_with_mean, cosines, init_state, Method};
use crate::numerics::{self, euclidean_distance};

pub const DEFAULT_KNN_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub predictions: Vec<usize>,
    /// Higher means more outlier-like.
    pub outlier_scores: Vec<f64>,
}

fn support_mean(task: &Task) -> Vec<f64> {
    let mut mu = vec![0.0; task.dim()];
    for z in &task.support {
        for (m, v) in mu.iter_mut().zip(z.iter()) {
            *m += v;
        }
    }
    let n = task.support.len().max(1) as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Prototype classifier with MaxProb outlier scores.
///
/// Features are centered on the support mean only, so each query is scored
/// without looking at any other query row.
pub fn simpleshot_maxprob(task: &Task, eta0: f64) -> Result<TaskScores> {
    let te = center_with_mean(task, &support_mean(task));
    let state = init_state(&te, Method::Ostim, 0.5, eta0)?;
    let query = te
        .features()
        .slice_rows(te.n_support()..te.features().rows());
    let cos = cosines(&query, &state.prototypes)?.cos;
    let mut predictions = Vec::with_capacity(query.rows());
    let mut outlier_scores = Vec::with_capacity(query.rows());
    for row in cos.iter_rows() {
        let mut p: Vec<f64> = row.iter().map(|c| eta0 * c).collect();
        numerics::softmax_in_place(&mut p);
        let best = argmax(&p);
        predictions.push(best);
        outlier_scores.push(1.0 - p[best]);
    }
    Ok(TaskScores {
        predictions,
        outlier_scores,
    })
}

/// Support indices sorted by distance to `query`, ties by index.
fn neighbors(task: &Task, query: &[f64]) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = task
        .support
        .iter()
        .enumerate()
        .map(|(i, s)| (euclidean_distance(query, s), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

fn check_k(task: &Task, k: usize) -> Result<()> {
    if k == 0 || k > task.support.len() {
        return Err(Error::param(
            "k",
            format!("must lie in 1..={}, got {k}", task.support.len()),
        ));
    }
    Ok(())
}

/// Mean Euclidean distance from each query to its `k` nearest support rows.
///
/// Distances are translation invariant, so centering does not change them.
pub fn knn_outlier_scores(task: &Task, k: usize) -> Result<Vec<f64>> {
    check_k(task, k)?;
    Ok(task
        .query
        .iter()
        .map(|q| neighbors(task, q)[..k].iter().map(|(d, _)| d).sum::<f64>() / k as f64)
        .collect())
}

/// kNN outlier scores plus majority-vote class predictions.
///
/// Vote ties go to the tied class holding the nearest neighbor.
pub fn knn_baseline(task: &Task, k: usize) -> Result<TaskScores> {
    check_k(task, k)?;
    let mut predictions = Vec::with_capacity(task.query.len());
    let mut outlier_scores = Vec::with_capacity(task.query.len());
    for q in &task.query {
        let nn = neighbors(task, q);
        let near = &nn[..k];
        let mut votes = vec![0usize; task.n_in];
        for &(_, i) in near {
            votes[task.support_labels[i]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let class = near
            .iter()
            .map(|&(_, i)| task.support_labels[i])
            .find(|&c| votes[c] == top)
            .unwrap();
        predictions.push(class);
        outlier_scores.push(near.iter().map(|(d, _)| d).sum::<f64>() / k as f64);
    }
    Ok(TaskScores {
        predictions,
        outlier_scores,
    })
}
