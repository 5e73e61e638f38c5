//! Open-set metrics with outliers as the positive class.
//!
//! All threshold sweeps treat groups of equal scores atomically: a threshold
//! cannot separate two samples with the same score.

use crate::episodes::QueryTruth;
use crate::error::{Error, Result};

/// Recall level for [`precision_at_recall`] in reports.
pub const REPORT_RECALL: f64 = 0.9;

const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub outlier_scores: Vec<f64>,
    pub predictions: Vec<usize>,
    pub truth: Vec<QueryTruth>,
}

impl EpisodeOutcome {
    pub fn new(
        outlier_scores: Vec<f64>,
        predictions: Vec<usize>,
        truth: Vec<QueryTruth>,
    ) -> Result<Self> {
        if outlier_scores.len() != truth.len() || predictions.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} scores, {} predictions, {} truth rows",
                outlier_scores.len(),
                predictions.len(),
                truth.len()
            )));
        }
        if let Some((index, &value)) = outlier_scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite())
        {
            return Err(Error::NonFinite { index, value });
        }
        Ok(EpisodeOutcome {
            outlier_scores,
            predictions,
            truth,
        })
    }

    pub fn positives(&self) -> Vec<bool> {
        self.truth.iter().map(|t| t.is_outlier()).collect()
    }

    pub fn metrics(&self) -> MetricValues {
        let pos = self.positives();
        MetricValues {
            acc: accuracy(self).ok(),
            auroc: auroc(&self.outlier_scores, &pos).ok(),
            aupr: aupr(&self.outlier_scores, &pos).ok(),
            prec_at_90: precision_at_recall(&self.outlier_scores, &pos, REPORT_RECALL).ok(),
        }
    }
}

/// Per-episode metric values; `None` where a metric is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricValues {
    pub acc: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub prec_at_90: Option<f64>,
}

impl MetricValues {
    pub const NAMES: [&'static str; 4] = ["acc", "auroc", "aupr", "prec_at_90"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "acc" => self.acc,
            "auroc" => self.auroc,
            "aupr" => self.aupr,
            "prec_at_90" => self.prec_at_90,
            _ => None,
        }
    }

    pub fn as_array(&self) -> [Option<f64>; 4] {
        [self.acc, self.auroc, self.aupr, self.prec_at_90]
    }
}

/// Fraction of true inliers assigned their own class; outliers are ignored.
pub fn accuracy(outcome: &EpisodeOutcome) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (t, &p) in outcome.truth.iter().zip(&outcome.predictions) {
        if let QueryTruth::Inlier(c) = t {
            total += 1;
            correct += usize::from(*c == p);
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy needs at least one inlier"));
    }
    Ok(correct as f64 / total as f64)
}

/// `(positives, negatives)` per tie group in descending score order.
fn group_counts(scores: &[f64], positives: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if positives[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

fn check_inputs(scores: &[f64], positives: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let p = positives.iter().filter(|&&x| x).count() as u64;
    Ok((p, positives.len() as u64 - p))
}

/// Probability that a random outlier outscores a random inlier, ties
/// counting one half. Computed from exact integer pair counts.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (p, n) = check_inputs(scores, positives)?;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both outliers and inliers",
        ));
    }
    // twice the Mann-Whitney U, so ties stay integral
    let mut twice_u = 0u64;
    let mut neg_below: u64 = n;
    for (gp, gn) in group_counts(scores, positives) {
        neg_below -= gn;
        twice_u += 2 * gp * neg_below + gp * gn;
    }
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Step-wise area under the precision-recall curve, `Σ (R_k - R_{k-1}) P_k`
/// over descending tie groups.
pub fn aupr(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (p, _) = check_inputs(scores, positives)?;
    if p == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one outlier"));
    }
    let total = p as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (gp, gn) in group_counts(scores, positives) {
        tp += gp;
        fp += gn;
        let recall = tp as f64 / total;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Precision of the shortest descending-score prefix whose recall reaches `r`.
pub fn precision_at_recall(scores: &[f64], positives: &[bool], r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::param(
            "r",
            format!("recall level must lie in (0, 1], got {r}"),
        ));
    }
    let (p, _) = check_inputs(scores, positives)?;
    if p == 0 {
        return Err(Error::UndefinedMetric(
            "precision at recall needs at least one outlier",
        ));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for (gp, gn) in group_counts(scores, positives) {
        tp += gp;
        fp += gn;
        if tp as f64 / p as f64 >= r {
            return Ok(tp as f64 / (tp + fp) as f64);
        }
    }
    unreachable!("the full set has recall 1")
}

/// Mean and normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    /// Values skipped because the metric was undefined.
    pub excluded: usize,
}

impl Summary {
    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }

    pub fn excludes_zero(&self) -> bool {
        self.n > 1 && (self.lower() > 0.0 || self.upper() < 0.0)
    }
}

/// Aggregates defined values; `n = 1` gives a zero half-width.
pub fn aggregate(values: &[Option<f64>]) -> Option<Summary> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    if n == 0 {
        return None;
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z_95 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        mean,
        ci95,
        n,
        excluded: values.len() - n,
    })
}

/// Summary of `a_e - b_e` over episodes where both are defined.
pub fn paired_difference(a: &[Option<f64>], b: &[Option<f64>]) -> Option<Summary> {
    let diffs: Vec<Option<f64>> = a.iter().zip(b).map(|(x, y)| Some((*x)? - (*y)?)).collect();
    aggregate(&diffs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub acc: Option<Summary>,
    pub auroc: Option<Summary>,
    pub aupr: Option<Summary>,
    pub prec_at_90: Option<Summary>,
}

impl MetricsSummary {
    pub fn from_episodes(values: &[MetricValues]) -> Self {
        let col = |f: fn(&MetricValues) -> Option<f64>| {
            aggregate(&values.iter().map(f).collect::<Vec<_>>())
        };
        MetricsSummary {
            acc: col(|m| m.acc),
            auroc: col(|m| m.auroc),
            aupr: col(|m| m.aupr),
            prec_at_90: col(|m| m.prec_at_90),
        }
    }

    pub fn get(&self, name: &str) -> Option<Summary> {
        match name {
            "acc" => self.acc,
            "auroc" => self.auroc,
            "aupr" => self.aupr,
            "prec_at_90" => self.prec_at_90,
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn outcome(preds: &[usize], truth: &[QueryTruth]) -> EpisodeOutcome {
        EpisodeOutcome::new(vec![0.0; truth.len()], preds.to_vec(), truth.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        use QueryTruth::*;
        let t = [Inlier(0), Inlier(1), Outlier, Inlier(2)];
        assert_eq!(accuracy(&outcome(&[0, 1, 4, 2], &t)).unwrap(), 1.0);
        assert_eq!(accuracy(&outcome(&[0, 1, 0, 2], &t)).unwrap(), 1.0);
        assert_eq!(accuracy(&outcome(&[0, 0, 0, 0], &t)).unwrap(), 1.0 / 3.0);
        assert!(accuracy(&outcome(&[0], &[Outlier])).is_err());

        let mut rng = Rng::new(5);
        let n = 10_000;
        let truth: Vec<QueryTruth> = (0..n).map(|_| Inlier(rng.below(5) as usize)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(5) as usize).collect();
        assert!((accuracy(&outcome(&preds, &truth)).unwrap() - 0.2).abs() < 0.03);
    }

    #[test]
    fn auroc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1, f64::NAN], &[true, false]).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(
            aupr(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        // one positive ranked second: recall jumps to 1 at precision 1/2
        assert_eq!(aupr(&[0.9, 0.5, 0.1], &[false, true, false]).unwrap(), 0.5);
        assert!(aupr(&[0.1], &[false]).is_err());

        let mut rng = Rng::new(8);
        let n = 10_000;
        let pos: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let frac = pos.iter().filter(|&&p| p).count() as f64 / n as f64;
        assert!((aupr(&scores, &pos).unwrap() - frac).abs() < 0.05);
    }

    #[test]
    fn precision_at_recall_examples() {
        let pos: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(precision_at_recall(&scores, &pos, 0.9).unwrap(), 1.0);
        let p = [true, false, false, true, false];
        assert_eq!(precision_at_recall(&[1.0; 5], &p, 0.9).unwrap(), 0.4);
        assert!(precision_at_recall(&[1.0], &[true], 0.0).is_err());
        assert!(precision_at_recall(&[1.0], &[true], 1.1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[Some(0.7)]).unwrap();
        assert_eq!((s.mean, s.ci95, s.n), (0.7, 0.0, 1));
        assert!(!s.excludes_zero());
        let s = aggregate(&[Some(0.25); 10]).unwrap();
        assert_eq!((s.mean, s.ci95), (0.25, 0.0));
        let s = aggregate(&[Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!((s.mean, s.n, s.excluded), (2.0, 2, 1));
        assert!((s.ci95 - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert!(aggregate(&[None, None]).is_none());
        let d = paired_difference(
            &[Some(1.0), Some(2.0), None],
            &[Some(0.5), Some(1.0), Some(9.0)],
        )
        .unwrap();
        assert_eq!((d.mean, d.n), (0.75, 2));
    }

    /// Brute force: try every threshold from the top, keep the first that reaches `r`.
    fn prefix_scan(s: &[f64], p: &[bool], r: f64) -> f64 {
        let total = p.iter().filter(|&&x| x).count() as f64;
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        for t in thresholds {
            let tp = s.iter().zip(p).filter(|(v, &y)| **v >= t && y).count();
            let sel = s.iter().filter(|v| **v >= t).count();
            if tp as f64 / total >= r {
                return tp as f64 / sel as f64;
            }
        }
        unreachable!()
    }

    fn prefix_len(s: &[f64], p: &[bool], r: f64) -> usize {
        let total = p.iter().filter(|&&x| x).count() as f64;
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        for t in thresholds {
            let tp = s.iter().zip(p).filter(|(v, &y)| **v >= t && y).count();
            if tp as f64 / total >= r {
                return s.iter().filter(|v| **v >= t).count();
            }
        }
        unreachable!()
    }

    #[test]
    fn precision_can_rise_with_recall() {
        // a tied top group holding a negative, then a lone positive below it
        let s = [0.0, 0.125, 0.125];
        let p = [true, true, false];
        assert_eq!(precision_at_recall(&s, &p, 0.5).unwrap(), 0.5);
        assert_eq!(precision_at_recall(&s, &p, 0.9).unwrap(), 2.0 / 3.0);
    }

    fn instance(max_n: usize, levels: u64) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2..=max_n).prop_flat_map(move |n| {
            (
                prop::collection::vec((0..levels).prop_map(move |v| v as f64 / levels as f64), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_complement((s, p) in instance(60, 12)) {
            prop_assume!(p.iter().any(|&x| x) && p.iter().any(|&x| !x));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auroc(&s, &p).unwrap() + auroc(&neg, &p).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auroc_monotone_invariance((s, p) in instance(60, 12)) {
            prop_assume!(p.iter().any(|&x| x) && p.iter().any(|&x| !x));
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&s, &p).unwrap(), auroc(&t, &p).unwrap());
        }

        #[test]
        fn prec_at_recall_prefix_grows_with_r((s, p) in instance(40, 8), r1 in 0.01f64..1.0, r2 in 0.01f64..1.0) {
            prop_assume!(p.iter().any(|&x| x));
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            // the selected prefix can only get longer as r rises
            prop_assert!(prefix_len(&s, &p, lo) <= prefix_len(&s, &p, hi));
            prop_assert_eq!(precision_at_recall(&s, &p, lo).unwrap(), prefix_scan(&s, &p, lo));
        }

        #[test]
        fn permutation_invariance((s, p) in instance(40, 8), seed in any::<u64>()) {
            prop_assume!(p.iter().any(|&x| x) && p.iter().any(|&x| !x));
            let mut idx: Vec<usize> = (0..s.len()).collect();
            Rng::new(seed).shuffle(&mut idx);
            let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let p2: Vec<bool> = idx.iter().map(|&i| p[i]).collect();
            prop_assert_eq!(auroc(&s, &p).unwrap(), auroc(&s2, &p2).unwrap());
            prop_assert_eq!(aupr(&s, &p).unwrap(), aupr(&s2, &p2).unwrap());
            prop_assert_eq!(
                precision_at_recall(&s, &p, 0.9).unwrap(),
                precision_at_recall(&s2, &p2, 0.9).unwrap()
            );
        }
    }
}
