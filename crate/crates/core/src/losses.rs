//! Information-maximization objectives for both heads.
//!
//! Entropy-like sums are stored with the sign they have as raw
//! `Σ p log p` sums (all `≤ 0`). [`total_loss`] combines them so that plain
//! gradient descent lowers the support cross-entropy, sharpens query
//! predictions and spreads the marginal:
//!
//! * OSTIM: `-(λce/|S|)·CE + λma·MA - (λco/|Q|)·CO`
//! * EOL: `-(λce/|S|)·CE + (λma/(N+1))·MÅ - (λco/|Q|)·CO̊`

use crate::error::{Error, Result};
use crate::model::{check_b, InlierOrientation, Method, PosteriorTable};
use crate::numerics::Matrix;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

pub(crate) fn xlogx(p: f64) -> f64 {
    p * p.max(PROB_FLOOR).ln()
}

/// Derivative of [`xlogx`] including the floor.
pub(crate) fn xlogx_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        p.ln() + 1.0
    } else {
        PROB_FLOOR.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_ma: f64,
    pub lambda_co: f64,
    pub b: f64,
    pub method: Method,
    pub orientation: InlierOrientation,
}

impl LossWeights {
    pub fn new(method: Method) -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_ma: 1.0,
            lambda_co: 1.0,
            b: 0.5,
            method,
            orientation: InlierOrientation::default(),
        }
    }

    pub fn with_b(self, b: f64) -> Self {
        LossWeights { b, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_ma", self.lambda_ma),
            ("lambda_co", self.lambda_co),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(
                    name,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if self.lambda_ce + self.lambda_ma + self.lambda_co <= 0.0 {
            return Err(Error::param(
                "lambda_ce",
                "at least one lambda must be positive",
            ));
        }
        if self.method == Method::Eol {
            check_b(self.b)?;
        }
        Ok(())
    }
}

/// A sum split into its inlier-column and outlier-column parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub total: f64,
    pub inlier: f64,
    pub outlier: f64,
}

impl Split {
    fn new(inlier: f64, outlier: f64) -> Self {
        Split {
            total: inlier + outlier,
            inlier,
            outlier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// `Σ_i log p_{i, y_i}`.
    pub value: f64,
    /// How many true-label probabilities hit [`PROB_FLOOR`].
    pub clamped: usize,
}

pub fn cross_entropy(support_probs: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    if support_probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} support rows but {} labels",
            support_probs.rows(),
            labels.len()
        )));
    }
    let mut value = 0.0;
    let mut clamped = 0;
    for (row, &y) in support_probs.iter_rows().zip(labels) {
        let p = *row.get(y).ok_or_else(|| {
            Error::Shape(format!("label {y} out of range for {} classes", row.len()))
        })?;
        if p <= PROB_FLOOR {
            clamped += 1;
        }
        value += p.max(PROB_FLOOR).ln();
    }
    Ok(CrossEntropy { value, clamped })
}

/// `Σ_j p̂_j log p̂_j` over all `N+1` marginals, split at the outlier column.
pub fn ostim_ma(marginals: &[f64]) -> Split {
    weighted_ma(marginals, 1.0, 1.0)
}

/// Marginal term with one weight for inlier columns and one for the outlier.
pub fn weighted_ma(marginals: &[f64], w_inlier: f64, w_outlier: f64) -> Split {
    let (inl, out) = marginals.split_at(marginals.len() - 1);
    let inlier = inl.iter().map(|&p| w_inlier * xlogx(p)).sum();
    Split::new(inlier, w_outlier * xlogx(out[0]))
}

/// `Σ_i Σ_j p_ij log p_ij` over all `N+1` columns, split at the outlier column.
pub fn ostim_co(table: &Matrix) -> Split {
    let n = table.cols() - 1;
    let mut inlier = 0.0;
    let mut outlier = 0.0;
    for row in table.iter_rows() {
        inlier += row[..n].iter().map(|&p| xlogx(p)).sum::<f64>();
        outlier += xlogx(row[n]);
    }
    Split::new(inlier, outlier)
}

/// `(w_j, w_{N+1}) = (N / (1 - b), 1 / b)`.
pub fn class_weights(b: f64, n_in: usize) -> Result<(f64, f64)> {
    check_b(b)?;
    Ok((n_in as f64 / (1.0 - b), 1.0 / b))
}

pub fn eol_ma(marginals: &[f64], b: f64) -> Result<Split> {
    let (w_in, w_out) = class_weights(b, marginals.len() - 1)?;
    Ok(weighted_ma(marginals, w_in, w_out))
}

/// `Σ_i Σ_{j ≤ N} p_ij log p_ij`; the outlier column is ignored if present.
pub fn eol_co(table: &Matrix, n_in: usize) -> f64 {
    table
        .iter_rows()
        .map(|row| row[..n_in].iter().map(|&p| xlogx(p)).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ma: Split,
    pub co: Split,
    pub total: f64,
    pub ce_clamped: usize,
}

/// Coefficients multiplying `(CE, MA, CO)` in the total.
pub(crate) fn coefficients(
    weights: &LossWeights,
    n_support: usize,
    n_query: usize,
    n_in: usize,
) -> (f64, f64, f64) {
    let s = n_support.max(1) as f64;
    let q = n_query.max(1) as f64;
    let ma = match weights.method {
        Method::Ostim => weights.lambda_ma,
        Method::Eol => weights.lambda_ma / (n_in as f64 + 1.0),
    };
    (-weights.lambda_ce / s, ma, -weights.lambda_co / q)
}

/// Combines support cross-entropy and query entropy terms for `weights.method`.
///
/// `support_probs` are plain inlier softmax rows; `query` must come from the
/// matching head.
pub fn total_loss(
    support_probs: &Matrix,
    support_labels: &[usize],
    query: &PosteriorTable,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let n_in = query.n_in();
    if support_probs.cols() != n_in {
        return Err(Error::Shape(format!(
            "support has {} classes, query head has {n_in}",
            support_probs.cols()
        )));
    }
    let ce = cross_entropy(support_probs, support_labels)?;
    let (ma, co) = match weights.method {
        Method::Ostim => (ostim_ma(&query.marginals), ostim_co(&query.probs)),
        Method::Eol => {
            let co = eol_co(&query.probs, n_in);
            (eol_ma(&query.marginals, weights.b)?, Split::new(co, 0.0))
        }
    };
    let (c_ce, c_ma, c_co) = coefficients(weights, support_probs.rows(), query.probs.rows(), n_in);
    Ok(LossBreakdown {
        ce: ce.value,
        ma,
        co,
        total: c_ce * ce.value + c_ma * ma.total + c_co * co.total,
        ce_clamped: ce.clamped,
    })
}
