//! Task-conditioned features, model state and the two probability heads.

use std::fmt;
use std::str::FromStr;

use crate::episodes::Task;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, NORM_FLOOR};

/// Default initial logit scale; cosine logits live in `[-1, 1]`.
pub const DEFAULT_ETA0: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ostim,
    Eol,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ostim => "ostim",
            Method::Eol => "eol",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ostim" => Ok(Method::Ostim),
            "eol" => Ok(Method::Eol),
            _ => Err(Error::param("method", format!("unknown method `{s}`"))),
        }
    }
}

/// Sign of the log-sum-exp term in the EOL inlier probability.
///
/// `AsWritten` is `σ(-LSE(l) + ln N - ln b)`, which decreases as logits
/// grow. `Flipped` is `σ(LSE(l) - ln N - ln b)`: logits enter with the
/// opposite sign while the `b` prior term is unchanged, so higher similarity
/// to a prototype means a more inlier-like sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InlierOrientation {
    AsWritten,
    #[default]
    Flipped,
}

impl InlierOrientation {
    pub(crate) fn sign(self) -> f64 {
        match self {
            InlierOrientation::AsWritten => -1.0,
            InlierOrientation::Flipped => 1.0,
        }
    }
}

impl fmt::Display for InlierOrientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InlierOrientation::AsWritten => "as-written",
            InlierOrientation::Flipped => "flipped",
        })
    }
}

impl FromStr for InlierOrientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(InlierOrientation::AsWritten),
            "flipped" => Ok(InlierOrientation::Flipped),
            _ => Err(Error::param(
                "orientation",
                format!("expected as-written|flipped, got `{s}`"),
            )),
        }
    }
}

/// Features centered on the task mean; support rows first, then query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding {
    pub mu: Vec<f64>,
    pub n_in: usize,
    pub support_labels: Vec<usize>,
    features: Matrix,
    n_support: usize,
}

impl TaskEmbedding {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn n_query(&self) -> usize {
        self.features.rows() - self.n_support
    }

    /// All centered rows, support first.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn support(&self) -> impl Iterator<Item = &[f64]> {
        self.features.iter_rows().take(self.n_support)
    }

    pub fn query(&self) -> impl Iterator<Item = &[f64]> {
        self.features.iter_rows().skip(self.n_support)
    }

    /// Same embedding with the query rows reordered by `perm`.
    pub fn permute_query(&self, perm: &[usize]) -> TaskEmbedding {
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.features
                .row_mut(self.n_support + dst)
                .copy_from_slice(self.features.row(self.n_support + src));
        }
        out
    }
}

/// Subtracts the mean of all support and query features.
pub fn center_episode(task: &Task) -> TaskEmbedding {
    center_with_mean(task, &task_mean(task))
}

fn task_mean(task: &Task) -> Vec<f64> {
    let dim = task.dim();
    let n = (task.support.len() + task.query.len()).max(1) as f64;
    let mut mu = vec![0.0; dim];
    for z in task.support.iter().chain(&task.query) {
        for (m, v) in mu.iter_mut().zip(z.iter()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Centers every row on a caller-supplied mean.
pub fn center_with_mean(task: &Task, mu: &[f64]) -> TaskEmbedding {
    let dim = mu.len();
    let rows = task.support.len() + task.query.len();
    let mut features = Matrix::zeros(rows, dim);
    for (i, z) in task.support.iter().chain(&task.query).enumerate() {
        for (out, (v, m)) in features.row_mut(i).iter_mut().zip(z.iter().zip(mu)) {
            *out = v - m;
        }
    }
    TaskEmbedding {
        mu: mu.to_vec(),
        n_in: task.n_in,
        support_labels: task.support_labels.clone(),
        features,
        n_support: task.support.len(),
    }
}

/// Parameters adapted during transduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// `n_in × D`, in centered feature space.
    pub prototypes: Matrix,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: f64,
    pub method: Method,
    pub orientation: InlierOrientation,
}

impl ModelState {
    pub fn n_in(&self) -> usize {
        self.prototypes.rows()
    }
}

pub(crate) fn check_b(b: f64) -> Result<()> {
    if b > 0.0 && b < 1.0 {
        Ok(())
    } else {
        Err(Error::param("b", format!("must lie in (0, 1), got {b}")))
    }
}

/// Per-class means of the centered support, `eta = eta0`, `delta = 0`.
pub fn init_state(te: &TaskEmbedding, method: Method, b: f64, eta0: f64) -> Result<ModelState> {
    if method == Method::Eol {
        check_b(b)?;
    }
    if !eta0.is_finite() {
        return Err(Error::param("eta0", "must be finite"));
    }
    let n_in = te.n_in;
    let mut prototypes = Matrix::zeros(n_in, te.dim());
    let mut counts = vec![0usize; n_in];
    for (row, &label) in te.support().zip(&te.support_labels) {
        if label >= n_in {
            return Err(Error::Init(format!(
                "support label {label} out of range 0..{n_in}"
            )));
        }
        counts[label] += 1;
        for (p, v) in prototypes.row_mut(label).iter_mut().zip(row) {
            *p += v;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Init(format!("class {j} has no support samples")));
        }
        prototypes
            .row_mut(j)
            .iter_mut()
            .for_each(|p| *p /= count as f64);
    }
    Ok(ModelState {
        prototypes,
        eta: vec![eta0; n_in],
        delta: vec![0.0; n_in],
        b,
        method,
        orientation: InlierOrientation::default(),
    })
}

/// Cosine similarities between every row of `rows` and every prototype,
/// together with the norms used.
#[derive(Debug, Clone)]
pub(crate) struct Cosines {
    pub cos: Matrix,
    pub row_norms: Vec<f64>,
    pub proto_norms: Vec<f64>,
}

fn checked_norms(m: &Matrix) -> Result<Vec<f64>> {
    m.iter_rows()
        .map(|r| {
            let n = numerics::norm(r);
            if n >= NORM_FLOOR {
                Ok(n)
            } else {
                Err(Error::DegenerateVector {
                    norm: n,
                    floor: NORM_FLOOR,
                })
            }
        })
        .collect()
}

pub(crate) fn cosines(rows: &Matrix, prototypes: &Matrix) -> Result<Cosines> {
    if rows.cols() != prototypes.cols() {
        return Err(Error::DimensionMismatch {
            expected: prototypes.cols(),
            found: rows.cols(),
        });
    }
    let row_norms = checked_norms(rows)?;
    let proto_norms = checked_norms(prototypes)?;
    let mut cos = Matrix::zeros(rows.rows(), prototypes.rows());
    for (i, r) in rows.iter_rows().enumerate() {
        for (j, c) in prototypes.iter_rows().enumerate() {
            let v = (numerics::dot(r, c) / (row_norms[i] * proto_norms[j])).clamp(-1.0, 1.0);
            cos.set(i, j, v);
        }
    }
    Ok(Cosines {
        cos,
        row_norms,
        proto_norms,
    })
}

pub(crate) fn apply_calibration(cos: &Matrix, eta: &[f64], delta: &[f64]) -> Matrix {
    let mut l = cos.clone();
    for i in 0..l.rows() {
        for (j, v) in l.row_mut(i).iter_mut().enumerate() {
            *v = eta[j] * *v + delta[j];
        }
    }
    l
}

/// `l_ij = eta_j * cos(z_i, c_j) + delta_j` for every support and query row.
pub fn calibrated_logits(state: &ModelState, te: &TaskEmbedding) -> Result<Matrix> {
    if state.prototypes.cols() != te.dim() || state.n_in() != te.n_in {
        return Err(Error::Shape(format!(
            "state is {}×{}, embedding has {} classes of dim {}",
            state.n_in(),
            state.prototypes.cols(),
            te.n_in,
            te.dim()
        )));
    }
    let c = cosines(te.features(), &state.prototypes)?;
    Ok(apply_calibration(&c.cos, &state.eta, &state.delta))
}

/// Row posteriors over `n_in + 1` columns (last = outlier) and their
/// column means over the whole query set.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub probs: Matrix,
    pub marginals: Vec<f64>,
}

impl PosteriorTable {
    pub fn from_probs(probs: Matrix) -> Self {
        let n = probs.rows().max(1) as f64;
        let mut marginals = vec![0.0; probs.cols()];
        for row in probs.iter_rows() {
            for (m, p) in marginals.iter_mut().zip(row) {
                *m += p;
            }
        }
        marginals.iter_mut().for_each(|m| *m /= n);
        PosteriorTable { probs, marginals }
    }

    pub fn n_in(&self) -> usize {
        self.probs.cols() - 1
    }

    pub fn outlier_probability(&self, i: usize) -> f64 {
        self.probs.get(i, self.n_in())
    }

    /// Most likely inlier class for row `i`.
    pub fn predicted_class(&self, i: usize) -> usize {
        argmax(&self.probs.row(i)[..self.n_in()])
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Plain softmax over inlier columns, row by row.
pub fn inlier_softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        numerics::softmax_in_place(p.row_mut(i));
    }
    p
}

/// Appends `-mean(l_i)` as the outlier logit and takes a softmax over all
/// `n_in + 1` entries.
pub fn ostim_posteriors(query_logits: &Matrix) -> PosteriorTable {
    let n = query_logits.cols();
    let mut probs = Matrix::zeros(query_logits.rows(), n + 1);
    for (i, l) in query_logits.iter_rows().enumerate() {
        let out = probs.row_mut(i);
        out[..n].copy_from_slice(l);
        out[n] = -l.iter().sum::<f64>() / n as f64;
        numerics::softmax_in_place(out);
    }
    PosteriorTable::from_probs(probs)
}

pub(crate) fn eol_argument(lse: f64, n_in: usize, b: f64, orientation: InlierOrientation) -> f64 {
    orientation.sign() * (lse - (n_in as f64).ln()) - b.ln()
}

/// `P(inlier)` per query row from the log-sum-exp of its inlier logits.
pub fn eol_inlier_probability(
    query_logits: &Matrix,
    b: f64,
    orientation: InlierOrientation,
) -> Result<Vec<f64>> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::param("b", format!("must lie in (0, 1], got {b}")));
    }
    let n = query_logits.cols();
    Ok(query_logits
        .iter_rows()
        .map(|l| {
            let a = eol_argument(numerics::log_sum_exp_unchecked(l), n, b, orientation);
            numerics::stable_sigmoid(a)
        })
        .collect())
}

/// Inlier softmax scaled by `P(inlier)`; the last column is `1 - P(inlier)`.
pub fn eol_posteriors(
    query_logits: &Matrix,
    b: f64,
    orientation: InlierOrientation,
) -> Result<PosteriorTable> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::param("b", format!("must lie in (0, 1], got {b}")));
    }
    let n = query_logits.cols();
    let mut probs = Matrix::zeros(query_logits.rows(), n + 1);
    for (i, l) in query_logits.iter_rows().enumerate() {
        let a = eol_argument(numerics::log_sum_exp_unchecked(l), n, b, orientation);
        let inlier = numerics::stable_sigmoid(a);
        let out = probs.row_mut(i);
        out[..n].copy_from_slice(l);
        numerics::softmax_in_place(&mut out[..n]);
        out[..n].iter_mut().for_each(|p| *p *= inlier);
        out[n] = numerics::stable_sigmoid(-a);
    }
    Ok(PosteriorTable::from_probs(probs))
}

/// Query posteriors of whichever head `state.method` selects.
pub fn query_posteriors(
    state: &ModelState,
    logits: &Matrix,
    n_support: usize,
) -> Result<PosteriorTable> {
    let q = logits.slice_rows(n_support..logits.rows());
    match state.method {
        Method::Ostim => Ok(ostim_posteriors(&q)),
        Method::Eol => eol_posteriors(&q, state.b, state.orientation),
    }
}
