//! Transductive gradient descent over prototypes and calibration.
//!
//! Gradients are closed-form. The chain runs
//! `prototypes → cosine → calibration → head → loss`; the task mean is fixed
//! before optimization starts, so centered features are constants.

use crate::episodes::Task;
use crate::error::{Error, Result};
use crate::losses::{
    class_weights, coefficients, total_loss, xlogx_grad, LossBreakdown, LossWeights, PROB_FLOOR,
};
use crate::model::{
    apply_calibration, calibrated_logits, center_episode, cosines, eol_argument, eol_posteriors,
    init_state, inlier_softmax, ostim_posteriors, query_posteriors, Method, ModelState,
    TaskEmbedding, DEFAULT_ETA0,
};
use crate::numerics::{self, stable_sigmoid, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub optimize_eta: bool,
    pub optimize_delta: bool,
    /// Per-block gradient norm ceiling.
    pub grad_clip: Option<f64>,
    pub record_trajectory: bool,
    pub eta0: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            step_size: 0.05,
            iterations: 150,
            optimize_eta: true,
            optimize_delta: true,
            grad_clip: Some(10.0),
            record_trajectory: false,
            eta0: DEFAULT_ETA0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::param(
                "step_size",
                format!("must be finite and non-negative, got {}", self.step_size),
            ));
        }
        if self.iterations < 1 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::param(
                    "grad_clip",
                    format!("must be positive, got {c}"),
                ));
            }
        }
        if !self.eta0.is_finite() {
            return Err(Error::param("eta0", "must be finite"));
        }
        Ok(())
    }

    pub fn mask(&self, method: Method) -> ParamMask {
        let calibrate = method == Method::Eol;
        ParamMask {
            prototypes: true,
            eta: calibrate && self.optimize_eta,
            delta: calibrate && self.optimize_delta,
        }
    }
}

/// Which parameter blocks receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub prototypes: bool,
    pub eta: bool,
    pub delta: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        prototypes: true,
        eta: true,
        delta: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub prototypes: Matrix,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Gradient {
    fn check_finite(&self) -> std::result::Result<(), &'static str> {
        let blocks: [(&'static str, &[f64]); 3] = [
            ("prototypes", self.prototypes.as_slice()),
            ("eta", &self.eta),
            ("delta", &self.delta),
        ];
        for (name, block) in blocks {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }
}

fn check_consistent(state: &ModelState, te: &TaskEmbedding, weights: &LossWeights) -> Result<()> {
    if state.method != weights.method {
        return Err(Error::Shape(format!(
            "state uses {} but loss weights use {}",
            state.method, weights.method
        )));
    }
    if state.method == Method::Eol
        && (state.b != weights.b || state.orientation != weights.orientation)
    {
        return Err(Error::Shape(
            "state and loss weights disagree on the EOL head".into(),
        ));
    }
    if state.n_in() != te.n_in || state.prototypes.cols() != te.dim() {
        return Err(Error::Shape(
            "state does not match the task embedding".into(),
        ));
    }
    Ok(())
}

/// Loss at `state`.
pub fn evaluate(
    state: &ModelState,
    te: &TaskEmbedding,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_consistent(state, te, weights)?;
    let logits = calibrated_logits(state, te)?;
    let n_s = te.n_support();
    let support = inlier_softmax(&logits.slice_rows(0..n_s));
    let query = query_posteriors(state, &logits, n_s)?;
    total_loss(&support, &te.support_labels, &query, weights)
}

/// Exact gradient of [`evaluate`]'s total; masked blocks are zero.
pub fn gradients(
    state: &ModelState,
    te: &TaskEmbedding,
    weights: &LossWeights,
    mask: ParamMask,
) -> Result<Gradient> {
    check_consistent(state, te, weights)?;
    weights.validate()?;
    let n = state.n_in();
    let n_s = te.n_support();
    let n_q = te.n_query();
    let cs = cosines(te.features(), &state.prototypes)?;
    let logits = apply_calibration(&cs.cos, &state.eta, &state.delta);
    let (c_ce, c_ma, c_co) = coefficients(weights, n_s, n_q, n);
    let qn = n_q.max(1) as f64;

    // dL/dl for every row
    let mut dl = Matrix::zeros(logits.rows(), n);

    for i in 0..n_s {
        let mut q = logits.row(i).to_vec();
        numerics::softmax_in_place(&mut q);
        let y = te.support_labels[i];
        if q[y] > PROB_FLOOR {
            let out = dl.row_mut(i);
            for j in 0..n {
                let target = if j == y { 1.0 } else { 0.0 };
                out[j] = c_ce * (target - q[j]);
            }
        }
    }

    let query_logits = logits.slice_rows(n_s..logits.rows());
    match state.method {
        Method::Ostim => {
            let table = ostim_posteriors(&query_logits);
            let ma_grad: Vec<f64> = table
                .marginals
                .iter()
                .map(|&m| c_ma * xlogx_grad(m) / qn)
                .collect();
            let mut g = vec![0.0; n + 1];
            for (r, p) in table.probs.iter_rows().enumerate() {
                for j in 0..=n {
                    g[j] = ma_grad[j] + c_co * xlogx_grad(p[j]);
                }
                let gp = numerics::dot(&g, p);
                let dext: Vec<f64> = (0..=n).map(|j| p[j] * (g[j] - gp)).collect();
                let out = dl.row_mut(n_s + r);
                for j in 0..n {
                    out[j] = dext[j] - dext[n] / n as f64;
                }
            }
        }
        Method::Eol => {
            let table = eol_posteriors(&query_logits, state.b, state.orientation)?;
            let (w_in, w_out) = class_weights(state.b, n)?;
            let sign = state.orientation.sign();
            let m = &table.marginals;
            let ma_in: Vec<f64> = m[..n]
                .iter()
                .map(|&v| c_ma * w_in * xlogx_grad(v) / qn)
                .collect();
            let ma_out = c_ma * w_out * xlogx_grad(m[n]) / qn;
            let mut q = vec![0.0; n];
            for (r, p) in table.probs.iter_rows().enumerate() {
                let l = query_logits.row(r);
                q.copy_from_slice(l);
                numerics::softmax_in_place(&mut q);
                let a = eol_argument(
                    numerics::log_sum_exp_unchecked(l),
                    n,
                    state.b,
                    state.orientation,
                );
                let s = stable_sigmoid(a);
                let ds_da = s * stable_sigmoid(-a);

                let g: Vec<f64> = (0..n).map(|j| ma_in[j] + c_co * xlogx_grad(p[j])).collect();
                let dq: Vec<f64> = g.iter().map(|gj| gj * s).collect();
                let ds = numerics::dot(&g, &q) - ma_out;
                let dq_q = numerics::dot(&dq, &q);
                let da = ds * ds_da;
                let out = dl.row_mut(n_s + r);
                for j in 0..n {
                    out[j] = q[j] * (dq[j] - dq_q) + da * sign * q[j];
                }
            }
        }
    }

    let dim = te.dim();
    let mut grad = Gradient {
        prototypes: Matrix::zeros(n, dim),
        eta: vec![0.0; n],
        delta: vec![0.0; n],
    };
    for (i, z) in te.features().iter_rows().enumerate() {
        let zn = cs.row_norms[i];
        for j in 0..n {
            let g = dl.get(i, j);
            if g == 0.0 {
                continue;
            }
            let cos = cs.cos.get(i, j);
            grad.eta[j] += g * cos;
            grad.delta[j] += g;
            if mask.prototypes {
                let cn = cs.proto_norms[j];
                let scale = g * state.eta[j] / cn;
                let c = state.prototypes.row(j);
                let out = grad.prototypes.row_mut(j);
                for d in 0..dim {
                    out[d] += scale * (z[d] / zn - cos * c[d] / cn);
                }
            }
        }
    }
    if !mask.eta {
        grad.eta.iter_mut().for_each(|v| *v = 0.0);
    }
    if !mask.delta {
        grad.delta.iter_mut().for_each(|v| *v = 0.0);
    }
    grad.check_finite().map_err(|block| Error::Optimization {
        iteration: 0,
        block: format!("{block} gradient"),
    })?;
    Ok(grad)
}

fn clip(block: &mut [f64], max_norm: f64) {
    let n = numerics::norm(block);
    if n > max_norm {
        let s = max_norm / n;
        block.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Loss before each update, when recorded.
    pub losses: Vec<LossBreakdown>,
    pub final_state: ModelState,
}

/// Centers the task, initializes the state and runs gradient descent.
///
/// Only the [`Task`] half of an episode is accepted here.
pub fn transduce(
    task: &Task,
    weights: &LossWeights,
    cfg: &OptimConfig,
) -> Result<(ModelState, Trajectory)> {
    let te = center_episode(task);
    transduce_embedding(&te, weights, cfg)
}

pub fn transduce_embedding(
    te: &TaskEmbedding,
    weights: &LossWeights,
    cfg: &OptimConfig,
) -> Result<(ModelState, Trajectory)> {
    weights.validate()?;
    cfg.validate()?;
    let mut state = init_state(te, weights.method, weights.b, cfg.eta0)?;
    state.orientation = weights.orientation;
    let mask = cfg.mask(weights.method);
    let mut losses = Vec::with_capacity(if cfg.record_trajectory {
        cfg.iterations
    } else {
        0
    });

    for iteration in 0..cfg.iterations {
        if cfg.record_trajectory {
            let loss = evaluate(&state, te, weights)?;
            if !loss.total.is_finite() {
                return Err(Error::Optimization {
                    iteration,
                    block: "loss".into(),
                });
            }
            losses.push(loss);
        }
        let mut g = gradients(&state, te, weights, mask).map_err(|e| match e {
            Error::Optimization { block, .. } => Error::Optimization { iteration, block },
            other => other,
        })?;
        if let Some(c) = cfg.grad_clip {
            clip(g.prototypes.as_mut_slice(), c);
            clip(&mut g.eta, c);
            clip(&mut g.delta, c);
        }
        let step = cfg.step_size;
        if mask.prototypes {
            for (p, d) in state
                .prototypes
                .as_mut_slice()
                .iter_mut()
                .zip(g.prototypes.as_slice())
            {
                *p -= step * d;
            }
        }
        if mask.eta {
            state
                .eta
                .iter_mut()
                .zip(&g.eta)
                .for_each(|(p, d)| *p -= step * d);
        }
        if mask.delta {
            state
                .delta
                .iter_mut()
                .zip(&g.delta)
                .for_each(|(p, d)| *p -= step * d);
        }
    }
    let trajectory = Trajectory {
        losses,
        final_state: state.clone(),
    };
    Ok((state, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InlierOrientation;
    use crate::numerics::FeatureVec;

    fn fv(v: &[f64]) -> FeatureVec {
        FeatureVec::new(v.to_vec()).unwrap()
    }

    fn separable_task() -> Task {
        Task {
            n_in: 2,
            support: vec![
                fv(&[4.0, 0.1]),
                fv(&[4.2, -0.1]),
                fv(&[-0.1, 4.0]),
                fv(&[0.2, 3.9]),
            ],
            support_labels: vec![0, 0, 1, 1],
            query: vec![fv(&[3.8, 0.3]), fv(&[0.1, 4.1]), fv(&[-3.0, -3.0])],
        }
    }

    #[test]
    fn stationary_at_cross_entropy_optimum() {
        let te = center_episode(&separable_task());
        let w = LossWeights {
            lambda_ma: 0.0,
            lambda_co: 0.0,
            ..LossWeights::new(Method::Eol)
        };
        let mut s = init_state(&te, Method::Eol, 0.5, 1000.0).unwrap();
        s.orientation = w.orientation;
        let g = gradients(&s, &te, &w, ParamMask::ALL).unwrap();
        let norm = numerics::norm(g.prototypes.as_slice())
            + numerics::norm(&g.eta)
            + numerics::norm(&g.delta);
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn ostim_calibration_blocks_are_zero() {
        let te = center_episode(&separable_task());
        let w = LossWeights::new(Method::Ostim);
        let s = init_state(&te, Method::Ostim, 0.5, 10.0).unwrap();
        let mask = OptimConfig::default().mask(Method::Ostim);
        let g = gradients(&s, &te, &w, mask).unwrap();
        assert!(g.eta.iter().chain(&g.delta).all(|&v| v == 0.0));
        assert!(g.prototypes.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_step_is_a_no_op() {
        let task = separable_task();
        let w = LossWeights::new(Method::Eol);
        let cfg = OptimConfig {
            iterations: 1,
            step_size: 0.0,
            ..Default::default()
        };
        let (state, _) = transduce(&task, &w, &cfg).unwrap();
        let init = init_state(&center_episode(&task), Method::Eol, 0.5, cfg.eta0).unwrap();
        assert_eq!(state.prototypes, init.prototypes);
        assert_eq!(state.eta, init.eta);
        assert_eq!(state.delta, init.delta);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            step_size: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            grad_clip: Some(0.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn frozen_blocks_untouched() {
        let task = separable_task();
        let w = LossWeights::new(Method::Eol);
        let cfg = OptimConfig {
            optimize_eta: false,
            ..Default::default()
        };
        let (state, _) = transduce(&task, &w, &cfg).unwrap();
        assert!(state.eta.iter().all(|&e| e.to_bits() == cfg.eta0.to_bits()));
        assert!(state.delta.iter().any(|&d| d != 0.0));

        let (ostim, _) = transduce(
            &task,
            &LossWeights::new(Method::Ostim),
            &OptimConfig::default(),
        )
        .unwrap();
        assert!(ostim.eta.iter().all(|&e| e == 10.0));
        assert!(ostim.delta.iter().all(|&d| d.to_bits() == 0f64.to_bits()));
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let te = center_episode(&separable_task());
        let s = init_state(&te, Method::Eol, 0.5, 10.0).unwrap();
        assert!(gradients(&s, &te, &LossWeights::new(Method::Ostim), ParamMask::ALL).is_err());
        let w = LossWeights {
            orientation: InlierOrientation::AsWritten,
            ..LossWeights::new(Method::Eol)
        };
        assert!(evaluate(&s, &te, &w).is_err());
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let te = center_episode(&separable_task());
        let w = LossWeights::new(Method::Eol);
        let mut s = init_state(&te, Method::Eol, 0.5, 10.0).unwrap();
        s.eta[0] = f64::INFINITY;
        match gradients(&s, &te, &w, ParamMask::ALL) {
            Err(Error::Optimization { .. }) => {}
            other => panic!("expected optimization error, got {other:?}"),
        }
    }

    #[test]
    fn huge_steps_stay_finite_or_fail_loudly() {
        // clamped logs keep the loss bounded; the run must either finish with
        // finite parameters or report an error, never return NaN silently
        let w = LossWeights::new(Method::Eol);
        let cfg = OptimConfig {
            step_size: 1e300,
            grad_clip: None,
            ..Default::default()
        };
        if let Ok((s, _)) = transduce(&separable_task(), &w, &cfg) {
            assert!(s
                .prototypes
                .as_slice()
                .iter()
                .chain(&s.eta)
                .chain(&s.delta)
                .all(|v| v.is_finite()));
        }
    }
}
