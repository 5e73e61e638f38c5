//! Finite-difference verification of the analytic gradients.

use crate::episodes::Task;
use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::{
    center_episode, init_state, InlierOrientation, Method, ModelState, TaskEmbedding,
};
use crate::numerics::{finite_diff_gradient, FeatureVec, DEFAULT_FD_STEP};
use crate::optim::{evaluate, Gradient, ParamMask};
use crate::rng::{derive_seed, Rng};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-2;

pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error per parameter block; `None` for blocks not checked.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockErrors {
    pub prototypes: Option<f64>,
    pub eta: Option<f64>,
    pub delta: Option<f64>,
}

impl BlockErrors {
    pub fn worst(&self) -> f64 {
        [self.prototypes, self.eta, self.delta]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: &BlockErrors) {
        fn m(a: &mut Option<f64>, b: Option<f64>) {
            *a = match (*a, b) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            };
        }
        m(&mut self.prototypes, other.prototypes);
        m(&mut self.eta, other.eta);
        m(&mut self.delta, other.delta);
    }

    /// Name of the first block at or above `tol`.
    pub fn failing_block(&self, tol: f64) -> Option<&'static str> {
        [
            ("prototypes", self.prototypes),
            ("eta", self.eta),
            ("delta", self.delta),
        ]
        .into_iter()
        .find(|(_, e)| e.is_some_and(|e| e.is_nan() || e >= tol))
        .map(|(name, _)| name)
    }
}

fn rel_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR)
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| rel_error(a, f))
        .fold(0.0, f64::max)
}

/// Compares `analytic` against central differences of the total loss.
///
/// Masked blocks are not differentiated numerically; instead any non-zero
/// analytic entry there counts as an infinite error.
pub fn check_gradients<G>(
    state: &ModelState,
    te: &TaskEmbedding,
    weights: &LossWeights,
    mask: ParamMask,
    analytic: G,
) -> Result<BlockErrors>
where
    G: Fn(&ModelState, &TaskEmbedding, &LossWeights, ParamMask) -> Result<Gradient>,
{
    let g = analytic(state, te, weights, mask)?;
    let frozen = |block: &[f64]| {
        if block.iter().all(|&v| v == 0.0) {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let prototypes = Some(if mask.prototypes {
        let x = state.prototypes.as_slice().to_vec();
        let num = finite_diff_gradient(
            |p| {
                let mut s = state.clone();
                s.prototypes.as_mut_slice().copy_from_slice(p);
                evaluate(&s, te, weights).map_or(f64::NAN, |l| l.total)
            },
            &x,
            DEFAULT_FD_STEP,
        )?;
        worst(g.prototypes.as_slice(), &num)
    } else {
        frozen(g.prototypes.as_slice())
    });

    let eta = Some(if mask.eta {
        let num = finite_diff_gradient(
            |e| {
                let mut s = state.clone();
                s.eta.copy_from_slice(e);
                evaluate(&s, te, weights).map_or(f64::NAN, |l| l.total)
            },
            &state.eta,
            DEFAULT_FD_STEP,
        )?;
        worst(&g.eta, &num)
    } else {
        frozen(&g.eta)
    });

    let delta = Some(if mask.delta {
        let num = finite_diff_gradient(
            |d| {
                let mut s = state.clone();
                s.delta.copy_from_slice(d);
                evaluate(&s, te, weights).map_or(f64::NAN, |l| l.total)
            },
            &state.delta,
            DEFAULT_FD_STEP,
        )?;
        worst(&g.delta, &num)
    } else {
        frozen(&g.delta)
    });
    Ok(BlockErrors {
        prototypes,
        eta,
        delta,
    })
}

/// A randomized small episode with a perturbed (non-initial) state.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub state: ModelState,
    pub embedding: TaskEmbedding,
    pub weights: LossWeights,
}

/// Builds case `index` of the randomized suite for `method` at dimension `dim`.
pub fn random_case(seed: u64, index: u64, dim: usize, method: Method) -> Result<CheckCase> {
    let mut rng = Rng::new(derive_seed(seed, index));
    let n_in = 2 + rng.below(3) as usize;
    let k_shot = 1 + rng.below(3) as usize;
    let n_query = 3 + rng.below(8) as usize;

    let centers: Vec<Vec<f64>> = (0..n_in + 1)
        .map(|_| (0..dim).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
        .collect();
    let point = |c: &[f64], rng: &mut Rng| {
        FeatureVec::new(c.iter().map(|m| m + 0.7 * rng.standard_normal()).collect())
    };
    let mut support = Vec::new();
    let mut labels = Vec::new();
    for (j, c) in centers[..n_in].iter().enumerate() {
        for _ in 0..k_shot {
            support.push(point(c, &mut rng)?);
            labels.push(j);
        }
    }
    let query = (0..n_query)
        .map(|_| {
            let c = rng.below(n_in as u64 + 1) as usize;
            point(&centers[c], &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let task = Task {
        n_in,
        support,
        support_labels: labels,
        query,
    };
    let embedding = center_episode(&task);

    let b = rng.uniform_range(0.15, 0.85);
    let orientation = if rng.below(2) == 0 {
        InlierOrientation::AsWritten
    } else {
        InlierOrientation::Flipped
    };
    let weights = LossWeights {
        lambda_ce: rng.uniform_range(0.2, 2.0),
        lambda_ma: rng.uniform_range(0.2, 2.0),
        lambda_co: rng.uniform_range(0.2, 2.0),
        b,
        method,
        orientation,
    };
    let mut state = init_state(&embedding, method, b, rng.uniform_range(2.0, 10.0))?;
    state.orientation = orientation;
    let mut protos = state.prototypes.clone();
    for v in protos.as_mut_slice() {
        *v += 0.3 * rng.standard_normal();
    }
    state.prototypes = protos;
    if method == Method::Eol {
        for e in &mut state.eta {
            *e *= rng.uniform_range(0.5, 1.5);
        }
        for d in &mut state.delta {
            *d = rng.uniform_range(-1.0, 1.0);
        }
    }
    Ok(CheckCase {
        state,
        embedding,
        weights,
    })
}

/// The four calibration flag combinations, `(optimize_eta, optimize_delta)`.
pub const FLAG_COMBINATIONS: [(bool, bool); 4] =
    [(false, false), (true, false), (false, true), (true, true)];

pub fn mask_for(method: Method, eta: bool, delta: bool) -> ParamMask {
    let calibrate = method == Method::Eol;
    ParamMask {
        prototypes: true,
        eta: calibrate && eta,
        delta: calibrate && delta,
    }
}
