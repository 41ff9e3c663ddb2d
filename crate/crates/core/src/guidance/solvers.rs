//! Fixed-point solvers for the characteristic correction.
//!
//! All three iterate from a zero (or warm-started) correction and stop
//! once `|g|^2 < eta^2 dim(g)` or the iteration cap is hit. Hitting the
//! cap is not an error: the last iterate is returned and the trace
//! records the miss, so a sampling run keeps going.

use crate::error::{Error, Result};
use crate::linalg::{dot, min_norm_least_squares};
use crate::real::Real;
use crate::score::{NoiseLevel, ScoreModel};

use super::{
    build_projection, eval_pair, residual_from_pair, GuidanceSpec, Projection, SolverKind,
    SolverTrace,
};

/// Outcome of a correction solve.
#[derive(Debug, Clone)]
pub struct Solve<T> {
    pub delta_x: Vec<T>,
    pub trace: SolverTrace<T>,
    /// Prediction pair evaluated at exactly `delta_x`, present when the
    /// final update left the iterate unchanged. Lets the caller reuse
    /// the evaluations instead of spending two more.
    pub cached_pair: Option<(Vec<T>, Vec<T>)>,
}

/// Dispatches on `spec.solver`.
pub fn solve_delta_x_at<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
) -> Result<Solve<T>> {
    match spec.solver {
        SolverKind::Sor => solve_delta_x_sor_at(x, cond, level, model, spec, init),
        SolverKind::RmsProp => solve_delta_x_rmsprop_at(x, cond, level, model, spec, init),
        SolverKind::Anderson => solve_delta_x_anderson_at(x, cond, level, model, spec, init),
    }
}

macro_rules! step_entry {
    ($name:ident, $at:ident) => {
        /// Schedule-step entry point returning `(delta_x, trace)`.
        pub fn $name<T: Real, M: ScoreModel<T>>(
            x: &[T],
            cond: Option<&M::Cond>,
            step: usize,
            model: &M,
            spec: &GuidanceSpec<T>,
        ) -> Result<(Vec<T>, SolverTrace<T>)> {
            let level = NoiseLevel::from_step(model.schedule(), step)?;
            let solve = $at(x, cond, level, model, spec, None)?;
            Ok((solve.delta_x, solve.trace))
        }
    };
}

step_entry!(solve_delta_x_sor, solve_delta_x_sor_at);
step_entry!(solve_delta_x_rmsprop, solve_delta_x_rmsprop_at);
step_entry!(solve_delta_x_anderson, solve_delta_x_anderson_at);

/// Shared loop scaffolding: residual evaluation, stopping rule, trace
/// bookkeeping. The `update` closure maps `(k, delta, g)` to the next
/// iterate, carrying whatever state the specific method needs.
fn iterate<T: Real, M, F>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
    mut update: F,
) -> Result<Solve<T>>
where
    M: ScoreModel<T>,
    F: FnMut(usize, &[T], &[T]) -> Vec<T>,
{
    spec.validate()?;
    if !(level.sigma > T::zero()) {
        return Err(Error::ZeroNoiseScale { step: 0 });
    }
    let dim = x.len();
    let mut delta: Vec<T> = match init {
        Some(d0) => {
            if d0.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: d0.len(),
                });
            }
            d0.to_vec()
        }
        None => vec![T::zero(); dim],
    };
    let mut evals = 0usize;

    // First pair, at the initial iterate.
    let first_pair = eval_pair(model, x, cond, level, spec.omega, &delta)?;
    evals += 2;
    let init_is_zero = delta.iter().all(|&d| d == T::zero());
    let reusable = if init_is_zero {
        Some((first_pair.0.as_slice(), first_pair.1.as_slice()))
    } else {
        None
    };
    let (projection, extra): (Projection<T>, usize) =
        build_projection(spec, model, x, cond, level, reusable)?;
    evals += extra;

    let threshold = spec.tolerance * spec.tolerance * T::from_usize(dim).unwrap();
    let mut iterates: Vec<Vec<T>> = Vec::new();
    let mut residual_norms: Vec<T> = Vec::new();
    let mut converged = false;
    let mut pair = first_pair;
    // Index into `iterates` at which `pair` was evaluated, when any.
    let mut pair_at: Option<usize> = None;
    let mut best: Option<(T, usize)> = None;
    let mut returned: Option<usize> = None;

    // Each iteration evaluates the residual at the current iterate,
    // stops there if it already passes the threshold (so a converged
    // answer is exactly the point whose residual was measured), and
    // otherwise takes an update step. A capped solve hands back the
    // best-residual iterate seen: on non-linear fields an iteration can
    // wander off, and continuing the sampling run from a diverging
    // correction poisons the trajectory.
    for k in 1..=spec.max_iters {
        if k > 1 {
            pair = eval_pair(model, x, cond, level, spec.omega, &delta)?;
            evals += 2;
            pair_at = None;
        }
        let g = residual_from_pair(&delta, &pair.0, &pair.1, level.sigma, &projection);
        let gg = dot(&g, &g);
        if !gg.is_finite() {
            break;
        }
        residual_norms.push(gg.sqrt());
        iterates.push(delta.clone());
        pair_at = Some(iterates.len() - 1);
        if best.map(|(b, _)| gg < b).unwrap_or(true) {
            best = Some((gg, iterates.len() - 1));
        }

        if gg < threshold {
            converged = true;
            returned = Some(iterates.len() - 1);
            break;
        }
        let next = update(k, &delta, &g);
        if next == delta {
            // Stalled update: the evaluated point is what we will
            // return if the cap hits now.
            returned = Some(iterates.len() - 1);
        } else {
            returned = None;
        }
        delta = next;
    }

    if !converged {
        if let Some((_, idx)) = best {
            delta = iterates[idx].clone();
            returned = Some(idx);
        }
    }
    let iterations_used = residual_norms.len();
    let cached_pair = match (returned, pair_at) {
        (Some(r), Some(p)) if r == p => Some(pair),
        _ => None,
    };
    Ok(Solve {
        delta_x: delta,
        trace: SolverTrace {
            iterates,
            residual_norms,
            converged,
            iterations_used,
            model_evals: evals,
            degenerate_projection: projection.is_degenerate(),
        },
        cached_pair,
    })
}

/// Successive over-relaxation: `delta <- delta - gamma g`.
pub fn solve_delta_x_sor_at<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
) -> Result<Solve<T>> {
    let gamma = spec.params.gamma;
    iterate(x, cond, level, model, spec, init, |_k, delta, g| {
        delta
            .iter()
            .zip(g)
            .map(|(&d, &gi)| d - gamma * gi)
            .collect()
    })
}

/// RMSprop: squared-residual running average with a decaying rate
/// `gamma_k = gamma / (1 + D k)`.
pub fn solve_delta_x_rmsprop_at<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
) -> Result<Solve<T>> {
    let p = spec.params;
    let mut v = vec![T::zero(); x.len()];
    iterate(x, cond, level, model, spec, init, move |k, delta, g| {
        let gamma_k = p.gamma / (T::one() + p.decay * T::from_usize(k).unwrap());
        delta
            .iter()
            .zip(g)
            .zip(v.iter_mut())
            .map(|((&d, &gi), vi)| {
                *vi = p.alpha * *vi + (T::one() - p.alpha) * gi * gi;
                d - gamma_k * gi / (vi.sqrt() + p.epsilon_rms)
            })
            .collect()
    })
}

/// Anderson acceleration over the last `m` iterate/residual pairs.
///
/// Buffers hold pairwise differences in all but the last slot; the
/// extrapolation weights solve a small least-squares problem
/// (minimum-norm under rank deficiency). With fewer than two buffered
/// entries this reduces to a plain relaxation step.
pub fn solve_delta_x_anderson_at<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
) -> Result<Solve<T>> {
    let gamma = spec.params.gamma;
    let m = spec.params.anderson_m;
    let mut delta_buf: Vec<Vec<T>> = Vec::new();
    let mut g_buf: Vec<Vec<T>> = Vec::new();
    iterate(x, cond, level, model, spec, init, move |_k, delta, g| {
        delta_buf.push(delta.to_vec());
        g_buf.push(g.to_vec());
        let len = delta_buf.len();
        let (delta_aa, g_aa) = if len >= 2 {
            for i in 0..delta.len() {
                g_buf[len - 2][i] = g_buf[len - 1][i] - g_buf[len - 2][i];
                delta_buf[len - 2][i] = delta_buf[len - 1][i] - delta_buf[len - 2][i];
            }
            if delta_buf.len() > m {
                delta_buf.remove(0);
                g_buf.remove(0);
            }
            let last = g_buf.len() - 1;
            let w = min_norm_least_squares(&g_buf[..last], &g_buf[last]);
            let mut delta_aa = delta_buf[last].clone();
            let mut g_aa = g_buf[last].clone();
            for (j, wj) in w.iter().enumerate() {
                for i in 0..delta_aa.len() {
                    delta_aa[i] -= *wj * delta_buf[j][i];
                    g_aa[i] -= *wj * g_buf[j][i];
                }
            }
            (delta_aa, g_aa)
        } else {
            (delta.to_vec(), g.to_vec())
        };
        delta_aa
            .iter()
            .zip(&g_aa)
            .map(|(&d, &gi)| d - gamma * gi)
            .collect()
    })
}
