//! Classifier-free guidance and its characteristic (non-linear) correction.
//!
//! Classifier-free guidance combines conditional and unconditional
//! predictions linearly. The characteristic correction evaluates the
//! two models at shifted points `x + w dx` and `x + (1 + w) dx`, where
//! the correction `dx` solves the fixed-point relation
//!
//! ```text
//! dx = P ( eps(x + (1+w) dx) - eps(x + w dx | c) ) sigma
//! ```
//!
//! so the combined field stays consistent with the diffusion dynamics
//! at large guidance scales. Three fixed-point solvers are provided
//! (relaxation, RMSprop, Anderson acceleration), plus a closed-form
//! reference for the affine Gaussian family.

mod oracle;
mod solvers;

pub use oracle::closed_form_delta_x_gaussian;
pub use solvers::{
    solve_delta_x_anderson, solve_delta_x_anderson_at, solve_delta_x_at, solve_delta_x_rmsprop,
    solve_delta_x_rmsprop_at, solve_delta_x_sor, solve_delta_x_sor_at, Solve,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::real::{cst, Real};
use crate::score::{NoiseLevel, ScoreModel};

/// Orthogonal projection applied to the fixed-point residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// No regularization; the theoretically exact choice.
    Identity,
    /// Projection onto the channel-wise mean (direction of all ones).
    ChannelMean,
    /// Projection onto the prediction-difference direction at `x`.
    ResidualDirection,
}

/// Fixed-point iteration algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Sor,
    RmsProp,
    Anderson,
}

/// Hyperparameters shared by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverParams<T> {
    /// Relaxation / learning rate.
    pub gamma: T,
    /// RMSprop smoothing factor.
    pub alpha: T,
    /// RMSprop denominator stabilizer.
    pub epsilon_rms: T,
    /// Learning-rate decay constant `D` in `gamma / (1 + D k)`.
    pub decay: T,
    /// Anderson history depth (>= 2).
    pub anderson_m: usize,
}

impl<T: Real> Default for SolverParams<T> {
    fn default() -> Self {
        SolverParams {
            gamma: cst(0.1),
            alpha: cst(0.999),
            epsilon_rms: cst(1e-8),
            decay: T::zero(),
            anderson_m: 2,
        }
    }
}

impl<T: Real> SolverParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero()) {
            return Err(Error::invalid_param("gamma", "must be > 0"));
        }
        if !(self.alpha > T::zero() && self.alpha < T::one()) {
            return Err(Error::invalid_param("alpha", "must lie in (0, 1)"));
        }
        if self.epsilon_rms < T::zero() {
            return Err(Error::invalid_param("epsilon_rms", "must be >= 0"));
        }
        if self.decay < T::zero() {
            return Err(Error::invalid_param("decay", "must be >= 0"));
        }
        if self.anderson_m < 2 {
            return Err(Error::invalid_param("anderson_m", "must be >= 2"));
        }
        Ok(())
    }
}

/// Full guidance configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceSpec<T> {
    pub omega: T,
    pub projection: ProjectionMode,
    pub solver: SolverKind,
    pub params: SolverParams<T>,
    pub max_iters: usize,
    /// Residual stopping threshold `eta`: stop once `|g|^2 < eta^2 dim(g)`.
    pub tolerance: T,
    /// Reuse the previous timestep's correction as the initial iterate.
    pub warm_start: bool,
}

impl<T: Real> GuidanceSpec<T> {
    pub fn new(omega: T) -> Self {
        GuidanceSpec {
            omega,
            projection: ProjectionMode::Identity,
            solver: SolverKind::RmsProp,
            params: SolverParams::default(),
            max_iters: 10,
            tolerance: cst(1e-3),
            warm_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > T::zero()) {
            return Err(Error::invalid_param("tolerance", "must be > 0"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid_param("max_iters", "must be >= 1"));
        }
        self.params.validate()
    }
}

/// Per-solve record: iterates, residual norms, convergence flags.
#[derive(Debug, Clone)]
pub struct SolverTrace<T> {
    /// Correction at each residual evaluation; length equals
    /// `iterations_used`. A converged solve returns the last entry.
    pub iterates: Vec<Vec<T>>,
    /// `|g|_2` at each evaluated iterate.
    pub residual_norms: Vec<T>,
    pub converged: bool,
    pub iterations_used: usize,
    pub model_evals: usize,
    pub degenerate_projection: bool,
}

impl<T: Real> SolverTrace<T> {
    pub fn final_residual(&self) -> Option<T> {
        self.residual_norms.last().copied()
    }
}

/// Concrete projection operator, possibly carrying its direction vector.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    mode: ProjectionMode,
    g: Option<Vec<T>>,
    degenerate: bool,
}

impl<T: Real> Projection<T> {
    pub fn identity() -> Self {
        Projection {
            mode: ProjectionMode::Identity,
            g: None,
            degenerate: false,
        }
    }

    pub fn channel_mean() -> Self {
        Projection {
            mode: ProjectionMode::ChannelMean,
            g: None,
            degenerate: false,
        }
    }

    /// Projection onto `g`. An exactly zero vector is rejected; a
    /// near-zero one (|g|^2 < 1e-24) degenerates to the zero map and is
    /// flagged.
    pub fn residual_direction(g: Vec<T>) -> Result<Self> {
        if g.iter().all(|&v| v == T::zero()) {
            return Err(Error::invalid_param(
                "g_vector",
                "residual-direction projection needs a nonzero direction",
            ));
        }
        let degenerate = dot(&g, &g) < cst::<T>(1e-24);
        Ok(Projection {
            mode: ProjectionMode::ResidualDirection,
            g: Some(g),
            degenerate,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn apply(&self, v: &[T]) -> Vec<T> {
        match self.mode {
            ProjectionMode::Identity => v.to_vec(),
            ProjectionMode::ChannelMean => {
                let n = T::from_usize(v.len()).unwrap();
                let mean = v.iter().copied().sum::<T>() / n;
                vec![mean; v.len()]
            }
            ProjectionMode::ResidualDirection => {
                if self.degenerate {
                    return vec![T::zero(); v.len()];
                }
                let g = self.g.as_ref().expect("residual projection carries g");
                let scale = dot(g, v) / dot(g, g);
                g.iter().map(|&gi| scale * gi).collect()
            }
        }
    }
}

/// One-shot projection: builds the operator for `mode` and applies it.
pub fn apply_projection<T: Real>(
    v: &[T],
    mode: ProjectionMode,
    g_vector: Option<&[T]>,
) -> Result<Vec<T>> {
    let op = match mode {
        ProjectionMode::Identity => Projection::identity(),
        ProjectionMode::ChannelMean => Projection::channel_mean(),
        ProjectionMode::ResidualDirection => {
            let g = g_vector.ok_or_else(|| {
                Error::invalid_param("g_vector", "required for residual-direction projection")
            })?;
            Projection::residual_direction(g.to_vec())?
        }
    };
    Ok(op.apply(v))
}

/// Linear guidance: `(1 + w) eps_cond - w eps_uncond`.
pub fn classifier_free_eps<T: Real>(eps_cond: &[T], eps_uncond: &[T], omega: T) -> Result<Vec<T>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::DimensionMismatch {
            expected: eps_cond.len(),
            got: eps_uncond.len(),
        });
    }
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| (T::one() + omega) * c - omega * u)
        .collect())
}

pub(crate) fn shifted<T: Real>(x: &[T], factor: T, delta: &[T]) -> Vec<T> {
    x.iter()
        .zip(delta)
        .map(|(&xi, &di)| xi + factor * di)
        .collect()
}

/// Evaluates the conditional/unconditional pair at the shifted points
/// for a given correction.
pub(crate) fn eval_pair<T: Real, M: ScoreModel<T>>(
    model: &M,
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    omega: T,
    delta: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let x1 = shifted(x, omega, delta);
    let x2 = shifted(x, T::one() + omega, delta);
    let eps_c = model.eps_at(&x1, cond, level)?;
    let eps_u = model.eps_at(&x2, None, level)?;
    Ok((eps_c, eps_u))
}

pub(crate) fn residual_from_pair<T: Real>(
    delta: &[T],
    eps_c: &[T],
    eps_u: &[T],
    sigma: T,
    projection: &Projection<T>,
) -> Vec<T> {
    // g = delta - P((eps_u - eps_c) sigma), projection fused into one
    // pass over the vectors.
    let diff = |i: usize| (eps_u[i] - eps_c[i]) * sigma;
    match projection.mode {
        ProjectionMode::Identity => (0..delta.len())
            .map(|i| delta[i] - diff(i))
            .collect(),
        ProjectionMode::ChannelMean => {
            let n = T::from_usize(delta.len()).unwrap();
            let mean = (0..delta.len()).map(diff).sum::<T>() / n;
            delta.iter().map(|&d| d - mean).collect()
        }
        ProjectionMode::ResidualDirection => {
            if projection.degenerate {
                return delta.to_vec();
            }
            let g_dir = projection.g.as_ref().expect("residual projection carries g");
            let mut num = T::zero();
            let mut den = T::zero();
            for (i, &gi) in g_dir.iter().enumerate() {
                num += gi * diff(i);
                den += gi * gi;
            }
            let scale = num / den;
            delta
                .iter()
                .zip(g_dir)
                .map(|(&d, &gi)| d - scale * gi)
                .collect()
        }
    }
}

/// Builds the projection operator configured in `spec` for the probe
/// point `x`. The residual-direction mode fixes its direction from the
/// prediction difference at the uncorrected `x`, keeping the operator
/// constant over the iteration. Returns the operator together with the
/// number of model evaluations spent (`reusable` lets the caller hand
/// in the pair already evaluated at `delta = 0`).
pub(crate) fn build_projection<T: Real, M: ScoreModel<T>>(
    spec: &GuidanceSpec<T>,
    model: &M,
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    reusable: Option<(&[T], &[T])>,
) -> Result<(Projection<T>, usize)> {
    match spec.projection {
        ProjectionMode::Identity => Ok((Projection::identity(), 0)),
        ProjectionMode::ChannelMean => Ok((Projection::channel_mean(), 0)),
        ProjectionMode::ResidualDirection => {
            let (g, extra) = match reusable {
                Some((eps_c, eps_u)) => {
                    let g = eps_u
                        .iter()
                        .zip(eps_c)
                        .map(|(&u, &c)| (u - c) * level.sigma)
                        .collect::<Vec<T>>();
                    (g, 0)
                }
                None => {
                    let zeros = vec![T::zero(); x.len()];
                    let (eps_c, eps_u) = eval_pair(model, x, cond, level, spec.omega, &zeros)?;
                    let g = eps_u
                        .iter()
                        .zip(&eps_c)
                        .map(|(&u, &c)| (u - c) * level.sigma)
                        .collect::<Vec<T>>();
                    (g, 2)
                }
            };
            Ok((Projection::residual_direction(g)?, extra))
        }
    }
}

/// Fixed-point residual `g = dx - P (eps(x2) - eps(x1 | c)) sigma` at
/// schedule step `i` (two model evaluations).
pub fn residual_g<T: Real, M: ScoreModel<T>>(
    delta_x: &[T],
    x: &[T],
    cond: Option<&M::Cond>,
    step: usize,
    model: &M,
    spec: &GuidanceSpec<T>,
) -> Result<Vec<T>> {
    let level = NoiseLevel::from_step(model.schedule(), step)?;
    residual_g_at(delta_x, x, cond, level, model, spec)
}

/// Continuous-level variant of [`residual_g`].
pub fn residual_g_at<T: Real, M: ScoreModel<T>>(
    delta_x: &[T],
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
) -> Result<Vec<T>> {
    if !(level.sigma > T::zero()) {
        return Err(Error::ZeroNoiseScale { step: 0 });
    }
    let (projection, _) = build_projection(spec, model, x, cond, level, None)?;
    let (eps_c, eps_u) = eval_pair(model, x, cond, level, spec.omega, delta_x)?;
    Ok(residual_from_pair(
        delta_x, &eps_c, &eps_u, level.sigma, &projection,
    ))
}

/// Characteristic combination at an explicit correction: evaluates the
/// conditional model at `x + w dx` and the unconditional at
/// `x + (1 + w) dx`, then combines them linearly.
pub fn characteristic_combine<T: Real, M: ScoreModel<T>>(
    model: &M,
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    omega: T,
    delta_x: &[T],
) -> Result<Vec<T>> {
    let (eps_c, eps_u) = eval_pair(model, x, cond, level, omega, delta_x)?;
    classifier_free_eps(&eps_c, &eps_u, omega)
}

/// Characteristic guidance at schedule step `i`: solve for the
/// correction with the configured solver, then combine. Non-convergence
/// is reported in the trace, never as an error.
pub fn characteristic_eps<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    step: usize,
    model: &M,
    spec: &GuidanceSpec<T>,
) -> Result<(Vec<T>, SolverTrace<T>)> {
    let level = NoiseLevel::from_step(model.schedule(), step)?;
    characteristic_eps_at(x, cond, level, model, spec, None)
}

/// Continuous-level variant of [`characteristic_eps`] with optional
/// warm-start initialization.
pub fn characteristic_eps_at<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
) -> Result<(Vec<T>, SolverTrace<T>)> {
    let (eps, _, trace) = characteristic_eps_solved(x, cond, level, model, spec, init)?;
    Ok((eps, trace))
}

/// As [`characteristic_eps_at`], additionally returning the solved
/// correction (the warm-start cache wants it).
pub fn characteristic_eps_solved<T: Real, M: ScoreModel<T>>(
    x: &[T],
    cond: Option<&M::Cond>,
    level: NoiseLevel<T>,
    model: &M,
    spec: &GuidanceSpec<T>,
    init: Option<&[T]>,
) -> Result<(Vec<T>, Vec<T>, SolverTrace<T>)> {
    let solve = solve_delta_x_at(x, cond, level, model, spec, init)?;
    let Solve {
        delta_x,
        mut trace,
        cached_pair,
    } = solve;
    let (eps_c, eps_u) = match cached_pair {
        // The returned iterate is exactly the last evaluated point, so
        // its prediction pair is still valid.
        Some(pair) => pair,
        None => {
            trace.model_evals += 2;
            eval_pair(model, x, cond, level, spec.omega, &delta_x)?
        }
    };
    let out = classifier_free_eps(&eps_c, &eps_u, spec.omega)?;
    Ok((out, delta_x, trace))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianModel;
    use crate::schedule::NoiseSchedule;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn classifier_free_arithmetic() {
        let out = classifier_free_eps(&[1.0, 0.0], &[0.0, 1.0], 2.0).unwrap();
        assert_eq!(out, vec![3.0, -2.0]);

        // Exactly representable values keep the collapse bitwise.
        let same = classifier_free_eps(&[0.5, -0.25], &[0.5, -0.25], 2.0).unwrap();
        assert_eq!(same, vec![0.5, -0.25]);
        let close: Vec<f64> = classifier_free_eps(&[0.4, -0.2], &[0.4, -0.2], 7.5).unwrap();
        assert!((close[0] - 0.4).abs() < 1e-15 && (close[1] + 0.2).abs() < 1e-15);

        let at_zero = classifier_free_eps(&[0.4, -0.2], &[9.0, 9.0], 0.0).unwrap();
        assert_eq!(at_zero, vec![0.4, -0.2]);

        assert!(classifier_free_eps(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn projection_reference_values() {
        let v = [1.0, 3.0];
        assert_eq!(
            apply_projection(&v, ProjectionMode::Identity, None).unwrap(),
            vec![1.0, 3.0]
        );
        assert_eq!(
            apply_projection(&v, ProjectionMode::ChannelMean, None).unwrap(),
            vec![2.0, 2.0]
        );
        let proj = apply_projection(
            &[3.0, 4.0],
            ProjectionMode::ResidualDirection,
            Some(&[1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(proj, vec![3.0, 0.0]);
    }

    #[test]
    fn projection_degenerate_and_zero_direction() {
        assert!(Projection::<f64>::residual_direction(vec![0.0, 0.0]).is_err());
        let tiny = Projection::residual_direction(vec![1e-13, 0.0]).unwrap();
        assert!(tiny.is_degenerate());
        assert_eq!(tiny.apply(&[5.0, 6.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn residual_vanishes_when_models_agree() {
        let model = test_support::LinearTestModel::constant(2, vec![0.7, -0.3], vec![0.7, -0.3]);
        let spec = GuidanceSpec::new(4.0);
        let g = residual_g(&[0.0, 0.0], &[1.0, 2.0], Some(&()), 5, &model, &spec).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn residual_approaches_delta_as_sigma_vanishes() {
        let model = test_support::LinearTestModel::constant(2, vec![0.7, -0.3], vec![1.7, 0.4]);
        let spec = GuidanceSpec::new(4.0);
        let level = NoiseLevel {
            alpha_bar: 1.0 - 1e-18,
            sigma: 1e-9,
        };
        let delta = [0.5, -0.25];
        let g = residual_g_at(&delta, &[1.0, 2.0], Some(&()), level, &model, &spec).unwrap();
        assert!((g[0] - delta[0]).abs() < 1e-8);
        assert!((g[1] - delta[1]).abs() < 1e-8);
    }

    #[test]
    fn residual_matches_analytic_scores_at_zero_correction() {
        // g(0) = -sigma^2 (s_cond(x) - s_uncond(x)) for the Gaussian pair.
        let schedule = Arc::new(NoiseSchedule::<f64>::linear(1000, 1e-4, 0.015).unwrap());
        let model = GaussianModel::new(schedule);
        let spec = GuidanceSpec::new(4.0);
        let step = 430;
        let level = NoiseLevel::from_step(model.schedule(), step).unwrap();
        let x = [1.25, -2.0];
        let c = [-5.0, 5.0];
        let g = residual_g(&[0.0, 0.0], &x, Some(&c), step, &model, &spec).unwrap();
        let s_c = model.score_cond(&x, &c, level.alpha_bar);
        let s_u = model.score_uncond(&x, level.alpha_bar);
        for k in 0..2 {
            let expected = -level.sigma * level.sigma * (s_c[k] - s_u[k]);
            assert!((g[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_sigma() {
        let model = test_support::LinearTestModel::constant(2, vec![0.0; 2], vec![0.0; 2]);
        let spec = GuidanceSpec::new(1.0);
        let level = NoiseLevel {
            alpha_bar: 1.0,
            sigma: 0.0,
        };
        assert!(residual_g_at(&[0.0, 0.0], &[0.0, 0.0], Some(&()), level, &model, &spec).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = GuidanceSpec::<f64>::new(4.0);
        assert!(spec.validate().is_ok());
        spec.tolerance = 0.0;
        assert!(spec.validate().is_err());
        spec.tolerance = 1e-3;
        spec.max_iters = 0;
        assert!(spec.validate().is_err());
        spec.max_iters = 10;
        spec.params.anderson_m = 1;
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn projections_idempotent_and_orthogonal(
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            g in proptest::collection::vec(-10.0f64..10.0, 4),
            mode_idx in 0usize..3,
        ) {
            let g_norm2: f64 = g.iter().map(|x| x * x).sum();
            prop_assume!(g_norm2 > 1e-6);
            let (mode, g_opt): (ProjectionMode, Option<&[f64]>) = match mode_idx {
                0 => (ProjectionMode::Identity, None),
                1 => (ProjectionMode::ChannelMean, None),
                _ => (ProjectionMode::ResidualDirection, Some(&g)),
            };
            let once = apply_projection(&v, mode, g_opt).unwrap();
            let twice = apply_projection(&once, mode, g_opt).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
            // (v - Pv) is orthogonal to Pv.
            let residual: Vec<f64> = v.iter().zip(&once).map(|(a, b)| a - b).collect();
            let inner: f64 = residual.iter().zip(&once).map(|(a, b)| a * b).sum();
            let scale: f64 = 1.0 + once.iter().map(|x| x * x).sum::<f64>();
            prop_assert!(inner.abs() / scale < 1e-9);
        }
    }
}
