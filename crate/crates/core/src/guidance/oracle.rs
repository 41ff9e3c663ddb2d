//! Closed-form correction for the affine Gaussian family.
//!
//! Both Gaussian scores are affine in `x`, so the fixed-point relation
//! for the correction is a linear equation per component:
//!
//! ```text
//! dx = sigma^2 ( s_cond(x + w dx) - s_uncond(x + (1+w) dx) )
//! ```
//!
//! with `s_cond(y) = sqrt(a) c - y` and `s_uncond(y) = -y / (1 + 4a)`.
//! Collecting terms gives `kappa dx = rhs` with a scalar coefficient
//! shared by all components. In the deep-noise limit both scores
//! collapse to the pure-noise field, `kappa` and `rhs` vanish together,
//! and any correction satisfies the relation; the minimum-norm
//! convention (zero) is returned, matching what zero-initialized
//! iteration selects.

use crate::error::{Error, Result};
use crate::real::{cst, Real};
use crate::score::{GaussianModel, NoiseLevel};

/// Exact correction for the Gaussian family under the identity
/// projection.
pub fn closed_form_delta_x_gaussian<T: Real>(
    _model: &GaussianModel<T>,
    x: &[T],
    c: &[T; 2],
    level: NoiseLevel<T>,
    omega: T,
) -> Result<Vec<T>> {
    let a = level.alpha_bar;
    let sigma_sq = level.sigma * level.sigma;
    let four = cst::<T>(4.0);
    let uncond_var = T::one() + four * a;
    let kappa = T::one() + sigma_sq * (omega - (T::one() + omega) / uncond_var);
    let root_a = a.sqrt();
    let rhs: Vec<T> = x
        .iter()
        .zip(c.iter())
        .map(|(&xi, &ci)| sigma_sq * (root_a * ci - four * a * xi / uncond_var))
        .collect();
    let tiny = cst::<T>(1e-12);
    if kappa.abs() < tiny {
        let rhs_norm = rhs.iter().map(|&r| r * r).sum::<T>().sqrt();
        if rhs_norm < tiny {
            // Degenerate deep-noise limit: every correction solves the
            // relation; take the minimum-norm one.
            return Ok(vec![T::zero(); x.len()]);
        }
        return Err(Error::SingularSystem("closed_form_delta_x_gaussian"));
    }
    Ok(rhs.into_iter().map(|r| r / kappa).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{
        characteristic_eps_at, residual_g_at, solve_delta_x_at, GuidanceSpec, SolverKind,
    };
    use crate::linalg::norm2;
    use crate::schedule::NoiseSchedule;
    use crate::score::ScoreModel;
    use rand::Rng;
    use std::sync::Arc;

    fn model() -> GaussianModel<f64> {
        GaussianModel::new(Arc::new(NoiseSchedule::<f64>::linear(1000, 1e-4, 0.015).unwrap()))
    }

    #[test]
    fn vanishes_as_sigma_goes_to_zero() {
        let m = model();
        let level = NoiseLevel {
            alpha_bar: 1.0 - 1e-14,
            sigma: 1e-7,
        };
        let dx =
            closed_form_delta_x_gaussian(&m, &[3.0, -1.0], &[-5.0, 5.0], level, 4.0).unwrap();
        assert!(norm2(&dx) < 1e-10);
    }

    #[test]
    fn deep_noise_limit_returns_minimum_norm_zero() {
        let m = model();
        let level = NoiseLevel {
            alpha_bar: 0.0,
            sigma: 1.0,
        };
        let dx = closed_form_delta_x_gaussian(&m, &[0.4, 0.2], &[-5.0, 5.0], level, 4.0).unwrap();
        assert_eq!(dx, vec![0.0, 0.0]);
    }

    #[test]
    fn root_of_the_fixed_point_relation() {
        // The oracle value must zero the residual it claims to solve.
        let m = model();
        let step = 520;
        let level = NoiseLevel::from_step(m.schedule(), step).unwrap();
        let x = [1.0, -3.0];
        let c = [-5.0, 5.0];
        let spec = GuidanceSpec::new(4.0);
        let dx = closed_form_delta_x_gaussian(&m, &x, &c, level, 4.0).unwrap();
        assert!(norm2(&dx) > 1e-3, "mid-schedule correction should be finite");
        let g = residual_g_at(&dx, &x, Some(&c), level, &m, &spec).unwrap();
        assert!(norm2(&g) < 1e-12, "residual at oracle root: {}", norm2(&g));
    }

    /// All three solvers agree with the closed form across random
    /// probes of (x, step, omega).
    #[test]
    fn iterative_solvers_match_oracle() {
        let m = model();
        let mut rng = crate::rng::stream(11, crate::rng::StreamDomain::Metric, 0);
        let c = [-5.0, 5.0];
        for trial in 0..20 {
            let x = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            let step = rng.gen_range(1..=1000);
            let omega = rng.gen_range(0.0..6.0);
            let level = NoiseLevel::from_step(m.schedule(), step).unwrap();
            let oracle = closed_form_delta_x_gaussian(&m, &x, &c, level, omega).unwrap();

            for kind in [SolverKind::Sor, SolverKind::RmsProp, SolverKind::Anderson] {
                let mut spec = GuidanceSpec::new(omega);
                spec.solver = kind;
                spec.tolerance = 1e-8;
                spec.max_iters = 20000;
                match kind {
                    SolverKind::Sor => spec.params.gamma = 0.5,
                    SolverKind::RmsProp => {
                        spec.params.gamma = 0.5;
                        spec.params.alpha = 0.9;
                        spec.params.epsilon_rms = 1.0;
                    }
                    SolverKind::Anderson => {
                        spec.params.gamma = 1.0;
                        spec.max_iters = 60;
                    }
                }
                let solve = solve_delta_x_at(&x, Some(&c), level, &m, &spec, None).unwrap();
                assert!(solve.trace.converged, "trial {trial} {kind:?} did not converge");
                for k in 0..2 {
                    assert!(
                        (solve.delta_x[k] - oracle[k]).abs() < 1e-5,
                        "trial {trial} {kind:?}: {:?} vs oracle {:?}",
                        solve.delta_x,
                        oracle
                    );
                }
            }
        }
    }

    /// On Gaussians the characteristic output equals the closed-form
    /// guided field: two independent routes to the same prediction.
    #[test]
    fn characteristic_output_matches_guided_field() {
        let m = model();
        let c = [-5.0, 5.0];
        let mut spec = GuidanceSpec::new(4.0);
        spec.solver = SolverKind::Anderson;
        spec.params.gamma = 1.0;
        spec.tolerance = 1e-10;
        spec.max_iters = 100;
        for step in [150, 420, 900] {
            let level = NoiseLevel::from_step(m.schedule(), step).unwrap();
            let x = [0.8, -0.9];
            let (ch, trace) =
                characteristic_eps_at(&x, Some(&c), level, &m, &spec, None).unwrap();
            assert!(trace.converged);
            let reference = m.guided_eps(&x, &c, 4.0, level);
            for k in 0..2 {
                assert!(
                    (ch[k] - reference[k]).abs() < 1e-6,
                    "step {step}: {ch:?} vs {reference:?}"
                );
            }
            // And via the oracle correction directly.
            let dx = closed_form_delta_x_gaussian(&m, &x, &c, level, 4.0).unwrap();
            let via_oracle =
                crate::guidance::characteristic_combine(&m, &x, Some(&c), level, 4.0, &dx)
                    .unwrap();
            for k in 0..2 {
                assert!((ch[k] - via_oracle[k]).abs() < 1e-6);
            }
        }
    }

    /// Re-evaluating the residual at a converged answer stays under the
    /// stopping threshold.
    #[test]
    fn fixed_point_consistency() {
        let m = model();
        let c = [-5.0, 5.0];
        let mut rng = crate::rng::stream(5, crate::rng::StreamDomain::Metric, 1);
        for _ in 0..10 {
            let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let step = rng.gen_range(50..=1000);
            let level = NoiseLevel::from_step(m.schedule(), step).unwrap();
            let mut spec = GuidanceSpec::new(3.0);
            spec.solver = SolverKind::Anderson;
            spec.params.gamma = 1.0;
            spec.tolerance = 1e-6;
            spec.max_iters = 100;
            let solve = solve_delta_x_at(&x, Some(&c), level, &m, &spec, None).unwrap();
            assert!(solve.trace.converged);
            let g = residual_g_at(&solve.delta_x, &x, Some(&c), level, &m, &spec).unwrap();
            let gg: f64 = g.iter().map(|v| v * v).sum();
            assert!(gg < spec.tolerance * spec.tolerance * 2.0);
        }
    }
}
