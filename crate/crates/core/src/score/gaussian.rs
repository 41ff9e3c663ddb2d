//! Exact denoising predictions for the 2-D Gaussian pair.
//!
//! Conditional data distribution `N(c, I)`, unconditional `N(0, 5I)`.
//! Diffusing under the variance-preserving forward process keeps both
//! Gaussian: the conditional becomes `N(sqrt(a) c, I)` and the
//! unconditional `N(0, (1 + 4a) I)` at signal weight `a`, so scores and
//! the guided-field reference are available in closed form.

use std::sync::Arc;

use crate::error::Result;
use crate::real::{cst, Real};
use crate::schedule::NoiseSchedule;

use super::{check_dim, AnalyticDensity, NoiseLevel, ScoreModel};

pub const GAUSSIAN_DIM: usize = 2;

#[derive(Debug, Clone)]
pub struct GaussianModel<T> {
    schedule: Arc<NoiseSchedule<T>>,
}

impl<T: Real> GaussianModel<T> {
    pub fn new(schedule: Arc<NoiseSchedule<T>>) -> Self {
        GaussianModel { schedule }
    }

    /// Score of the diffused conditional `N(sqrt(a) c, I)`.
    pub fn score_cond(&self, x: &[T], c: &[T; 2], alpha_bar: T) -> Vec<T> {
        let root_a = alpha_bar.sqrt();
        x.iter()
            .zip(c.iter())
            .map(|(&xi, &ci)| root_a * ci - xi)
            .collect()
    }

    /// Score of the diffused unconditional `N(0, (1 + 4a) I)`.
    pub fn score_uncond(&self, x: &[T], alpha_bar: T) -> Vec<T> {
        let var = T::one() + cst::<T>(4.0) * alpha_bar;
        x.iter().map(|&xi| -xi / var).collect()
    }

    /// Closed-form score of the guided field at scale `omega`, the
    /// reference the characteristic construction must reproduce.
    /// `omega = 0` recovers the conditional score, `omega = -1` the
    /// unconditional one.
    pub fn guided_score(&self, x: &[T], c: &[T; 2], omega: T, level: NoiseLevel<T>) -> Vec<T> {
        let a = level.alpha_bar;
        let four = cst::<T>(4.0);
        let five = cst::<T>(5.0);
        let coeff = four * omega + five;
        let den = coeff - four * omega * a;
        let root_a = a.sqrt();
        x.iter()
            .zip(c.iter())
            .map(|(&xi, &ci)| (five * (T::one() + omega) * root_a * ci - coeff * xi) / den)
            .collect()
    }

    /// `eps = -sigma * guided_score`.
    pub fn guided_eps(&self, x: &[T], c: &[T; 2], omega: T, level: NoiseLevel<T>) -> Vec<T> {
        self.guided_score(x, c, omega, level)
            .into_iter()
            .map(|s| -level.sigma * s)
            .collect()
    }

    /// Mean and isotropic covariance scale of the guided data
    /// distribution: `N(5c(1+w)/(4w+5), 5/(4w+5) I)`.
    pub fn guided_target(c: &[T; 2], omega: T) -> ([T; 2], T) {
        let four = cst::<T>(4.0);
        let five = cst::<T>(5.0);
        let coeff = four * omega + five;
        let scale = five * (T::one() + omega) / coeff;
        ([scale * c[0], scale * c[1]], five / coeff)
    }
}

impl<T: Real> ScoreModel<T> for GaussianModel<T> {
    type Cond = [T; 2];

    fn dim(&self) -> usize {
        GAUSSIAN_DIM
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn eps_at(&self, x: &[T], cond: Option<&[T; 2]>, level: NoiseLevel<T>) -> Result<Vec<T>> {
        check_dim(GAUSSIAN_DIM, x)?;
        // Fused -sigma * score, no intermediate score vector.
        Ok(match cond {
            Some(c) => {
                let root_a = level.alpha_bar.sqrt();
                x.iter()
                    .zip(c.iter())
                    .map(|(&xi, &ci)| -level.sigma * (root_a * ci - xi))
                    .collect()
            }
            None => {
                let scale = level.sigma / (T::one() + cst::<T>(4.0) * level.alpha_bar);
                x.iter().map(|&xi| scale * xi).collect()
            }
        })
    }
}

impl<T: Real> AnalyticDensity<T> for GaussianModel<T> {
    fn log_density(&self, x: &[T], cond: Option<&[T; 2]>, level: NoiseLevel<T>) -> Result<T> {
        check_dim(GAUSSIAN_DIM, x)?;
        let a = level.alpha_bar;
        let two = cst::<T>(2.0);
        let tau = cst::<T>(std::f64::consts::TAU);
        Ok(match cond {
            Some(c) => {
                let root_a = a.sqrt();
                let q: T = x
                    .iter()
                    .zip(c.iter())
                    .map(|(&xi, &ci)| {
                        let d = xi - root_a * ci;
                        d * d
                    })
                    .sum();
                -q / two - tau.ln()
            }
            None => {
                let var = T::one() + cst::<T>(4.0) * a;
                let q: T = x.iter().map(|&xi| xi * xi).sum();
                -q / (two * var) - (tau * var).ln()
            }
        })
    }
}
