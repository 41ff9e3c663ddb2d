//! Exact denoising predictions for the three-component Gaussian mixture.
//!
//! Components have unit covariance and means on an equilateral triangle
//! centered at the origin. Diffusion keeps each component unit-variance
//! (`a I + (1 - a) I = I`), shrinking the means by `sqrt(a)`, so the
//! diffused mixture score is exact.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::{cst, Real};
use crate::schedule::NoiseSchedule;

use super::{check_dim, AnalyticDensity, NoiseLevel, ScoreModel};

pub const MIXTURE_DIM: usize = 2;
pub const MIXTURE_COMPONENTS: usize = 3;

/// Component means: `(-1, -1/sqrt(3))`, `(1, -1/sqrt(3))`, `(0, sqrt(3) - 1/sqrt(3))`.
pub fn mixture_means<T: Real>() -> [[T; 2]; 3] {
    let inv_r3 = T::one() / cst::<T>(3.0).sqrt();
    let r3 = cst::<T>(3.0).sqrt();
    [
        [-T::one(), -inv_r3],
        [T::one(), -inv_r3],
        [T::zero(), r3 - inv_r3],
    ]
}

#[derive(Debug, Clone)]
pub struct MixtureModel<T> {
    schedule: Arc<NoiseSchedule<T>>,
    means: [[T; 2]; 3],
}

impl<T: Real> MixtureModel<T> {
    pub fn new(schedule: Arc<NoiseSchedule<T>>) -> Self {
        MixtureModel {
            schedule,
            means: mixture_means(),
        }
    }

    pub fn means(&self) -> &[[T; 2]; 3] {
        &self.means
    }

    fn component_index(cond: &[T; 3]) -> Result<usize> {
        let mut hot = None;
        for (j, &cj) in cond.iter().enumerate() {
            if cj == T::one() {
                if hot.is_some() {
                    return Err(Error::InvalidCondition(
                        "one-hot vector has multiple active entries".into(),
                    ));
                }
                hot = Some(j);
            } else if cj != T::zero() {
                return Err(Error::InvalidCondition(
                    "one-hot entries must be exactly 0 or 1".into(),
                ));
            }
        }
        hot.ok_or_else(|| Error::InvalidCondition("one-hot vector has no active entry".into()))
    }

    /// Softmax responsibilities of the diffused components at `x`.
    pub fn responsibilities(&self, x: &[T], alpha_bar: T) -> [T; 3] {
        let root_a = alpha_bar.sqrt();
        let half = cst::<T>(0.5);
        let mut logw = [T::zero(); 3];
        for (j, mu) in self.means.iter().enumerate() {
            let dx = x[0] - root_a * mu[0];
            let dy = x[1] - root_a * mu[1];
            logw[j] = -half * (dx * dx + dy * dy);
        }
        let m = logw.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut w = [T::zero(); 3];
        let mut total = T::zero();
        for j in 0..3 {
            w[j] = (logw[j] - m).exp();
            total += w[j];
        }
        for wj in &mut w {
            *wj /= total;
        }
        w
    }

    fn score(&self, x: &[T], cond: Option<usize>, alpha_bar: T) -> Vec<T> {
        let root_a = alpha_bar.sqrt();
        match cond {
            Some(j) => {
                let mu = &self.means[j];
                vec![root_a * mu[0] - x[0], root_a * mu[1] - x[1]]
            }
            None => {
                let w = self.responsibilities(x, alpha_bar);
                let mut s = vec![T::zero(); 2];
                for (j, mu) in self.means.iter().enumerate() {
                    s[0] += w[j] * (root_a * mu[0] - x[0]);
                    s[1] += w[j] * (root_a * mu[1] - x[1]);
                }
                s
            }
        }
    }

    /// Data-space conditional log-density `log N(x; mu_j, I)`.
    pub fn log_density_component(&self, x: &[T], j: usize) -> T {
        let mu = &self.means[j];
        let dx = x[0] - mu[0];
        let dy = x[1] - mu[1];
        let tau = cst::<T>(std::f64::consts::TAU);
        -cst::<T>(0.5) * (dx * dx + dy * dy) - tau.ln()
    }
}

impl<T: Real> ScoreModel<T> for MixtureModel<T> {
    type Cond = [T; 3];

    fn dim(&self) -> usize {
        MIXTURE_DIM
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn eps_at(&self, x: &[T], cond: Option<&[T; 3]>, level: NoiseLevel<T>) -> Result<Vec<T>> {
        check_dim(MIXTURE_DIM, x)?;
        let idx = cond.map(Self::component_index).transpose()?;
        let score = self.score(x, idx, level.alpha_bar);
        Ok(score.into_iter().map(|s| -level.sigma * s).collect())
    }
}

impl<T: Real> AnalyticDensity<T> for MixtureModel<T> {
    fn log_density(&self, x: &[T], cond: Option<&[T; 3]>, level: NoiseLevel<T>) -> Result<T> {
        check_dim(MIXTURE_DIM, x)?;
        let a = level.alpha_bar;
        let root_a = a.sqrt();
        let half = cst::<T>(0.5);
        let tau = cst::<T>(std::f64::consts::TAU);
        match cond.map(Self::component_index).transpose()? {
            Some(j) => {
                let mu = &self.means[j];
                let dx = x[0] - root_a * mu[0];
                let dy = x[1] - root_a * mu[1];
                Ok(-half * (dx * dx + dy * dy) - tau.ln())
            }
            None => {
                let mut logs = [T::zero(); 3];
                for (j, mu) in self.means.iter().enumerate() {
                    let dx = x[0] - root_a * mu[0];
                    let dy = x[1] - root_a * mu[1];
                    logs[j] = -half * (dx * dx + dy * dy);
                }
                let m = logs.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
                let sum: T = logs.iter().map(|&v| (v - m).exp()).sum();
                Ok(m + sum.ln() - cst::<T>(3.0).ln() - tau.ln())
            }
        }
    }
}
