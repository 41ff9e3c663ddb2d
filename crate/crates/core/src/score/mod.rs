//! Denoising prediction models.
//!
//! A [`ScoreModel`] produces the prediction `eps(x, condition, step)`
//! for the noise added by the forward process. All implementations here
//! are closed-form: `eps = -sigma * score` of the exactly diffused
//! density, so there is no training step and every downstream claim can
//! be checked against analytic references.

mod gaussian;
mod kernel;
mod mixture;

pub use gaussian::GaussianModel;
pub use kernel::{KernelDataset, KernelModel};
pub use mixture::{mixture_means, MixtureModel, MIXTURE_COMPONENTS};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::schedule::NoiseSchedule;

/// A point on the diffusion clock: cumulative signal weight and noise
/// scale. Built either from a schedule step or from continuous time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel<T> {
    pub alpha_bar: T,
    pub sigma: T,
}

impl<T: Real> NoiseLevel<T> {
    /// Level of schedule step `i >= 1`.
    pub fn from_step(schedule: &NoiseSchedule<T>, step: usize) -> Result<Self> {
        let (alpha_bar, sigma) = schedule.noisy_step(step)?;
        Ok(NoiseLevel { alpha_bar, sigma })
    }

    /// Continuous-time level with `alpha_bar = exp(-t)`.
    pub fn at_time(t: T) -> Result<Self> {
        if t <= T::zero() {
            return Err(Error::invalid_param("t", "diffusion time must be > 0"));
        }
        let alpha_bar = (-t).exp();
        Ok(NoiseLevel {
            alpha_bar,
            sigma: (T::one() - alpha_bar).sqrt(),
        })
    }
}

/// Contract for denoising predictions.
///
/// `eval` must be pure: identical inputs produce bit-identical outputs.
pub trait ScoreModel<T: Real>: Send + Sync {
    /// Condition tag accepted by this model; `None` selects the
    /// unconditional branch.
    type Cond: Sync + ?Sized;

    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule<T>;

    /// Denoising prediction at an arbitrary noise level with `sigma > 0`.
    fn eps_at(&self, x: &[T], cond: Option<&Self::Cond>, level: NoiseLevel<T>) -> Result<Vec<T>>;

    /// Prediction at clean data (`sigma = 0`). Analytic models return
    /// zero by definition; models singular there override with an error.
    fn eps_clean(&self, x: &[T], _cond: Option<&Self::Cond>) -> Result<Vec<T>> {
        check_dim(self.dim(), x)?;
        Ok(vec![T::zero(); x.len()])
    }

    /// Prediction at schedule step `i` in `0..=n`.
    fn eps(&self, x: &[T], cond: Option<&Self::Cond>, step: usize) -> Result<Vec<T>> {
        if step == 0 {
            return self.eps_clean(x, cond);
        }
        let level = NoiseLevel::from_step(self.schedule(), step)?;
        self.eps_at(x, cond, level)
    }
}

/// Models whose diffused log-density is available in closed form.
pub trait AnalyticDensity<T: Real>: ScoreModel<T> {
    fn log_density(&self, x: &[T], cond: Option<&Self::Cond>, level: NoiseLevel<T>) -> Result<T>;
}

pub(crate) fn check_dim<T>(expected: usize, x: &[T]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}
