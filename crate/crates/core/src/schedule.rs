//! Discretized variance-preserving diffusion schedule.
//!
//! The forward process contaminates clean data over `n` steps of size
//! `beta[k]`. Step index `i` runs from 0 (clean data) to `n` (pure
//! noise); the cumulative signal weight is `alpha_bar[i] = prod_{j<i}
//! (1 - beta[j])`, the noise scale `sigma[i] = sqrt(1 - alpha_bar[i])`,
//! and the diffusion time `t[i]` is the running sum of step sizes.
//! With `alpha_bar[0] = 1` these identities hold exactly at the clean
//! end of the schedule.

use crate::error::{Error, Result};
use crate::real::{cst, Real};

/// Immutable diffusion clock shared by models and samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    n: usize,
    beta: Vec<T>,
    alpha_bar: Vec<T>,
    sigma: Vec<T>,
    t: Vec<T>,
    coarse_steps: bool,
}

impl<T: Real> NoiseSchedule<T> {
    /// Builds a schedule from raw step sizes. Each `beta` must lie in (0, 1).
    pub fn from_betas(beta: Vec<T>) -> Result<Self> {
        let n = beta.len();
        if n < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {n}"
            )));
        }
        let coarse = cst::<T>(0.05);
        let mut coarse_steps = false;
        for (k, &b) in beta.iter().enumerate() {
            if !(b > T::zero() && b < T::one()) {
                return Err(Error::InvalidSchedule(format!(
                    "beta[{k}] must lie in (0, 1)"
                )));
            }
            if b > coarse {
                coarse_steps = true;
            }
        }
        let mut alpha_bar = Vec::with_capacity(n + 1);
        let mut sigma = Vec::with_capacity(n + 1);
        let mut t = Vec::with_capacity(n + 1);
        alpha_bar.push(T::one());
        sigma.push(T::zero());
        t.push(T::zero());
        let mut prod = T::one();
        let mut time = T::zero();
        for &b in &beta {
            prod *= T::one() - b;
            time += b;
            alpha_bar.push(prod);
            sigma.push((T::one() - prod).sqrt());
            t.push(time);
        }
        Ok(NoiseSchedule {
            n,
            beta,
            alpha_bar,
            sigma,
            t,
            coarse_steps,
        })
    }

    /// Linear ramp of step sizes: `beta[k] = k (b2 - b1)/(n - 1) + b1`.
    pub fn linear(n: usize, b1: T, b2: T) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {n}"
            )));
        }
        if !(b1 > T::zero() && b1 <= b2 && b2 < T::one()) {
            return Err(Error::InvalidSchedule(
                "step sizes must satisfy 0 < b1 <= b2 < 1".to_string(),
            ));
        }
        let slope = (b2 - b1) / T::from_usize(n - 1).unwrap();
        let beta = (0..n)
            .map(|k| b1 + slope * T::from_usize(k).unwrap())
            .collect();
        Self::from_betas(beta)
    }

    /// Number of diffusion steps.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Step size taking state `k` to `k + 1`, for `k` in `0..n`.
    pub fn beta(&self, k: usize) -> T {
        self.beta[k]
    }

    /// Cumulative signal weight at step `i` in `0..=n`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, i: usize) -> T {
        self.alpha_bar[i]
    }

    /// Noise scale at step `i`; `sigma(0) = 0`.
    pub fn sigma(&self, i: usize) -> T {
        self.sigma[i]
    }

    /// Squared noise scale, exactly `1 - alpha_bar(i)`.
    pub fn sigma_sq(&self, i: usize) -> T {
        T::one() - self.alpha_bar[i]
    }

    /// Diffusion time at step `i`: running sum of step sizes.
    pub fn t(&self, i: usize) -> T {
        self.t[i]
    }

    /// Total diffusion time `t(n)`.
    pub fn total_time(&self) -> T {
        self.t[self.n]
    }

    /// True when any step size exceeds 0.05, where the small-step
    /// approximation `beta^2 << beta` starts to degrade.
    pub fn has_coarse_steps(&self) -> bool {
        self.coarse_steps
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    /// Largest relative gap between `alpha_bar(i)` and `exp(-t(i))`.
    pub fn max_exponential_gap(&self) -> T {
        let mut worst = T::zero();
        for i in 1..=self.n {
            let reference = (-self.t[i]).exp();
            let gap = ((self.alpha_bar[i] - reference) / reference).abs();
            if gap > worst {
                worst = gap;
            }
        }
        worst
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n {
            return Err(Error::StepOutOfRange {
                index: i,
                n: self.n,
            });
        }
        Ok(())
    }

    /// Noisy-step accessor used by models: errors on step 0 or out of range.
    pub fn noisy_step(&self, i: usize) -> Result<(T, T)> {
        self.check_step(i)?;
        Ok((self.alpha_bar[i], self.sigma[i]))
    }
}

/// Continuous-time noise scale `sigma(t) = sqrt(1 - exp(-t))`.
pub fn sigma_of_time<T: Real>(t: T) -> Result<T> {
    if t < T::zero() {
        return Err(Error::invalid_param("t", "diffusion time must be >= 0"));
    }
    Ok((T::one() - (-t).exp()).sqrt())
}
