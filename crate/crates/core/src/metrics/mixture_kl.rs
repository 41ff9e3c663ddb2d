//! KL divergence for the tilted three-component mixture.
//!
//! The guided target in the mixture experiment is, per condition
//! component, `q_c(x) = p(x|c)^(1+w) p(x)^(-w) / Z(w, c)`; the batch
//! covers all three conditions with equal weight, so the reference is
//! the three-component combination of the tilted densities. The
//! partition functions are estimated by importance sampling from the
//! untilted conditionals, the samples are hard-assigned to their
//! maximum-responsibility component and fitted per cluster, and the KL
//! of the fit against the reference is estimated by Monte Carlo draws
//! from the fit.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, chol_solve, cholesky};
use crate::real::{cst, Real};
use crate::rng::{stream, StreamDomain};
use crate::score::{AnalyticDensity, MixtureModel, NoiseLevel};

use super::GaussianFit;

/// Tilted reference mixture with Monte Carlo partition functions.
pub struct TiltedMixture<'a, T> {
    model: &'a MixtureModel<T>,
    omega: T,
    log_z: [T; 3],
    z: [T; 3],
    z_std_error: [T; 3],
}

impl<'a, T: Real> TiltedMixture<'a, T> {
    /// Estimates `Z(w, c) = E_{x ~ p(.|c)}[(p(x|c)/p(x))^w]` for each
    /// component by importance sampling with `draws` points.
    pub fn estimate(
        model: &'a MixtureModel<T>,
        omega: T,
        draws: usize,
        seed: u64,
    ) -> Result<Self> {
        if draws < 1000 {
            return Err(Error::Metric("partition estimate needs >= 1000 draws".into()));
        }
        let level = NoiseLevel {
            alpha_bar: T::one(),
            sigma: T::zero(),
        };
        let mut log_z = [T::zero(); 3];
        let mut z = [T::zero(); 3];
        let mut z_std_error = [T::zero(); 3];
        for c in 0..3 {
            let mut rng = stream(seed, StreamDomain::Metric, 100 + c as u64);
            let mu = model.means()[c];
            let n = T::from_usize(draws).unwrap();
            let mut sum = T::zero();
            let mut sum_sq = T::zero();
            for _ in 0..draws {
                let x = [
                    mu[0] + T::standard_normal(&mut rng),
                    mu[1] + T::standard_normal(&mut rng),
                ];
                let log_cond = model.log_density_component(&x, c);
                let log_mix = model.log_density(&x, None, level)?;
                let w = (omega * (log_cond - log_mix)).exp();
                sum += w;
                sum_sq += w * w;
            }
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(T::zero());
            z[c] = mean;
            log_z[c] = mean.ln();
            z_std_error[c] = (var / n).sqrt();
        }
        Ok(TiltedMixture {
            model,
            omega,
            log_z,
            z,
            z_std_error,
        })
    }

    pub fn z(&self) -> [T; 3] {
        self.z
    }

    pub fn z_std_error(&self) -> [T; 3] {
        self.z_std_error
    }

    /// `log q_c(x)` of one tilted component.
    pub fn log_component(&self, x: &[T], c: usize) -> Result<T> {
        let level = NoiseLevel {
            alpha_bar: T::one(),
            sigma: T::zero(),
        };
        let log_cond = self.model.log_density_component(x, c);
        let log_mix = self.model.log_density(x, None, level)?;
        Ok((T::one() + self.omega) * log_cond - self.omega * log_mix - self.log_z[c])
    }

    /// `log((1/3) sum_c q_c(x))`.
    pub fn log_density(&self, x: &[T]) -> Result<T> {
        let mut logs = [T::zero(); 3];
        for c in 0..3 {
            logs[c] = self.log_component(x, c)?;
        }
        let m = logs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = logs.iter().map(|&v| (v - m).exp()).sum();
        Ok(m + sum.ln() - cst::<T>(3.0).ln())
    }

    /// Index of the maximum-responsibility component.
    pub fn assign(&self, x: &[T]) -> Result<usize> {
        let mut best = 0;
        let mut best_val = T::neg_infinity();
        for c in 0..3 {
            let v = self.log_component(x, c)?;
            if v > best_val {
                best_val = v;
                best = c;
            }
        }
        Ok(best)
    }
}

/// Result of the mixture KL estimate.
#[derive(Debug, Clone, Serialize)]
pub struct MixtureKlReport<T> {
    pub kl: T,
    pub mc_std_error: T,
    pub z: [T; 3],
    pub z_std_error: [T; 3],
    pub weights: [T; 3],
    pub empty_components: [bool; 3],
}

struct FittedComponent<T> {
    weight: T,
    mean: Vec<T>,
    chol: Vec<T>,
    logdet: T,
}

fn log_gaussian<T: Real>(x: &[T], comp: &FittedComponent<T>) -> T {
    let d = comp.mean.len();
    let diff: Vec<T> = x.iter().zip(&comp.mean).map(|(&a, &b)| a - b).collect();
    let solved = chol_solve(&comp.chol, d, &diff);
    let maha: T = diff.iter().zip(&solved).map(|(&a, &b)| a * b).sum();
    let tau = cst::<T>(std::f64::consts::TAU);
    let half = cst::<T>(0.5);
    -half * (maha + comp.logdet + T::from_usize(d).unwrap() * tau.ln())
}

/// Estimates `KL(fit || tilted target)` for a 2-D batch spanning the
/// three conditions. `mc_draws` applies to both the KL average and the
/// per-component partition estimates (at least 1e5 recommended).
pub fn mixture_kl<T: Real>(
    samples: &[Vec<T>],
    model: &MixtureModel<T>,
    omega: T,
    mc_draws: usize,
    seed: u64,
) -> Result<MixtureKlReport<T>> {
    if samples.is_empty() {
        return Err(Error::Metric("empty sample batch".into()));
    }
    let target = TiltedMixture::estimate(model, omega, mc_draws, seed)?;

    // Hard assignment and per-cluster fits.
    let mut clusters: [Vec<Vec<T>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in samples {
        if s.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: s.len(),
            });
        }
        clusters[target.assign(s)?].push(s.clone());
    }
    let n_total = T::from_usize(samples.len()).unwrap();
    let mut weights = [T::zero(); 3];
    let mut empty = [false; 3];
    let mut comps: Vec<FittedComponent<T>> = Vec::new();
    for c in 0..3 {
        let cluster = &clusters[c];
        if cluster.len() < 8 {
            empty[c] = true;
            continue;
        }
        let fit = GaussianFit::fit(cluster)?;
        match cholesky(&fit.cov, 2) {
            Some(chol) => {
                let weight = T::from_usize(cluster.len()).unwrap() / n_total;
                weights[c] = weight;
                let logdet = chol_logdet(&chol, 2);
                comps.push(FittedComponent {
                    weight,
                    mean: fit.mean,
                    chol,
                    logdet,
                });
            }
            None => {
                empty[c] = true;
            }
        }
    }
    if comps.is_empty() {
        return Err(Error::Metric(
            "all mixture components empty or degenerate".into(),
        ));
    }

    // Monte Carlo KL over draws from the fitted mixture.
    let mut rng = stream(seed, StreamDomain::Metric, 200);
    let total_weight: T = comps.iter().map(|c| c.weight).sum();
    let n = T::from_usize(mc_draws).unwrap();
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for _ in 0..mc_draws {
        // Pick a component by weight, then draw x = mean + L z.
        let mut u = T::uniform_01(&mut rng) * total_weight;
        let mut chosen = comps.len() - 1;
        for (idx, comp) in comps.iter().enumerate() {
            if u < comp.weight {
                chosen = idx;
                break;
            }
            u -= comp.weight;
        }
        let comp = &comps[chosen];
        let z = [T::standard_normal(&mut rng), T::standard_normal(&mut rng)];
        let x = [
            comp.mean[0] + comp.chol[0] * z[0],
            comp.mean[1] + comp.chol[2] * z[0] + comp.chol[3] * z[1],
        ];
        // log f(x): weighted sum over fitted components.
        let mut logs: Vec<T> = comps
            .iter()
            .map(|c| log_gaussian(&x, c) + (c.weight / total_weight).ln())
            .collect();
        let m = logs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let log_f = m + logs.drain(..).map(|v| (v - m).exp()).sum::<T>().ln();
        let log_t = target.log_density(&x)?;
        let term = log_f - log_t;
        sum += term;
        sum_sq += term * term;
    }
    let kl = sum / n;
    let var = (sum_sq / n - kl * kl).max(T::zero());
    Ok(MixtureKlReport {
        kl,
        mc_std_error: (var / n).sqrt(),
        z: target.z(),
        z_std_error: target.z_std_error(),
        weights,
        empty_components: empty,
    })
}
