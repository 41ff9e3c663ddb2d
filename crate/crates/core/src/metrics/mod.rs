//! Quantitative evaluation of sample batches.
//!
//! Fitted-Gaussian KL against analytic targets, the tilted-mixture KL
//! with a Monte Carlo partition function, the lattice NLL, a
//! finite-difference residual of the prediction field in the diffusion
//! dynamics (mixing error), and histogram bimodality detection.

mod mixing;
mod mixture_kl;

pub use mixing::{mixing_error_fd, mixing_error_report, FdSteps, MixingErrorReport};
pub use mixture_kl::{mixture_kl, MixtureKlReport, TiltedMixture};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, chol_solve, cholesky};
use crate::magnet::{hamiltonian, LatticeField, MagnetParams};
use crate::real::{cst, Real};

/// Maximum-likelihood Gaussian fit (covariance normalized by `1/n`).
#[derive(Debug, Clone, Serialize)]
pub struct GaussianFit<T> {
    pub mean: Vec<T>,
    /// Row-major `d x d` covariance.
    pub cov: Vec<T>,
    pub n: usize,
}

impl<T: Real> GaussianFit<T> {
    pub fn fit(samples: &[Vec<T>]) -> Result<Self> {
        let n = samples.len();
        let dim = samples.first().map(|s| s.len()).unwrap_or(0);
        if dim == 0 || n <= dim {
            return Err(Error::Metric(format!(
                "need more than dim={dim} samples for a Gaussian fit, got {n}"
            )));
        }
        let n_t = T::from_usize(n).unwrap();
        let mut mean = vec![T::zero(); dim];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n_t;
        }
        let mut cov = vec![T::zero(); dim * dim];
        for s in samples {
            for i in 0..dim {
                let di = s[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / n_t;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(GaussianFit { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_trace(&self) -> T {
        let d = self.dim();
        (0..d).map(|i| self.cov[i * d + i]).sum()
    }
}

/// KL value with a degeneracy flag (singular fitted covariance reports
/// positive infinity).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KlResult<T> {
    pub nats: T,
    pub degenerate: bool,
}

/// Closed-form `KL(N(mean_f, cov_f) || N(mean_t, cov_t))`.
///
/// Returns `None` when the first covariance is not positive-definite;
/// errors when the target covariance is not.
pub fn gaussian_kl<T: Real>(
    mean_f: &[T],
    cov_f: &[T],
    mean_t: &[T],
    cov_t: &[T],
) -> Result<Option<T>> {
    let d = mean_f.len();
    if mean_t.len() != d || cov_f.len() != d * d || cov_t.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mean_t.len(),
        });
    }
    let chol_t = cholesky(cov_t, d)
        .ok_or_else(|| Error::Metric("target covariance not positive-definite".into()))?;
    let chol_f = match cholesky(cov_f, d) {
        Some(l) => l,
        None => return Ok(None),
    };
    // tr(St^-1 Sf): solve a column at a time.
    let mut trace = T::zero();
    let mut col = vec![T::zero(); d];
    for j in 0..d {
        for i in 0..d {
            col[i] = cov_f[i * d + j];
        }
        let solved = chol_solve(&chol_t, d, &col);
        trace += solved[j];
    }
    let diff: Vec<T> = mean_t.iter().zip(mean_f).map(|(&t, &f)| t - f).collect();
    let solved = chol_solve(&chol_t, d, &diff);
    let maha: T = diff.iter().zip(&solved).map(|(&a, &b)| a * b).sum();
    let logdet_t = chol_logdet(&chol_t, d);
    let logdet_f = chol_logdet(&chol_f, d);
    let half = cst::<T>(0.5);
    Ok(Some(
        half * (trace + maha - T::from_usize(d).unwrap() + logdet_t - logdet_f),
    ))
}

/// Fits a Gaussian to the samples and evaluates the closed-form KL
/// against the target. Degenerate (singular) fits report `+inf`.
pub fn fit_gaussian_kl<T: Real>(
    samples: &[Vec<T>],
    target_mean: &[T],
    target_cov: &[T],
) -> Result<(KlResult<T>, GaussianFit<T>)> {
    let fit = GaussianFit::fit(samples)?;
    let kl = gaussian_kl(&fit.mean, &fit.cov, target_mean, target_cov)?;
    let result = match kl {
        Some(nats) => KlResult {
            nats,
            degenerate: false,
        },
        None => KlResult {
            nats: T::infinity(),
            degenerate: true,
        },
    };
    Ok((result, fit))
}

/// Lattice NLL proxy: mean energy of the generated fields minus the
/// mean energy of the reference chain, both at temperature `temp`.
pub fn magnet_nll<T: Real>(
    fields: &[LatticeField<T>],
    temp: T,
    mh_reference: &[LatticeField<T>],
    params: &MagnetParams<T>,
) -> Result<T> {
    if fields.is_empty() || mh_reference.is_empty() {
        return Err(Error::Metric("both batches must be nonempty".into()));
    }
    let side = fields[0].side();
    if mh_reference[0].side() != side {
        return Err(Error::Metric("lattice sizes differ".into()));
    }
    let mean_energy = |batch: &[LatticeField<T>]| -> T {
        batch
            .iter()
            .map(|f| hamiltonian(f, temp, params))
            .sum::<T>()
            / T::from_usize(batch.len()).unwrap()
    };
    Ok(mean_energy(fields) - mean_energy(mh_reference))
}

/// Histogram peak structure of a magnetization sample.
#[derive(Debug, Clone, Serialize)]
pub struct BimodalityReport<T> {
    pub peak_count: usize,
    /// `min(two tallest peaks) / valley between them`; 1 when unimodal.
    pub peak_to_valley_ratio: T,
    pub peak_locations: Vec<T>,
}

/// Histogram + Gaussian smoothing + prominence-filtered local maxima.
///
/// Peaks must rise at least 5% of the global maximum above their
/// surrounding saddles to count.
pub fn bimodality_check<T: Real>(
    values: &[T],
    bins: usize,
    smooth: T,
) -> Result<BimodalityReport<T>> {
    if values.len() < 1000 {
        return Err(Error::Metric(format!(
            "need at least 1000 values, got {}",
            values.len()
        )));
    }
    if bins < 4 {
        return Err(Error::Metric("need at least 4 bins".into()));
    }
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::Metric("degenerate input: all values equal".into()));
    }
    let width = (hi - lo) / T::from_usize(bins).unwrap();
    let mut hist = vec![T::zero(); bins];
    for &v in values {
        let mut b = ((v - lo) / width).to_f64_lossy() as usize;
        if b >= bins {
            b = bins - 1;
        }
        hist[b] += T::one();
    }
    // Gaussian smoothing over bin indices, kernel truncated at 4 widths.
    let reach = (smooth.to_f64_lossy() * 4.0).ceil() as isize;
    let two = cst::<T>(2.0);
    let mut smoothed = vec![T::zero(); bins];
    for b in 0..bins as isize {
        let mut acc = T::zero();
        let mut mass = T::zero();
        for k in (b - reach)..=(b + reach) {
            if k < 0 || k >= bins as isize {
                continue;
            }
            let d = T::from_isize(b - k).unwrap() / smooth;
            let w = (-d * d / two).exp();
            acc += w * hist[k as usize];
            mass += w;
        }
        smoothed[b as usize] = acc / mass;
    }
    let global_max = smoothed.iter().fold(T::zero(), |a, &b| a.max(b));
    let min_prominence = cst::<T>(0.05) * global_max;

    // Local maxima with topographic prominence.
    let mut peaks: Vec<(usize, T)> = Vec::new();
    for b in 0..bins {
        let left = if b > 0 { smoothed[b - 1] } else { T::neg_infinity() };
        let right = if b + 1 < bins {
            smoothed[b + 1]
        } else {
            T::neg_infinity()
        };
        if smoothed[b] > left && smoothed[b] >= right {
            let height = smoothed[b];
            let base_side = |range: Box<dyn Iterator<Item = usize>>| -> T {
                let mut lowest = height;
                for k in range {
                    if smoothed[k] > height {
                        break;
                    }
                    lowest = lowest.min(smoothed[k]);
                }
                lowest
            };
            let left_base = base_side(Box::new((0..b).rev()));
            let right_base = base_side(Box::new(b + 1..bins));
            let prominence = height - left_base.max(right_base);
            if prominence >= min_prominence {
                peaks.push((b, height));
            }
        }
    }
    let center = |b: usize| lo + width * (T::from_usize(b).unwrap() + cst::<T>(0.5));
    let peak_locations: Vec<T> = peaks.iter().map(|&(b, _)| center(b)).collect();

    let ratio = if peaks.len() >= 2 {
        let mut by_height = peaks.clone();
        by_height.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let (b1, h1) = by_height[0];
        let (b2, h2) = by_height[1];
        let (lo_b, hi_b) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
        let valley = smoothed[lo_b + 1..hi_b]
            .iter()
            .fold(T::infinity(), |a, &b| a.min(b));
        if valley > T::zero() {
            h1.min(h2) / valley
        } else {
            T::infinity()
        }
    } else {
        T::one()
    };
    Ok(BimodalityReport {
        peak_count: peaks.len(),
        peak_to_valley_ratio: ratio,
        peak_locations,
    })
}
