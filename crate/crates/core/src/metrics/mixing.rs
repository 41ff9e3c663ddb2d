//! Finite-difference residual of a prediction field in the diffusion
//! dynamics.
//!
//! A field `eps(x, t)` consistent with the continuous diffusion obeys
//!
//! ```text
//! d eps/dt = 1/2 ( grad(eps . x) + lap(eps)
//!                 + (1 - s^2)/s^2 eps - grad |eps|^2 / s )
//! ```
//!
//! with `s = sigma(t)`. The mixing error is the left side minus the
//! right side, assembled here with central differences: the linear
//! guidance combination violates the quadratic term at large scales,
//! while the characteristic correction restores it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::real::{cst, Real};
use crate::schedule::sigma_of_time;

/// Finite-difference step sizes (space and time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdSteps<T> {
    pub space: T,
    pub time: T,
}

impl<T: Real> Default for FdSteps<T> {
    fn default() -> Self {
        FdSteps {
            space: cst(1e-4),
            time: cst(1e-4),
        }
    }
}

/// Residual norms over a set of probe points, with the steps used.
#[derive(Debug, Clone, Serialize)]
pub struct MixingErrorReport<T> {
    pub probe_points: Vec<Vec<T>>,
    pub e_m_norms: Vec<T>,
    pub fd_steps: FdSteps<T>,
    pub t: T,
}

/// Assembles the mixing-error vector at one probe point and time.
///
/// `eps_field` must be defined on a neighborhood of `(probe, t)`.
/// Refuses noise scales below 1e-3, where the `1/sigma` term amplifies
/// finite-difference noise beyond usefulness.
pub fn mixing_error_fd<T, F>(eps_field: &F, probe: &[T], t: T, fd: FdSteps<T>) -> Result<Vec<T>>
where
    T: Real,
    F: Fn(&[T], T) -> Result<Vec<T>>,
{
    let sigma = sigma_of_time(t)?;
    if sigma < cst(1e-3) {
        return Err(Error::invalid_param(
            "t",
            "noise scale below 1e-3 amplifies the quadratic term beyond usefulness",
        ));
    }
    let dim = probe.len();
    let h = fd.space;
    let ht = fd.time;
    let two = cst::<T>(2.0);
    let half = T::one() / two;

    let center = eps_field(probe, t)?;
    let plus_t = eps_field(probe, t + ht)?;
    let minus_t = eps_field(probe, t - ht)?;

    // One field evaluation per shifted point serves all three spatial
    // terms.
    let mut shifted_plus: Vec<Vec<T>> = Vec::with_capacity(dim);
    let mut shifted_minus: Vec<Vec<T>> = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut xp = probe.to_vec();
        let mut xm = probe.to_vec();
        xp[k] += h;
        xm[k] -= h;
        shifted_plus.push(eps_field(&xp, t)?);
        shifted_minus.push(eps_field(&xm, t)?);
    }

    let dot_with = |eps: &[T], x: &[T]| -> T { eps.iter().zip(x).map(|(&e, &v)| e * v).sum() };
    let norm_sq = |eps: &[T]| -> T { eps.iter().map(|&e| e * e).sum() };

    let mut e_m = vec![T::zero(); dim];
    let coef = (T::one() - sigma * sigma) / (sigma * sigma);
    for j in 0..dim {
        let d_dt = (plus_t[j] - minus_t[j]) / (two * ht);

        // grad_j (eps . x) and grad_j |eps|^2 at the probe.
        let mut xp = probe.to_vec();
        let mut xm = probe.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let grad_dot = (dot_with(&shifted_plus[j], &xp) - dot_with(&shifted_minus[j], &xm))
            / (two * h);
        let grad_norm = (norm_sq(&shifted_plus[j]) - norm_sq(&shifted_minus[j])) / (two * h);

        // Laplacian of component j over all axes.
        let mut lap = T::zero();
        for k in 0..dim {
            lap += (shifted_plus[k][j] - two * center[j] + shifted_minus[k][j]) / (h * h);
        }

        e_m[j] = d_dt - half * (grad_dot + lap + coef * center[j] - grad_norm / sigma);
    }
    Ok(e_m)
}

/// Convenience: residual norms across several probes.
pub fn mixing_error_report<T, F>(
    eps_field: &F,
    probes: &[Vec<T>],
    t: T,
    fd: FdSteps<T>,
) -> Result<MixingErrorReport<T>>
where
    T: Real,
    F: Fn(&[T], T) -> Result<Vec<T>>,
{
    let mut norms = Vec::with_capacity(probes.len());
    for p in probes {
        let e = mixing_error_fd(eps_field, p, t, fd)?;
        norms.push(e.iter().map(|&v| v * v).sum::<T>().sqrt());
    }
    Ok(MixingErrorReport {
        probe_points: probes.to_vec(),
        e_m_norms: norms,
        fd_steps: fd,
        t,
    })
}
