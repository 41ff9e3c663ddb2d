//! Small dense linear-algebra helpers.
//!
//! Everything here operates on tiny matrices (solver history buffers,
//! sample-covariance fits), so plain `Vec`-backed routines are enough.
//! Matrices are row-major flat slices.

use crate::real::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns the lower factor `L` (row-major) with `A = L Lᵀ`, or `None`
/// if a pivot is non-positive (matrix not positive-definite).
pub fn cholesky<T: Real>(a: &[T], d: usize) -> Option<Vec<T>> {
    assert_eq!(a.len(), d * d);
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= T::zero() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor.
pub fn chol_solve<T: Real>(l: &[T], d: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            let lik = l[i * d + k];
            y[i] = y[i] - lik * y[k];
        }
        y[i] /= l[i * d + i];
    }
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            let lki = l[k * d + i];
            y[i] = y[i] - lki * y[k];
        }
        y[i] /= l[i * d + i];
    }
    y
}

/// log det(A) from the lower Cholesky factor of A.
pub fn chol_logdet<T: Real>(l: &[T], d: usize) -> T {
    let two = T::one() + T::one();
    (0..d).map(|i| l[i * d + i].ln()).sum::<T>() * two
}

/// Eigendecomposition of a small symmetric matrix by the cyclic Jacobi
/// method. Returns (eigenvalues, eigenvectors as columns, row-major).
pub fn symmetric_eigen<T: Real>(a: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    let mut v = vec![T::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = T::one();
    }
    let tol = T::epsilon() * crate::real::cst::<T>(1e2);
    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / ((T::one() + T::one()) * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let evals = (0..d).map(|i| m[i * d + i]).collect();
    (evals, v)
}

/// Minimum-norm least-squares solution of `min_w ‖Σ_j w_j col_j − b‖₂`.
///
/// Columns may be rank-deficient or outnumber the ambient dimension; the
/// normal equations are inverted through a thresholded eigendecomposition,
/// which yields the pseudo-inverse (minimum-norm) solution.
pub fn min_norm_least_squares<T: Real>(cols: &[Vec<T>], b: &[T]) -> Vec<T> {
    let p = cols.len();
    if p == 0 {
        return Vec::new();
    }
    if p == 1 {
        // Scalar case: w = <col, b> / <col, col>, zero when the column
        // vanishes (minimum-norm convention).
        let cc = dot(&cols[0], &cols[0]);
        if cc <= T::zero() {
            return vec![T::zero()];
        }
        return vec![dot(&cols[0], b) / cc];
    }
    let mut gram = vec![T::zero(); p * p];
    let mut rhs = vec![T::zero(); p];
    for i in 0..p {
        for j in 0..p {
            gram[i * p + j] = dot(&cols[i], &cols[j]);
        }
        rhs[i] = dot(&cols[i], b);
    }
    let (evals, evecs) = symmetric_eigen(&gram, p);
    let lam_max = evals
        .iter()
        .fold(T::zero(), |acc, &l| if l > acc { l } else { acc });
    let cutoff = lam_max * crate::real::cst::<T>(1e-12);
    let mut w = vec![T::zero(); p];
    for k in 0..p {
        if evals[k] <= cutoff {
            continue;
        }
        let mut proj = T::zero();
        for i in 0..p {
            proj += evecs[i * p + k] * rhs[i];
        }
        let scale = proj / evals[k];
        for i in 0..p {
            w[i] += scale * evecs[i * p + k];
        }
    }
    w
}
