//! Exact denoising predictions for an empirical dataset.
//!
//! The diffused density of `N` data points is a uniform mixture of
//! Gaussians `N(sqrt(a) x0_j, (1 - a) I)`; its prediction is the
//! softmax-weighted displacement field over the points. This is the
//! stand-in for a trained denoiser in the lattice experiment: the score
//! is exact for the empirical distribution the chain produced.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::{cst, Real};
use crate::schedule::NoiseSchedule;

use super::{check_dim, AnalyticDensity, NoiseLevel, ScoreModel};

/// Empirical sample set, uniformly weighted by default.
///
/// Optional per-point log-weights support ensembles tied to the same
/// support: two nearby Boltzmann temperatures share one atom set and
/// differ only by reweighting, which keeps the conditional and
/// unconditional predictions consistent down to small noise scales
/// (independent atom sets make their difference blow up there).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDataset<T> {
    dim: usize,
    // row-major, len = dim * n
    points: Vec<T>,
    // natural-log weights, None = uniform
    log_weights: Option<Vec<T>>,
}

impl<T: Real> KernelDataset<T> {
    pub fn new(dim: usize, points: Vec<T>) -> Result<Self> {
        if dim == 0 || points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len(),
            });
        }
        Ok(KernelDataset {
            dim,
            points,
            log_weights: None,
        })
    }

    /// Same support with new (unnormalized) log-weights.
    pub fn reweighted(&self, log_weights: Vec<T>) -> Result<Self> {
        if log_weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: log_weights.len(),
            });
        }
        if log_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid_param("log_weights", "must be finite"));
        }
        Ok(KernelDataset {
            dim: self.dim,
            points: self.points.clone(),
            log_weights: Some(log_weights),
        })
    }

    pub fn log_weight(&self, j: usize) -> T {
        match &self.log_weights {
            Some(w) => w[j],
            None => T::zero(),
        }
    }

    /// Kish effective sample size of the weights (n when uniform).
    pub fn effective_sample_size(&self) -> T {
        match &self.log_weights {
            None => T::from_usize(self.len()).unwrap(),
            Some(w) => {
                let m = w.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let sum: T = w.iter().map(|&lw| (lw - m).exp()).sum();
                let sum_sq: T = w
                    .iter()
                    .map(|&lw| {
                        let v = (lw - m).exp();
                        v * v
                    })
                    .sum();
                sum * sum / sum_sq
            }
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or(Error::EmptyDataset)?;
        let mut points = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            points.extend_from_slice(row);
        }
        KernelDataset::new(dim, points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, j: usize) -> &[T] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    /// Uniform subsample without replacement; returns all points when
    /// `m` meets or exceeds the dataset size. Weights follow their
    /// points.
    pub fn subsample<R: Rng>(&self, m: usize, rng: &mut R) -> Self {
        let n = self.len();
        if m >= n {
            return self.clone();
        }
        let mut indices: Vec<usize> = (0..n).collect();
        for k in 0..m {
            let j = k + rng.gen_range(0..(n - k));
            indices.swap(k, j);
        }
        let mut points = Vec::with_capacity(m * self.dim);
        for &idx in indices.iter().take(m) {
            points.extend_from_slice(self.point(idx));
        }
        let log_weights = self
            .log_weights
            .as_ref()
            .map(|w| indices.iter().take(m).map(|&idx| w[idx]).collect());
        KernelDataset {
            dim: self.dim,
            points,
            log_weights,
        }
    }

    /// Writes the `dim,N` header followed by one comma-separated row
    /// per point.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        writeln!(w, "{},{}", self.dim, self.len()).map_err(io_err)?;
        for j in 0..self.len() {
            let row: Vec<String> = self.point(j).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(",")).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line.map_err(|e| Error::io(path.display().to_string(), e))?,
            None => return Err(Error::EmptyDataset),
        };
        let mut parts = header.split(',');
        let parse_head = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Config {
                    line: 1,
                    reason: "dataset header must be `dim,N`".into(),
                })
        };
        let dim = parse_head(parts.next())?;
        let n = parse_head(parts.next())?;
        let mut points = Vec::with_capacity(dim * n);
        for (lineno, line) in lines {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            for field in line.split(',') {
                let value: f64 = field.trim().parse().map_err(|_| Error::Config {
                    line: lineno + 1,
                    reason: format!("bad float `{field}`"),
                })?;
                points.push(cst::<T>(value));
            }
        }
        if points.len() != dim * n {
            return Err(Error::Config {
                line: 1,
                reason: format!(
                    "expected {} values ({}x{}), found {}",
                    dim * n,
                    n,
                    dim,
                    points.len()
                ),
            });
        }
        KernelDataset::new(dim, points)
    }
}

/// Score model backed by labeled datasets: one per condition label
/// plus a designated unconditional one.
pub struct KernelModel<T> {
    schedule: Arc<NoiseSchedule<T>>,
    dim: usize,
    uncond: KernelDataset<T>,
    labeled: Vec<(T, KernelDataset<T>)>,
}

impl<T: Real> KernelModel<T> {
    pub fn new(
        schedule: Arc<NoiseSchedule<T>>,
        uncond: KernelDataset<T>,
        labeled: Vec<(T, KernelDataset<T>)>,
    ) -> Result<Self> {
        let dim = uncond.dim();
        for (_, ds) in &labeled {
            if ds.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: ds.dim(),
                });
            }
        }
        Ok(KernelModel {
            schedule,
            dim,
            uncond,
            labeled,
        })
    }

    fn dataset(&self, cond: Option<&T>) -> Result<&KernelDataset<T>> {
        match cond {
            None => Ok(&self.uncond),
            Some(&label) => self
                .labeled
                .iter()
                .find(|(l, _)| *l == label)
                .map(|(_, ds)| ds)
                .ok_or_else(|| {
                    Error::InvalidCondition(format!("no dataset labeled {label}"))
                }),
        }
    }

    /// Raw kernel prediction over one dataset.
    pub fn eps_over(&self, data: &KernelDataset<T>, x: &[T], level: NoiseLevel<T>) -> Result<Vec<T>> {
        check_dim(self.dim, x)?;
        if level.sigma <= T::zero() {
            return Err(Error::ZeroNoiseScale { step: 0 });
        }
        let n = data.len();
        let root_a = level.alpha_bar.sqrt();
        let inv_two_var = T::one() / ((T::one() + T::one()) * level.sigma * level.sigma);
        let mut logw = vec![T::zero(); n];
        let mut max_logw = T::neg_infinity();
        for j in 0..n {
            let p = data.point(j);
            let mut d2 = T::zero();
            for k in 0..self.dim {
                let d = x[k] - root_a * p[k];
                d2 += d * d;
            }
            let lw = data.log_weight(j) - d2 * inv_two_var;
            logw[j] = lw;
            if lw > max_logw {
                max_logw = lw;
            }
        }
        let mut total = T::zero();
        let mut eps = vec![T::zero(); self.dim];
        for j in 0..n {
            let w = (logw[j] - max_logw).exp();
            total += w;
            let p = data.point(j);
            for k in 0..self.dim {
                eps[k] += w * (x[k] - root_a * p[k]);
            }
        }
        let scale = T::one() / (total * level.sigma);
        for e in &mut eps {
            *e *= scale;
        }
        Ok(eps)
    }

    fn log_density_over(&self, data: &KernelDataset<T>, x: &[T], level: NoiseLevel<T>) -> Result<T> {
        check_dim(self.dim, x)?;
        if level.sigma <= T::zero() {
            return Err(Error::ZeroNoiseScale { step: 0 });
        }
        let n = data.len();
        let root_a = level.alpha_bar.sqrt();
        let var = level.sigma * level.sigma;
        let inv_two_var = T::one() / ((T::one() + T::one()) * var);
        let mut max_logw = T::neg_infinity();
        let mut logw = vec![T::zero(); n];
        let mut max_pure_w = T::neg_infinity();
        for j in 0..n {
            let p = data.point(j);
            let mut d2 = T::zero();
            for k in 0..self.dim {
                let d = x[k] - root_a * p[k];
                d2 += d * d;
            }
            logw[j] = data.log_weight(j) - d2 * inv_two_var;
            if logw[j] > max_logw {
                max_logw = logw[j];
            }
            if data.log_weight(j) > max_pure_w {
                max_pure_w = data.log_weight(j);
            }
        }
        let sum: T = logw.iter().map(|&lw| (lw - max_logw).exp()).sum();
        // Normalizer: log sum of the raw weights (n for uniform).
        let weight_mass: T = (0..n)
            .map(|j| (data.log_weight(j) - max_pure_w).exp())
            .sum();
        let log_norm = max_pure_w + weight_mass.ln();
        let tau = cst::<T>(std::f64::consts::TAU);
        let d_half = cst::<T>(self.dim as f64 / 2.0);
        Ok(max_logw + sum.ln() - log_norm - d_half * (tau * var).ln())
    }
}

impl<T: Real> ScoreModel<T> for KernelModel<T> {
    type Cond = T;

    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn eps_at(&self, x: &[T], cond: Option<&T>, level: NoiseLevel<T>) -> Result<Vec<T>> {
        let data = self.dataset(cond)?;
        self.eps_over(data, x, level)
    }

    fn eps_clean(&self, _x: &[T], _cond: Option<&T>) -> Result<Vec<T>> {
        // The empirical mixture degenerates to point masses at sigma = 0.
        Err(Error::ZeroNoiseScale { step: 0 })
    }
}

impl<T: Real> AnalyticDensity<T> for KernelModel<T> {
    fn log_density(&self, x: &[T], cond: Option<&T>, level: NoiseLevel<T>) -> Result<T> {
        let data = self.dataset(cond)?;
        self.log_density_over(data, x, level)
    }
}
