//! Streaming first and second moments of per-replication vectors, reduced in
//! a fixed block order so results do not depend on the thread schedule.

use rayon::prelude::*;

use crate::error::Result;

/// Replications per work item; blocks are merged in index order.
pub const BLOCK_SIZE: usize = 1024;

/// Running mean and co-moment matrix of a fixed-length vector statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    count: u64,
    mean: Vec<f64>,
    // row-major dim × dim sum of centered cross products
    comoment: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        let dim = self.dim();
        let mut delta = vec![0.0; dim];
        for (i, d) in delta.iter_mut().enumerate() {
            *d = x[i] - self.mean[i];
            self.mean[i] += *d / n;
        }
        for i in 0..dim {
            let after = x[i] - self.mean[i];
            let row = &mut self.comoment[i * dim..(i + 1) * dim];
            for (j, c) in row.iter_mut().enumerate() {
                *c += delta[j] * after;
            }
        }
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let dim = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = (0..dim).map(|i| other.mean[i] - self.mean[i]).collect();
        for i in 0..dim {
            for j in 0..dim {
                self.comoment[i * dim + j] +=
                    other.comoment[i * dim + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (i, d) in delta.iter().enumerate() {
            self.mean[i] += d * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.mean[i]
    }

    pub fn means(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample covariance of components `i` and `j`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.comoment[i * self.dim() + j] / (self.count - 1) as f64
    }

    /// Standard error of the mean of component `i`.
    pub fn mean_se(&self, i: usize) -> f64 {
        (self.covariance(i, i) / self.count as f64).sqrt()
    }

    /// Mean of `aᵀx`.
    pub fn linear_mean(&self, a: &[f64]) -> f64 {
        a.iter().zip(&self.mean).map(|(c, m)| c * m).sum()
    }

    /// Sample variance of `aᵀx` (per replication).
    pub fn linear_variance(&self, a: &[f64]) -> f64 {
        self.bilinear_covariance(a, a)
    }

    /// Sample covariance of `aᵀx` and `bᵀx` (per replication).
    pub fn bilinear_covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        let dim = self.dim();
        let mut acc = 0.0;
        for i in 0..dim {
            if a[i] == 0.0 {
                continue;
            }
            for j in 0..dim {
                if b[j] != 0.0 {
                    acc += a[i] * b[j] * self.comoment[i * dim + j];
                }
            }
        }
        acc / (self.count - 1) as f64
    }

    /// Mean and standard error of the mean of `aᵀx`.
    pub fn linear_mean_se(&self, a: &[f64]) -> (f64, f64) {
        let var = self.linear_variance(a).max(0.0);
        (self.linear_mean(a), (var / self.count as f64).sqrt())
    }
}

/// Evaluates `stat(rep, out)` for `rep in 0..reps` and accumulates the
/// `dim`-vectors it writes. Blocks run in parallel on the current rayon pool
/// and are merged in block order, so the result is bit-identical for any
/// number of threads.
pub fn accumulate<F>(reps: usize, dim: usize, stat: F) -> Result<Moments>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    let blocks = reps.div_ceil(BLOCK_SIZE);
    let partials: Vec<Result<Moments>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut m = Moments::new(dim);
            let mut buf = vec![0.0; dim];
            let start = b * BLOCK_SIZE;
            let end = (start + BLOCK_SIZE).min(reps);
            for rep in start..end {
                stat(rep as u64, &mut buf)?;
                m.push(&buf);
            }
            Ok(m)
        })
        .collect();
    let mut total = Moments::new(dim);
    for p in partials {
        total.merge(&p?);
    }
    Ok(total)
}
