//! Group and batch normalization with per-channel affine parameters.
//!
//! Both reduce to "normalize each element by the statistics of the set it
//! belongs to": groups are `(sample, channel group)` sets, batch norm uses one
//! set per channel spanning the whole minibatch. Statistics accumulate in f64.

use crate::tensor::{Real, Tensor5};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct NormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
    /// Unbiased per-set variance, used for batch-norm running statistics.
    pub var_unbiased: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
enum Sets {
    /// `(sample, group)` sets of `c / groups` channels each.
    Group { groups: usize },
    /// One set per channel.
    Channel,
}

impl Sets {
    fn count(self, n: usize, c: usize) -> usize {
        match self {
            Sets::Group { groups } => n * groups,
            Sets::Channel => c,
        }
    }

    #[inline]
    fn of(self, ni: usize, ch: usize, c: usize) -> usize {
        match self {
            Sets::Group { groups } => ni * groups + ch / (c / groups),
            Sets::Channel => ch,
        }
    }
}

fn forward_sets<T: Real>(x: &Tensor5<T>, sets: Sets, gamma: &[T], beta: &[T]) -> (Tensor5<T>, NormCache) {
    let [n, _, _, _, c] = x.shape();
    let v = x.voxels();
    let ns = sets.count(n, c);
    let mut sum = vec![0.0f64; ns];
    let mut cnt = vec![0usize; ns];
    for ni in 0..n {
        for row in x.sample(ni).chunks_exact(c) {
            for (ch, &val) in row.iter().enumerate() {
                let s = sets.of(ni, ch, c);
                let f = val.as_f64();
                sum[s] += f;
                cnt[s] += 1;
            }
        }
    }
    debug_assert!(cnt.iter().all(|&k| k > 0) && v > 0);
    let mut mean = vec![0.0; ns];
    let mut rstd = vec![0.0; ns];
    let mut var_unbiased = vec![0.0; ns];
    for s in 0..ns {
        mean[s] = sum[s] / cnt[s] as f64;
    }
    variance(x, sets, &mut mean, &mut rstd, &mut var_unbiased, &cnt);

    let mut y = Tensor5::zeros(x.shape());
    for ni in 0..n {
        let len = v * c;
        let src = x.sample(ni);
        let dst = &mut y.data_mut()[ni * len..(ni + 1) * len];
        for (ri, row) in src.chunks_exact(c).enumerate() {
            for (ch, &val) in row.iter().enumerate() {
                let s = sets.of(ni, ch, c);
                let xhat = (val.as_f64() - mean[s]) * rstd[s];
                dst[ri * c + ch] = T::from_f64_lossy(xhat) * gamma[ch] + beta[ch];
            }
        }
    }
    (y, NormCache { mean, rstd, var_unbiased })
}

/// Centered second pass over the set members.
fn variance<T: Real>(x: &Tensor5<T>, sets: Sets, mean: &mut [f64], rstd: &mut [f64], var_u: &mut [f64], cnt: &[usize]) {
    let [n, _, _, _, c] = x.shape();
    let mut sq = vec![0.0f64; mean.len()];
    for ni in 0..n {
        for row in x.sample(ni).chunks_exact(c) {
            for (ch, &val) in row.iter().enumerate() {
                let s = sets.of(ni, ch, c);
                let dlt = val.as_f64() - mean[s];
                sq[s] += dlt * dlt;
            }
        }
    }
    for s in 0..mean.len() {
        let m = cnt[s] as f64;
        let var = sq[s] / m;
        rstd[s] = 1.0 / (var + NORM_EPS).sqrt();
        var_u[s] = if cnt[s] > 1 { sq[s] / (m - 1.0) } else { var };
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_sets<T: Real>(
    x: &Tensor5<T>,
    dy: &Tensor5<T>,
    cache: &NormCache,
    sets: Sets,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor5<T> {
    let [n, _, _, _, c] = x.shape();
    let ns = cache.mean.len();
    let mut sum_g = vec![0.0f64; ns];
    let mut sum_gx = vec![0.0f64; ns];
    let mut cnt = vec![0usize; ns];
    let mut dgam = vec![0.0f64; c];
    let mut dbet = vec![0.0f64; c];
    for ni in 0..n {
        for (xr, gr) in x.sample(ni).chunks_exact(c).zip(dy.sample(ni).chunks_exact(c)) {
            for ch in 0..c {
                let s = sets.of(ni, ch, c);
                let xhat = (xr[ch].as_f64() - cache.mean[s]) * cache.rstd[s];
                let g = gr[ch].as_f64();
                dgam[ch] += g * xhat;
                dbet[ch] += g;
                let gh = g * gamma[ch].as_f64();
                sum_g[s] += gh;
                sum_gx[s] += gh * xhat;
                cnt[s] += 1;
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += T::from_f64_lossy(dgam[ch]);
        dbeta[ch] += T::from_f64_lossy(dbet[ch]);
    }
    let mut dx = Tensor5::zeros(x.shape());
    let len = x.voxels() * c;
    for ni in 0..n {
        let out = &mut dx.data_mut()[ni * len..(ni + 1) * len];
        for (ri, (xr, gr)) in x.sample(ni).chunks_exact(c).zip(dy.sample(ni).chunks_exact(c)).enumerate() {
            for ch in 0..c {
                let s = sets.of(ni, ch, c);
                let m = cnt[s] as f64;
                let xhat = (xr[ch].as_f64() - cache.mean[s]) * cache.rstd[s];
                let gh = gr[ch].as_f64() * gamma[ch].as_f64();
                let v = cache.rstd[s] / m * (m * gh - sum_g[s] - xhat * sum_gx[s]);
                out[ri * c + ch] = T::from_f64_lossy(v);
            }
        }
    }
    dx
}

pub fn group_norm<T: Real>(x: &Tensor5<T>, groups: usize, gamma: &[T], beta: &[T]) -> (Tensor5<T>, NormCache) {
    assert!(groups >= 1 && x.channels().is_multiple_of(groups), "groups must divide channels");
    forward_sets(x, Sets::Group { groups }, gamma, beta)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &Tensor5<T>,
    dy: &Tensor5<T>,
    cache: &NormCache,
    groups: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor5<T> {
    backward_sets(x, dy, cache, Sets::Group { groups }, gamma, dgamma, dbeta)
}

/// Training-mode batch norm: normalizes with the minibatch statistics.
pub fn batch_norm_train<T: Real>(x: &Tensor5<T>, gamma: &[T], beta: &[T]) -> (Tensor5<T>, NormCache) {
    forward_sets(x, Sets::Channel, gamma, beta)
}

pub fn batch_norm_backward<T: Real>(
    x: &Tensor5<T>,
    dy: &Tensor5<T>,
    cache: &NormCache,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor5<T> {
    backward_sets(x, dy, cache, Sets::Channel, gamma, dgamma, dbeta)
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval<T: Real>(x: &Tensor5<T>, gamma: &[T], beta: &[T], running_mean: &[T], running_var: &[T]) -> Tensor5<T> {
    let c = x.channels();
    let scale: Vec<f64> = (0..c)
        .map(|ch| gamma[ch].as_f64() / (running_var[ch].as_f64() + NORM_EPS).sqrt())
        .collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            let v = (row[ch].as_f64() - running_mean[ch].as_f64()) * scale[ch] + beta[ch].as_f64();
            row[ch] = T::from_f64_lossy(v);
        }
    }
    y
}

/// Exponential moving update of running statistics from a training batch.
pub fn update_running<T: Real>(cache: &NormCache, running_mean: &mut [T], running_var: &mut [T]) {
    for ch in 0..running_mean.len() {
        let rm = running_mean[ch].as_f64() * (1.0 - BN_MOMENTUM) + cache.mean[ch] * BN_MOMENTUM;
        let rv = running_var[ch].as_f64() * (1.0 - BN_MOMENTUM) + cache.var_unbiased[ch] * BN_MOMENTUM;
        running_mean[ch] = T::from_f64_lossy(rm);
        running_var[ch] = T::from_f64_lossy(rv);
    }
}
