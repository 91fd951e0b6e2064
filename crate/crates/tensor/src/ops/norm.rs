//! Per-channel batch normalization over `[B, C, ...]` tensors.

use rayon::prelude::*;

use crate::element::Element;

/// How normalization statistics are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Normalize by the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize by externally supplied running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

/// Batch statistics observed in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, used for normalization.
    pub var: Vec<f64>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, the usual input to running-variance updates.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.count as f64;
        let factor = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * factor).collect()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormSaved<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

pub(crate) struct Layout {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
}

impl Layout {
    pub fn of(dims: &[usize]) -> Option<Self> {
        if dims.len() < 2 {
            return None;
        }
        Some(Layout {
            batch: dims[0],
            channels: dims[1],
            plane: dims[2..].iter().product(),
        })
    }

    fn per_channel(&self) -> usize {
        self.batch * self.plane
    }
}

pub(crate) fn forward<T: Element>(
    l: &Layout,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mode: &NormMode,
) -> (Vec<T>, NormSaved<T>, Option<BatchStats>) {
    let (mean, var, eps, train) = match mode {
        NormMode::Train { eps } => {
            let (m, v) = channel_moments(l, x);
            (m, v, *eps, true)
        }
        NormMode::Eval { mean, var, eps } => (mean.clone(), var.clone(), *eps, false),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    x_hat
        .par_chunks_mut(l.plane)
        .zip(y.par_chunks_mut(l.plane))
        .enumerate()
        .for_each(|(bc, (xh, out))| {
            let c = bc % l.channels;
            let src = &x[bc * l.plane..][..l.plane];
            let (m, s) = (mean[c], inv_std[c]);
            let (ga, be) = (gamma[c].as_f64(), beta[c].as_f64());
            for i in 0..l.plane {
                let n = (src[i].as_f64() - m) * s;
                xh[i] = T::from_f64(n);
                out[i] = T::from_f64(ga * n + be);
            }
        });
    let stats = train.then(|| BatchStats {
        mean,
        var,
        count: l.per_channel(),
    });
    (y, NormSaved { x_hat, inv_std, train }, stats)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn backward<T: Element>(
    l: &Layout,
    saved: &NormSaved<T>,
    gamma: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    // Per-channel sum(gy) and sum(gy * x_hat).
    let sums: Vec<(f64, f64)> = (0..l.channels)
        .into_par_iter()
        .map(|c| {
            let mut s_dy = 0.0;
            let mut s_dyx = 0.0;
            for b in 0..l.batch {
                let off = (b * l.channels + c) * l.plane;
                for i in off..off + l.plane {
                    let d = gy[i].as_f64();
                    s_dy += d;
                    s_dyx += d * saved.x_hat[i].as_f64();
                }
            }
            (s_dy, s_dyx)
        })
        .collect();
    let n = l.per_channel() as f64;
    let mut gx = vec![T::zero(); gy.len()];
    gx.par_chunks_mut(l.plane).enumerate().for_each(|(bc, dst)| {
        let c = bc % l.channels;
        let scale = gamma[c].as_f64() * saved.inv_std[c];
        let off = bc * l.plane;
        if saved.train {
            let (s_dy, s_dyx) = sums[c];
            for i in 0..l.plane {
                let d = gy[off + i].as_f64();
                let xh = saved.x_hat[off + i].as_f64();
                dst[i] = T::from_f64(scale * (d - s_dy / n - xh * s_dyx / n));
            }
        } else {
            for i in 0..l.plane {
                dst[i] = T::from_f64(scale * gy[off + i].as_f64());
            }
        }
    });
    let ggamma = sums.iter().map(|&(_, s)| T::from_f64(s)).collect();
    let gbeta = sums.iter().map(|&(s, _)| T::from_f64(s)).collect();
    (gx, ggamma, gbeta)
}

/// Per-channel mean and biased variance, two-pass in f64.
fn channel_moments<T: Element>(l: &Layout, x: &[T]) -> (Vec<f64>, Vec<f64>) {
    let n = l.per_channel() as f64;
    (0..l.channels)
        .into_par_iter()
        .map(|c| {
            let planes = || {
                (0..l.batch).flat_map(move |b| {
                    let off = (b * l.channels + c) * l.plane;
                    x[off..off + l.plane].iter().map(|v| v.as_f64())
                })
            };
            let mean = planes().sum::<f64>() / n;
            let var = planes().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var)
        })
        .unzip()
}
