use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance used in eval mode.
///
/// Statistics start uninitialized; the first training batch copies its
/// own statistics in, later batches blend with [`BN_MOMENTUM`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance, marked initialized.
    pub fn identity(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Mean over each `H x W` plane: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::invalid(
            "global_avg_pool",
            format!("expected [N,C,H,W], got {:?}", input.shape()),
        ));
    }
    let (n, c) = (input.dim(0), input.dim(1));
    let hw = input.dim(2) * input.dim(3);
    let inv = T::from_f64_lossy(1.0 / hw as f64);
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], out)
}

/// Activations saved for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn check_affine<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if input.rank() != 4 && input.rank() != 2 {
        return Err(Error::invalid(
            "batch_norm",
            format!("expected [N,C,H,W] or [N,C], got {:?}", input.shape()),
        ));
    }
    let c = input.dim(1);
    if gamma.shape() != [c] {
        return Err(Error::shape("batch_norm", gamma.shape(), &[c]));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("batch_norm", beta.shape(), &[c]));
    }
    Ok(c)
}

fn plane_size<T: Real>(input: &Tensor<T>) -> usize {
    input.shape()[2..].iter().product()
}

pub fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    batch_norm_forward_saved(input, gamma, beta, stats, mode).map(|(y, _)| y)
}

pub(crate) fn batch_norm_forward_saved<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let c = check_affine(input, gamma, beta)?;
    if stats.channels() != c {
        return Err(Error::shape("batch_norm", &[stats.channels()], &[c]));
    }
    let n = input.dim(0);
    let hw = plane_size(input);
    let count = n * hw;
    let x = input.data();

    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::invalid(
                    "batch_norm",
                    "training mode needs at least two values per channel",
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s += x[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    ss += x[off..off + hw]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            let unbias = count as f64 / (count - 1) as f64;
            for ch in 0..c {
                let (bm, bv) = (mean[ch], var[ch] * unbias);
                if stats.initialized {
                    let old_m = stats.mean[ch].as_f64();
                    let old_v = stats.var[ch].as_f64();
                    stats.mean[ch] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * old_m + BN_MOMENTUM * bm);
                    stats.var[ch] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * old_v + BN_MOMENTUM * bv);
                } else {
                    stats.mean[ch] = T::from_f64_lossy(bm);
                    stats.var[ch] = T::from_f64_lossy(bv);
                }
            }
            stats.initialized = true;
            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, inv)
        }
        Mode::Eval => {
            if !stats.initialized {
                return Err(Error::UninitializedStats {
                    layer: "batch_norm".into(),
                });
            }
            (
                stats.mean.iter().map(|v| v.as_f64()).collect(),
                stats.var.iter().map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt()).collect(),
            )
        }
    };

    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let m = T::from_f64_lossy(mean[ch]);
            let s = T::from_f64_lossy(inv_std[ch]);
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let h = (x[i] - m) * s;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    let saved = BatchNormSaved {
        xhat: Tensor::new(input.shape(), xhat)?,
        inv_std: inv_std.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        mode,
    };
    Ok((Tensor::new(input.shape(), y)?, saved))
}

/// Returns `(d input, d gamma, d beta)`.
pub(crate) fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != saved.xhat.shape() {
        return Err(Error::shape(
            "batch_norm_backward",
            grad_out.shape(),
            saved.xhat.shape(),
        ));
    }
    let shape = grad_out.shape();
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let count = (n * hw) as f64;
    let g = grad_out.data();
    let xh = saved.xhat.data();

    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_g[ch] += g[i].as_f64();
                sum_gx[ch] += (g[i] * xh[i]).as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            match saved.mode {
                Mode::Train => {
                    let mg = T::from_f64_lossy(sum_g[ch] / count);
                    let mgx = T::from_f64_lossy(sum_gx[ch] / count);
                    for i in off..off + hw {
                        dx[i] = scale * (g[i] - mg - xh[i] * mgx);
                    }
                }
                Mode::Eval => {
                    for i in off..off + hw {
                        dx[i] = scale * g[i];
                    }
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>();
    Ok((
        Tensor::new(shape, dx)?,
        Tensor::new(&[c], to_t(sum_gx))?,
        Tensor::new(&[c], to_t(sum_g))?,
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn channel_moments(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        let (n, c) = (t.dim(0), t.dim(1));
        let hw = t.dim(2) * t.dim(3);
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|b| t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec())
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn pool_means() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 3.5);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 3.5));
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 2.0, &mut rng).map(|v| v + 1.5);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let mut stats = RunningStats::uninitialized(3);
        let y = batch_norm_forward(&x, &ones, &zeros, &mut stats, Mode::Train).unwrap();
        for (m, v) in channel_moments(&y) {
            assert!(m.abs() < 1e-6, "mean {m}");
            // eps shrinks the variance by var / (var + eps)
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
        assert!(stats.initialized);

        let gamma = Tensor::full(&[3], 2.0);
        let beta = Tensor::full(&[3], 1.0);
        let y = batch_norm_forward(&x, &gamma, &beta, &mut stats, Mode::Train).unwrap();
        for (m, v) in channel_moments(&y) {
            assert!((m - 1.0).abs() < 1e-6);
            assert!((v.sqrt() - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn already_normalized_is_identity() {
        // values +-1 per channel: exact zero mean, unit (biased) variance
        let data: Vec<f64> = (0..2 * 2 * 2 * 2)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::<f64>::from_f64(&[2, 2, 2, 2], &data).unwrap();
        let mut stats = RunningStats::uninitialized(2);
        let y = batch_norm_forward(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn eval_requires_stats() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let mut stats = RunningStats::uninitialized(2);
        let err = batch_norm_forward(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Eval,
        );
        assert!(matches!(err, Err(Error::UninitializedStats { .. })));
    }

    #[test]
    fn running_stats_blend() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[0.0, 2.0]).unwrap();
        let (g, b) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
        let mut stats = RunningStats::uninitialized(1);
        batch_norm_forward(&x, &g, &b, &mut stats, Mode::Train).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![2.0]);
        let x2 = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[10.0, 10.0]).unwrap();
        batch_norm_forward(&x2, &g, &b, &mut stats, Mode::Train).unwrap();
        assert!((stats.mean[0] - 1.9).abs() < 1e-12);
        assert!((stats.var[0] - 1.8).abs() < 1e-12);
    }
}
