use serde::{Deserialize, Serialize};

use super::conv::accumulate;
use super::{Differentiable, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// False until set explicitly or updated by a train-mode pass.
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1: usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: true,
        }
    }

    /// Placeholder that refuses eval-mode use until a train-mode pass.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            initialized: false,
            ..Self::standard(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub mode: BnMode,
    pub shape: [usize; 4],
    /// Normalised input `(x - mean) * inv_std`.
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
}

fn bn_dims<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = match *input.shape() {
        [b, c, h, w] => [b, c, h, w],
        ref s => return Err(Error::shape(format!("batchnorm2d expects [B,C,H,W], got {s:?}"))),
    };
    if gamma.shape() != [dims[1]] || beta.shape() != [dims[1]] {
        return Err(Error::shape(format!(
            "batchnorm2d gamma/beta must be [{}], got {:?} / {:?}",
            dims[1],
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(dims)
}

/// Per-channel batch normalisation over the batch and both spatial axes.
///
/// Train mode normalises with the biased batch variance and folds the
/// unbiased variance into the running statistics with the given momentum.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [b, c, h, w] = bn_dims(input, gamma, beta)?;
    if stats.channels() != c {
        return Err(Error::shape(format!(
            "running stats have {} channels, input has {c}",
            stats.channels()
        )));
    }
    let hw = h * w;
    let count = b * hw;
    let x = input.data();
    let mut inv_std = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];

    match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(Error::shape(format!(
                    "batchnorm2d train mode needs at least 2 values per channel, got {count}"
                )));
            }
            let n = T::from_f64(count as f64);
            let m = T::from_f64(momentum);
            for ch in 0..c {
                let mut sum = T::zero();
                for s in 0..b {
                    sum = sum + x[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mean = sum / n;
                let mut sq = T::zero();
                for s in 0..b {
                    for &v in &x[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                        let d = v - mean;
                        sq = sq + d * d;
                    }
                }
                let var = sq / n;
                means[ch] = mean;
                inv_std[ch] = T::one() / (var + T::from_f64(eps)).sqrt();
                let unbiased = sq / (n - T::one());
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean;
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
            }
            stats.initialized = true;
        }
        BnMode::Eval => {
            if !stats.initialized {
                return Err(Error::invalid(
                    "batchnorm2d eval mode used before running statistics were initialised",
                ));
            }
            for ch in 0..c {
                means[ch] = stats.mean[ch];
                inv_std[ch] = T::one() / (stats.var[ch] + T::from_f64(eps)).sqrt();
            }
        }
    }

    let mut x_hat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for s in 0..b {
        for ch in 0..c {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let (g, bt, mean, istd) = (gamma.data()[ch], beta.data()[ch], means[ch], inv_std[ch]);
            for ((xh, o), &v) in x_hat[range.clone()].iter_mut().zip(&mut out[range.clone()]).zip(&x[range]) {
                *xh = (v - mean) * istd;
                *o = g * *xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            mode,
            shape: [b, c, h, w],
            x_hat,
            inv_std,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = cache.shape;
    if grad_output.shape() != cache.shape {
        return Err(Error::shape(format!(
            "batchnorm2d grad_output must be {:?}, got {:?}",
            cache.shape,
            grad_output.shape()
        )));
    }
    let hw = h * w;
    let n = T::from_f64((b * hw) as f64);
    let dy = grad_output.data();
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for s in 0..b {
        for ch in 0..c {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for (&g, &xh) in dy[range.clone()].iter().zip(&cache.x_hat[range]) {
                d_gamma[ch] = d_gamma[ch] + g * xh;
                d_beta[ch] = d_beta[ch] + g;
            }
        }
    }

    let mut dx = vec![T::zero(); dy.len()];
    for s in 0..b {
        for ch in 0..c {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            match cache.mode {
                BnMode::Eval => {
                    for (d, &g) in dx[range.clone()].iter_mut().zip(&dy[range]) {
                        *d = g * scale;
                    }
                }
                BnMode::Train => {
                    // dx = gamma*inv_std/N * (N*dy - sum(dy) - x_hat*sum(dy*x_hat))
                    let (sum_dy, sum_dy_xh) = (d_beta[ch], d_gamma[ch]);
                    for ((d, &g), &xh) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&cache.x_hat[range]) {
                        *d = scale / n * (n * g - sum_dy - xh * sum_dy_xh);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(&cache.shape, dx)?,
        Tensor::new(&[c], d_gamma)?,
        Tensor::new(&[c], d_beta)?,
    ))
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
    pub mode: BnMode,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::standard(channels),
            mode: BnMode::Train,
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Differentiable<T> for BatchNorm2d<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, cache) = batchnorm2d(input, &self.gamma, &self.beta, &mut self.stats, self.mode, self.eps, self.momentum)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("batchnorm backward called before forward"))?;
        let (dx, dg, db) = batchnorm2d_backward(grad_output, &self.gamma, cache)?;
        accumulate(&mut self.gamma, &dg);
        accumulate(&mut self.beta, &db);
        Ok(dx)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
