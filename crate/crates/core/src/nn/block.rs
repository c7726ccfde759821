//! Fused conv -> ReLU -> BatchNorm -> MaxPool kernels over reusable buffers.
//!
//! Work is done one sample at a time so each activation plane is touched
//! while it is still in cache. Batch statistics are merged from per-plane
//! (mean, M2) pairs. The normalised activation is never materialised:
//! BatchNorm is a per-channel monotone map, so the pooling winner is chosen
//! on the raw ReLU output (largest for gamma > 0, smallest for gamma < 0,
//! first for gamma = 0) and only the winners are normalised.

use crate::error::{Error, Result};
use crate::tensor::{
    check_finite, conv_backward_sample, conv_forward_sample, lane_sq_dev, lane_sum, BnMode, ConvDims, RunningStats,
    Scalar,
};

use super::ConvBlock;

/// Activations one block keeps between forward and backward.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockState<T> {
    pub dims: Option<ConvDims>,
    pub mode: Option<BnMode>,
    /// ReLU of the convolution output, `[B, C, Ho, Wo]`.
    pub relu: Vec<T>,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Block output, `[B, C, Hp, Wp]`.
    pub pooled: Vec<T>,
    /// Flat index into `relu` of each pooled value.
    pub argmax: Vec<u32>,
    pub pooled_hw: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Scratch<T> {
    pub col: Vec<T>,
    pub g_col: Vec<T>,
    pub g_conv: Vec<T>,
    pub routed: Vec<T>,
    plane_stats: Vec<(f64, f64)>,
}

/// Picks the first window element maximising `v * sign`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn pool_plane<T: Scalar>(plane: &[T], wo: usize, (ph, pw): (usize, usize), (hp, wp): (usize, usize), sign: T, base: usize, idx: &mut [u32]) {
    for oy in 0..hp {
        for ox in 0..wp {
            let mut best_i = oy * ph * wo + ox * pw;
            let mut best = plane[best_i] * sign;
            for dy in 0..ph {
                let row = (oy * ph + dy) * wo + ox * pw;
                for dx in 0..pw {
                    let v = plane[row + dx] * sign;
                    if v > best {
                        best = v;
                        best_i = row + dx;
                    }
                }
            }
            idx[oy * wp + ox] = (base + best_i) as u32;
        }
    }
}

fn pool_dispatch<T: Scalar>(plane: &[T], wo: usize, window: (usize, usize), out_hw: (usize, usize), sign: T, base: usize, idx: &mut [u32]) {
    match window {
        (2, 2) => pool_plane(plane, wo, (2, 2), out_hw, sign, base, idx),
        (3, 3) => pool_plane(plane, wo, (3, 3), out_hw, sign, base, idx),
        w => pool_plane(plane, wo, w, out_hw, sign, base, idx),
    }
}

fn sign_of<T: Scalar>(g: T) -> T {
    if g > T::zero() {
        T::one()
    } else if g < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Runs one block on `x` (`[B, C_in, H, W]` flattened).
///
/// Train mode normalises with batch statistics and folds them into
/// `running`; eval mode reads `running`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward<T: Scalar>(
    block: &ConvBlock<T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
    x: &[T],
    [batch, c_in, h, w]: [usize; 4],
    st: &mut BlockState<T>,
    scratch: &mut Scratch<T>,
) -> Result<()> {
    let [c_out, kc, kh, kw] = match *block.conv.kernels.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("conv kernels are 4-d"),
    };
    if kc != c_in || h < kh || w < kw || x.len() != batch * c_in * h * w {
        return Err(Error::shape(format!(
            "block expects {kc} input channels of at least {kh}x{kw}, got [{batch},{c_in},{h},{w}]"
        )));
    }
    let d = ConvDims::new(batch, c_in, h, w, c_out, kh, kw);
    let (ph, pw) = block.pool;
    if ph == 0 || pw == 0 || d.ho < ph || d.wo < pw {
        return Err(Error::shape(format!("pool window {ph}x{pw} larger than {}x{}", d.ho, d.wo)));
    }
    if d.output_len() > u32::MAX as usize {
        return Err(Error::shape("block activation too large for u32 indices"));
    }
    if mode == BnMode::Train && batch * d.positions() < 2 {
        return Err(Error::shape(format!(
            "batchnorm2d train mode needs at least 2 values per channel, got {}",
            batch * d.positions()
        )));
    }
    if mode == BnMode::Eval && !running.initialized {
        return Err(Error::invalid(
            "batchnorm2d eval mode used before running statistics were initialised",
        ));
    }

    let hw = d.positions();
    let (hp, wp) = (d.ho / ph, d.wo / pw);
    let cells = hp * wp;
    let sample_in = c_in * h * w;
    let sample_out = c_out * hw;
    let gamma = block.norm.gamma.data();
    let signs: Vec<T> = gamma.iter().map(|&g| sign_of(g)).collect();
    st.relu.resize(d.output_len(), T::zero());
    st.argmax.resize(batch * c_out * cells, 0);
    scratch.plane_stats.clear();

    for b in 0..batch {
        let out = &mut st.relu[b * sample_out..(b + 1) * sample_out];
        conv_forward_sample(&x[b * sample_in..(b + 1) * sample_in], &d, block.conv.kernels.data(), block.conv.bias.data(), out, &mut scratch.col);
        for (ch, plane) in out.chunks_exact_mut(hw).enumerate() {
            for v in plane.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            let s = lane_sum(plane);
            if !s.is_finite() {
                let offset = b * sample_out + ch * hw;
                check_finite(plane, "convolution output").map_err(|e| match e {
                    Error::NonFinite { context, index, value } => Error::NonFinite {
                        context,
                        index: index + offset,
                        value,
                    },
                    other => other,
                })?;
            }
            let mean = s / T::from_f64(hw as f64);
            scratch.plane_stats.push((mean.as_f64(), lane_sq_dev(plane, mean).as_f64()));
            let p = b * c_out + ch;
            pool_dispatch(plane, d.wo, (ph, pw), (hp, wp), signs[ch], b * sample_out + ch * hw, &mut st.argmax[p * cells..(p + 1) * cells]);
        }
    }

    let eps = block.norm.eps;
    st.mean.resize(c_out, T::zero());
    st.inv_std.resize(c_out, T::zero());
    match mode {
        BnMode::Train => {
            let m = block.norm.momentum;
            let nb = hw as f64;
            for ch in 0..c_out {
                // pairwise merge of per-plane moments, in sample order
                let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
                for b in 0..batch {
                    let (pm, pm2) = scratch.plane_stats[b * c_out + ch];
                    let total = n + nb;
                    let delta = pm - mean;
                    mean += delta * nb / total;
                    m2 += pm2 + delta * delta * n * nb / total;
                    n = total;
                }
                st.mean[ch] = T::from_f64(mean);
                st.inv_std[ch] = T::from_f64(1.0 / (m2 / n + eps).sqrt());
                let unbiased = m2 / (n - 1.0);
                running.mean[ch] = T::from_f64((1.0 - m) * running.mean[ch].as_f64() + m * mean);
                running.var[ch] = T::from_f64((1.0 - m) * running.var[ch].as_f64() + m * unbiased);
            }
            running.initialized = true;
        }
        BnMode::Eval => {
            for ch in 0..c_out {
                st.mean[ch] = running.mean[ch];
                st.inv_std[ch] = T::one() / (running.var[ch] + T::from_f64(eps)).sqrt();
            }
        }
    }

    st.pooled.resize(batch * c_out * cells, T::zero());
    let beta = block.norm.beta.data();
    for (j, (y, &i)) in st.pooled.iter_mut().zip(&st.argmax).enumerate() {
        let ch = (j / cells) % c_out;
        *y = gamma[ch] * ((st.relu[i as usize] - st.mean[ch]) * st.inv_std[ch]) + beta[ch];
    }
    st.dims = Some(d);
    st.mode = Some(mode);
    st.pooled_hw = (hp, wp);
    Ok(())
}

/// Backpropagates `grad_pooled` through one block, accumulating parameter
/// gradients. `g_input`, when given, receives the input gradient.
pub(crate) fn block_backward<T: Scalar>(
    block: &mut ConvBlock<T>,
    x: &[T],
    st: &mut BlockState<T>,
    grad_pooled: &[T],
    mut g_input: Option<&mut [T]>,
    scratch: &mut Scratch<T>,
) -> Result<()> {
    let (Some(d), Some(mode)) = (st.dims.take(), st.mode) else {
        return Err(Error::invalid("block backward called without a cached forward pass"));
    };
    if grad_pooled.len() != st.pooled.len() {
        return Err(Error::shape(format!(
            "block gradient has {} values, output has {}",
            grad_pooled.len(),
            st.pooled.len()
        )));
    }
    let c = d.c_out;
    let hw = d.positions();
    let cells = st.pooled_hw.0 * st.pooled_hw.1;
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = c * hw;
    let gamma = block.norm.gamma.data().to_vec();

    let mut d_beta = vec![T::zero(); c];
    let mut d_gamma = vec![T::zero(); c];
    scratch.routed.resize(grad_pooled.len(), T::zero());
    for p in 0..d.batch * c {
        let ch = p % c;
        let (mean, istd) = (st.mean[ch], st.inv_std[ch]);
        let k = gamma[ch] * istd;
        for j in p * cells..(p + 1) * cells {
            let gp = grad_pooled[j];
            let r = st.relu[st.argmax[j] as usize];
            d_beta[ch] = d_beta[ch] + gp;
            d_gamma[ch] = d_gamma[ch] + gp * ((r - mean) * istd);
            scratch.routed[j] = if r > T::zero() { k * gp } else { T::zero() };
        }
    }
    for (g, &v) in block.norm.gamma.grad_mut().iter_mut().zip(&d_gamma) {
        *g = *g + v;
    }
    for (g, &v) in block.norm.beta.grad_mut().iter_mut().zip(&d_beta) {
        *g = *g + v;
    }

    let n = T::from_f64((d.batch * hw) as f64);
    scratch.g_conv.resize(sample_out, T::zero());
    let (kernels, g_kernels) = block.conv.kernels.data_and_grad_mut();
    let g_bias = block.conv.bias.grad_mut();
    for b in 0..d.batch {
        let relu = &st.relu[b * sample_out..(b + 1) * sample_out];
        // d relu = gamma * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat)) on the ReLU support
        for (ch, (g, r)) in scratch.g_conv.chunks_exact_mut(hw).zip(relu.chunks_exact(hw)).enumerate() {
            match mode {
                BnMode::Train => {
                    let (mean, istd) = (st.mean[ch], st.inv_std[ch]);
                    let k = gamma[ch] * istd;
                    let a = d_beta[ch] / n;
                    let bc = d_gamma[ch] / n;
                    for (gv, &rv) in g.iter_mut().zip(r) {
                        *gv = if rv > T::zero() { -k * (a + ((rv - mean) * istd) * bc) } else { T::zero() };
                    }
                }
                BnMode::Eval => g.fill(T::zero()),
            }
        }
        let off = b * sample_out;
        for j in b * c * cells..(b + 1) * c * cells {
            let i = st.argmax[j] as usize - off;
            scratch.g_conv[i] = scratch.g_conv[i] + scratch.routed[j];
        }
        conv_backward_sample(
            &x[b * sample_in..(b + 1) * sample_in],
            &d,
            kernels,
            &scratch.g_conv,
            g_kernels,
            g_bias,
            g_input.as_deref_mut().map(|g| &mut g[b * sample_in..(b + 1) * sample_in]),
            &mut scratch.col,
            &mut scratch.g_col,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, BatchNorm2d, Conv2d, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn block(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> ConvBlock<f64> {
        let mut norm = BatchNorm2d::new(c_out);
        // one positive, one negative and one zero scale
        norm.gamma = Tensor::from_fn(&[c_out], |i| [0.7, -1.3, 0.0][i % 3]);
        norm.beta = random(rng, &[c_out]);
        ConvBlock {
            conv: Conv2d::new(random(rng, &[c_out, c_in, 3, 2]), random(rng, &[c_out])).unwrap(),
            norm,
            pool: (2, 3),
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn fused_block_matches_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c_in, h, w, c_out) = (3, 2, 9, 11, 3);
        for mode in [BnMode::Train, BnMode::Eval] {
            let mut blk = block(&mut rng, c_in, c_out);
            if mode == BnMode::Eval {
                blk.norm.stats = RunningStats {
                    mean: vec![0.2, 0.5, 0.1],
                    var: vec![0.3, 1.1, 0.8],
                    initialized: true,
                };
            }
            let x = random(&mut rng, &[b, c_in, h, w]);

            // reference: standalone layers
            let mut ref_stats = blk.norm.stats.clone();
            let z = conv2d(&x, &blk.conv.kernels, &blk.conv.bias).unwrap();
            let r = relu(&z).unwrap();
            let (n, bn_cache) = batchnorm2d(&r, &blk.norm.gamma, &blk.norm.beta, &mut ref_stats, mode, blk.norm.eps, blk.norm.momentum).unwrap();
            let (p, idx) = maxpool2d(&n, blk.pool).unwrap();
            let gp = random(&mut rng, p.shape());
            let gn = maxpool2d_backward(&gp, &idx).unwrap();
            let (gr, dgamma, dbeta) = batchnorm2d_backward(&gn, &blk.norm.gamma, &bn_cache).unwrap();
            let gz = relu_backward(&z, &gr).unwrap();
            let cg = conv2d_backward(&x, &blk.conv.kernels, &gz, true).unwrap();

            let mut running = blk.norm.stats.clone();
            let mut st = BlockState::default();
            let mut scratch = Scratch::default();
            block_forward(&blk, &mut running, mode, x.data(), [b, c_in, h, w], &mut st, &mut scratch).unwrap();
            close(&st.pooled, p.data(), 1e-12);
            close(&running.mean, &ref_stats.mean, 1e-12);
            close(&running.var, &ref_stats.var, 1e-12);

            let mut g_in = vec![0.0; x.len()];
            block_backward(&mut blk, x.data(), &mut st, gp.data(), Some(&mut g_in), &mut scratch).unwrap();
            close(&g_in, cg.input.as_ref().unwrap().data(), 1e-10);
            close(blk.conv.kernels.grad().unwrap(), cg.kernels.data(), 1e-10);
            close(blk.conv.bias.grad().unwrap(), cg.bias.data(), 1e-10);
            close(blk.norm.gamma.grad().unwrap(), dgamma.data(), 1e-10);
            close(blk.norm.beta.grad().unwrap(), dbeta.data(), 1e-10);
        }
    }

    #[test]
    fn backward_needs_a_fresh_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut blk = block(&mut rng, 1, 3);
        let x = random(&mut rng, &[2, 1, 6, 6]);
        let mut running = blk.norm.stats.clone();
        let (mut st, mut scratch) = (BlockState::default(), Scratch::default());
        block_forward(&blk, &mut running, BnMode::Train, x.data(), [2, 1, 6, 6], &mut st, &mut scratch).unwrap();
        let g = vec![1.0; st.pooled.len()];
        block_backward(&mut blk, x.data(), &mut st, &g, None, &mut scratch).unwrap();
        assert!(block_backward(&mut blk, x.data(), &mut st, &g, None, &mut scratch).is_err());
    }

    #[test]
    fn non_finite_activations_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let blk = block(&mut rng, 1, 3);
        let mut x = random(&mut rng, &[1, 1, 6, 6]);
        x.data_mut()[7] = f64::NAN;
        let mut running = blk.norm.stats.clone();
        let err = block_forward(&blk, &mut running, BnMode::Train, x.data(), [1, 1, 6, 6], &mut BlockState::default(), &mut Scratch::default()).unwrap_err();
        assert_eq!(err.kind(), "non_finite");
    }
}
