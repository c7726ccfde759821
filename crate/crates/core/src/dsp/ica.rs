//! FastICA with PCA whitening, one-unit deflation and a `tanh` contrast.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Signal;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    /// Components kept after whitening; clamped to the channel count and rank.
    pub n_components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Fit on every `fit_stride`-th sample.
    pub fit_stride: usize,
    /// Components whose ocular score exceeds this are removed.
    pub ocular_threshold: f64,
    /// Channels averaged into the ocular reference; empty disables rejection.
    pub frontal_channels: Vec<usize>,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            n_components: 20,
            max_iter: 500,
            tol: 1e-5,
            seed: 0,
            fit_stride: 4,
            ocular_threshold: 0.7,
            frontal_channels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaModel {
    pub channels: usize,
    pub components: usize,
    /// Per-channel mean removed before unmixing.
    pub mean: Vec<f64>,
    /// Row-major `components x channels`.
    pub unmixing: Vec<f64>,
    /// Row-major `channels x components`.
    pub mixing: Vec<f64>,
    pub ocular_scores: Vec<f64>,
    pub rejected: Vec<usize>,
    pub iterations: Vec<usize>,
}

fn centred_strided(signal: &Signal, stride: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let c = signal.channels;
    let n = signal.samples();
    let t = n.div_ceil(stride);
    let mut mean = vec![0.0; c];
    let mut x = vec![0.0; c * t];
    for ch in 0..c {
        let row = &mut x[ch * t..(ch + 1) * t];
        for (dst, &v) in row.iter_mut().zip(signal.channel(ch).iter().step_by(stride)) {
            *dst = v as f64;
        }
        let m = row.iter().sum::<f64>() / t as f64;
        row.iter_mut().for_each(|v| *v -= m);
        mean[ch] = m;
    }
    (x, mean, t)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Fits an unmixing model and scores every component against the frontal
/// reference.
pub fn fit_ica(signal: &Signal, cfg: &IcaConfig) -> Result<IcaModel> {
    let c = signal.channels;
    if cfg.fit_stride == 0 {
        return Err(Error::invalid("fit stride must be at least 1"));
    }
    if let Some(&bad) = cfg.frontal_channels.iter().find(|&&f| f >= c) {
        return Err(Error::invalid(format!("frontal channel {bad} out of range for {c} channels")));
    }
    let (x, mean, t) = centred_strided(signal, cfg.fit_stride);
    if t < 4 * c {
        return Err(Error::invalid(format!("ICA needs many more samples than channels; {t} fit samples for {c} channels")));
    }

    let mut cov = vec![0.0; c * c];
    f64::gemm(c, t, c, 1.0 / t as f64, &x, (t, 1), &x, (1, t), 0.0, &mut cov, (c, 1));
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, &cov));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) {
        return Err(Error::invalid("signal has no variance to decompose"));
    }
    let rank = order.iter().take_while(|&&i| eig.eigenvalues[i] > top * 1e-12).count();
    let n = cfg.n_components.min(c).min(rank);
    if n == 0 {
        return Err(Error::invalid("at least one ICA component is required"));
    }
    if n < cfg.n_components.min(c) {
        log::warn!("covariance rank {rank} limits ICA to {n} components");
    }

    // whitening K (n x c) and its pseudo-inverse (c x n)
    let mut k = vec![0.0; n * c];
    let mut k_pinv = vec![0.0; c * n];
    for (row, &ei) in order.iter().take(n).enumerate() {
        let s = eig.eigenvalues[ei].sqrt();
        for ch in 0..c {
            let v = eig.eigenvectors[(ch, ei)];
            k[row * c + ch] = v / s;
            k_pinv[ch * n + row] = v * s;
        }
    }
    let mut z = vec![0.0; n * t];
    f64::gemm(n, c, t, 1.0, &k, (c, 1), &x, (t, 1), 0.0, &mut z, (t, 1));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    let mut wx = vec![0.0; t];
    for comp in 0..n {
        let mut w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        deflate(&mut w, &w_rows);
        normalise(&mut w);
        let mut converged = None;
        let mut delta = f64::INFINITY;
        for it in 1..=cfg.max_iter {
            wx.iter_mut().for_each(|v| *v = 0.0);
            for (i, &wi) in w.iter().enumerate() {
                for (acc, &zv) in wx.iter_mut().zip(&z[i * t..(i + 1) * t]) {
                    *acc += wi * zv;
                }
            }
            let mut mean_dg = 0.0;
            for v in wx.iter_mut() {
                let g = v.tanh();
                mean_dg += 1.0 - g * g;
                *v = g;
            }
            mean_dg /= t as f64;
            let mut next: Vec<f64> = (0..n)
                .map(|i| {
                    let zg: f64 = z[i * t..(i + 1) * t].iter().zip(&wx).map(|(a, b)| a * b).sum();
                    zg / t as f64 - mean_dg * w[i]
                })
                .collect();
            deflate(&mut next, &w_rows);
            normalise(&mut next);
            let dot: f64 = next.iter().zip(&w).map(|(a, b)| a * b).sum();
            delta = (dot.abs() - 1.0).abs();
            w = next;
            if delta < cfg.tol {
                converged = Some(it);
                break;
            }
        }
        match converged {
            Some(it) => iterations.push(it),
            None => {
                return Err(Error::Convergence {
                    component: comp,
                    iterations: cfg.max_iter,
                    last_delta: delta,
                    tolerance: cfg.tol,
                })
            }
        }
        w_rows.push(w);
    }

    let w_flat: Vec<f64> = w_rows.concat();
    let mut unmixing = vec![0.0; n * c];
    f64::gemm(n, n, c, 1.0, &w_flat, (n, 1), &k, (c, 1), 0.0, &mut unmixing, (c, 1));
    let mut mixing = vec![0.0; c * n];
    f64::gemm(c, n, n, 1.0, &k_pinv, (n, 1), &w_flat, (1, n), 0.0, &mut mixing, (n, 1));

    let mut ocular_scores = vec![0.0; n];
    let mut rejected = Vec::new();
    if !cfg.frontal_channels.is_empty() {
        let mut reference = vec![0.0; t];
        for &f in &cfg.frontal_channels {
            for (r, &v) in reference.iter_mut().zip(&x[f * t..(f + 1) * t]) {
                *r += v;
            }
        }
        let mut sources = vec![0.0; n * t];
        f64::gemm(n, n, t, 1.0, &w_flat, (n, 1), &z, (t, 1), 0.0, &mut sources, (t, 1));
        for (i, score) in ocular_scores.iter_mut().enumerate() {
            *score = pearson(&sources[i * t..(i + 1) * t], &reference).abs();
            if *score > cfg.ocular_threshold {
                rejected.push(i);
            }
        }
    }
    log::debug!("ICA: {n} components, scores {ocular_scores:.3?}, rejected {rejected:?}");

    Ok(IcaModel {
        channels: c,
        components: n,
        mean,
        unmixing,
        mixing,
        ocular_scores,
        rejected,
        iterations,
    })
}

fn deflate(w: &mut [f64], previous: &[Vec<f64>]) {
    for p in previous {
        let proj: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
        for (wi, pi) in w.iter_mut().zip(p) {
            *wi -= proj * pi;
        }
    }
}

fn normalise(w: &mut [f64]) {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
}

const CHUNK: usize = 4096;

impl IcaModel {
    fn check(&self, signal: &Signal) -> Result<()> {
        if signal.channels != self.channels {
            return Err(Error::shape(format!(
                "ICA model has {} channels, signal has {}",
                self.channels, signal.channels
            )));
        }
        Ok(())
    }

    fn centred_chunk(&self, signal: &Signal, start: usize, len: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.channels * len];
        for ch in 0..self.channels {
            let src = &signal.channel(ch)[start..start + len];
            for (d, &v) in x[ch * len..(ch + 1) * len].iter_mut().zip(src) {
                *d = v as f64 - self.mean[ch];
            }
        }
        x
    }

    /// Component time courses, row-major `components x samples`.
    pub fn sources(&self, signal: &Signal) -> Result<Vec<f64>> {
        self.check(signal)?;
        let (c, n, total) = (self.channels, self.components, signal.samples());
        let mut out = vec![0.0; n * total];
        for start in (0..total).step_by(CHUNK) {
            let len = CHUNK.min(total - start);
            let x = self.centred_chunk(signal, start, len);
            f64::gemm(n, c, len, 1.0, &self.unmixing, (c, 1), &x, (len, 1), 0.0, &mut out[start..], (total, 1));
        }
        Ok(out)
    }

    /// `unmixing * mixing`, which is the identity for a valid model.
    pub fn round_trip(&self) -> Vec<f64> {
        let (c, n) = (self.channels, self.components);
        let mut out = vec![0.0; n * n];
        f64::gemm(n, c, n, 1.0, &self.unmixing, (c, 1), &self.mixing, (n, 1), 0.0, &mut out, (n, 1));
        out
    }
}

/// Subtracts the back-projection of the rejected components.
pub fn remove_ocular(signal: &Signal, model: &IcaModel) -> Result<Signal> {
    model.check(signal)?;
    if let Some(&bad) = model.rejected.iter().find(|&&r| r >= model.components) {
        return Err(Error::invalid(format!("rejected component {bad} does not exist")));
    }
    let mut out = signal.clone();
    let r = model.rejected.len();
    if r == 0 {
        return Ok(out);
    }
    let c = model.channels;
    let u_rej: Vec<f64> = model
        .rejected
        .iter()
        .flat_map(|&k| model.unmixing[k * c..(k + 1) * c].iter().copied())
        .collect();
    let a_rej: Vec<f64> = (0..c)
        .flat_map(|ch| model.rejected.iter().map(move |&k| model.mixing[ch * model.components + k]))
        .collect();
    let total = signal.samples();
    for start in (0..total).step_by(CHUNK) {
        let len = CHUNK.min(total - start);
        let x = model.centred_chunk(signal, start, len);
        let mut s = vec![0.0; r * len];
        f64::gemm(r, c, len, 1.0, &u_rej, (c, 1), &x, (len, 1), 0.0, &mut s, (len, 1));
        let mut back = vec![0.0; c * len];
        f64::gemm(c, r, len, 1.0, &a_rej, (r, 1), &s, (len, 1), 0.0, &mut back, (len, 1));
        for ch in 0..c {
            let dst = &mut out.channel_mut(ch)[start..start + len];
            for (d, &b) in dst.iter_mut().zip(&back[ch * len..(ch + 1) * len]) {
                *d = (*d as f64 - b) as f32;
            }
        }
    }
    Ok(out)
}
