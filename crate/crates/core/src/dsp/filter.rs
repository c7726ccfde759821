use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::Signal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Forward-backward application: zero group delay, squared magnitude.
    ZeroPhase,
    /// Single forward pass, usable online.
    Causal,
}

/// Butterworth bandpass. `order` is the prototype order, so the digital
/// filter has order `2 * order` (`order` second-order sections).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    pub mode: FilterMode,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            low_hz: 1.0,
            high_hz: 40.0,
            order: 4,
            mode: FilterMode::ZeroPhase,
        }
    }
}

/// Cascade of biquads `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<[f64; 6]>,
}

/// Digital Butterworth bandpass via the analog prototype, the lowpass to
/// bandpass transform and the bilinear transform with prewarped edges.
pub fn design_bandpass(spec: &FilterSpec, fs: f64) -> Result<Sos> {
    let nyquist = fs / 2.0;
    if !(spec.low_hz > 0.0 && spec.low_hz < spec.high_hz && spec.high_hz < nyquist) {
        return Err(Error::invalid(format!(
            "bandpass needs 0 < low < high < Nyquist ({nyquist} Hz), got {}..{} Hz",
            spec.low_hz, spec.high_hz
        )));
    }
    if spec.order == 0 {
        return Err(Error::invalid("filter order must be at least 1"));
    }
    let n = spec.order;
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
    let (w1, w2) = (warp(spec.low_hz), warp(spec.high_hz));
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // prototype poles on the left half of the unit circle
    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let m = -(n as f64) + 1.0 + 2.0 * k as f64;
            -Complex64::from_polar(1.0, std::f64::consts::PI * m / (2.0 * n as f64))
        })
        .collect();
    let mut analog = Vec::with_capacity(2 * n);
    for p in &proto {
        let lp = p * (bw / 2.0);
        let root = (lp * lp - w0_sq).sqrt();
        analog.push(lp + root);
        analog.push(lp - root);
    }
    let fs2 = 2.0 * fs;
    let digital: Vec<Complex64> = analog.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    // n analog zeros at s = 0 map to z = 1; the remaining n go to z = -1
    let mut gain = Complex64::new(bw.powi(n as i32), 0.0);
    for _ in 0..n {
        gain *= fs2;
    }
    for p in &analog {
        gain /= fs2 - p;
    }

    // one conjugate pair per section, farthest from the unit circle first
    let mut upper: Vec<Complex64> = digital.into_iter().filter(|p| p.im > 0.0).collect();
    if upper.len() != n {
        return Err(Error::invalid("bandpass design produced real poles; band too narrow for this order"));
    }
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut sections: Vec<[f64; 6]> = upper
        .iter()
        .map(|p| [1.0, 0.0, -1.0, 1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    for c in &mut sections[0][..3] {
        *c *= gain.re;
    }
    Ok(Sos { sections })
}

impl Sos {
    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * freq / fs);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2))
            .product()
    }

    /// Single-pass magnitude in dB.
    pub fn gain_db(&self, freq: f64, fs: f64) -> f64 {
        20.0 * self.response(freq, fs).norm().log10()
    }

    /// Edge padding used by [`Sos::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Per-section initial state for a unit step already in steady state.
    pub fn steady_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [b0, b1, b2, _, a1, a2] = *s;
                // (I - A) zi = B for the transposed direct form II companion matrix
                let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
                let z0 = (r0 + r1) / (1.0 + a1 + a2);
                let z1 = r1 - a2 * z0;
                let zi = [z0 * scale, z1 * scale];
                scale *= (b0 + b1 + b2) / (1.0 + a1 + a2);
                zi
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2, _, a1, a2] = *s;
            let [mut z0, mut z1] = *z;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z0;
                z0 = b1 * xin - a1 * y + z1;
                z1 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    fn scaled_state(&self, x0: f64) -> Vec<[f64; 2]> {
        self.steady_state().into_iter().map(|[a, b]| [a * x0, b * x0]).collect()
    }

    /// Causal filtering, started in steady state for the first sample.
    pub fn filter(&self, x: &mut [f64]) {
        if let Some(&x0) = x.first() {
            let zi = self.scaled_state(x0);
            self.run(x, zi);
        }
    }

    /// Zero-phase forward-backward filtering with odd extension at both ends.
    pub fn filtfilt(&self, x: &mut [f64]) -> Result<()> {
        let n = x.len();
        let order = 2 * self.sections.len();
        if n <= 3 * order {
            return Err(Error::invalid(format!(
                "zero-phase filtering needs more than {} samples, got {n}",
                3 * order
            )));
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.scaled_state(ext[0]);
        self.run(&mut ext, zi);
        ext.reverse();
        let zi = self.scaled_state(ext[0]);
        self.run(&mut ext, zi);
        ext.reverse();
        x.copy_from_slice(&ext[pad..pad + n]);
        Ok(())
    }
}

/// Filters every channel of `signal` with a Butterworth bandpass.
pub fn bandpass(signal: &Signal, spec: &FilterSpec) -> Result<Signal> {
    let sos = design_bandpass(spec, signal.fs)?;
    let mut out = signal.clone();
    let mut buf = vec![0.0f64; signal.samples()];
    for c in 0..signal.channels {
        for (b, &v) in buf.iter_mut().zip(signal.channel(c)) {
            *b = v as f64;
        }
        match spec.mode {
            FilterMode::ZeroPhase => sos.filtfilt(&mut buf)?,
            FilterMode::Causal => sos.filter(&mut buf),
        }
        for (o, &b) in out.channel_mut(c).iter_mut().zip(&buf) {
            *o = b as f32;
        }
    }
    Ok(out)
}
