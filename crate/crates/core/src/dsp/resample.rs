//! Rational polyphase resampling with a Kaiser-windowed sinc lowpass.

use super::Signal;
use crate::error::{Error, Result};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_RATE: usize = 10;

fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn millihertz(fs: f64) -> Result<u64> {
    let m = (fs * 1000.0).round();
    if !(m >= 1.0) || ((fs * 1000.0) - m).abs() > 1e-6 {
        return Err(Error::invalid(format!("sampling rate {fs} Hz is not a whole number of millihertz")));
    }
    Ok(m as u64)
}

#[derive(Debug, Clone)]
pub struct Resampler {
    pub up: usize,
    pub down: usize,
    half_len: usize,
    taps: Vec<f64>,
}

impl Resampler {
    /// Downsampler from `fs_in` to `fs_out`; the ratio is reduced to lowest terms.
    pub fn new(fs_in: f64, fs_out: f64) -> Result<Self> {
        if !(fs_out < fs_in) || !(fs_out > 0.0) {
            return Err(Error::invalid(format!("resampling needs 0 < fs_out < fs_in, got {fs_in} -> {fs_out} Hz")));
        }
        let (a, b) = (millihertz(fs_out)?, millihertz(fs_in)?);
        let g = gcd(a, b);
        Self::from_ratio((a / g) as usize, (b / g) as usize)
    }

    pub fn from_ratio(up: usize, down: usize) -> Result<Self> {
        if up == 0 || down == 0 {
            return Err(Error::invalid("resampling ratio terms must be positive"));
        }
        let rate = up.max(down);
        let half_len = HALF_LEN_PER_RATE * rate;
        let len = 2 * half_len + 1;
        let cutoff = 1.0 / rate as f64;
        let denom = bessel_i0(KAISER_BETA);
        let mut taps: Vec<f64> = (0..len)
            .map(|i| {
                let m = i as f64 - half_len as f64;
                let sinc = if m == 0.0 {
                    1.0
                } else {
                    let a = std::f64::consts::PI * cutoff * m;
                    a.sin() / a
                };
                let r = m / half_len as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
                cutoff * sinc * window
            })
            .collect();
        // every polyphase branch gets unit DC gain, so constants pass exactly
        for phase in 0..up {
            let s: f64 = taps[phase..].iter().step_by(up).sum();
            for t in taps[phase..].iter_mut().step_by(up) {
                *t /= s;
            }
        }
        Ok(Resampler { up, down, half_len, taps })
    }

    pub fn output_len(&self, n: usize) -> usize {
        ((n * self.up) as f64 / self.down as f64).round() as usize
    }

    /// Resamples one channel; samples beyond either end repeat the edge value.
    pub fn process(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out_len = self.output_len(x.len());
        if out_len == 0 {
            return Err(Error::invalid(format!(
                "{} samples at ratio {}/{} give no output samples",
                x.len(),
                self.up,
                self.down
            )));
        }
        let (up, len) = (self.up as i64, self.taps.len() as i64);
        let last = x.len() as i64 - 1;
        let mut out = Vec::with_capacity(out_len);
        for m in 0..out_len as i64 {
            // y[m] = sum_n x[n] h[m*down - n*up + half_len]
            let centre = m * self.down as i64 + self.half_len as i64;
            let n_hi = centre.div_euclid(up);
            let mut acc = 0.0;
            let mut n = n_hi;
            loop {
                let k = centre - n * up;
                if k >= len {
                    break;
                }
                acc += self.taps[k as usize] * x[n.clamp(0, last) as usize];
                n -= 1;
            }
            out.push(acc);
        }
        Ok(out)
    }
}

/// Resamples a single channel from `fs_in` to `fs_out`.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    Resampler::new(fs_in, fs_out)?.process(x)
}

/// Resamples every channel of a signal.
pub fn resample_channels(signal: &Signal, fs_out: f64) -> Result<Signal> {
    let rs = Resampler::new(signal.fs, fs_out)?;
    let mut data = Vec::with_capacity(signal.channels * rs.output_len(signal.samples()));
    let mut buf = vec![0.0; signal.samples()];
    for c in 0..signal.channels {
        for (b, &v) in buf.iter_mut().zip(signal.channel(c)) {
            *b = v as f64;
        }
        data.extend(rs.process(&buf)?.into_iter().map(|v| v as f32));
    }
    Signal::new(fs_out, signal.channels, data)
}
