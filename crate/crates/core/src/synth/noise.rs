use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

/// Gaussian noise with power spectral density proportional to
/// `1 / f^exponent` above `f_min`; zero below. Unit variance.
pub fn coloured_noise<R: Rng>(rng: &mut R, n: usize, fs: f64, exponent: f64, f_min: f64, f_max: f64) -> Vec<f64> {
    let len = n.next_power_of_two().max(2);
    let mut spec = vec![Complex::new(0.0, 0.0); len];
    for (k, bin) in spec.iter_mut().enumerate().take(len / 2 + 1).skip(1) {
        let f = k as f64 * fs / len as f64;
        if f < f_min || f > f_max {
            continue;
        }
        let a = f.powf(-exponent / 2.0);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *bin = Complex::new(re * a, im * a);
    }
    for k in 1..len / 2 {
        spec[len - k] = spec[k].conj();
    }
    spec[len / 2].im = 0.0;
    FftPlanner::new().plan_fft_inverse(len).process(&mut spec);
    let mut out: Vec<f64> = spec[..n].iter().map(|c| c.re).collect();
    normalise(&mut out);
    out
}

/// Rescales to zero mean, unit variance (no-op for silent input).
pub fn normalise(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

/// Positive, slowly varying gain `exp(depth * g(t))` normalised to unit
/// mean square, where `g` is band-limited Gaussian noise below `f_max`.
pub fn envelope<R: Rng>(rng: &mut R, n: usize, fs: f64, depth: f64, f_max: f64) -> Vec<f64> {
    let g = coloured_noise(rng, n, fs, 0.0, 0.01, f_max);
    let mut e: Vec<f64> = g.iter().map(|v| (depth * v).exp()).collect();
    let ms = (e.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    e.iter_mut().for_each(|v| *v /= ms);
    e
}
