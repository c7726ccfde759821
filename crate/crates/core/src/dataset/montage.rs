//! Synthetic 128-electrode layout on the unit disk (nose towards +y).
//!
//! Positions follow a sunflower spiral so that neighbouring indices are
//! spread evenly over the scalp. Only the frontal and central groups carry
//! meaning in this crate: the former references eye activity, the latter
//! carries the motor signatures.

use std::sync::OnceLock;

use crate::nn::INPUT_CHANNELS;

pub fn position(channel: usize) -> (f64, f64) {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let r = ((channel as f64 + 0.5) / INPUT_CHANNELS as f64).sqrt();
    let theta = channel as f64 * golden;
    (r * theta.cos(), r * theta.sin())
}

fn select(pred: impl Fn((f64, f64)) -> bool) -> Vec<usize> {
    (0..INPUT_CHANNELS).filter(|&c| pred(position(c))).collect()
}

/// Electrodes near the forehead.
pub fn frontal() -> &'static [usize] {
    static F: OnceLock<Vec<usize>> = OnceLock::new();
    F.get_or_init(|| select(|(x, y)| y > 0.75 && x.abs() < 0.5))
}

/// Electrodes around the vertex.
pub fn central() -> &'static [usize] {
    static C: OnceLock<Vec<usize>> = OnceLock::new();
    C.get_or_init(|| select(|(x, y)| x.hypot(y) < 0.3))
}
