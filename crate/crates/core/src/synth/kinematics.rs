//! Minimum-jerk point-to-point reaches.

/// Normalised position `10t^3 - 15t^4 + 6t^5` for `t` in `[0, 1]`.
pub fn position(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Derivative of [`position`] with respect to `t`.
pub fn speed(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    30.0 * t * t * (1.0 - t) * (1.0 - t)
}

/// Peak of [`speed`], reached at `t = 0.5`.
pub const PEAK_SPEED: f64 = 1.875;

/// Normalised time in `[0, 0.5]` at which a reach of `distance` metres
/// over `duration` seconds first reaches `threshold` m/s.
pub fn crossing_time(distance: f64, duration: f64, threshold: f64) -> Option<f64> {
    let scale = distance / duration;
    if threshold <= 0.0 || threshold >= PEAK_SPEED * scale {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if scale * speed(mid) < threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}
