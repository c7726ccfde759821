use serde::{Deserialize, Serialize};

use super::{Kinematics, Mode, TrialEvent};
use crate::error::{Error, Result};

pub const RT_MIN: f64 = 0.15;
pub const RT_MAX: f64 = 0.8;
/// Kinematics must extend this far past each stimulus.
pub const RT_SEARCH_S: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntentLabels {
    /// 1 for active, 0 for passive, `None` when the mode marker is missing.
    pub labels: Vec<Option<u8>>,
    pub unmarked: Vec<usize>,
}

pub fn label_intent(events: &[TrialEvent]) -> IntentLabels {
    let mut out = IntentLabels::default();
    for (j, e) in events.iter().enumerate() {
        out.labels.push(match e.mode {
            Some(Mode::Active) => Some(1),
            Some(Mode::Passive) => Some(0),
            None => {
                out.unmarked.push(j);
                None
            }
        });
    }
    if !out.unmarked.is_empty() {
        log::warn!("{} trials lack a mode marker and were skipped", out.unmarked.len());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum SpeedThreshold {
    /// Fixed speed in m/s.
    Absolute(f64),
    /// Fraction of the peak speed inside the search window.
    Relative(f64),
}

impl Default for SpeedThreshold {
    fn default() -> Self {
        SpeedThreshold::Absolute(0.05)
    }
}

fn first_sample_at_or_after(t: f64, fs: f64) -> usize {
    let pos = t * fs;
    let nearest = pos.round();
    if (pos - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        pos.ceil() as usize
    }
}

/// Reaction time: delay from the stimulus to the first kinematic sample
/// whose speed reaches the threshold. `None` when the threshold is never
/// reached within the search window.
pub fn compute_rt(kin: &Kinematics, stimulus_s: f64, threshold: SpeedThreshold) -> Result<Option<f64>> {
    if !(stimulus_s >= 0.0) {
        return Err(Error::invalid(format!("stimulus time {stimulus_s} is negative")));
    }
    let start = first_sample_at_or_after(stimulus_s, kin.fs);
    let end = ((stimulus_s + RT_SEARCH_S) * kin.fs + 1e-9).floor() as usize;
    if end >= kin.len() {
        return Err(Error::invalid(format!(
            "kinematics end at {:.3} s, before the search window closes at {:.3} s",
            kin.duration(),
            stimulus_s + RT_SEARCH_S
        )));
    }
    let thr = match threshold {
        SpeedThreshold::Absolute(v) => v,
        SpeedThreshold::Relative(frac) => {
            let peak = (start..=end).map(|k| kin.speed(k)).fold(0.0, f64::max);
            if peak == 0.0 {
                return Ok(None);
            }
            frac * peak
        }
    };
    if !(thr > 0.0) {
        return Err(Error::invalid(format!("speed threshold must be positive, got {thr}")));
    }
    Ok((start..=end).find(|&k| kin.speed(k) >= thr).map(|k| k as f64 / kin.fs - stimulus_s))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutlierReport {
    pub too_fast: usize,
    pub too_slow: usize,
}

/// Indices of reaction times inside the inclusive `bounds`.
pub fn remove_rt_outliers(rts: &[f64], bounds: (f64, f64)) -> (Vec<usize>, OutlierReport) {
    let mut report = OutlierReport::default();
    let mut keep = Vec::with_capacity(rts.len());
    for (i, &rt) in rts.iter().enumerate() {
        if rt < bounds.0 {
            report.too_fast += 1;
        } else if rt > bounds.1 {
            report.too_slow += 1;
        } else {
            keep.push(i);
        }
    }
    (keep, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    /// Below the median is fast (0); at or above is slow (1).
    #[default]
    Median,
    /// Lowest third fast, highest third slow, middle third dropped.
    Tercile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtClasses {
    /// 0 fast, 1 slow, `None` for trials the policy drops.
    pub classes: Vec<Option<u8>>,
    pub counts: [usize; 2],
    /// Set when every value lands in one class.
    pub degenerate: bool,
}

pub fn discretize_rt(rts: &[f64], policy: Discretization) -> Result<RtClasses> {
    if rts.is_empty() {
        return Err(Error::Empty("no reaction times to discretize".into()));
    }
    let n = rts.len();
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&a, &b| rts[a].total_cmp(&rts[b]).then(a.cmp(&b)));
    let mut classes = vec![None; n];
    match policy {
        Discretization::Median => {
            let median = if n % 2 == 1 {
                rts[sorted[n / 2]]
            } else {
                (rts[sorted[n / 2 - 1]] + rts[sorted[n / 2]]) / 2.0
            };
            for (c, &rt) in classes.iter_mut().zip(rts) {
                *c = Some(u8::from(rt >= median));
            }
        }
        Discretization::Tercile => {
            let third = n / 3;
            for (rank, &i) in sorted.iter().enumerate() {
                if rank < third {
                    classes[i] = Some(0);
                } else if rank >= n - third {
                    classes[i] = Some(1);
                }
            }
        }
    }
    let mut counts = [0; 2];
    for c in classes.iter().flatten() {
        counts[*c as usize] += 1;
    }
    let degenerate = counts.contains(&0);
    if degenerate {
        log::warn!("reaction-time split is degenerate: class counts {counts:?}");
    }
    Ok(RtClasses { classes, counts, degenerate })
}

/// Reaction-time labelling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtPolicy {
    pub threshold: SpeedThreshold,
    /// Inclusive keep range in seconds.
    pub bounds: (f64, f64),
    pub discretization: Discretization,
    /// Subjects with fewer surviving trials are excluded.
    pub min_trials: usize,
}

impl Default for RtPolicy {
    fn default() -> Self {
        RtPolicy {
            threshold: SpeedThreshold::default(),
            bounds: (RT_MIN, RT_MAX),
            discretization: Discretization::Median,
            min_trials: 20,
        }
    }
}
