use serde::{Deserialize, Serialize};

use super::{Resampler, Signal};
use crate::error::{Error, Result};

/// Analysis window relative to an anchor, in seconds; `end_s` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_s: f64,
    pub end_s: f64,
}

impl Default for Window {
    fn default() -> Self {
        Window { start_s: -0.5, end_s: 0.0 }
    }
}

impl Window {
    /// Sample offsets `[start, end)` relative to the anchor.
    pub fn offsets(&self, fs: f64) -> Result<(i64, i64)> {
        let start = (self.start_s * fs).round() as i64;
        let end = (self.end_s * fs).round() as i64;
        if end <= start {
            return Err(Error::invalid(format!("window [{}, {}) s is empty", self.start_s, self.end_s)));
        }
        Ok((start, end))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentReport {
    /// Positions in the anchor list that produced a window.
    pub kept: Vec<usize>,
    /// `(position, anchor sample)` of anchors whose window leaves the recording.
    pub skipped: Vec<(usize, usize)>,
    /// `(kept trial, channel)` pairs zeroed for having no variance.
    pub flat_channels: Vec<(usize, usize)>,
}

/// Cuts `channels x len` windows (channel-major) around each anchor sample.
pub fn segment(signal: &Signal, anchors: &[usize], window: &Window) -> Result<(Vec<Vec<f32>>, SegmentReport)> {
    let (start, end) = window.offsets(signal.fs)?;
    let len = (end - start) as usize;
    let n = signal.samples() as i64;
    let mut report = SegmentReport::default();
    let mut out = Vec::new();
    for (pos, &a) in anchors.iter().enumerate() {
        let (lo, hi) = (a as i64 + start, a as i64 + end);
        if lo < 0 || hi > n {
            report.skipped.push((pos, a));
            continue;
        }
        let mut trial = Vec::with_capacity(signal.channels * len);
        for c in 0..signal.channels {
            trial.extend_from_slice(&signal.channel(c)[lo as usize..hi as usize]);
        }
        report.kept.push(pos);
        out.push(trial);
    }
    if !report.skipped.is_empty() {
        log::warn!("{} anchors lack context for the window and were skipped", report.skipped.len());
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("none of {} anchors has a complete window", anchors.len())));
    }
    Ok((out, report))
}

/// Standardises each channel of a channel-major block to zero mean and unit
/// population variance. Channels without variance are zeroed; their indices
/// are returned.
pub fn zscore(data: &mut [f64], channels: usize) -> Result<Vec<usize>> {
    if channels == 0 || !data.len().is_multiple_of(channels) || data.is_empty() {
        return Err(Error::shape(format!("{} values do not form {channels} channels", data.len())));
    }
    let len = data.len() / channels;
    let mut flat = Vec::new();
    for (c, row) in data.chunks_exact_mut(len).enumerate() {
        let (mean, std) = moments(row);
        scale_row(row, mean, std, || flat.push(c));
    }
    Ok(flat)
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn scale_row(row: &mut [f64], mean: f64, std: f64, mut on_flat: impl FnMut()) {
    if std > f64::EPSILON * mean.abs().max(f64::MIN_POSITIVE) && std > 0.0 {
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    } else {
        row.iter_mut().for_each(|v| *v = 0.0);
        on_flat();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZScoreScope {
    /// Each trial uses its own channel statistics.
    #[default]
    Trial,
    /// Channel statistics come from the whole continuous recording.
    Recording,
}

/// Per-trial shaping: segment, standardise, resample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialShaping {
    pub window: Window,
    pub zscore: ZScoreScope,
    pub fs_out: f64,
}

impl Default for TrialShaping {
    fn default() -> Self {
        TrialShaping {
            window: Window::default(),
            zscore: ZScoreScope::Trial,
            fs_out: 250.0,
        }
    }
}

/// Standardises and resamples one segmented trial.
fn finish_trial(
    raw: &[f32],
    channels: usize,
    rs: &Resampler,
    stats: Option<&[(f64, f64)]>,
    flat: &mut Vec<usize>,
) -> Result<Vec<f32>> {
    let mut x: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    match stats {
        None => flat.extend(zscore(&mut x, channels)?),
        Some(stats) => {
            let len = x.len() / channels;
            for (c, row) in x.chunks_exact_mut(len).enumerate() {
                scale_row(row, stats[c].0, stats[c].1, || flat.push(c));
            }
        }
    }
    let len = x.len() / channels;
    let mut out = Vec::with_capacity(channels * rs.output_len(len));
    for row in x.chunks_exact(len) {
        out.extend(rs.process(row)?.into_iter().map(|v| v as f32));
    }
    Ok(out)
}

/// Applies segment -> z-score -> resample and returns trials of shape
/// `channels x output_len` together with the segmentation report.
pub fn shape_trial(signal: &Signal, anchors: &[usize], shaping: &TrialShaping) -> Result<(Vec<Vec<f32>>, SegmentReport)> {
    let rs = Resampler::new(signal.fs, shaping.fs_out)?;
    let (raw, mut report) = segment(signal, anchors, &shaping.window)?;
    let stats: Option<Vec<(f64, f64)>> = match shaping.zscore {
        ZScoreScope::Trial => None,
        ZScoreScope::Recording => Some(
            (0..signal.channels)
                .map(|c| moments(&signal.channel(c).iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect(),
        ),
    };
    let mut trials = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        let mut flat = Vec::new();
        trials.push(finish_trial(r, signal.channels, &rs, stats.as_deref(), &mut flat)?);
        report.flat_channels.extend(flat.into_iter().map(|c| (i, c)));
    }
    Ok((trials, report))
}
