//! Continuous-signal conditioning (bandpass, ocular ICA) and per-trial
//! shaping (segmentation, z-score, resampling).
//!
//! Continuous stages run on the whole recording; trial stages run in the
//! order segment -> z-score -> resample and yield `128 x 125` trials.

mod filter;
mod ica;
mod resample;
mod segment;

pub use filter::{bandpass, design_bandpass, FilterMode, FilterSpec, Sos};
pub use ica::{fit_ica, remove_ocular, IcaConfig, IcaModel};
pub use resample::{resample, resample_channels, Resampler};
pub use segment::{segment, shape_trial, zscore, SegmentReport, TrialShaping, Window, ZScoreScope};

use crate::error::{Error, Result};

/// Channel-major multichannel signal sampled at `fs` Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub fs: f64,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Signal {
    pub fn new(fs: f64, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || !data.len().is_multiple_of(channels) {
            return Err(Error::shape(format!(
                "{} values cannot be split into {channels} channels",
                data.len()
            )));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Signal { fs, channels, data })
    }

    pub fn samples(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn duration(&self) -> f64 {
        self.samples() as f64 / self.fs
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.samples();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.samples();
        &mut self.data[c * n..(c + 1) * n]
    }
}
