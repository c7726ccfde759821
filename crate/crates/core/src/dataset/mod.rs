//! Recording and trial data model, labelling rules and the on-disk
//! dataset directory format.

mod build;
mod io;
mod labels;
pub mod montage;

pub use build::{build_datasets, preprocess_recording, BuildReport, PreprocessConfig, PreprocessedRecording, SubjectReport};
pub use io::{load_dataset, load_recording, load_recordings, save_dataset, save_recordings, DatasetManifest, RecordingEntry, RecordingManifest};
pub use labels::{
    compute_rt, discretize_rt, label_intent, remove_rt_outliers, Discretization, IntentLabels, OutlierReport, RtClasses, RtPolicy,
    SpeedThreshold, RT_MAX, RT_MIN, RT_SEARCH_S,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::Signal;
use crate::error::{Error, Result};
use crate::nn::{Architecture, INPUT_CHANNELS, INPUT_SAMPLES};

pub const EEG_RATE: f64 = 1024.0;
pub const KINEMATIC_RATE: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Intent,
    Rt,
}

impl Task {
    pub fn architecture(self) -> Architecture {
        match self {
            Task::Intent => Architecture::Intent,
            Task::Rt => Architecture::Rt,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Intent => "intent",
            Task::Rt => "rt",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intent" => Ok(Task::Intent),
            "rt" => Ok(Task::Rt),
            other => Err(Error::invalid(format!("unknown task {other:?}; expected intent or rt"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Unit vector of the reach in the robot plane.
    pub fn unit(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, 1.0),
            Direction::Down => (0.0, -1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// The subject drives the movement.
    Active,
    /// The robot moves the attached arm.
    Passive,
}

/// One stimulus and the movement that followed. Times are seconds from the
/// start of the recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub stimulus_s: f64,
    pub direction: Direction,
    pub mode: Option<Mode>,
    pub movement_onset_s: Option<f64>,
}

/// End-effector position (m) and velocity (m/s), sampled at `fs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub fs: f64,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub vx: Vec<f32>,
    pub vy: Vec<f32>,
}

impl Kinematics {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fs
    }

    pub fn speed(&self, k: usize) -> f64 {
        (self.vx[k] as f64).hypot(self.vy[k] as f64)
    }

    fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if self.y.len() != n || self.vx.len() != n || self.vy.len() != n {
            return Err(Error::shape("kinematic streams differ in length"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject: u32,
    pub eeg: Signal,
    pub kinematics: Option<Kinematics>,
    pub events: Vec<TrialEvent>,
}

impl RawRecording {
    pub fn validate(&self) -> Result<()> {
        let duration = self.eeg.duration();
        if let Some(k) = &self.kinematics {
            k.validate()?;
        }
        for (j, e) in self.events.iter().enumerate() {
            let times = std::iter::once(e.stimulus_s).chain(e.movement_onset_s);
            for t in times {
                if !(0.0..=duration).contains(&t) {
                    return Err(Error::invalid(format!(
                        "subject {} trial {j}: event at {t} s lies outside the {duration} s recording",
                        self.subject
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One preprocessed `128 x 125` window with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub x: Vec<f32>,
    pub y: u8,
    pub subject: u32,
    /// Position of the trial in its recording's event list.
    pub index: u32,
    pub task: Task,
    pub rt_s: Option<f64>,
}

pub const TRIAL_LEN: usize = INPUT_CHANNELS * INPUT_SAMPLES;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: Task,
    pub trials: Vec<Trial>,
    pub subjects: Vec<u32>,
    /// Settings that produced the trials, stored verbatim in the manifest.
    pub provenance: serde_json::Value,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        for t in &self.trials {
            if t.x.len() != TRIAL_LEN {
                return Err(Error::shape(format!("trial holds {} values, expected {TRIAL_LEN}", t.x.len())));
            }
            if t.y > 1 {
                return Err(Error::invalid(format!("label {} is not binary", t.y)));
            }
            if t.task != self.task {
                return Err(Error::invalid("trial task differs from dataset task"));
            }
            match (self.task, t.rt_s) {
                (Task::Intent, None) => {}
                (Task::Rt, Some(rt)) if rt.is_finite() && rt > 0.0 => {}
                (task, rt) => return Err(Error::invalid(format!("{task} trial carries reaction time {rt:?}"))),
            }
            if !self.subjects.contains(&t.subject) {
                return Err(Error::invalid(format!("trial subject {} not listed in dataset", t.subject)));
            }
        }
        Ok(())
    }

    pub fn inputs(&self) -> Vec<&[f32]> {
        self.trials.iter().map(|t| t.x.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.y as usize).collect()
    }

    /// Trials belonging to `subject`, in dataset order.
    pub fn subject_indices(&self, subject: u32) -> Vec<usize> {
        (0..self.trials.len()).filter(|&i| self.trials[i].subject == subject).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for t in &self.trials {
            c[t.y as usize] += 1;
        }
        c
    }
}
