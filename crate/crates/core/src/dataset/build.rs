use serde::{Deserialize, Serialize};

use super::labels::{compute_rt, discretize_rt, label_intent, remove_rt_outliers, OutlierReport, RtPolicy};
use super::{montage, LabeledDataset, Mode, RawRecording, Task, Trial, TRIAL_LEN};
use crate::dsp::{bandpass, fit_ica, remove_ocular, shape_trial, FilterSpec, IcaConfig, TrialShaping};
use crate::error::{Error, Result};

/// Every preprocessing and labelling setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub filter: FilterSpec,
    /// `None` skips ocular removal.
    pub ica: Option<IcaConfig>,
    pub shaping: TrialShaping,
    pub rt: RtPolicy,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            filter: FilterSpec::default(),
            ica: Some(IcaConfig {
                frontal_channels: montage::frontal().to_vec(),
                ..IcaConfig::default()
            }),
            shaping: TrialShaping::default(),
            rt: RtPolicy::default(),
        }
    }
}

/// Continuous preprocessing output: one shaped window per usable event.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedRecording {
    pub subject: u32,
    /// `(event index, trial)` for events with a complete window.
    pub windows: Vec<(usize, Vec<f32>)>,
    pub report: SubjectReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RtSubjectReport {
    pub active_trials: usize,
    pub no_response: usize,
    pub outliers: OutlierReport,
    pub surviving: usize,
    pub excluded: bool,
    pub class_counts: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject: u32,
    pub events: usize,
    pub missing_onset: Vec<usize>,
    /// Event indices whose window runs off the recording.
    pub skipped_windows: Vec<usize>,
    /// `(event index, channel)` zeroed for lack of variance.
    pub flat_channels: Vec<(usize, usize)>,
    pub ica_scores: Vec<f64>,
    pub ica_rejected: Vec<usize>,
    pub unmarked: Vec<usize>,
    pub rt: Option<RtSubjectReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub subjects: Vec<SubjectReport>,
}

/// Bandpass, ocular removal, then per-event segmentation around movement
/// onset, z-scoring and resampling.
pub fn preprocess_recording(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<PreprocessedRecording> {
    rec.validate()?;
    let mut report = SubjectReport {
        subject: rec.subject,
        events: rec.events.len(),
        ..Default::default()
    };
    let mut signal = bandpass(&rec.eeg, &cfg.filter)?;
    if let Some(ica) = &cfg.ica {
        let model = fit_ica(&signal, ica)?;
        signal = remove_ocular(&signal, &model)?;
        report.ica_scores = model.ocular_scores;
        report.ica_rejected = model.rejected;
    }

    let mut anchors = Vec::new();
    let mut owners = Vec::new();
    for (j, e) in rec.events.iter().enumerate() {
        match e.movement_onset_s {
            Some(t) => {
                anchors.push((t * signal.fs).round() as usize);
                owners.push(j);
            }
            None => report.missing_onset.push(j),
        }
    }
    if anchors.is_empty() {
        return Err(Error::Empty(format!("subject {} has no movement onsets", rec.subject)));
    }
    let (trials, seg) = shape_trial(&signal, &anchors, &cfg.shaping)?;
    if trials[0].len() != TRIAL_LEN {
        return Err(Error::shape(format!(
            "preprocessing yields {} values per trial, the networks need {TRIAL_LEN}",
            trials[0].len()
        )));
    }
    report.skipped_windows = seg.skipped.iter().map(|&(pos, _)| owners[pos]).collect();
    report.flat_channels = seg.flat_channels.iter().map(|&(t, c)| (owners[seg.kept[t]], c)).collect();
    let windows = seg.kept.iter().map(|&pos| owners[pos]).zip(trials).collect();
    Ok(PreprocessedRecording {
        subject: rec.subject,
        windows,
        report,
    })
}

fn intent_trials(rec: &RawRecording, pre: &PreprocessedRecording, report: &mut SubjectReport) -> Vec<Trial> {
    let labels = label_intent(&rec.events);
    report.unmarked = labels.unmarked.clone();
    pre.windows
        .iter()
        .filter_map(|(j, x)| {
            labels.labels[*j].map(|y| Trial {
                x: x.clone(),
                y,
                subject: rec.subject,
                index: *j as u32,
                task: Task::Intent,
                rt_s: None,
            })
        })
        .collect()
}

fn rt_trials(rec: &RawRecording, pre: &PreprocessedRecording, policy: &RtPolicy, report: &mut SubjectReport) -> Result<Vec<Trial>> {
    let kin = rec
        .kinematics
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("subject {} has no kinematics; the rt task needs them", rec.subject)))?;
    let mut r = RtSubjectReport::default();
    let mut candidates = Vec::new();
    for (j, x) in &pre.windows {
        let e = &rec.events[*j];
        if e.mode != Some(Mode::Active) {
            continue;
        }
        r.active_trials += 1;
        match compute_rt(kin, e.stimulus_s, policy.threshold)? {
            Some(rt) => candidates.push((*j, x, rt)),
            None => r.no_response += 1,
        }
    }
    let rts: Vec<f64> = candidates.iter().map(|c| c.2).collect();
    let (keep, outliers) = remove_rt_outliers(&rts, policy.bounds);
    r.outliers = outliers;
    r.surviving = keep.len();
    if keep.len() < policy.min_trials {
        log::warn!(
            "subject {} keeps {} reaction-time trials (< {}); excluded",
            rec.subject,
            keep.len(),
            policy.min_trials
        );
        r.excluded = true;
        report.rt = Some(r);
        return Ok(Vec::new());
    }
    let kept_rts: Vec<f64> = keep.iter().map(|&i| rts[i]).collect();
    let classes = discretize_rt(&kept_rts, policy.discretization)?;
    r.class_counts = classes.counts;
    if classes.counts[0] != classes.counts[1] {
        log::info!("subject {} reaction-time classes {:?}", rec.subject, classes.counts);
    }
    report.rt = Some(r);
    Ok(keep
        .iter()
        .zip(&classes.classes)
        .filter_map(|(&i, c)| {
            let (j, x, rt) = candidates[i];
            c.map(|y| Trial {
                x: x.clone(),
                y,
                subject: rec.subject,
                index: j as u32,
                task: Task::Rt,
                rt_s: Some(rt),
            })
        })
        .collect())
}

/// Preprocesses each recording once and labels it for every requested task.
/// Recordings are consumed one at a time, so only one is held in memory.
pub fn build_datasets<I>(recordings: I, cfg: &PreprocessConfig, tasks: &[Task]) -> Result<(Vec<LabeledDataset>, BuildReport)>
where
    I: IntoIterator<Item = Result<RawRecording>>,
{
    if tasks.is_empty() {
        return Err(Error::invalid("no task requested"));
    }
    let provenance = serde_json::to_value(cfg)?;
    let mut sets: Vec<LabeledDataset> = tasks
        .iter()
        .map(|&task| LabeledDataset {
            task,
            trials: Vec::new(),
            subjects: Vec::new(),
            provenance: serde_json::json!({ "task": task, "preprocess": provenance.clone() }),
        })
        .collect();
    let mut report = BuildReport::default();
    for rec in recordings {
        let rec = rec?;
        if sets[0].subjects.contains(&rec.subject) || report.subjects.iter().any(|s| s.subject == rec.subject) {
            return Err(Error::invalid(format!("subject {} appears twice", rec.subject)));
        }
        let pre = preprocess_recording(&rec, cfg)?;
        let mut sub = pre.report.clone();
        for set in &mut sets {
            let trials = match set.task {
                Task::Intent => intent_trials(&rec, &pre, &mut sub),
                Task::Rt => rt_trials(&rec, &pre, &cfg.rt, &mut sub)?,
            };
            if !trials.is_empty() {
                set.subjects.push(rec.subject);
                set.trials.extend(trials);
            }
        }
        log::info!("subject {}: {} windows", rec.subject, pre.windows.len());
        report.subjects.push(sub);
    }
    for set in &sets {
        if set.trials.is_empty() {
            return Err(Error::Empty(format!("{} dataset has no trials", set.task)));
        }
        set.validate()?;
    }
    Ok((sets, report))
}
