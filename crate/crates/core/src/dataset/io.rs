//! Dataset directories: a `manifest.json` plus one binary per array.
//!
//! Array files are `b"MDF1"`, a `u64` value count, the `u32` CRC-32 of the
//! payload, then the payload as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Kinematics, LabeledDataset, RawRecording, Task, Trial, TrialEvent, TRIAL_LEN};
use crate::dsp::Signal;
use crate::error::{Error, Result};
use crate::nn::{INPUT_CHANNELS, INPUT_SAMPLES};

pub const MANIFEST: &str = "manifest.json";
const ARRAY_MAGIC: [u8; 4] = *b"MDF1";
const RAW_FORMAT: &str = "motordecode-raw";
const TRIALS_FORMAT: &str = "motordecode-trials";
const VERSION: u32 = 1;

fn write_array(path: &Path, values: &[f32]) -> Result<()> {
    let mut payload = Vec::with_capacity(values.len() * 4);
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&ARRAY_MAGIC)?;
    f.write_all(&(values.len() as u64).to_le_bytes())?;
    f.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

fn read_array(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || bytes[..4] != ARRAY_MAGIC {
        return Err(Error::format(path, "not an array file"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let payload = &bytes[16..];
    if payload.len() != count * 4 {
        return Err(Error::format(path, format!("header announces {count} values, payload holds {} bytes", payload.len())));
    }
    let found = crc32fast::hash(payload);
    if found != crc {
        return Err(Error::Checksum {
            what: path.display().to_string(),
            expected: crc,
            found,
        });
    }
    if count != expected_len {
        return Err(Error::shape(format!(
            "{} holds {count} values but the manifest implies {expected_len}",
            path.display()
        )));
    }
    Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path, format: &str) -> Result<T> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        other => return Err(Error::format(&path, format!("expected format {format:?}, found {other:?}"))),
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == VERSION as u64 => {}
        other => return Err(Error::format(&path, format!("unsupported version {other:?}"))),
    }
    serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub subject: u32,
    pub channels: usize,
    pub eeg_rate: f64,
    pub eeg_samples: usize,
    pub eeg_file: String,
    pub kinematic_rate: Option<f64>,
    pub kinematic_samples: Option<usize>,
    /// Rows x, y, vx, vy.
    pub kinematics_file: Option<String>,
    pub events: Vec<TrialEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub format: String,
    pub version: u32,
    pub recordings: Vec<RecordingEntry>,
    /// Free-form producer metadata.
    pub source: serde_json::Value,
}

fn save_one(dir: &Path, rec: &RawRecording) -> Result<RecordingEntry> {
    rec.validate()?;
    let eeg_file = format!("eeg_s{:03}.f32", rec.subject);
    write_array(&dir.join(&eeg_file), &rec.eeg.data)?;
    let (kinematic_rate, kinematic_samples, kinematics_file) = match &rec.kinematics {
        Some(k) => {
            let name = format!("kinematics_s{:03}.f32", rec.subject);
            let stacked: Vec<f32> = [&k.x, &k.y, &k.vx, &k.vy].iter().flat_map(|v| v.iter().copied()).collect();
            write_array(&dir.join(&name), &stacked)?;
            (Some(k.fs), Some(k.len()), Some(name))
        }
        None => (None, None, None),
    };
    Ok(RecordingEntry {
        subject: rec.subject,
        channels: rec.eeg.channels,
        eeg_rate: rec.eeg.fs,
        eeg_samples: rec.eeg.samples(),
        eeg_file,
        kinematic_rate,
        kinematic_samples,
        kinematics_file,
        events: rec.events.clone(),
    })
}

/// Writes recordings one at a time, then the manifest.
pub fn save_recordings<I>(dir: impl AsRef<Path>, recordings: I, source: serde_json::Value) -> Result<RecordingManifest>
where
    I: IntoIterator<Item = Result<RawRecording>>,
{
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for rec in recordings {
        let rec = rec?;
        if entries.iter().any(|e: &RecordingEntry| e.subject == rec.subject) {
            return Err(Error::invalid(format!("subject {} appears twice", rec.subject)));
        }
        entries.push(save_one(dir, &rec)?);
    }
    let manifest = RecordingManifest {
        format: RAW_FORMAT.into(),
        version: VERSION,
        recordings: entries,
        source,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_recording(dir: impl AsRef<Path>, entry: &RecordingEntry) -> Result<RawRecording> {
    let dir = dir.as_ref();
    let data = read_array(&dir.join(&entry.eeg_file), entry.channels * entry.eeg_samples)?;
    let eeg = Signal::new(entry.eeg_rate, entry.channels, data)?;
    let kinematics = match (&entry.kinematics_file, entry.kinematic_rate, entry.kinematic_samples) {
        (Some(file), Some(fs), Some(n)) => {
            let v = read_array(&dir.join(file), 4 * n)?;
            Some(Kinematics {
                fs,
                x: v[..n].to_vec(),
                y: v[n..2 * n].to_vec(),
                vx: v[2 * n..3 * n].to_vec(),
                vy: v[3 * n..].to_vec(),
            })
        }
        (None, None, None) => None,
        _ => return Err(Error::format(dir.join(MANIFEST), format!("subject {} has an incomplete kinematics entry", entry.subject))),
    };
    let rec = RawRecording {
        subject: entry.subject,
        eeg,
        kinematics,
        events: entry.events.clone(),
    };
    rec.validate()?;
    Ok(rec)
}

/// Reads the manifest and returns a lazy iterator over its recordings.
pub fn load_recordings(dir: impl AsRef<Path>) -> Result<(RecordingManifest, impl Iterator<Item = Result<RawRecording>>)> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let manifest: RecordingManifest = read_manifest(&dir, RAW_FORMAT)?;
    let entries = manifest.recordings.clone();
    Ok((manifest, entries.into_iter().map(move |e| load_recording(&dir, &e))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub subject: u32,
    pub index: u32,
    pub y: u8,
    pub rt_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub channels: usize,
    pub samples: usize,
    pub sampling_rate: f64,
    pub subjects: Vec<u32>,
    pub class_counts: [usize; 2],
    pub x_file: String,
    pub trials: Vec<TrialEntry>,
    pub provenance: serde_json::Value,
}

const X_FILE: &str = "trials.f32";

pub fn save_dataset(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut x = Vec::with_capacity(dataset.trials.len() * TRIAL_LEN);
    for t in &dataset.trials {
        x.extend_from_slice(&t.x);
    }
    write_array(&dir.join(X_FILE), &x)?;
    let manifest = DatasetManifest {
        format: TRIALS_FORMAT.into(),
        version: VERSION,
        task: dataset.task,
        channels: INPUT_CHANNELS,
        samples: INPUT_SAMPLES,
        sampling_rate: 250.0,
        subjects: dataset.subjects.clone(),
        class_counts: dataset.class_counts(),
        x_file: X_FILE.into(),
        trials: dataset
            .trials
            .iter()
            .map(|t| TrialEntry {
                subject: t.subject,
                index: t.index,
                y: t.y,
                rt_s: t.rt_s,
            })
            .collect(),
        provenance: dataset.provenance.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let m: DatasetManifest = read_manifest(dir, TRIALS_FORMAT)?;
    if m.channels != INPUT_CHANNELS || m.samples != INPUT_SAMPLES {
        return Err(Error::shape(format!(
            "manifest declares {} x {} trials, expected {INPUT_CHANNELS} x {INPUT_SAMPLES}",
            m.channels, m.samples
        )));
    }
    let x = read_array(&dir.join(&m.x_file), m.trials.len() * TRIAL_LEN)?;
    let trials = m
        .trials
        .iter()
        .zip(x.chunks_exact(TRIAL_LEN))
        .map(|(e, x)| Trial {
            x: x.to_vec(),
            y: e.y,
            subject: e.subject,
            index: e.index,
            task: m.task,
            rt_s: e.rt_s,
        })
        .collect();
    let ds = LabeledDataset {
        task: m.task,
        trials,
        subjects: m.subjects,
        provenance: m.provenance,
    };
    ds.validate()?;
    Ok(ds)
}
