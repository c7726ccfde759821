//! Synthetic cohorts: EEG, robot kinematics and event streams with known
//! class structure.
//!
//! Background activity is a spatial mixture of amplitude-modulated 1/f
//! sources plus posterior 10 Hz alpha, per-channel sensor noise and frontal
//! blinks. Active trials carry a negative ramp on central channels that
//! ends at movement onset; it starts earlier for faster reactions. Passive
//! trials have the same timing and no ramp.

mod kinematics;
mod noise;

pub use kinematics::{crossing_time, position as min_jerk_position, speed as min_jerk_speed};
pub use noise::coloured_noise;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{montage, Direction, Kinematics, Mode, RawRecording, TrialEvent, EEG_RATE, KINEMATIC_RATE};
use crate::dsp::Signal;
use crate::error::{Error, Result};
use crate::nn::INPUT_CHANNELS;
use crate::tensor::Scalar;

/// Shifted log-normal: `shift + exp(mu + sigma * z)`, truncated below 1.5 s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtDistribution {
    pub shift: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for RtDistribution {
    fn default() -> Self {
        RtDistribution {
            shift: 0.05,
            mu: 0.3f64.ln(),
            sigma: 0.45,
        }
    }
}

impl RtDistribution {
    /// Median before truncation.
    pub fn median(&self) -> f64 {
        self.shift + self.mu.exp()
    }
}

/// Between-subject spread of generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variability {
    /// Relative SD of the signature amplitude.
    pub snr: f64,
    /// SD of the per-subject shift of the log-normal `mu`.
    pub rt_mu: f64,
    /// SD of the central focus position on the unit disk.
    pub focus: f64,
}

impl Default for Variability {
    fn default() -> Self {
        Variability {
            snr: 0.15,
            rt_mu: 0.05,
            focus: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub subjects: usize,
    pub trials_per_mode: usize,
    /// Ramp amplitude over central background RMS.
    pub snr: f64,
    pub rt: RtDistribution,
    pub seed: u64,
    pub variability: Variability,
    /// Trials per contiguous block of one mode.
    pub block_size: usize,
    /// Speed at which the generated movement onset is stamped (m/s).
    pub onset_speed: f64,
    pub reach_distance: f64,
    pub reach_duration: f64,
    /// Mean blink rate (per second).
    pub blink_rate: f64,
    pub background_sources: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            subjects: 13,
            trials_per_mode: 210,
            snr: 3.0,
            rt: RtDistribution::default(),
            seed: 0,
            variability: Variability::default(),
            block_size: 30,
            onset_speed: 0.05,
            reach_distance: 0.14,
            reach_duration: 0.6,
            blink_rate: 0.25,
            background_sources: 24,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 {
            return Err(Error::invalid("a cohort needs at least two subjects"));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::invalid(format!("snr must be finite and >= 0, got {}", self.snr)));
        }
        if self.trials_per_mode == 0 || self.block_size == 0 {
            return Err(Error::invalid("trial and block counts must be positive"));
        }
        if !(self.rt.sigma > 0.0 && self.rt.shift >= 0.0 && self.rt.median() < 1.5) {
            return Err(Error::invalid("reaction-time distribution must have sigma > 0, shift >= 0 and median < 1.5 s"));
        }
        if crossing_time(self.reach_distance, self.reach_duration, self.onset_speed).is_none() {
            return Err(Error::invalid("reach never reaches the onset speed"));
        }
        Ok(())
    }
}

/// Generator-side truth for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subject: u32,
    pub trial_index: usize,
    pub mode: Mode,
    pub direction: Direction,
    pub stimulus_s: f64,
    pub true_rt: f64,
    pub movement_onset_s: f64,
    /// Start of the central ramp; empty for passive trials.
    pub drift_onset: Option<f64>,
}

/// How far ahead of movement onset the ramp starts, by reaction time.
pub fn drift_lead(rt: f64) -> f64 {
    0.5 - 0.4 * ((rt - 0.15) / 0.45).clamp(0.0, 1.0)
}

const LEAD_IN_S: f64 = 2.0;
const TAIL_S: f64 = 2.0;
/// Two posterior alpha generators and one central mu rhythm.
const ALPHA_SOURCES: usize = 3;
const MU_AMPLITUDE: f64 = 5.0;
const SENSOR_NOISE: f64 = 0.3;
const BACKGROUND_UV: f64 = 10.0;

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

fn z<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_rt<R: Rng>(rng: &mut R, dist: &RtDistribution, mu: f64) -> f64 {
    let ln = LogNormal::new(mu, dist.sigma).expect("sigma validated");
    loop {
        let rt = dist.shift + ln.sample(rng);
        if rt > 0.0 && rt < 1.5 {
            return rt;
        }
    }
}

fn gaussian_map(centre: (f64, f64), width: f64) -> Vec<f64> {
    (0..INPUT_CHANNELS)
        .map(|c| {
            let (x, y) = montage::position(c);
            let d2 = (x - centre.0).powi(2) + (y - centre.1).powi(2);
            (-d2 / (2.0 * width * width)).exp()
        })
        .collect()
}

struct Timeline {
    events: Vec<TrialEvent>,
    truth: Vec<GroundTruth>,
    /// `(start time, direction)` of each reach; reaches last `reach_duration`.
    reaches: Vec<(f64, Direction)>,
    duration: f64,
}

fn timeline<R: Rng>(rng: &mut R, cfg: &CohortConfig, subject: u32, rt_mu: f64) -> Timeline {
    let tc = crossing_time(cfg.reach_distance, cfg.reach_duration, cfg.onset_speed).expect("validated") * cfg.reach_duration;
    let first_active = rng.random_bool(0.5);
    let mut modes = Vec::with_capacity(2 * cfg.trials_per_mode);
    let (mut left_a, mut left_p) = (cfg.trials_per_mode, cfg.trials_per_mode);
    let mut active = first_active;
    while left_a + left_p > 0 {
        let pool = if active { &mut left_a } else { &mut left_p };
        let take = cfg.block_size.min(*pool);
        *pool -= take;
        modes.extend(std::iter::repeat_n(if active { Mode::Active } else { Mode::Passive }, take));
        active = !active;
    }

    let mut t = LEAD_IN_S;
    let mut out = Timeline {
        events: Vec::new(),
        truth: Vec::new(),
        reaches: Vec::new(),
        duration: 0.0,
    };
    for (j, mode) in modes.into_iter().enumerate() {
        let direction = Direction::ALL[rng.random_range(0..4)];
        let rt = sample_rt(rng, &cfg.rt, rt_mu);
        let stimulus = t;
        let onset = stimulus + rt;
        out.reaches.push((onset - tc, direction));
        out.events.push(TrialEvent {
            stimulus_s: stimulus,
            direction,
            mode: Some(mode),
            movement_onset_s: Some(onset),
        });
        out.truth.push(GroundTruth {
            subject,
            trial_index: j,
            mode,
            direction,
            stimulus_s: stimulus,
            true_rt: rt,
            movement_onset_s: onset,
            drift_onset: (mode == Mode::Active).then(|| onset - drift_lead(rt)),
        });
        // the next target appears 20 ms (plus jitter) after the reach ends
        t = onset - tc + cfg.reach_duration + 0.020 + rng.random_range(0.0..0.010);
    }
    out.duration = t + TAIL_S;
    out
}

fn kinematic_streams(tl: &Timeline, cfg: &CohortConfig) -> Kinematics {
    let n = (tl.duration * KINEMATIC_RATE).floor() as usize;
    let mut k = Kinematics {
        fs: KINEMATIC_RATE,
        x: vec![0.0; n],
        y: vec![0.0; n],
        vx: vec![0.0; n],
        vy: vec![0.0; n],
    };
    let (d, dur) = (cfg.reach_distance, cfg.reach_duration);
    let mut origin = (0.0, 0.0);
    let mut reach = 0;
    for i in 0..n {
        let t = i as f64 / KINEMATIC_RATE;
        while reach < tl.reaches.len() && t >= tl.reaches[reach].0 + dur {
            let (ux, uy) = tl.reaches[reach].1.unit();
            origin = (origin.0 + ux * d, origin.1 + uy * d);
            reach += 1;
        }
        let (mut px, mut py, mut vx, mut vy) = (origin.0, origin.1, 0.0, 0.0);
        if let Some(&(start, dir)) = tl.reaches.get(reach) {
            let tau = (t - start) / dur;
            if tau >= 0.0 {
                let (ux, uy) = dir.unit();
                let p = d * min_jerk_position(tau);
                let v = d / dur * min_jerk_speed(tau);
                px += ux * p;
                py += uy * p;
                vx = ux * v;
                vy = uy * v;
            }
        }
        k.x[i] = px as f32;
        k.y[i] = py as f32;
        k.vx[i] = vx as f32;
        k.vy[i] = vy as f32;
    }
    k
}

/// Builds one subject's recording and its per-trial ground truth.
pub fn generate_subject(cfg: &CohortConfig, subject: usize) -> Result<(RawRecording, Vec<GroundTruth>)> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg.seed, subject);
    let var = cfg.variability;
    let rt_mu = cfg.rt.mu + var.rt_mu * z(&mut rng);
    let snr = cfg.snr * (1.0 + var.snr * z(&mut rng)).max(0.1);
    let focus = (
        var.focus * z(&mut rng),
        var.focus * z(&mut rng),
    );
    let tl = timeline(&mut rng, cfg, subject as u32, rt_mu);
    let n = (tl.duration * EEG_RATE).floor() as usize;
    let c = INPUT_CHANNELS;

    // latent sources (rows) and their scalp maps (channels x sources)
    let k_bg = cfg.background_sources;
    let k = k_bg + ALPHA_SOURCES;
    let mut sources = vec![0.0; k * n];
    let mut maps = vec![0.0; c * k];
    for s in 0..k_bg {
        let pink = noise::coloured_noise(&mut rng, n, EEG_RATE, 1.0, 0.2, 100.0);
        let env = noise::envelope(&mut rng, n, EEG_RATE, 0.6, 0.5);
        for (dst, (p, e)) in sources[s * n..(s + 1) * n].iter_mut().zip(pink.iter().zip(&env)) {
            *dst = p * e;
        }
        let r = rng.random_range(0.0f64..1.0).sqrt() * 0.9;
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let width = rng.random_range(0.15..0.3);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for (ch, m) in gaussian_map((r * th.cos(), r * th.sin()), width).into_iter().enumerate() {
            maps[ch * k + s] = sign * m;
        }
    }
    for a in 0..ALPHA_SOURCES {
        let s = k_bg + a;
        let freq = 10.0 + rng.random_range(-0.4..0.4);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let env = noise::envelope(&mut rng, n, EEG_RATE, 0.8, 1.0);
        for (i, dst) in sources[s * n..(s + 1) * n].iter_mut().enumerate() {
            let t = i as f64 / EEG_RATE;
            *dst = std::f64::consts::SQRT_2 * env[i] * (std::f64::consts::TAU * freq * t + phase).sin();
        }
        let mu = a + 1 == ALPHA_SOURCES;
        let (centre, gain) = if mu {
            ((focus.0, focus.1), MU_AMPLITUDE)
        } else {
            ((rng.random_range(-0.4..0.4), rng.random_range(-0.85..-0.5)), 1.5)
        };
        sources[s * n..(s + 1) * n].iter_mut().for_each(|v| *v *= gain);
        for (ch, m) in gaussian_map(centre, 0.3).into_iter().enumerate() {
            maps[ch * k + s] = m;
        }
    }
    let mut eeg = vec![0.0f64; c * n];
    f64::gemm(c, k, n, 1.0, &maps, (k, 1), &sources, (n, 1), 0.0, &mut eeg, (n, 1));
    drop(sources);
    for ch in 0..c {
        let sensor = noise::coloured_noise(&mut rng, n, EEG_RATE, 1.0, 0.2, 200.0);
        for (v, s) in eeg[ch * n..(ch + 1) * n].iter_mut().zip(sensor) {
            *v += SENSOR_NOISE * s;
        }
    }
    // scale so central background RMS equals BACKGROUND_UV
    let central = montage::central();
    let ms: f64 = central
        .iter()
        .map(|&ch| eeg[ch * n..(ch + 1) * n].iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / (central.len() * n) as f64;
    let scale = BACKGROUND_UV / ms.sqrt();
    eeg.iter_mut().for_each(|v| *v *= scale);

    // frontal blinks, Poisson in time
    let blink_map: Vec<f64> = (0..c)
        .map(|ch| {
            let (_, y) = montage::position(ch);
            ((y - 1.0) / 0.35).exp()
        })
        .collect();
    if cfg.blink_rate > 0.0 {
        let gap = Exp::new(cfg.blink_rate).expect("positive rate");
        let mut t = gap.sample(&mut rng);
        while t < tl.duration {
            let amp = 8.0 * BACKGROUND_UV * rng.random_range(0.7..1.3);
            let width = rng.random_range(0.2..0.4);
            let (i0, len) = ((t * EEG_RATE) as usize, (width * EEG_RATE) as usize);
            for i in i0..(i0 + len).min(n) {
                let b = amp * (std::f64::consts::PI * (i - i0) as f64 / len as f64).sin().powi(2);
                for ch in 0..c {
                    eeg[ch * n + i] += blink_map[ch] * b;
                }
            }
            t += width + gap.sample(&mut rng);
        }
    }

    // readiness-like ramp on central channels for active trials
    let ramp_map = gaussian_map(focus, 0.35);
    let amplitude = snr * BACKGROUND_UV;
    for g in &tl.truth {
        let Some(start) = g.drift_onset else { continue };
        let (i0, i1) = ((start * EEG_RATE).ceil() as usize, (g.movement_onset_s * EEG_RATE).ceil() as usize);
        let span = g.movement_onset_s - start;
        // ramp down to -amplitude at onset, then relax back over 0.3 s
        let relax = (0.3 * EEG_RATE) as usize;
        for i in i0..(i1 + relax).min(n) {
            let t = i as f64 / EEG_RATE;
            let v = if i < i1 {
                -amplitude * (t - start) / span
            } else {
                -amplitude * (1.0 - (i - i1) as f64 / relax as f64)
            };
            for ch in 0..c {
                eeg[ch * n + i] += ramp_map[ch] * v;
            }
        }
    }

    let signal = Signal::new(EEG_RATE, c, eeg.into_iter().map(|v| v as f32).collect())?;
    let rec = RawRecording {
        subject: subject as u32,
        eeg: signal,
        kinematics: Some(kinematic_streams(&tl, cfg)),
        events: tl.events,
    };
    rec.validate()?;
    Ok((rec, tl.truth))
}

/// Lazily generates every subject in order.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<impl Iterator<Item = Result<(RawRecording, Vec<GroundTruth>)>> + '_> {
    cfg.validate()?;
    Ok((0..cfg.subjects).map(move |s| generate_subject(cfg, s)))
}

/// Writes the ground-truth table as CSV.
pub fn write_ground_truth(path: impl AsRef<Path>, rows: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow::from(r)).map_err(|e| Error::invalid(format!("ground truth: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("ground truth: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize::<CsvRow>()
        .map(|row| row.map(GroundTruth::from).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    subject: u32,
    trial_index: usize,
    mode: Mode,
    direction: Direction,
    stimulus_s: f64,
    true_rt: f64,
    movement_onset_s: f64,
    drift_onset: Option<f64>,
}

impl From<&GroundTruth> for CsvRow {
    fn from(g: &GroundTruth) -> Self {
        CsvRow {
            subject: g.subject,
            trial_index: g.trial_index,
            mode: g.mode,
            direction: g.direction,
            stimulus_s: g.stimulus_s,
            true_rt: g.true_rt,
            movement_onset_s: g.movement_onset_s,
            drift_onset: g.drift_onset,
        }
    }
}

impl From<CsvRow> for GroundTruth {
    fn from(r: CsvRow) -> Self {
        GroundTruth {
            subject: r.subject,
            trial_index: r.trial_index,
            mode: r.mode,
            direction: r.direction,
            stimulus_s: r.stimulus_s,
            true_rt: r.true_rt,
            movement_onset_s: r.movement_onset_s,
            drift_onset: r.drift_onset,
        }
    }
}
