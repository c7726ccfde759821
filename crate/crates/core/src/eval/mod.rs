//! Validation schemes (leave-one-subject-out, subject-specific 4:1 and
//! pooled 4:1) with confusion matrices, F1 and reproducible reports.

mod metrics;
mod split;

pub use metrics::{confusion_and_f1, format_mean_sd, mean_sd, metrics_from, Confusion, Metrics};
pub use split::{split_loo, split_ratio, Fold};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::nn::{train, Network, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Loo,
    SubjectSpecific,
    AllData,
}

impl Scheme {
    pub fn default_repeats(self) -> usize {
        match self {
            Scheme::Loo => 1,
            Scheme::SubjectSpecific => 1,
            Scheme::AllData => 10,
        }
    }

    /// Reaction time is evaluated only across subjects or on pooled data:
    /// a single subject's median split leaves too few trials per class.
    pub fn check_task(self, task: Task) -> Result<()> {
        if task == Task::Rt && self == Scheme::SubjectSpecific {
            return Err(Error::Unsupported(
                "the rt task is evaluated with loo or all-data only; per-subject reaction-time sets are too small for a subject-specific split"
                    .into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Loo => "loo",
            Scheme::SubjectSpecific => "subject-specific",
            Scheme::AllData => "all-data",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loo" => Ok(Scheme::Loo),
            "subject-specific" => Ok(Scheme::SubjectSpecific),
            "all-data" => Ok(Scheme::AllData),
            other => Err(Error::invalid(format!("unknown scheme {other:?}; expected loo, subject-specific or all-data"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scheme: Scheme,
    pub train: TrainConfig,
    /// Random partitions (all-data) or splits per subject (subject-specific);
    /// `None` uses the scheme default. Ignored by loo.
    pub repeats: Option<usize>,
    pub seed: u64,
    pub stratify: bool,
}

impl EvalConfig {
    pub fn new(scheme: Scheme) -> Self {
        EvalConfig {
            scheme,
            train: TrainConfig::default(),
            repeats: None,
            seed: 0,
            stratify: true,
        }
    }

    pub fn repeats(&self) -> usize {
        self.repeats.unwrap_or(self.scheme.default_repeats())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub label: String,
    pub subject: Option<u32>,
    pub repeat: Option<usize>,
    pub seed: u64,
    pub train_trials: usize,
    pub test_trials: usize,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub scheme: Scheme,
    pub seed: u64,
    /// SHA-256 over the configuration and the dataset contents.
    pub fingerprint: String,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub summary: String,
    /// Mean of the per-fold percent matrices.
    pub mean_confusion_percent: [[f64; 2]; 2],
    /// Metrics of the confusion counts pooled over folds.
    pub pooled: Metrics,
    pub mean_macro_f1: f64,
    pub config: EvalConfig,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for fold `index` of a run seeded with `seed`.
pub fn fold_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64))
}

/// Partitions a dataset for the configured scheme.
pub fn make_folds(ds: &LabeledDataset, cfg: &EvalConfig) -> Result<Vec<Fold>> {
    cfg.scheme.check_task(ds.task)?;
    let labels = ds.labels();
    let repeats = cfg.repeats();
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    match cfg.scheme {
        Scheme::Loo => split_loo(ds),
        Scheme::AllData => {
            let all: Vec<usize> = (0..ds.trials.len()).collect();
            (0..repeats)
                .map(|r| {
                    let (train, test) = split_ratio(&all, &labels, fold_seed(cfg.seed, r) ^ 0x5a, cfg.stratify)?;
                    Ok(Fold {
                        label: format!("partition {}", r + 1),
                        subject: None,
                        repeat: Some(r),
                        train,
                        test,
                    })
                })
                .collect()
        }
        Scheme::SubjectSpecific => {
            let mut folds = Vec::new();
            for &s in &ds.subjects {
                let idx = ds.subject_indices(s);
                for r in 0..repeats {
                    let (train, test) = split_ratio(&idx, &labels, fold_seed(cfg.seed, folds.len()) ^ 0x5a, cfg.stratify)?;
                    folds.push(Fold {
                        label: if repeats == 1 { format!("subject {s}") } else { format!("subject {s} split {}", r + 1) },
                        subject: Some(s),
                        repeat: Some(r),
                        train,
                        test,
                    });
                }
            }
            Ok(folds)
        }
    }
}

/// Hex SHA-256 of the evaluation settings and every trial.
pub fn fingerprint(ds: &LabeledDataset, cfg: &EvalConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(serde_json::to_vec(&ds.provenance)?);
    h.update(ds.task.to_string().as_bytes());
    for t in &ds.trials {
        h.update(t.subject.to_le_bytes());
        h.update(t.index.to_le_bytes());
        h.update([t.y]);
        for v in &t.x {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Trains a fresh network on the fold's training trials and scores the test trials.
pub fn run_fold(ds: &LabeledDataset, fold: &Fold, train_cfg: &TrainConfig, seed: u64) -> Result<FoldResult> {
    if fold.train.is_empty() || fold.test.is_empty() {
        return Err(Error::Empty(format!("{} has an empty side", fold.label)));
    }
    let inputs = ds.inputs();
    let labels = ds.labels();
    let train_x: Vec<&[f32]> = fold.train.iter().map(|&i| inputs[i]).collect();
    let train_y: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
    let mut net = Network::<f32>::new(ds.task.architecture(), seed);
    let cfg = TrainConfig {
        seed: splitmix(seed),
        ..train_cfg.clone()
    };
    let history = train(&mut net, &train_x, &train_y, &cfg)?;
    let test_x: Vec<&[f32]> = fold.test.iter().map(|&i| inputs[i]).collect();
    let test_y: Vec<usize> = fold.test.iter().map(|&i| labels[i]).collect();
    let predicted: Vec<usize> = net.predict(&test_x, cfg.batch_size)?.iter().map(|p| p.class).collect();
    let metrics = confusion_and_f1(&predicted, &test_y)?;
    log::info!("{}: accuracy {:.4} ({} train, {} test)", fold.label, metrics.accuracy, fold.train.len(), fold.test.len());
    Ok(FoldResult {
        label: fold.label.clone(),
        subject: fold.subject,
        repeat: fold.repeat,
        seed,
        train_trials: fold.train.len(),
        test_trials: fold.test.len(),
        metrics,
        best_epoch: history.best_epoch,
        epochs_run: history.train_loss.len(),
    })
}

/// Aggregates fold results in fold order.
pub fn aggregate(ds: &LabeledDataset, cfg: &EvalConfig, folds: Vec<FoldResult>) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::Empty("no folds to aggregate".into()));
    }
    let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let (mean, sd) = mean_sd(&acc);
    let mut pooled = Confusion::default();
    let mut mean_pct = [[0.0; 2]; 2];
    for f in &folds {
        pooled.add(&f.metrics.confusion);
        for (i, row) in f.metrics.confusion_percent.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                mean_pct[i][j] += v / folds.len() as f64;
            }
        }
    }
    let mean_macro_f1 = folds.iter().map(|f| f.metrics.macro_f1).sum::<f64>() / folds.len() as f64;
    Ok(EvalReport {
        task: ds.task,
        scheme: cfg.scheme,
        seed: cfg.seed,
        fingerprint: fingerprint(ds, cfg)?,
        folds,
        mean_accuracy: mean,
        sd_accuracy: sd,
        summary: format_mean_sd(mean, sd),
        mean_confusion_percent: mean_pct,
        pooled: metrics_from(pooled),
        mean_macro_f1,
        config: cfg.clone(),
    })
}

/// Runs every fold of the scheme sequentially and aggregates.
pub fn run_scheme(ds: &LabeledDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    ds.validate()?;
    let folds = make_folds(ds, cfg)?;
    let results = folds
        .iter()
        .enumerate()
        .map(|(i, f)| run_fold(ds, f, &cfg.train, fold_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    aggregate(ds, cfg, results)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Per-fold CSV: label, accuracy, confusion percentages, F1.
    pub fn folds_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["fold", "train", "test", "accuracy", "tn_pct", "fp_pct", "fn_pct", "tp_pct", "f1_class0", "f1_class1", "macro_f1"])
            .map_err(io)?;
        for f in &self.folds {
            let p = f.metrics.confusion_percent;
            w.write_record([
                f.label.clone(),
                f.train_trials.to_string(),
                f.test_trials.to_string(),
                format!("{:.4}", f.metrics.accuracy),
                format!("{:.2}", p[0][0]),
                format!("{:.2}", p[0][1]),
                format!("{:.2}", p[1][0]),
                format!("{:.2}", p[1][1]),
                format!("{:.4}", f.metrics.f1[0]),
                format!("{:.4}", f.metrics.f1[1]),
                format!("{:.4}", f.metrics.macro_f1),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Intent => "Movement Intent",
        Task::Rt => "RT",
    }
}

/// Plain-text summary with one row per report.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let rows: Vec<(String, String)> = reports
        .iter()
        .map(|r| (format!("{} ({})", task_name(r.task), r.scheme), r.summary.clone()))
        .collect();
    let w = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max("Task".len());
    let mut out = format!("{:<w$} | Mean Accuracy\n", "Task");
    out.push_str(&format!("{}-|-{}\n", "-".repeat(w), "-".repeat(16)));
    for (task, acc) in rows {
        out.push_str(&format!("{task:<w$} | {acc}\n"));
    }
    out
}

/// Confusion matrix block in percent, rows = true class.
pub fn confusion_table(report: &EvalReport) -> String {
    let names = match report.task {
        Task::Intent => ["No Intent", "Intent"],
        Task::Rt => ["Fast", "Slow"],
    };
    let m = report.mean_confusion_percent;
    let mut out = format!("{:<10} | {:>9} | {:>9}\n", "true\\pred", names[0], names[1]);
    for (i, row) in m.iter().enumerate() {
        out.push_str(&format!("{:<10} | {:>9.2} | {:>9.2}\n", names[i], row[0], row[1]));
    }
    out.push_str(&format!(
        "F1: {} {:.2}, {} {:.2}, macro {:.2}\n",
        names[0], report.pooled.f1[0], names[1], report.pooled.f1[1], report.pooled.macro_f1
    ));
    out
}
