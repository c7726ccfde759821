use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use motordecode::dataset::{
    build_datasets, load_dataset, load_recordings, save_dataset, save_recordings, Discretization, PreprocessConfig,
    SpeedThreshold, Task,
};
use motordecode::dsp::{FilterMode, ZScoreScope};
use motordecode::eval::{confusion_table, run_scheme, summary_table, EvalConfig, EvalReport, Scheme};
use motordecode::nn::{save_checkpoint, train, Network, TrainConfig};
use motordecode::synth::{generate_cohort, write_ground_truth, CohortConfig};

const LOG_ENV: &str = "MOTORDECODE_LOG";
const PROVENANCE: &str = "provenance.json";

#[derive(Parser, Debug, Serialize)]
#[command(name = "motordecode", version, about = "EEG movement intent and reaction-time decoding pipeline")]
#[command(after_help = "Log verbosity is read from MOTORDECODE_LOG (error, warn, info, debug, trace; default info).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Synthesise a cohort of raw recordings with ground truth.
    Generate(GenerateArgs),
    /// Filter, clean, segment and label raw recordings into trial sets.
    Preprocess(PreprocessArgs),
    /// Train one network on a whole trial set and save a checkpoint.
    Train(TrainArgs),
    /// Run a validation scheme and write the report.
    Eval(EvalArgs),
    /// Summarise one or more reports as a table or CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the output directory if it already exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value_t = 13)]
    subjects: usize,
    /// Trials per mode (active and passive) per subject.
    #[arg(long, default_value_t = 210)]
    trials: usize,
    /// Signature amplitude over central background RMS.
    #[arg(long, default_value_t = 3.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mean blinks per second.
    #[arg(long, default_value_t = 0.25)]
    blink_rate: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum TaskArg {
    Intent,
    Rt,
    Both,
}

impl TaskArg {
    fn tasks(self) -> Vec<Task> {
        match self {
            TaskArg::Intent => vec![Task::Intent],
            TaskArg::Rt => vec![Task::Rt],
            TaskArg::Both => vec![Task::Intent, Task::Rt],
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SingleTask {
    Intent,
    Rt,
}

impl From<SingleTask> for Task {
    fn from(t: SingleTask) -> Task {
        match t {
            SingleTask::Intent => Task::Intent,
            SingleTask::Rt => Task::Rt,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FilterModeArg {
    ZeroPhase,
    Causal,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ZScoreArg {
    Trial,
    Recording,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SplitArg {
    Median,
    Tercile,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SchemeArg {
    Loo,
    SubjectSpecific,
    AllData,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Loo => Scheme::Loo,
            SchemeArg::SubjectSpecific => Scheme::SubjectSpecific,
            SchemeArg::AllData => Scheme::AllData,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PreprocessArgs {
    /// Raw recording directory written by `generate`.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, value_enum, default_value_t = TaskArg::Both)]
    task: TaskArg,
    #[arg(long, default_value_t = 1.0)]
    low_hz: f64,
    #[arg(long, default_value_t = 40.0)]
    high_hz: f64,
    #[arg(long, value_enum, default_value_t = FilterModeArg::ZeroPhase)]
    filter_mode: FilterModeArg,
    /// Skip ocular-artifact removal.
    #[arg(long)]
    no_ica: bool,
    #[arg(long, default_value_t = 20)]
    ica_components: usize,
    /// Absolute correlation with frontal channels above which a component is removed.
    #[arg(long, default_value_t = 0.7)]
    ica_threshold: f64,
    #[arg(long, default_value_t = 0)]
    ica_seed: u64,
    /// Window start relative to movement onset (s).
    #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
    window_start: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    window_end: f64,
    #[arg(long, value_enum, default_value_t = ZScoreArg::Trial)]
    zscore: ZScoreArg,
    /// Absolute movement-onset speed (m/s).
    #[arg(long, default_value_t = 0.05, conflicts_with = "rt_relative")]
    rt_threshold: f64,
    /// Movement-onset speed as a fraction of the trial's peak speed.
    #[arg(long)]
    rt_relative: Option<f64>,
    #[arg(long, default_value_t = 0.15)]
    rt_min: f64,
    #[arg(long, default_value_t = 0.8)]
    rt_max: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Median)]
    rt_split: SplitArg,
    /// Subjects with fewer reaction-time trials are left out of the rt set.
    #[arg(long, default_value_t = 20)]
    rt_min_trials: usize,
}

impl PreprocessArgs {
    fn config(&self) -> PreprocessConfig {
        let mut cfg = PreprocessConfig::default();
        cfg.filter.low_hz = self.low_hz;
        cfg.filter.high_hz = self.high_hz;
        cfg.filter.mode = match self.filter_mode {
            FilterModeArg::ZeroPhase => FilterMode::ZeroPhase,
            FilterModeArg::Causal => FilterMode::Causal,
        };
        if self.no_ica {
            cfg.ica = None;
        } else if let Some(ica) = cfg.ica.as_mut() {
            ica.n_components = self.ica_components;
            ica.ocular_threshold = self.ica_threshold;
            ica.seed = self.ica_seed;
        }
        cfg.shaping.window.start_s = self.window_start;
        cfg.shaping.window.end_s = self.window_end;
        cfg.shaping.zscore = match self.zscore {
            ZScoreArg::Trial => ZScoreScope::Trial,
            ZScoreArg::Recording => ZScoreScope::Recording,
        };
        cfg.rt.threshold = match self.rt_relative {
            Some(f) => SpeedThreshold::Relative(f),
            None => SpeedThreshold::Absolute(self.rt_threshold),
        };
        cfg.rt.bounds = (self.rt_min, self.rt_max);
        cfg.rt.discretization = match self.rt_split {
            SplitArg::Median => Discretization::Median,
            SplitArg::Tercile => Discretization::Tercile,
        };
        cfg.rt.min_trials = self.rt_min_trials;
        cfg
    }
}

#[derive(Args, Debug, Serialize)]
struct HyperArgs {
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Share of training trials held out for early stopping (0 disables).
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Trial set directory, or the directory written by `preprocess`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: SingleTask,
    #[command(flatten)]
    output: OutputArgs,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: SingleTask,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[command(flatten)]
    output: OutputArgs,
    /// Partitions (all-data) or splits per subject (subject-specific).
    #[arg(long)]
    repeats: Option<usize>,
    /// Draw 4:1 splits without class stratification.
    #[arg(long)]
    no_stratify: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Report files or directories written by `eval`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised when an output exists and `--force` was not given.
#[derive(Debug)]
struct OutputExists(PathBuf);

impl std::fmt::Display for OutputExists {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} already exists; pass --force to replace it", self.0.display())
    }
}

impl std::error::Error for OutputExists {}

fn prepare_output(o: &OutputArgs) -> Result<()> {
    if o.out.exists() {
        if !o.force {
            return Err(OutputExists(o.out.clone()).into());
        }
        if o.out.is_dir() {
            fs::remove_dir_all(&o.out)
        } else {
            fs::remove_file(&o.out)
        }
        .with_context(|| format!("removing {}", o.out.display()))?;
    }
    fs::create_dir_all(&o.out).with_context(|| format!("creating {}", o.out.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// The parsed command line plus the resolved module configuration.
#[derive(Serialize)]
struct Provenance<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    invocation: &'a Command,
    resolved: C,
}

fn write_provenance<C: Serialize>(dir: &Path, cmd: &Command, resolved: C) -> Result<()> {
    write_json(
        &dir.join(PROVENANCE),
        &Provenance {
            tool: "motordecode",
            version: env!("CARGO_PKG_VERSION"),
            invocation: cmd,
            resolved,
        },
    )
}

/// Accepts either a trial set directory or a `preprocess` output holding one per task.
fn resolve_trials(data: &Path, task: Task) -> PathBuf {
    let nested = data.join(task.to_string());
    if nested.join("manifest.json").exists() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn load_task(data: &Path, task: Task) -> Result<motordecode::dataset::LabeledDataset> {
    let path = resolve_trials(data, task);
    let ds = load_dataset(&path).with_context(|| format!("loading trials from {}", path.display()))?;
    if ds.task != task {
        bail!(motordecode::Error::InvalidArgument(format!(
            "{} holds {} trials, not {task}",
            path.display(),
            ds.task
        )));
    }
    Ok(ds)
}

fn cmd_generate(a: &GenerateArgs, cmd: &Command) -> Result<()> {
    let cfg = CohortConfig {
        subjects: a.subjects,
        trials_per_mode: a.trials,
        snr: a.snr,
        seed: a.seed,
        blink_rate: a.blink_rate,
        ..CohortConfig::default()
    };
    cfg.validate()?;
    prepare_output(&a.output)?;
    let mut truth = Vec::new();
    let recordings = generate_cohort(&cfg)?.map(|r| {
        r.map(|(rec, t)| {
            log::info!("generated subject {}", rec.subject);
            truth.extend(t);
            rec
        })
    });
    let manifest = save_recordings(&a.output.out, recordings, serde_json::to_value(&cfg)?)?;
    write_ground_truth(a.output.out.join("ground_truth.csv"), &truth)?;
    write_provenance(&a.output.out, cmd, &cfg)?;
    println!("wrote {} recordings to {}", manifest.recordings.len(), a.output.out.display());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs, cmd: &Command) -> Result<()> {
    let cfg = a.config();
    let (_, recordings) = load_recordings(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    prepare_output(&a.output)?;
    let (sets, report) = build_datasets(recordings, &cfg, &a.task.tasks())?;
    for ds in &sets {
        save_dataset(ds, a.output.out.join(ds.task.to_string()))?;
        let [c0, c1] = ds.class_counts();
        println!("{}: {} trials from {} subjects (classes {c0}/{c1})", ds.task, ds.trials.len(), ds.subjects.len());
    }
    write_json(&a.output.out.join("build_report.json"), &report)?;
    write_provenance(&a.output.out, cmd, &cfg)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, cmd: &Command) -> Result<()> {
    let task = Task::from(a.task);
    let ds = load_task(&a.data, task)?;
    let cfg = a.hyper.config();
    cfg.validate()?;
    prepare_output(&a.output)?;
    let mut net = Network::<f32>::new(task.architecture(), cfg.seed);
    let history = train(&mut net, &ds.inputs(), &ds.labels(), &cfg)?;
    save_checkpoint(&net, a.output.out.join("checkpoint.bin"))?;
    write_json(&a.output.out.join("history.json"), &history)?;
    write_provenance(&a.output.out, cmd, &cfg)?;
    println!(
        "trained {} network on {} trials, kept epoch {}, wrote {}",
        task.architecture(),
        history.train_trials,
        history.best_epoch,
        a.output.out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, cmd: &Command) -> Result<()> {
    let task = Task::from(a.task);
    let scheme = Scheme::from(a.scheme);
    scheme.check_task(task)?;
    let ds = load_task(&a.data, task)?;
    let cfg = EvalConfig {
        scheme,
        train: a.hyper.config(),
        repeats: a.repeats,
        seed: a.hyper.seed,
        stratify: !a.no_stratify,
    };
    cfg.train.validate()?;
    prepare_output(&a.output)?;
    let report = run_scheme(&ds, &cfg)?;
    report.write_json(a.output.out.join("report.json"))?;
    fs::write(a.output.out.join("folds.csv"), report.folds_csv()?)?;
    let text = format!("{}\n{}", summary_table(std::slice::from_ref(&report)), confusion_table(&report));
    fs::write(a.output.out.join("summary.txt"), &text)?;
    write_provenance(&a.output.out, cmd, &cfg)?;
    print!("{text}");
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
            EvalReport::read_json(&path).with_context(|| format!("reading {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let text = match a.format {
        ReportFormat::Text => {
            let mut t = summary_table(&reports);
            for r in &reports {
                t.push_str(&format!("\n{} {}\n", r.task, r.scheme));
                t.push_str(&confusion_table(r));
            }
            t
        }
        ReportFormat::Csv => {
            let mut t = String::from("task,scheme,folds,mean_accuracy,sd_accuracy,macro_f1,fingerprint\n");
            for r in &reports {
                t.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{}\n",
                    r.task,
                    r.scheme,
                    r.folds.len(),
                    r.mean_accuracy,
                    r.sd_accuracy,
                    r.pooled.macro_f1,
                    r.fingerprint
                ));
            }
            t
        }
    };
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    match cmd {
        Command::Generate(a) => cmd_generate(a, cmd),
        Command::Preprocess(a) => cmd_preprocess(a, cmd),
        Command::Train(a) => cmd_train(a, cmd),
        Command::Eval(a) => cmd_eval(a, cmd),
        Command::Report(a) => cmd_report(a),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<motordecode::Error>() {
        return e.kind();
    }
    if e.downcast_ref::<OutputExists>().is_some() {
        return "output_exists";
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "other"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
