//! Job configs and the work behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::info;
use neuropath::data::{read_dataset, synth_dataset, write_dataset, EegDataset, SynthConfig};
use neuropath::decoder::{count_parameters, PREFIX as DECODER_PREFIX};
use neuropath::dsp::{erd_report_averaged, BandDefinition, ErdErsReport};
use neuropath::skeleton::{generate_dataset, read_skeleton_dataset, write_skeleton_dataset, SkeletonConfig};
use neuropath::training::{self, log_to_jsonl, Checkpoint, Mode, TrainOutcome, TrainingConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.npck";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Flags shared by every subcommand after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub kd: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthJob {
    pub dataset: SynthConfig,
    pub trials_per_class: usize,
}

impl Default for SynthJob {
    fn default() -> Self {
        Self { dataset: SynthConfig::default(), trials_per_class: 50 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainJob {
    pub datasets: Vec<DatasetRef>,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneJob {
    pub checkpoint: PathBuf,
    pub dataset: DatasetRef,
    pub kd: bool,
    /// Stored skeleton dataset for the teacher; generated from
    /// `skeleton_config` when absent.
    pub skeleton: Option<PathBuf>,
    pub skeleton_config: SkeletonConfig,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalJob {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Adapter name; the first adapter matching the layout when absent.
    pub adapter: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErdJob {
    pub dataset: PathBuf,
    pub band: BandDefinition,
    /// Windows in seconds from trial start. Synthetic datasets supply
    /// defaults from their generating config.
    pub task_window_s: Option<[f64; 2]>,
    pub baseline_window_s: Option<[f64; 2]>,
    pub post_window_s: Option<[f64; 2]>,
}

impl Default for ErdJob {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            band: BandDefinition::mu_beta(),
            task_window_s: None,
            baseline_window_s: None,
            post_window_s: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectJob {
    pub checkpoint: PathBuf,
}

// ---------------------------------------------------------------------------
// Config plumbing

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

/// Reads a job config, or the `config` member of a previously written
/// `run.json`. Returns the job and the directory relative paths resolve
/// against.
fn load<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<(T, PathBuf), CliError> {
    let Some(path) = path else {
        return Ok((T::default(), absolute(Path::new("."))?));
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    let mut value: Value = serde_json::from_str(&text).map_err(bad)?;
    if value.get("command").is_some() && value.get("config").is_some() {
        let record: RunRecord = serde_json::from_value(value).map_err(bad)?;
        if record.command != command {
            return Err(CliError::Config(format!(
                "{} records a `{}` run, not `{command}`",
                path.display(),
                record.command
            )));
        }
        value = record.config;
    }
    let job = serde_json::from_value(value).map_err(bad)?;
    let base = absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((job, base))
}

fn resolve(base: &Path, path: &mut PathBuf, field: &str) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Config(format!("`{field}` is required")));
    }
    if path.is_relative() {
        *path = base.join(&*path);
    }
    Ok(())
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_run<T: Serialize>(out: &Path, command: &str, seed: Option<u64>, job: &T) -> Result<(), CliError> {
    let record = RunRecord {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: serde_json::to_value(job).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Config(e.to_string()))?;
    write(&out.join(RUN_FILE), text + "\n")
}

fn apply_training(training: &mut TrainingConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        training.seed = seed;
    }
    if let Some(epochs) = o.epochs {
        training.epochs = epochs;
    }
}

fn save_outcome(out: &Path, outcome: &TrainOutcome) -> Result<(), CliError> {
    outcome.checkpoint.save(&out.join(MODEL_FILE))?;
    write(&out.join(LOG_FILE), log_to_jsonl(&outcome.log))?;
    if let Some(last) = outcome.log.last() {
        println!("epoch {}: loss {:.4}, accuracy {:.3}", last.epoch, last.loss, last.acc);
    }
    println!("checkpoint: {}", out.join(MODEL_FILE).display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

pub fn synth(o: &Overrides) -> Result<(), CliError> {
    let (mut job, _) = load::<SynthJob>(o.config.as_deref(), "synth")?;
    if let Some(seed) = o.seed {
        job.dataset.seed = seed;
    }
    if job.trials_per_class == 0 {
        return Err(CliError::Config("`trials_per_class` must be positive".into()));
    }
    let ds = synth_dataset(&job.dataset, job.trials_per_class)?;
    prepare_out(&o.out)?;
    write_dataset(&ds, &o.out)?;
    write_run(&o.out, "synth", Some(job.dataset.seed), &job)?;
    println!("wrote {} trials ({} channels) to {}", ds.len(), ds.info.layout.len(), o.out.display());
    Ok(())
}

pub fn skeleton(o: &Overrides) -> Result<(), CliError> {
    let (mut job, _) = load::<SkeletonConfig>(o.config.as_deref(), "skeleton")?;
    if let Some(seed) = o.seed {
        job.seed = seed;
    }
    let ds = generate_dataset(&job)?;
    prepare_out(&o.out)?;
    write_skeleton_dataset(&ds, &o.out)?;
    write_run(&o.out, "skeleton", Some(job.seed), &job)?;
    println!("wrote {} skeleton sequences to {}", ds.len(), o.out.display());
    Ok(())
}

fn read_named(sets: &[DatasetRef]) -> Result<Vec<(String, EegDataset)>, CliError> {
    sets.iter().map(|r| Ok((r.id.clone(), read_dataset(&r.path)?))).collect()
}

pub fn pretrain(o: &Overrides) -> Result<(), CliError> {
    let (mut job, base) = load::<PretrainJob>(o.config.as_deref(), "pretrain")?;
    if job.datasets.is_empty() {
        return Err(CliError::Config("`datasets` must list at least one dataset".into()));
    }
    for r in &mut job.datasets {
        resolve(&base, &mut r.path, "datasets[].path")?;
    }
    apply_training(&mut job.training, o);
    job.training.mode = Mode::Pretrain;
    let sets = read_named(&job.datasets)?;
    let named: Vec<(&str, &EegDataset)> = sets.iter().map(|(id, ds)| (id.as_str(), ds)).collect();
    prepare_out(&o.out)?;
    let outcome = training::pretrain(&named, &job.training)?;
    save_outcome(&o.out, &outcome)?;
    write_run(&o.out, "pretrain", Some(job.training.seed), &job)
}

pub fn finetune(o: &Overrides) -> Result<(), CliError> {
    let (mut job, base) = load::<FinetuneJob>(o.config.as_deref(), "finetune")?;
    resolve(&base, &mut job.checkpoint, "checkpoint")?;
    resolve(&base, &mut job.dataset.path, "dataset.path")?;
    if let Some(p) = &mut job.skeleton {
        resolve(&base, p, "skeleton")?;
    }
    if let Some(kd) = o.kd {
        job.kd = kd;
    }
    apply_training(&mut job.training, o);
    job.training.mode = if job.kd { Mode::FinetuneKd } else { Mode::FinetunePlain };
    let pretrained = Checkpoint::load(&job.checkpoint)?;
    let ds = read_dataset(&job.dataset.path)?;
    let skeletons = match (&job.skeleton, job.kd) {
        (_, false) => None,
        (Some(p), true) => Some(read_skeleton_dataset(p)?),
        (None, true) => Some(generate_dataset(&job.skeleton_config)?),
    };
    prepare_out(&o.out)?;
    let outcome = training::finetune(&pretrained, &job.dataset.id, &ds, skeletons.as_ref(), &job.training)?;
    if let Some(acc) = outcome.teacher_accuracy {
        println!("teacher accuracy {acc:.3}");
    }
    save_outcome(&o.out, &outcome)?;
    write_run(&o.out, "finetune", Some(job.training.seed), &job)
}

pub fn eval(o: &Overrides) -> Result<(), CliError> {
    let (mut job, base) = load::<EvalJob>(o.config.as_deref(), "eval")?;
    resolve(&base, &mut job.checkpoint, "checkpoint")?;
    resolve(&base, &mut job.dataset, "dataset")?;
    let checkpoint = Checkpoint::load(&job.checkpoint)?;
    let ds = read_dataset(&job.dataset)?;
    let result = training::evaluate(&checkpoint, &ds, job.adapter.as_deref())?;
    prepare_out(&o.out)?;
    let text = serde_json::to_string_pretty(&result).map_err(|e| CliError::Config(e.to_string()))?;
    write(&o.out.join("evaluation.json"), text + "\n")?;
    write_run(&o.out, "eval", None, &job)?;
    println!("adapter {}: accuracy {:.2}% on {} trials", result.adapter, result.accuracy, ds.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClassErd {
    class: String,
    trials: usize,
    task: ErdErsReport,
    rebound: Option<ErdErsReport>,
}

fn samples(w: [f64; 2], fs: f64, len: usize) -> Range<usize> {
    let at = |s: f64| ((s * fs).round().max(0.0) as usize).min(len);
    at(w[0])..at(w[1])
}

pub fn erd(o: &Overrides) -> Result<(), CliError> {
    let (mut job, base) = load::<ErdJob>(o.config.as_deref(), "erd")?;
    resolve(&base, &mut job.dataset, "dataset")?;
    let ds = read_dataset(&job.dataset)?;
    let origin: Option<SynthConfig> = serde_json::from_value(ds.info.metadata.clone()).ok();
    let fs = ds.info.fs;
    if let Some(cfg) = &origin {
        let secs = |r: Range<usize>| [r.start as f64 / fs, r.end as f64 / fs];
        job.task_window_s.get_or_insert(secs(cfg.task_range()));
        job.baseline_window_s.get_or_insert(secs(cfg.baseline_range()));
        if cfg.rebound_gain > 0.0 {
            job.post_window_s.get_or_insert(secs(cfg.post_range()));
        }
    }
    let (Some(task), Some(baseline)) = (job.task_window_s, job.baseline_window_s) else {
        return Err(CliError::Config("`task_window_s` and `baseline_window_s` are required for this dataset".into()));
    };
    let len = ds.trials.first().map_or(0, |t| t.signal.shape()[1]);
    let (task, baseline) = (samples(task, fs, len), samples(baseline, fs, len));
    let post = job.post_window_s.map(|w| samples(w, fs, len));
    let names = &ds.info.layout.names;
    let mut classes = Vec::new();
    let mut csv = String::from("class,window,channel,index_percent,band_low,band_high\n");
    for (k, class) in ds.info.class_names.iter().enumerate() {
        let signals: Vec<&[f64]> = ds.trials.iter().filter(|t| t.label == k).map(|t| t.signal.data()).collect();
        if signals.is_empty() {
            continue;
        }
        let task_report = erd_report_averaged(&signals, names, fs, task.clone(), baseline.clone(), &job.band)?;
        let rebound = match &post {
            Some(p) => Some(erd_report_averaged(&signals, names, fs, p.clone(), baseline.clone(), &job.band)?),
            None => None,
        };
        for (window, report) in [("task", Some(&task_report)), ("rebound", rebound.as_ref())] {
            let Some(report) = report else { continue };
            for (c, v) in report.channels.iter().zip(&report.index_percent) {
                let _ = writeln!(csv, "{class},{window},{c},{v},{},{}", job.band.low, job.band.high);
            }
        }
        let mean = task_report.index_percent.iter().sum::<f64>() / names.len().max(1) as f64;
        info!("{class}: mean task index {mean:.1}% over {} trials", signals.len());
        classes.push(ClassErd { class: class.clone(), trials: signals.len(), task: task_report, rebound });
    }
    prepare_out(&o.out)?;
    write(&o.out.join("erd.csv"), csv)?;
    let text = serde_json::to_string_pretty(&classes).map_err(|e| CliError::Config(e.to_string()))?;
    write(&o.out.join("erd.json"), text + "\n")?;
    write_run(&o.out, "erd", None, &job)?;
    println!("ERD/ERS report for {} classes written to {}", classes.len(), o.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary {
    parameters: usize,
    decoder: usize,
    adapters: Vec<(String, String, usize)>,
    heads: Vec<(String, usize, usize)>,
    /// Decoder plus the first adapter and head.
    single_dataset_model: Option<usize>,
    epochs_completed: usize,
    optimizer_step: Option<u64>,
}

pub fn inspect(o: &Overrides) -> Result<(), CliError> {
    let (mut job, base) = load::<InspectJob>(o.config.as_deref(), "inspect")?;
    resolve(&base, &mut job.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&job.checkpoint)?;
    let meta = &ck.meta;
    let summary = Summary {
        parameters: ck.parameter_count(),
        decoder: ck.store.scalar_count_with_prefix(DECODER_PREFIX),
        adapters: meta
            .adapters
            .iter()
            .map(|a| {
                let count = ck.store.scalar_count_with_prefix(&format!("adapter.{}.", a.name));
                (a.name.clone(), a.layout.names.join(" "), count)
            })
            .collect(),
        heads: meta
            .heads
            .iter()
            .map(|h| (h.id.clone(), h.class_names.len(), ck.store.scalar_count_with_prefix(&format!("head.{}.", h.id))))
            .collect(),
        single_dataset_model: meta.adapters.first().zip(meta.heads.first()).map(|(a, h)| {
            count_parameters(&meta.decoder, &a.config, h.class_names.len())
        }),
        epochs_completed: meta.epochs_completed,
        optimizer_step: ck.optimizer.as_ref().map(|s| s.step),
    };
    println!("parameters: {}", summary.parameters);
    println!("decoder: {}", summary.decoder);
    for (name, layout, n) in &summary.adapters {
        println!("adapter {name} [{layout}]: {n}");
    }
    for (id, k, n) in &summary.heads {
        println!("head {id} ({k} classes): {n}");
    }
    if let Some(n) = summary.single_dataset_model {
        println!("decoder + one adapter + one head: {n}");
    }
    println!("epochs completed: {}", summary.epochs_completed);
    prepare_out(&o.out)?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    write(&o.out.join("inspect.json"), text + "\n")?;
    write_run(&o.out, "inspect", None, &job)
}
