//! Multi-dataset pretraining, fine-tuning with optional skeleton
//! distillation, evaluation and checkpointing.
//!
//! Every dataset gets its own adapter and classification head, keyed by the
//! dataset id; the decoder is shared. Each optimizer step averages the loss
//! over one mini-batch drawn from a single dataset. Within an epoch the
//! datasets are visited in the order given, each fully, in an order shuffled
//! from `(seed, epoch, dataset index)` so runs and resumed runs replay the
//! same batches.

mod checkpoint;
mod teacher;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{init_node_features, AdapterConfig, AdapterError, AdapterState, FeatureStats, PreparedTrial};
use crate::data::EegDataset;
use crate::decoder::{argmax, DecoderConfig, DecoderError, DecoderModel};
use crate::montage::ElectrodeLayout;
use crate::numerics::{AdamConfig, AdamState, Gradients, NumericsError, ParamStore, SeededRng, Tape};
use crate::skeleton::{SkeletonDataset, SkeletonError, TeacherConfig};

pub use checkpoint::{Checkpoint, CheckpointMeta, HeadMeta, CHECKPOINT_VERSION, MAGIC};
pub use teacher::{teacher_targets, train_teacher, TrainedTeacher};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no adapter in the checkpoint matches layout [{layout}]")]
    AdapterMissing { layout: String },
    #[error("dataset `{0}` has no trials")]
    EmptyDataset(String),
    #[error("class mismatch: {0}")]
    ClassMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    FinetunePlain,
    FinetuneKd,
}

/// How the skeleton teacher is fitted before distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTraining {
    pub model: TeacherConfig,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training stops once accuracy on the skeleton set reaches this.
    pub target_accuracy: f64,
    pub stop_at_target: bool,
    /// Steps between accuracy checks.
    pub eval_every: usize,
    /// Keep updating the teacher on its own labels during distillation.
    /// Its soft targets are detached either way.
    pub joint: bool,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            model: TeacherConfig::default(),
            max_steps: 200,
            batch_size: 8,
            learning_rate: 3e-3,
            target_accuracy: 0.95,
            stop_at_target: true,
            eval_every: 10,
            joint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub kd_temperature: f64,
    pub kd_weight: f64,
    /// Each training trial is circularly shifted in time by a uniform random
    /// offset of up to this many seconds either way.
    pub time_shift_s: f64,
    pub decoder: DecoderConfig,
    pub adapter: AdapterConfig,
    pub teacher: TeacherTraining,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            kd_temperature: 2.0,
            kd_weight: 1.0,
            time_shift_s: 0.24,
            decoder: DecoderConfig::default(),
            adapter: AdapterConfig::default(),
            teacher: TeacherTraining::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let err = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return err("learning_rate must be finite and non-negative");
        }
        if !(self.kd_temperature.is_finite() && self.kd_temperature > 0.0) {
            return err("kd_temperature must be positive");
        }
        if !(self.kd_weight.is_finite() && self.kd_weight >= 0.0) {
            return err("kd_weight must be finite and non-negative");
        }
        if !(self.time_shift_s.is_finite() && self.time_shift_s >= 0.0) {
            return err("time_shift_s must be finite and non-negative");
        }
        let t = &self.teacher;
        if t.batch_size == 0 || t.eval_every == 0 {
            return err("teacher batch_size and eval_every must be at least 1");
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return err("teacher learning_rate must be finite and non-negative");
        }
        t.model.validate()?;
        self.decoder.validate()?;
        self.adapter.validate()?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..AdamConfig::default() }
    }
}

// ---------------------------------------------------------------------------
// Losses

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `softmax(logits / tau)`.
pub fn soft_targets(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64, TrainingError> {
    if label >= logits.len() {
        return Err(TrainingError::ClassMismatch(format!("label {label} out of range for {} classes", logits.len())));
    }
    Ok(-log_softmax(logits)[label])
}

/// `tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))`.
pub fn kd_loss(student: &[f64], teacher: &[f64], tau: f64) -> Result<f64, TrainingError> {
    if student.len() != teacher.len() {
        return Err(TrainingError::ClassMismatch(format!(
            "student has {} classes, teacher has {}",
            student.len(),
            teacher.len()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(TrainingError::Config("temperature must be positive".into()));
    }
    let p = soft_targets(teacher, tau);
    let lp = log_softmax(&teacher.iter().map(|v| v / tau).collect::<Vec<_>>());
    let lq = log_softmax(&student.iter().map(|v| v / tau).collect::<Vec<_>>());
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).filter(|(p, _)| **p > 0.0).map(|(p, (a, b))| p * (a - b)).sum();
    Ok(tau * tau * kl)
}

/// Mean cross-entropy over a batch of `(logits, label)` pairs.
pub fn batch_cross_entropy(batch: &[(Vec<f64>, usize)]) -> Result<f64, TrainingError> {
    if batch.is_empty() {
        return Err(TrainingError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for (z, y) in batch {
        total += cross_entropy_loss(z, *y)?;
    }
    Ok(total / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Model

/// Shared decoder plus per-dataset adapters and heads in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub decoder: DecoderModel,
    pub adapters: BTreeMap<String, AdapterState>,
    pub heads: BTreeMap<String, HeadMeta>,
}

/// One dataset after feature extraction, ready for repeated epochs.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub id: String,
    pub trials: Vec<PreparedTrial>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Largest training-time shift in samples (0 disables shifting).
    pub max_shift: usize,
}

fn layout_names(layout: &ElectrodeLayout) -> String {
    layout.names.join(", ")
}

impl Model {
    pub fn new(config: &DecoderConfig, seed: u64) -> Result<Self, TrainingError> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed).split("init");
        let decoder = DecoderModel::new(&mut store, config.clone(), &mut rng)?;
        Ok(Self { store, decoder, adapters: BTreeMap::new(), heads: BTreeMap::new() })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainingError> {
        let store = ck.store.clone();
        let decoder = DecoderModel::bind(&store, ck.meta.decoder.clone())?;
        let mut adapters = BTreeMap::new();
        for meta in &ck.meta.adapters {
            adapters.insert(meta.name.clone(), AdapterState::bind(&store, meta.clone())?);
        }
        let heads: BTreeMap<_, _> = ck.meta.heads.iter().map(|h| (h.id.clone(), h.clone())).collect();
        for (id, head) in &heads {
            let classes = decoder.head(id)?.classes;
            if classes != head.class_names.len() {
                return Err(TrainingError::Checkpoint(format!("head `{id}` has {classes} outputs but {} class names", head.class_names.len())));
            }
        }
        Ok(Self { store, decoder, adapters, heads })
    }

    /// Adds an adapter (feature statistics fitted on `dataset`) and a head
    /// for `id`, or checks the existing ones are compatible.
    pub fn register(&mut self, id: &str, dataset: &EegDataset, adapter: &AdapterConfig, seed: u64) -> Result<(), TrainingError> {
        if dataset.is_empty() {
            return Err(TrainingError::EmptyDataset(id.to_string()));
        }
        if let Some(existing) = self.adapters.get(id) {
            existing.check_layout(&dataset.info.layout)?;
            let head = &self.heads[id];
            if head.class_names != dataset.info.class_names {
                return Err(TrainingError::ClassMismatch(format!(
                    "head `{id}` was trained on {:?}, dataset has {:?}",
                    head.class_names, dataset.info.class_names
                )));
            }
            return Ok(());
        }
        let mut features = Vec::with_capacity(dataset.len());
        let mut signals = Vec::with_capacity(dataset.len());
        for t in &dataset.trials {
            features.push(init_node_features(&t.signal, dataset.info.fs)?.values);
            signals.push(t.signal.clone());
        }
        let stats = FeatureStats::fit(&features, &signals)?;
        let rng = SeededRng::new(seed).split("init").split(&format!("dataset.{id}"));
        let cfg = &self.decoder.config;
        let (c_fix, t_fix) = (cfg.c_fix, cfg.t_fix);
        let state = AdapterState::new(
            &mut self.store,
            id,
            dataset.info.layout.clone(),
            dataset.info.fs,
            stats,
            adapter.clone(),
            c_fix,
            t_fix,
            &rng,
        )?;
        self.adapters.insert(id.to_string(), state);
        self.decoder.add_head(&mut self.store, id, dataset.classes(), &mut rng.split("head"))?;
        self.heads.insert(id.to_string(), HeadMeta { id: id.to_string(), class_names: dataset.info.class_names.clone() });
        Ok(())
    }

    pub fn prepare(&self, id: &str, dataset: &EegDataset) -> Result<PreparedSet, TrainingError> {
        let adapter = self.adapter(id)?;
        let trials = dataset
            .trials
            .iter()
            .map(|t| adapter.prepare(&t.signal, &dataset.info.layout))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PreparedSet {
            id: id.to_string(),
            trials,
            labels: dataset.labels(),
            class_names: dataset.info.class_names.clone(),
            max_shift: 0,
        })
    }

    pub fn adapter(&self, id: &str) -> Result<&AdapterState, TrainingError> {
        self.adapters.get(id).ok_or_else(|| TrainingError::Decoder(DecoderError::UnknownHead(id.to_string())))
    }

    /// First adapter whose electrode set matches `layout`.
    pub fn find_adapter(&self, layout: &ElectrodeLayout) -> Result<&str, TrainingError> {
        self.adapters
            .iter()
            .find(|(_, a)| a.check_layout(layout).is_ok())
            .map(|(id, _)| id.as_str())
            .ok_or_else(|| TrainingError::AdapterMissing { layout: layout_names(layout) })
    }

    pub fn logits(&self, id: &str, trial: &PreparedTrial) -> Result<Vec<f64>, TrainingError> {
        let mut tape = Tape::new(&self.store);
        let x = self.adapter(id)?.forward(&mut tape, trial)?;
        let z = self.decoder.forward(&mut tape, x, id)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn checkpoint(&self, training: &TrainingConfig, optimizer: Option<AdamState>, epochs_completed: usize, log_digest: String) -> Checkpoint {
        Checkpoint {
            store: self.store.clone(),
            optimizer,
            meta: CheckpointMeta {
                training: training.clone(),
                decoder: self.decoder.config.clone(),
                adapters: self.adapters.values().map(|a| a.meta.clone()).collect(),
                heads: self.heads.values().cloned().collect(),
                epochs_completed,
                log_digest,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dataset: String,
    pub loss: f64,
    pub acc: f64,
}

/// JSON lines, one record per `(epoch, dataset)`.
pub fn log_to_jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn chain_digest(previous: &str, records: &[EpochRecord]) -> String {
    let mut h = Sha256::new();
    h.update(previous.as_bytes());
    h.update(log_to_jsonl(records).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Set when a teacher was fitted for distillation.
    pub teacher_accuracy: Option<f64>,
}

/// Soft-target source for distillation.
enum Teacher {
    /// Logits precomputed per skeleton sequence; the teacher is frozen.
    Frozen { logits: Vec<Vec<f64>>, accuracy: f64 },
    Joint { trained: Box<TrainedTeacher>, adam: AdamState },
}

struct Distill<'a> {
    teacher: Teacher,
    skeleton: &'a SkeletonDataset,
    /// For each EEG class, the skeleton sequences of the same class.
    by_class: Vec<Vec<usize>>,
    /// Skeleton class index of each EEG class.
    class_map: Vec<usize>,
}

impl<'a> Distill<'a> {
    fn new(skeleton: &'a SkeletonDataset, eeg_classes: &[String], config: &TrainingConfig) -> Result<Self, TrainingError> {
        if eeg_classes.len() != skeleton.class_names.len() {
            return Err(TrainingError::ClassMismatch(format!(
                "EEG classes {eeg_classes:?} and skeleton classes {:?} differ",
                skeleton.class_names
            )));
        }
        let mut by_class = Vec::with_capacity(eeg_classes.len());
        let mut class_map = Vec::with_capacity(eeg_classes.len());
        for name in eeg_classes {
            let Some(k) = skeleton.class_names.iter().position(|c| c == name) else {
                return Err(TrainingError::ClassMismatch(format!(
                    "EEG class `{name}` has no skeleton counterpart in {:?}",
                    skeleton.class_names
                )));
            };
            let members: Vec<usize> = skeleton.sequences.iter().enumerate().filter(|(_, s)| s.label == k).map(|(i, _)| i).collect();
            if members.is_empty() {
                return Err(TrainingError::ClassMismatch(format!("skeleton set has no `{name}` sequences")));
            }
            by_class.push(members);
            class_map.push(k);
        }
        let trained = train_teacher(skeleton, &config.teacher, config.seed)?;
        let teacher = if config.teacher.joint {
            let adam = AdamState::new(&trained.store, AdamConfig { lr: config.teacher.learning_rate, ..AdamConfig::default() });
            Teacher::Joint { trained: Box::new(trained), adam }
        } else {
            Teacher::Frozen { logits: teacher_targets(&trained, skeleton)?, accuracy: trained.accuracy }
        };
        Ok(Self { teacher, skeleton, by_class, class_map })
    }

    fn accuracy(&self) -> f64 {
        match &self.teacher {
            Teacher::Joint { trained, .. } => trained.accuracy,
            Teacher::Frozen { accuracy, .. } => *accuracy,
        }
    }

    /// Teacher logits for skeleton sequence `s`; in joint mode also
    /// accumulates the teacher's own cross-entropy gradient.
    fn logits(&self, s: usize, scale: f64, grads: &mut Gradients) -> Result<Vec<f64>, TrainingError> {
        match &self.teacher {
            Teacher::Frozen { logits, .. } => Ok(logits[s].clone()),
            Teacher::Joint { trained, .. } => {
                let seq = &self.skeleton.sequences[s];
                let mut tape = Tape::new(&trained.store);
                let z = trained.model.forward(&mut tape, seq)?;
                let ce = tape.cross_entropy(z, seq.label)?;
                let loss = tape.scale(ce, scale)?;
                tape.backward(loss, grads)?;
                Ok(tape.value(z).data().to_vec())
            }
        }
    }

    fn step(&mut self, grads: &Gradients) -> Result<(), TrainingError> {
        if let Teacher::Joint { trained, adam } = &mut self.teacher {
            adam.update(&mut trained.store, grads)?;
        }
        Ok(())
    }
}

struct Trainer<'a> {
    config: &'a TrainingConfig,
    model: Model,
    adam: AdamState,
    epochs_completed: usize,
    log: Vec<EpochRecord>,
    step_losses: Vec<f64>,
}

impl Trainer<'_> {
    fn epoch(&mut self, sets: &[PreparedSet], mut distill: Option<&mut Distill<'_>>) -> Result<(), TrainingError> {
        let epoch = self.epochs_completed;
        let base = SeededRng::new(self.config.seed).split("epoch").split_index(epoch as u64);
        let tau = self.config.kd_temperature;
        for (di, set) in sets.iter().enumerate() {
            let rng = base.split_index(di as u64);
            let mut order: Vec<usize> = (0..set.trials.len()).collect();
            rng.split("shuffle").shuffle(&mut order);
            let mut pairing = rng.split("pairing");
            let mut jitter = rng.split("jitter");
            let adapter = self.model.adapter(&set.id)?.clone();
            let (mut total, mut correct) = (0.0, 0usize);
            for batch in order.chunks(self.config.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let mut grads = Gradients::new();
                let mut teacher_grads = Gradients::new();
                let mut batch_loss = 0.0;
                for &i in batch {
                    let label = set.labels[i];
                    let mut tape = Tape::new(&self.model.store);
                    let shifted;
                    let trial = if set.max_shift > 0 {
                        let k = jitter.below(2 * set.max_shift + 1) as isize - set.max_shift as isize;
                        shifted = roll(&set.trials[i], k);
                        &shifted
                    } else {
                        &set.trials[i]
                    };
                    let x = adapter.forward(&mut tape, trial)?;
                    let z = self.model.decoder.forward(&mut tape, x, &set.id)?;
                    if argmax(tape.value(z).data()) == label {
                        correct += 1;
                    }
                    let mut loss = tape.cross_entropy(z, label)?;
                    if let Some(d) = distill.as_deref_mut() {
                        let members = &d.by_class[label];
                        let s = members[pairing.below(members.len())];
                        let raw = d.logits(s, scale, &mut teacher_grads)?;
                        let ordered: Vec<f64> = d.class_map.iter().map(|&k| raw[k]).collect();
                        let kd = tape.kl_div(z, &ordered, tau)?;
                        let kd = tape.scale(kd, self.config.kd_weight)?;
                        loss = tape.add(loss, kd)?;
                    }
                    batch_loss += tape.value(loss).data()[0];
                    let scaled = tape.scale(loss, scale)?;
                    tape.backward(scaled, &mut grads)?;
                }
                self.adam.update(&mut self.model.store, &grads)?;
                if let Some(d) = distill.as_deref_mut() {
                    d.step(&teacher_grads)?;
                }
                total += batch_loss;
                self.step_losses.push(batch_loss * scale);
            }
            let n = set.trials.len() as f64;
            let record = EpochRecord { epoch: epoch + 1, dataset: set.id.clone(), loss: total / n, acc: correct as f64 / n };
            log::info!("epoch {} dataset {} loss {:.4} acc {:.3}", record.epoch, record.dataset, record.loss, record.acc);
            self.log.push(record);
        }
        self.epochs_completed += 1;
        Ok(())
    }

    fn run(mut self, sets: &[PreparedSet], mut distill: Option<Distill<'_>>, epochs: usize, prior_digest: &str) -> Result<TrainOutcome, TrainingError> {
        for _ in 0..epochs {
            self.epoch(sets, distill.as_mut())?;
        }
        let digest = chain_digest(prior_digest, &self.log);
        let teacher_accuracy = distill.as_ref().map(Distill::accuracy);
        let checkpoint = self.model.checkpoint(self.config, Some(self.adam), self.epochs_completed, digest);
        Ok(TrainOutcome { checkpoint, log: self.log, step_losses: self.step_losses, teacher_accuracy })
    }
}

/// Circularly shifts every channel of a prepared trial by `shift` samples.
fn roll(trial: &PreparedTrial, shift: isize) -> PreparedTrial {
    let mut out = trial.clone();
    let (c, t) = trial.signal.dims2().expect("rank-2 signal");
    let src = trial.signal.data();
    let mut data = vec![0.0; c * t];
    for ch in 0..c {
        for i in 0..t {
            let j = (i as isize - shift).rem_euclid(t as isize) as usize;
            data[ch * t + i] = src[ch * t + j];
        }
    }
    out.signal = crate::numerics::Tensor::new(vec![c, t], data).expect("same shape");
    out
}

fn training_sets(model: &Model, datasets: &[(&str, &EegDataset)], config: &TrainingConfig) -> Result<Vec<PreparedSet>, TrainingError> {
    datasets
        .iter()
        .map(|(id, ds)| {
            let mut set = model.prepare(id, ds)?;
            let t = set.trials.first().map_or(1, |p| p.signal.shape()[1]);
            set.max_shift = ((config.time_shift_s * ds.info.fs).round() as usize).min(t - 1);
            Ok(set)
        })
        .collect()
}

fn check_ids(datasets: &[(&str, &EegDataset)]) -> Result<(), TrainingError> {
    if datasets.is_empty() {
        return Err(TrainingError::Config("at least one dataset is required".into()));
    }
    for (i, (id, _)) in datasets.iter().enumerate() {
        if id.is_empty() || id.contains('.') {
            return Err(TrainingError::Config(format!("dataset id `{id}` must be non-empty and contain no `.`")));
        }
        if datasets[..i].iter().any(|(other, _)| other == id) {
            return Err(TrainingError::Config(format!("dataset id `{id}` appears twice")));
        }
    }
    Ok(())
}

/// Trains a fresh decoder with one adapter and head per dataset using
/// cross-entropy only. With a single dataset this is training from scratch.
pub fn pretrain(datasets: &[(&str, &EegDataset)], config: &TrainingConfig) -> Result<TrainOutcome, TrainingError> {
    config.validate()?;
    check_ids(datasets)?;
    let mut model = Model::new(&config.decoder, config.seed)?;
    for (id, ds) in datasets {
        model.register(id, ds, &config.adapter, config.seed)?;
    }
    let sets = training_sets(&model, datasets, config)?;
    let adam = AdamState::new(&model.store, config.adam());
    let trainer = Trainer { config, model, adam, epochs_completed: 0, log: Vec::new(), step_losses: Vec::new() };
    trainer.run(&sets, None, config.epochs, "")
}

/// Continues from a pretrained checkpoint on one dataset, with a fresh
/// optimizer. The dataset's adapter and head are created if absent. In
/// [`Mode::FinetuneKd`] a skeleton teacher is fitted first and its softened
/// predictions on class-matched skeleton sequences are added to the loss;
/// the returned checkpoint holds no teacher parameters.
pub fn finetune(
    pretrained: &Checkpoint,
    id: &str,
    dataset: &EegDataset,
    skeleton: Option<&SkeletonDataset>,
    config: &TrainingConfig,
) -> Result<TrainOutcome, TrainingError> {
    config.validate()?;
    check_ids(&[(id, dataset)])?;
    let mut model = Model::from_checkpoint(pretrained)?;
    model.register(id, dataset, &config.adapter, config.seed)?;
    let sets = training_sets(&model, &[(id, dataset)], config)?;
    let distill = distillation(config, skeleton, &dataset.info.class_names)?;
    let adam = AdamState::new(&model.store, config.adam());
    let trainer = Trainer { config, model, adam, epochs_completed: 0, log: Vec::new(), step_losses: Vec::new() };
    trainer.run(&sets, distill, config.epochs, "")
}

fn distillation<'a>(
    config: &TrainingConfig,
    skeleton: Option<&'a SkeletonDataset>,
    classes: &[String],
) -> Result<Option<Distill<'a>>, TrainingError> {
    match config.mode {
        Mode::FinetuneKd => {
            let skeleton = skeleton.ok_or_else(|| TrainingError::Config("distillation needs a skeleton dataset".into()))?;
            Ok(Some(Distill::new(skeleton, classes, config)?))
        }
        Mode::Pretrain | Mode::FinetunePlain => Ok(None),
    }
}

/// Runs `epochs` more epochs from a checkpoint with its stored optimizer
/// state and configuration. `datasets` must be the ones the checkpoint was
/// trained on, in the same order.
pub fn resume(
    checkpoint: &Checkpoint,
    datasets: &[(&str, &EegDataset)],
    skeleton: Option<&SkeletonDataset>,
    epochs: usize,
) -> Result<TrainOutcome, TrainingError> {
    let config = &checkpoint.meta.training;
    config.validate()?;
    check_ids(datasets)?;
    let model = Model::from_checkpoint(checkpoint)?;
    for (id, ds) in datasets {
        if !model.adapters.contains_key(*id) {
            return Err(TrainingError::Config(format!("checkpoint has no adapter for dataset `{id}`")));
        }
        model.adapter(id)?.check_layout(&ds.info.layout)?;
    }
    let sets = training_sets(&model, datasets, config)?;
    let classes = &datasets[0].1.info.class_names;
    let distill = distillation(config, skeleton, classes)?;
    let mut adam = checkpoint.optimizer.clone().unwrap_or_else(|| AdamState::new(&model.store, config.adam()));
    adam.sync(&model.store);
    let trainer = Trainer {
        config,
        model,
        adam,
        epochs_completed: checkpoint.meta.epochs_completed,
        log: Vec::new(),
        step_losses: Vec::new(),
    };
    trainer.run(&sets, distill, epochs, &checkpoint.meta.log_digest)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dataset: String,
    pub adapter: String,
    /// Percent of trials decoded correctly.
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub predictions: Vec<usize>,
}

/// Scores `dataset` with the adapter named `id`, or when `id` is `None`
/// with the first adapter whose layout matches.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &EegDataset, id: Option<&str>) -> Result<Evaluation, TrainingError> {
    let model = Model::from_checkpoint(checkpoint)?;
    evaluate_model(&model, dataset, id)
}

pub fn evaluate_model(model: &Model, dataset: &EegDataset, id: Option<&str>) -> Result<Evaluation, TrainingError> {
    let id = match id {
        Some(id) => {
            let adapter = model
                .adapters
                .get(id)
                .ok_or_else(|| TrainingError::AdapterMissing { layout: layout_names(&dataset.info.layout) })?;
            adapter.check_layout(&dataset.info.layout)?;
            id
        }
        None => model.find_adapter(&dataset.info.layout)?,
    };
    let head = &model.heads[id];
    if head.class_names != dataset.info.class_names {
        return Err(TrainingError::ClassMismatch(format!(
            "head `{id}` predicts {:?}, dataset has {:?}",
            head.class_names, dataset.info.class_names
        )));
    }
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset(dataset.info.name.clone()));
    }
    let set = model.prepare(id, dataset)?;
    let k = dataset.classes();
    let mut confusion = vec![vec![0; k]; k];
    let mut predictions = Vec::with_capacity(set.trials.len());
    for (trial, &label) in set.trials.iter().zip(&set.labels) {
        let p = argmax(&model.logits(id, trial)?);
        confusion[label][p] += 1;
        predictions.push(p);
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        dataset: dataset.info.name.clone(),
        adapter: id.to_string(),
        accuracy: correct as f64 / set.trials.len() as f64 * 100.0,
        confusion,
        class_names: dataset.info.class_names.clone(),
        predictions,
    })
}
