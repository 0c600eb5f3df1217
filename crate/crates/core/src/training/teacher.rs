//! Fitting the skeleton teacher.

use super::{TeacherTraining, TrainingError};
use crate::decoder::argmax;
use crate::numerics::{AdamConfig, AdamState, Gradients, ParamStore, SeededRng, Tape};
use crate::skeleton::{SkeletonDataset, TeacherModel};

/// A teacher in its own parameter store, separate from the EEG model.
#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    pub store: ParamStore,
    pub model: TeacherModel,
    pub steps: usize,
    /// Accuracy on the skeleton set at the last check.
    pub accuracy: f64,
    pub step_losses: Vec<f64>,
}

fn accuracy(store: &ParamStore, model: &TeacherModel, data: &SkeletonDataset) -> Result<f64, TrainingError> {
    let logits = logits_all(store, model, data)?;
    let correct = logits.iter().zip(&data.sequences).filter(|(z, s)| argmax(z) == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}

fn logits_all(store: &ParamStore, model: &TeacherModel, data: &SkeletonDataset) -> Result<Vec<Vec<f64>>, TrainingError> {
    data.sequences
        .iter()
        .map(|seq| {
            let mut tape = Tape::new(store);
            let z = model.forward(&mut tape, seq)?;
            Ok(tape.value(z).data().to_vec())
        })
        .collect()
}

/// Mini-batch Adam on cross-entropy for up to `max_steps` steps, checking
/// accuracy every `eval_every` steps and stopping at `target_accuracy` when
/// `stop_at_target` is set.
pub fn train_teacher(data: &SkeletonDataset, settings: &TeacherTraining, seed: u64) -> Result<TrainedTeacher, TrainingError> {
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset(data.name.clone()));
    }
    let rng = SeededRng::new(seed).split("teacher");
    let mut store = ParamStore::new();
    let model = TeacherModel::new(&mut store, settings.model.clone(), data.class_names.len(), &rng.split("init"))?;
    let mut adam = AdamState::new(&store, AdamConfig { lr: settings.learning_rate, ..AdamConfig::default() });
    let mut sampler = rng.split("batches");
    let mut step_losses = Vec::with_capacity(settings.max_steps);
    let mut acc = accuracy(&store, &model, data)?;
    let mut steps = 0;
    while steps < settings.max_steps && !(settings.stop_at_target && acc >= settings.target_accuracy) {
        let mut grads = Gradients::new();
        let scale = 1.0 / settings.batch_size as f64;
        let mut total = 0.0;
        for _ in 0..settings.batch_size {
            let seq = &data.sequences[sampler.below(data.len())];
            let mut tape = Tape::new(&store);
            let z = model.forward(&mut tape, seq)?;
            let ce = tape.cross_entropy(z, seq.label)?;
            total += tape.value(ce).data()[0];
            let loss = tape.scale(ce, scale)?;
            tape.backward(loss, &mut grads)?;
        }
        adam.update(&mut store, &grads)?;
        step_losses.push(total * scale);
        steps += 1;
        if steps % settings.eval_every == 0 || steps == settings.max_steps {
            acc = accuracy(&store, &model, data)?;
            log::debug!("teacher step {steps} loss {:.4} acc {acc:.3}", total * scale);
        }
    }
    log::info!("teacher trained for {steps} steps, accuracy {acc:.3}");
    Ok(TrainedTeacher { store, model, steps, accuracy: acc, step_losses })
}

/// Raw teacher logits for every sequence of `data`.
pub fn teacher_targets(teacher: &TrainedTeacher, data: &SkeletonDataset) -> Result<Vec<Vec<f64>>, TrainingError> {
    logits_all(&teacher.store, &teacher.model, data)
}
