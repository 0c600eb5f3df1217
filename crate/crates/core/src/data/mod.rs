//! EEG datasets: the synthetic forward model, the on-disk format and
//! stratified splitting.

mod io;
mod synth;

pub use io::{
    export_csv, read_dataset, read_manifest, read_records, write_dataset, write_records, DataError, Manifest,
    TrialRecord, FORMAT_VERSION,
};
pub use synth::{
    motor_adjacent, snr, synth_dataset, synth_stages, synth_trial, BurstConfig, ClassSpec, SourceSpec, SynthConfig,
    SynthStages,
};

use serde::{Deserialize, Serialize};

use crate::montage::ElectrodeLayout;
use crate::numerics::{SeededRng, Tensor};

/// One labelled `[C, T]` recording in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct EegTrial {
    pub signal: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub layout: ElectrodeLayout,
    pub fs: f64,
    pub class_names: Vec<String>,
    /// Free-form provenance (for synthetic data, the generating config).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EegDataset {
    pub info: DatasetInfo,
    pub trials: Vec<EegTrial>,
}

impl EegDataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.info.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// A dataset with the same metadata holding the given trials.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { info: self.info.clone(), trials: indices.iter().map(|&i| self.trials[i].clone()).collect() }
    }

    /// Reorders electrodes (and signal rows): new row `i` is old row
    /// `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Self {
        let mut info = self.info.clone();
        info.layout = self.info.layout.permuted(order);
        let trials = self
            .trials
            .iter()
            .map(|t| {
                let (_, len) = t.signal.dims2().expect("trial is a matrix");
                let data = order.iter().flat_map(|&r| t.signal.row(r).iter().copied()).collect();
                EegTrial { signal: Tensor::new(vec![order.len(), len], data).expect("finite"), label: t.label }
            })
            .collect();
        Self { info, trials }
    }
}

/// Stratified, seeded split into `(train, test)`. Each class contributes
/// `round(ratio · n)` training trials, clamped so both sides get at least
/// one; trial order within each side follows the original order.
pub fn split(dataset: &EegDataset, ratio: f64, seed: u64) -> Result<(EegDataset, EegDataset), DataError> {
    let (train, test) = split_indices(&dataset.labels(), dataset.classes(), ratio, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Index form of [`split`] for any labelled collection.
pub fn split_indices(labels: &[usize], classes: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let rng = SeededRng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(DataError::Split(format!("class {class} has {} trial(s); need at least 2", idx.len())));
        }
        rng.split_index(class as u64).shuffle(&mut idx);
        let n_train = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
