//! `manifest.json` + `trials.bin` dataset directories.
//!
//! The manifest carries the metadata and a trial index (label, offset and
//! shape, offsets counted in values); the binary holds every trial's values
//! back to back as little-endian `f32`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DatasetInfo, EegDataset, EegTrial};
use crate::montage::ElectrodeLayout;
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BINARY: &str = "trials.bin";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("unsupported dataset format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("binary shorter than manifest promises: expected {expected_bytes} bytes, found {actual_bytes}")]
    Truncated { expected_bytes: u64, actual_bytes: u64 },
    #[error("binary length disagrees with manifest: expected {expected_bytes} bytes, found {actual_bytes}")]
    LengthMismatch { expected_bytes: u64, actual_bytes: u64 },
    #[error("expected a {expected} dataset, found kind `{found}`")]
    Kind { expected: String, found: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cannot split dataset: {0}")]
    Split(String),
    #[error("invalid synthesis config: {0}")]
    Synth(String),
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub label: usize,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `eeg` or `skeleton`.
    pub kind: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<ElectrodeLayout>,
    /// Sampling rate (EEG) or frame rate (skeleton), Hz.
    pub rate: f64,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub trials: Vec<TrialRecord>,
}

/// Writes labelled tensors; `manifest.trials` is filled in here.
pub fn write_records(dir: &Path, mut manifest: Manifest, records: &[(usize, &Tensor)]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut bytes = Vec::with_capacity(records.iter().map(|(_, t)| t.len() * 4).sum());
    manifest.trials.clear();
    let mut offset = 0u64;
    for (label, t) in records {
        manifest.trials.push(TrialRecord { label: *label, offset, shape: t.shape().to_vec() });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.len() as u64;
    }
    manifest.format_version = FORMAT_VERSION;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text).map_err(|e| io_err(&mpath, e))?;
    let bpath = dir.join(BINARY);
    fs::write(&bpath, bytes).map_err(|e| io_err(&bpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DataError::Manifest("missing format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(DataError::VersionMismatch { found, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| DataError::Manifest(e.to_string()))?;
    for (i, t) in manifest.trials.iter().enumerate() {
        if t.label >= manifest.class_names.len() {
            return Err(DataError::Manifest(format!("trial {i} has label {} but only {} classes", t.label, manifest.class_names.len())));
        }
        if t.shape.is_empty() || t.shape.contains(&0) {
            return Err(DataError::Manifest(format!("trial {i} has invalid shape {:?}", t.shape)));
        }
    }
    Ok(manifest)
}

/// Reads a directory written by [`write_records`].
pub fn read_records(dir: &Path) -> Result<(Manifest, Vec<(usize, Tensor)>), DataError> {
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(BINARY);
    let bytes = fs::read(&bpath).map_err(|e| io_err(&bpath, e))?;
    let expected_values = manifest
        .trials
        .iter()
        .map(|t| t.offset + t.shape.iter().product::<usize>() as u64)
        .max()
        .unwrap_or(0);
    let expected_bytes = expected_values * 4;
    let actual_bytes = bytes.len() as u64;
    if actual_bytes < expected_bytes {
        return Err(DataError::Truncated { expected_bytes, actual_bytes });
    }
    if actual_bytes != expected_bytes {
        return Err(DataError::LengthMismatch { expected_bytes, actual_bytes });
    }
    let mut out = Vec::with_capacity(manifest.trials.len());
    for (i, t) in manifest.trials.iter().enumerate() {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize * 4;
        let data: Vec<f64> = bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| DataError::Manifest(format!("trial {i}: {e}")))?;
        out.push((t.label, tensor));
    }
    Ok((manifest, out))
}

pub fn write_dataset(dataset: &EegDataset, dir: &Path) -> Result<(), DataError> {
    let info = &dataset.info;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "eeg".into(),
        name: info.name.clone(),
        layout: Some(info.layout.clone()),
        rate: info.fs,
        class_names: info.class_names.clone(),
        metadata: info.metadata.clone(),
        trials: Vec::new(),
    };
    let records: Vec<(usize, &Tensor)> = dataset.trials.iter().map(|t| (t.label, &t.signal)).collect();
    write_records(dir, manifest, &records)
}

pub fn read_dataset(dir: &Path) -> Result<EegDataset, DataError> {
    let (m, records) = read_records(dir)?;
    if m.kind != "eeg" {
        return Err(DataError::Kind { expected: "eeg".into(), found: m.kind });
    }
    let layout = m.layout.ok_or_else(|| DataError::Manifest("EEG manifest has no layout".into()))?;
    let layout = layout.to_document().resolve().map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut trials = Vec::with_capacity(records.len());
    for (i, (label, signal)) in records.into_iter().enumerate() {
        if signal.rank() != 2 || signal.shape()[0] != layout.len() {
            return Err(DataError::Manifest(format!(
                "trial {i} has shape {:?}, layout has {} electrodes",
                signal.shape(),
                layout.len()
            )));
        }
        trials.push(EegTrial { signal, label });
    }
    let info = DatasetInfo { name: m.name, layout, fs: m.rate, class_names: m.class_names, metadata: m.metadata };
    Ok(EegDataset { info, trials })
}

/// Long-format CSV: `trial,channel,t,value` with `t` the sample index.
pub fn export_csv(dataset: &EegDataset) -> String {
    let mut out = String::from("trial,channel,t,value\n");
    for (i, trial) in dataset.trials.iter().enumerate() {
        for (c, name) in dataset.info.layout.names.iter().enumerate() {
            for (t, v) in trial.signal.row(c).iter().enumerate() {
                let _ = writeln!(out, "{i},{name},{t},{v}");
            }
        }
    }
    out
}
