//! Binary checkpoint format.
//!
//! Layout: magic `NPCK`, `u32` format version, `u32` section count, then a
//! section table of `(u8 name length, name, u64 payload length)` entries
//! followed by the payloads in table order. Sections are `decoder`,
//! `adapters`, `heads`, `optimizer` and `config` (JSON). Every integer and
//! float is little-endian; parameter values are `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainingConfig, TrainingError};
use crate::adapter::AdapterMeta;
use crate::decoder::DecoderConfig;
use crate::numerics::{AdamConfig, AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"NPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&str; 5] = ["decoder", "adapters", "heads", "optimizer", "config"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub id: String,
    pub class_names: Vec<String>,
}

/// Everything in a checkpoint except raw tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub training: TrainingConfig,
    pub decoder: DecoderConfig,
    pub adapters: Vec<AdapterMeta>,
    pub heads: Vec<HeadMeta>,
    pub epochs_completed: usize,
    /// SHA-256 of the JSON-lines training log.
    pub log_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

fn section_of(name: &str) -> usize {
    if name.starts_with(crate::decoder::PREFIX) {
        0
    } else if name.starts_with("adapter.") {
        1
    } else {
        2
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TrainingError::Checkpoint(format!("unexpected end of data at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainingError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, TrainingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainingError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| TrainingError::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String, TrainingError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TrainingError::Checkpoint(e.to_string()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_params(store: &ParamStore, section: usize) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let params: Vec<_> = store.iter().filter(|(_, n, _)| section_of(n) == section).collect();
    w.u32(params.len() as u32);
    for (id, name, value) in params {
        w.u32(id.index() as u32);
        w.str(name);
        w.u32(value.rank() as u32);
        for &d in value.shape() {
            w.u64(d as u64);
        }
        w.f64s(value.data());
    }
    w.0
}

fn decode_params(buf: &[u8], out: &mut Vec<(usize, String, Tensor)>) -> Result<(), TrainingError> {
    let mut r = Reader { buf, pos: 0 };
    let n = r.u32()?;
    for _ in 0..n {
        let index = r.u32()? as usize;
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().product();
        let data = r.f64s(len)?;
        let t = Tensor::new(shape, data).map_err(|e| TrainingError::Checkpoint(format!("parameter `{name}`: {e}")))?;
        out.push((index, name, t));
    }
    if !r.done() {
        return Err(TrainingError::Checkpoint("trailing bytes in parameter section".into()));
    }
    Ok(())
}

fn encode_optimizer(opt: Option<&AdamState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let Some(s) = opt else {
        w.u8(0);
        return w.0;
    };
    w.u8(1);
    w.f64s(&[s.config.lr, s.config.beta1, s.config.beta2, s.config.eps]);
    w.u64(s.step);
    w.u32(s.m.len() as u32);
    for i in 0..s.m.len() {
        w.u64(s.param_steps[i]);
        w.u64(s.m[i].len() as u64);
        w.f64s(s.m[i].data());
        w.f64s(s.v[i].data());
    }
    w.0
}

fn decode_optimizer(buf: &[u8], store: &ParamStore) -> Result<Option<AdamState>, TrainingError> {
    let mut r = Reader { buf, pos: 0 };
    if r.u8()? == 0 {
        return Ok(None);
    }
    let c = r.f64s(4)?;
    let config = AdamConfig { lr: c[0], beta1: c[1], beta2: c[2], eps: c[3] };
    let step = r.u64()?;
    let n = r.u32()? as usize;
    if n > store.len() {
        return Err(TrainingError::Checkpoint(format!("optimizer tracks {n} parameters, store has {}", store.len())));
    }
    let mut state = AdamState { config, step, m: Vec::with_capacity(n), v: Vec::with_capacity(n), param_steps: Vec::with_capacity(n) };
    for (id, name, value) in store.iter().take(n) {
        let steps = r.u64()?;
        let len = r.u64()? as usize;
        if len != value.len() {
            return Err(TrainingError::Checkpoint(format!("optimizer moments for `{name}` have {len} values")));
        }
        let shape = store.get(id).shape().to_vec();
        let bad = |e| TrainingError::Checkpoint(format!("optimizer `{name}`: {e}"));
        state.m.push(Tensor::new(shape.clone(), r.f64s(len)?).map_err(bad)?);
        state.v.push(Tensor::new(shape, r.f64s(len)?).map_err(bad)?);
        state.param_steps.push(steps);
    }
    if !r.done() {
        return Err(TrainingError::Checkpoint("trailing bytes in optimizer section".into()));
    }
    Ok(Some(state))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainingError> {
        let config = serde_json::to_vec(&self.meta).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
        let payloads = [
            encode_params(&self.store, 0),
            encode_params(&self.store, 1),
            encode_params(&self.store, 2),
            encode_optimizer(self.optimizer.as_ref()),
            config,
        ];
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(SECTIONS.len() as u32);
        for (name, p) in SECTIONS.iter().zip(&payloads) {
            w.u8(name.len() as u8);
            w.0.extend_from_slice(name.as_bytes());
            w.u64(p.len() as u64);
        }
        for p in payloads {
            w.0.extend_from_slice(&p);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainingError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(TrainingError::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainingError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u8()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
            table.push((name, r.u64()? as usize));
        }
        let mut sections = std::collections::BTreeMap::new();
        for (name, len) in table {
            sections.insert(name, r.take(len)?);
        }
        if !r.done() {
            return Err(TrainingError::Checkpoint("trailing bytes after sections".into()));
        }
        let get = |name: &str| {
            sections.get(name).copied().ok_or_else(|| TrainingError::Checkpoint(format!("missing section `{name}`")))
        };
        let mut params = Vec::new();
        for s in &SECTIONS[..3] {
            decode_params(get(s)?, &mut params)?;
        }
        params.sort_by_key(|p| p.0);
        let mut store = ParamStore::new();
        for (i, (index, name, value)) in params.into_iter().enumerate() {
            if index != i {
                return Err(TrainingError::Checkpoint(format!("parameter indices are not contiguous at `{name}`")));
            }
            store.add(name, value).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
        }
        let optimizer = decode_optimizer(get("optimizer")?, &store)?;
        let meta = serde_json::from_slice(get("config")?).map_err(|e| TrainingError::Checkpoint(format!("config: {e}")))?;
        Ok(Self { store, optimizer, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        fs::write(path, self.to_bytes()?).map_err(|e| TrainingError::Io { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let bytes = fs::read(path).map_err(|e| TrainingError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_bytes(&bytes)
    }

    /// Scalar learnables (decoder, every adapter, every head).
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }
}
