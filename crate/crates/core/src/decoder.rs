//! Three-stage motor-imagery decoder over the unified `(C_fix, T_fix)` tensor.
//!
//! Stage one filters each channel with a bank of temporal FIR kernels and
//! multiplies the result by a learned sigmoid gate (artifact suppression).
//! Stage two mixes all channels and filter outputs into spatial components,
//! applies a rhythm convolution and pools into a short token sequence. Stage
//! three adds a transformer residual, applies a sigmoid aggregation gate and
//! flattens into the feature vector fed to a per-dataset linear head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::AdapterConfig;
use crate::numerics::{NumericsError, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("no classification head registered for dataset `{0}`")]
    UnknownHead(String),
    #[error("classification head `{0}` already exists")]
    DuplicateHead(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub c_fix: usize,
    pub t_fix: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub gate_kernel: usize,
    pub spatial_filters: usize,
    pub rhythm_kernel: usize,
    pub pool: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub ln_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            c_fix: 32,
            t_fix: 512,
            temporal_filters: 8,
            temporal_kernel: 32,
            gate_kernel: 16,
            spatial_filters: 16,
            rhythm_kernel: 16,
            pool: 16,
            d_model: 16,
            heads: 2,
            ff_width: 32,
            ln_eps: 1e-5,
        }
    }
}

impl DecoderConfig {
    pub fn tokens(&self) -> usize {
        if self.pool == 0 {
            0
        } else {
            self.t_fix / self.pool
        }
    }

    /// Length of the flattened feature vector `z`.
    pub fn feature_len(&self) -> usize {
        self.tokens() * self.d_model
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let err = |m: &str| Err(DecoderError::Config(m.to_string()));
        let sizes = [
            self.c_fix,
            self.t_fix,
            self.temporal_filters,
            self.temporal_kernel,
            self.gate_kernel,
            self.spatial_filters,
            self.rhythm_kernel,
            self.pool,
            self.d_model,
            self.heads,
            self.ff_width,
        ];
        if sizes.contains(&0) {
            return err("all sizes must be positive");
        }
        if self.d_model != self.spatial_filters {
            return err("d_model must equal spatial_filters (tokens are spatial components)");
        }
        if self.d_model % self.heads != 0 {
            return err("d_model must be divisible by heads");
        }
        if self.tokens() == 0 {
            return err("pooled length is 0 (t_fix < pool)");
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps must be positive");
        }
        Ok(())
    }

    /// Scalar parameters of the shared decoder (no heads, no adapter).
    pub fn decoder_parameter_count(&self) -> usize {
        let (c, f1, f2, d, ff) = (self.c_fix, self.temporal_filters, self.spatial_filters, self.d_model, self.ff_width);
        let linear = |i: usize, o: usize| if i == 0 || o == 0 { 0 } else { i * o + o };
        let ln = |n: usize| 2 * n;
        let temporal = f1 * self.temporal_kernel;
        let gate = if f1 == 0 { 0 } else { f1 * f1 * self.gate_kernel + f1 };
        let spatial = f2 * c * f1;
        let rhythm = if f2 == 0 { 0 } else { f2 * f2 * self.rhythm_kernel + f2 };
        let transformer = ln(d) + 4 * linear(d, d) + ln(d) + linear(d, ff) + linear(ff, d) + ln(d) + linear(d, d);
        let agg = linear(d, d);
        temporal + gate + spatial + rhythm + transformer + agg
    }

    pub fn head_parameter_count(&self, classes: usize) -> usize {
        if classes == 0 || self.feature_len() == 0 {
            0
        } else {
            self.feature_len() * classes + classes
        }
    }
}

/// Exact count of learnable scalars for the shared decoder, one adapter and
/// one head with `classes` outputs.
pub fn count_parameters(decoder: &DecoderConfig, adapter: &AdapterConfig, classes: usize) -> usize {
    decoder.decoder_parameter_count() + adapter.parameter_count(decoder.c_fix) + decoder.head_parameter_count(classes)
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Handles of the shared decoder parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub temporal: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub spatial: ParamId,
    pub rhythm_w: ParamId,
    pub rhythm_b: ParamId,
    block: BlockIds,
    pub agg_w: ParamId,
    pub agg_b: ParamId,
}

/// Linear classifier `logits = z·W + b` for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub classes: usize,
    pub w: ParamId,
    pub b: ParamId,
}

/// Shared decoder plus the per-dataset heads registered on it.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub params: DecoderParams,
    pub heads: BTreeMap<String, Head>,
}

pub const PREFIX: &str = "decoder.";

fn head_prefix(name: &str) -> String {
    format!("head.{}.", name)
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Trace {
    pub filtered: Var,
    pub gate: Var,
    pub propagated: Var,
    pub spatial: Var,
    pub rhythm: Var,
    pub enhanced: Var,
    pub agg_gate: Var,
    pub features: Var,
}

impl DecoderModel {
    /// Registers freshly initialized decoder parameters in `store`.
    pub fn new(store: &mut ParamStore, config: DecoderConfig, rng: &mut SeededRng) -> Result<Self, DecoderError> {
        config.validate()?;
        let (c, f1, f2, d, ff) = (config.c_fix, config.temporal_filters, config.spatial_filters, config.d_model, config.ff_width);
        let (kt, kg, kr) = (config.temporal_kernel, config.gate_kernel, config.rhythm_kernel);
        let mut rng = rng.split("decoder");
        let mut b = Builder { store, rng: &mut rng };
        let temporal = b.glorot("temporal.w", &[f1, 1, kt], kt, f1 * kt)?;
        let gate_w = b.glorot("gate.w", &[f1, f1, kg], f1 * kg, f1 * kg)?;
        let gate_b = b.zeros("gate.b", f1)?;
        let spatial = b.glorot("spatial.w", &[f2, c * f1], c * f1, f2)?;
        let rhythm_w = b.glorot("rhythm.w", &[f2, f2, kr], f2 * kr, f2 * kr)?;
        let rhythm_b = b.zeros("rhythm.b", f2)?;
        let (ln1_g, ln1_b) = b.norm("block.ln1", d)?;
        let (wq, bq) = b.linear("block.q", d, d)?;
        let (wk, bk) = b.linear("block.k", d, d)?;
        let (wv, bv) = b.linear("block.v", d, d)?;
        let (wo, bo) = b.linear("block.o", d, d)?;
        let (ln2_g, ln2_b) = b.norm("block.ln2", d)?;
        let (w1, b1) = b.linear("block.ff1", d, ff)?;
        let (w2, b2) = b.linear("block.ff2", ff, d)?;
        let (lnf_g, lnf_b) = b.norm("block.lnf", d)?;
        let (w_out, b_out) = b.linear("block.out", d, d)?;
        let (agg_w, agg_b) = b.linear("agg", d, d)?;
        let block = BlockIds {
            ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2, lnf_g, lnf_b, w_out, b_out,
        };
        let params = DecoderParams { temporal, gate_w, gate_b, spatial, rhythm_w, rhythm_b, block, agg_w, agg_b };
        Ok(Self { config, params, heads: BTreeMap::new() })
    }

    /// Re-binds a decoder and its heads to parameters already present in
    /// `store` (after a checkpoint load), checking names and shapes.
    pub fn bind(store: &ParamStore, config: DecoderConfig) -> Result<Self, DecoderError> {
        let mut probe = ParamStore::new();
        let mut model = Self::new(&mut probe, config, &mut SeededRng::new(0))?;
        let mut mapping = Vec::with_capacity(probe.len());
        for (_, name, value) in probe.iter() {
            let id = store.id(name).ok_or_else(|| DecoderError::Config(format!("parameter `{name}` missing")))?;
            if store.get(id).shape() != value.shape() {
                return Err(DecoderError::Config(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    name,
                    store.get(id).shape(),
                    value.shape()
                )));
            }
            mapping.push(id);
        }
        let remap = |id: &mut ParamId| *id = mapping[id.index()];
        let p = &mut model.params;
        for id in [&mut p.temporal, &mut p.gate_w, &mut p.gate_b, &mut p.spatial, &mut p.rhythm_w, &mut p.rhythm_b, &mut p.agg_w, &mut p.agg_b] {
            remap(id);
        }
        let b = &mut p.block;
        for id in [
            &mut b.ln1_g, &mut b.ln1_b, &mut b.wq, &mut b.bq, &mut b.wk, &mut b.bk, &mut b.wv, &mut b.bv, &mut b.wo,
            &mut b.bo, &mut b.ln2_g, &mut b.ln2_b, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2, &mut b.lnf_g,
            &mut b.lnf_b, &mut b.w_out, &mut b.b_out,
        ] {
            remap(id);
        }
        for (id, name, value) in store.iter() {
            let Some(head) = name.strip_prefix("head.").and_then(|r| r.strip_suffix(".w")) else { continue };
            let b = store.id(&format!("head.{head}.b")).ok_or_else(|| DecoderError::Config(format!("head `{head}` has no bias")))?;
            if value.rank() != 2 || value.shape()[0] != model.config.feature_len() {
                return Err(DecoderError::Config(format!("head `{head}` has shape {:?}", value.shape())));
            }
            model.heads.insert(head.to_string(), Head { classes: value.shape()[1], w: id, b });
        }
        Ok(model)
    }

    pub fn add_head(&mut self, store: &mut ParamStore, name: &str, classes: usize, rng: &mut SeededRng) -> Result<&Head, DecoderError> {
        if self.heads.contains_key(name) {
            return Err(DecoderError::DuplicateHead(name.to_string()));
        }
        if classes == 0 {
            return Err(DecoderError::Config("a head needs at least one class".into()));
        }
        let d = self.config.feature_len();
        let mut rng = rng.split(&format!("head.{name}"));
        let p = head_prefix(name);
        let w = store.add(format!("{p}w"), rng.glorot(&[d, classes], d, classes))?;
        let b = store.add(format!("{p}b"), Tensor::zeros(&[classes]))?;
        self.heads.insert(name.to_string(), Head { classes, w, b });
        Ok(&self.heads[name])
    }

    pub fn head(&self, name: &str) -> Result<&Head, DecoderError> {
        self.heads.get(name).ok_or_else(|| DecoderError::UnknownHead(name.to_string()))
    }

    /// Shared-decoder parameter ids (heads excluded).
    pub fn shared_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| n.starts_with(PREFIX)).map(|(id, _, _)| id).collect()
    }

    /// Temporal filtering and artifact gating: returns `(filtered, gate,
    /// propagated)`, each `[C, F1, T]`.
    pub fn filter_stage(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Var, Var), DecoderError> {
        let (c, t) = match *tape.shape(x) {
            [c, t] => (c, t),
            ref s => return Err(NumericsError::Shape { op: "filter_stage", detail: format!("expected [C, T], got {:?}", s) }.into()),
        };
        let p = &self.params;
        let x3 = tape.reshape(x, &[c, 1, t])?;
        let w = tape.param(p.temporal);
        let filtered = tape.conv1d_same(x3, w, None)?;
        let gw = tape.param(p.gate_w);
        let gb = tape.param(p.gate_b);
        let logits = tape.conv1d_same(filtered, gw, Some(gb))?;
        let gate = tape.sigmoid(logits)?;
        let propagated = tape.mul(gate, filtered)?;
        Ok((filtered, gate, propagated))
    }

    /// Spatial mixing, rhythm filtering and pooling: returns `(spatial
    /// [F2, T], tokens [T/P, F2])`.
    pub fn spatial_stage(&self, tape: &mut Tape<'_>, propagated: Var) -> Result<(Var, Var), DecoderError> {
        let (c, f1, t) = match *tape.shape(propagated) {
            [c, f, t] => (c, f, t),
            ref s => return Err(NumericsError::Shape { op: "spatial_stage", detail: format!("expected [C, F1, T], got {:?}", s) }.into()),
        };
        let p = &self.params;
        let flat = tape.reshape(propagated, &[c * f1, t])?;
        let ws = tape.param(p.spatial);
        let spatial = tape.matmul(ws, flat)?;
        let rw = tape.param(p.rhythm_w);
        let rb = tape.param(p.rhythm_b);
        let rhythm = tape.conv1d_same(spatial, rw, Some(rb))?;
        let pooled = tape.avg_pool(rhythm, self.config.pool)?;
        let tokens = tape.transpose(pooled)?;
        Ok((spatial, tokens))
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var, NumericsError> {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var, g: ParamId, b: ParamId) -> Result<Var, NumericsError> {
        let g = tape.param(g);
        let b = tape.param(b);
        tape.layer_norm(x, g, b, self.config.ln_eps)
    }

    /// Multi-head self-attention; also returns the per-head attention
    /// matrices.
    fn attention(&self, tape: &mut Tape<'_>, h: Var) -> Result<(Var, Vec<Var>), NumericsError> {
        let b = &self.params.block;
        let q = self.linear(tape, h, b.wq, b.bq)?;
        let k = self.linear(tape, h, b.wk, b.bk)?;
        let v = self.linear(tape, h, b.wv, b.bv)?;
        let dh = self.config.d_model / self.config.heads;
        let mut outs = Vec::with_capacity(self.config.heads);
        let mut probs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let (s, e) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax(scores, 1)?;
            probs.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        Ok((self.linear(tape, cat, b.wo, b.bo)?, probs))
    }

    /// Transformer residual and gated aggregation: returns `(enhanced,
    /// agg_gate, z, attention)` where `z` is `[1, tokens·d_model]`.
    pub fn aggregate_stage(&self, tape: &mut Tape<'_>, tokens: Var) -> Result<(Var, Var, Var, Vec<Var>), DecoderError> {
        let b = &self.params.block;
        let h = self.layer_norm(tape, tokens, b.ln1_g, b.ln1_b)?;
        let (att, probs) = self.attention(tape, h)?;
        let u = tape.add(tokens, att)?;
        let h2 = self.layer_norm(tape, u, b.ln2_g, b.ln2_b)?;
        let f = self.linear(tape, h2, b.w1, b.b1)?;
        let f = tape.relu(f)?;
        let f = self.linear(tape, f, b.w2, b.b2)?;
        let y = tape.add(u, f)?;
        let y = self.layer_norm(tape, y, b.lnf_g, b.lnf_b)?;
        let transformed = self.linear(tape, y, b.w_out, b.b_out)?;
        let enhanced = tape.add(tokens, transformed)?;
        let g = self.linear(tape, enhanced, self.params.agg_w, self.params.agg_b)?;
        let agg_gate = tape.sigmoid(g)?;
        let gated = tape.mul(agg_gate, enhanced)?;
        let summed = tape.add(gated, enhanced)?;
        let n = tape.value(summed).len();
        let z = tape.reshape(summed, &[1, n])?;
        Ok((enhanced, agg_gate, z, probs))
    }

    /// Full pass from a unified `[C_fix, T_fix]` tensor to logits `[1, classes]`.
    pub fn forward_traced(&self, tape: &mut Tape<'_>, x: Var, head: &str) -> Result<(Var, Trace), DecoderError> {
        let head = self.head(head)?.clone();
        let (filtered, gate, propagated) = self.filter_stage(tape, x)?;
        let (spatial, rhythm) = self.spatial_stage(tape, propagated)?;
        let (enhanced, agg_gate, features, _) = self.aggregate_stage(tape, rhythm)?;
        let logits = self.linear(tape, features, head.w, head.b)?;
        Ok((logits, Trace { filtered, gate, propagated, spatial, rhythm, enhanced, agg_gate, features }))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, head: &str) -> Result<Var, DecoderError> {
        Ok(self.forward_traced(tape, x, head)?.0)
    }

    /// Zeroes the transformer output projection so the residual branch
    /// contributes nothing.
    pub fn zero_transformer_output(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        let b = &self.params.block;
        for id in [b.w_out, b.b_out] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SeededRng,
}

impl Builder<'_> {
    fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId, NumericsError> {
        let t = self.rng.glorot(shape, fan_in, fan_out);
        self.store.add(format!("{PREFIX}{name}"), t)
    }

    fn zeros(&mut self, name: &str, n: usize) -> Result<ParamId, NumericsError> {
        self.store.add(format!("{PREFIX}{name}"), Tensor::zeros(&[n]))
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<(ParamId, ParamId), NumericsError> {
        Ok((self.glorot(&format!("{name}.w"), &[i, o], i, o)?, self.zeros(&format!("{name}.b"), o)?))
    }

    fn norm(&mut self, name: &str, n: usize) -> Result<(ParamId, ParamId), NumericsError> {
        let g = self.store.add(format!("{PREFIX}{name}.g"), Tensor::full(&[n], 1.0))?;
        Ok((g, self.zeros(&format!("{name}.b"), n)?))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_params;
    use crate::numerics::Gradients;

    fn toy() -> DecoderConfig {
        DecoderConfig {
            c_fix: 3,
            t_fix: 40,
            temporal_filters: 2,
            temporal_kernel: 5,
            gate_kernel: 4,
            spatial_filters: 4,
            rhythm_kernel: 3,
            pool: 4,
            d_model: 4,
            heads: 2,
            ff_width: 6,
            ln_eps: 1e-5,
        }
    }

    fn build(config: DecoderConfig, classes: usize) -> (ParamStore, DecoderModel) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(3);
        let mut model = DecoderModel::new(&mut store, config, &mut rng).unwrap();
        model.add_head(&mut store, "ds", classes, &mut rng).unwrap();
        // Biases start at zero; randomize them so oracles exercise them.
        let mut brng = SeededRng::new(4);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".b") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, brng.uniform_tensor(&shape, -0.5, 0.5)).unwrap();
            }
        }
        (store, model)
    }

    fn input(c: usize, t: usize, seed: u64) -> Tensor {
        SeededRng::new(seed).uniform_tensor(&[c, t], -1.0, 1.0)
    }

    /// Same-padded cross-correlation by definition.
    fn same_conv(x: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
        let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let t = x[0].len();
        let left = (k - 1) / 2;
        (0..cout)
            .map(|o| {
                (0..t)
                    .map(|tt| {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for i in 0..cin {
                            for kk in 0..k {
                                let s = tt as isize + kk as isize - left as isize;
                                if s >= 0 && (s as usize) < t {
                                    acc += w.at(&[o, i, kk]) * x[i][s as usize];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let (r, _) = t.dims2().unwrap();
        (0..r).map(|i| t.row(i).to_vec()).collect()
    }

    /// `[C, F1, T]` propagated signal by direct evaluation.
    fn filter_oracle(store: &ParamStore, m: &DecoderModel, x: &Tensor) -> Vec<Vec<Vec<f64>>> {
        let p = &m.params;
        rows(x)
            .iter()
            .map(|ch| {
                let filtered = same_conv(std::slice::from_ref(ch), store.get(p.temporal), None);
                let logits = same_conv(&filtered, store.get(p.gate_w), Some(store.get(p.gate_b)));
                filtered
                    .iter()
                    .zip(&logits)
                    .map(|(f, l)| f.iter().zip(l).map(|(f, l)| sigmoid(*l) * f).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn filter_stage_matches_composition() {
        let (store, m) = build(toy(), 2);
        let x = input(3, 40, 1);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let (_, gate, prop) = m.filter_stage(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(prop), &[3, 2, 40]);
        let want = filter_oracle(&store, &m, &x);
        for c in 0..3 {
            for f in 0..2 {
                for t in 0..40 {
                    assert!((tape.value(prop).at(&[c, f, t]) - want[c][f][t]).abs() < 1e-10);
                }
            }
        }
        assert!(tape.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    fn saturate_gate(store: &mut ParamStore, m: &DecoderModel, bias: f64) {
        let p = &m.params;
        let shape = store.get(p.gate_w).shape().to_vec();
        store.set(p.gate_w, Tensor::zeros(&shape)).unwrap();
        let n = store.get(p.gate_b).len();
        store.set(p.gate_b, Tensor::full(&[n], bias)).unwrap();
    }

    #[test]
    fn open_gate_passes_filtered_signal() {
        let (mut store, m) = build(toy(), 2);
        saturate_gate(&mut store, &m, 20.0);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(input(3, 40, 2));
        let (filtered, _, prop) = m.filter_stage(&mut tape, xv).unwrap();
        for (f, p) in tape.value(filtered).data().iter().zip(tape.value(prop).data()) {
            assert!((f - p).abs() <= 1e-8 * f.abs());
        }
    }

    #[test]
    fn closed_gate_suppresses_everything() {
        let (mut store, m) = build(toy(), 2);
        saturate_gate(&mut store, &m, -20.0);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(input(3, 40, 2).map(|v| v * 100.0));
        let (filtered, gate, prop) = m.filter_stage(&mut tape, xv).unwrap();
        let peak = tape.value(filtered).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(tape.value(prop).data().iter().all(|p| p.abs() <= 1e-8 * peak));
        assert!(tape.value(gate).data().iter().all(|&g| g > 0.0));
    }

    #[test]
    fn spatial_stage_matches_composition() {
        let (store, m) = build(toy(), 2);
        let x = input(3, 40, 5);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let (_, _, prop) = m.filter_stage(&mut tape, xv).unwrap();
        let (_, tokens) = m.spatial_stage(&mut tape, prop).unwrap();
        let p = &m.params;
        let flat: Vec<Vec<f64>> = filter_oracle(&store, &m, &x).into_iter().flatten().collect();
        let ws = store.get(p.spatial);
        let s: Vec<Vec<f64>> = (0..4)
            .map(|o| (0..40).map(|t| (0..6).map(|j| ws.at(&[o, j]) * flat[j][t]).sum()).collect())
            .collect();
        let r = same_conv(&s, store.get(p.rhythm_w), Some(store.get(p.rhythm_b)));
        assert_eq!(tape.shape(tokens), &[10, 4]);
        for l in 0..10 {
            for o in 0..4 {
                let want = r[o][4 * l..4 * l + 4].iter().sum::<f64>() / 4.0;
                assert!((tape.value(tokens).at(&[l, o]) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_spatial_config_reproduces_input() {
        let config = DecoderConfig { spatial_filters: 6, d_model: 6, heads: 2, rhythm_kernel: 1, pool: 1, ..toy() };
        let (mut store, m) = build(config, 2);
        let p = &m.params;
        let eye = |n: usize| Tensor::new(vec![n, n], (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect());
        store.set(p.spatial, eye(6).unwrap()).unwrap();
        store.set(p.rhythm_w, eye(6).unwrap().reshape(&[6, 6, 1]).unwrap()).unwrap();
        store.set(p.rhythm_b, Tensor::zeros(&[6])).unwrap();
        let prop = SeededRng::new(6).uniform_tensor(&[3, 2, 40], -1.0, 1.0);
        let mut tape = Tape::new(&store);
        let pv = tape.constant(prop.clone());
        let (spatial, tokens) = m.spatial_stage(&mut tape, pv).unwrap();
        assert_eq!(tape.value(spatial).data(), prop.data());
        let back = tape.value(tokens).transpose2().unwrap();
        assert_eq!(back.data(), prop.data());
    }

    #[test]
    fn constant_input_gives_constant_tokens() {
        let config = DecoderConfig { rhythm_kernel: 1, ..toy() };
        let (store, m) = build(config, 2);
        let mut tape = Tape::new(&store);
        let pv = tape.constant(Tensor::full(&[3, 2, 40], 0.7));
        let (_, tokens) = m.spatial_stage(&mut tape, pv).unwrap();
        let tok = tape.value(tokens);
        for l in 1..10 {
            for o in 0..4 {
                assert!((tok.at(&[l, o]) - tok.at(&[0, o])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_truncates_remainder() {
        let config = DecoderConfig { t_fix: 42, ..toy() };
        let (store, m) = build(config, 2);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(input(3, 42, 7));
        let (logits, trace) = m.forward_traced(&mut tape, xv, "ds").unwrap();
        assert_eq!(tape.shape(trace.rhythm), &[10, 4]);
        assert_eq!(tape.shape(logits), &[1, 2]);
    }

    #[test]
    fn zeroed_transformer_output_is_exact_identity() {
        let (mut store, m) = build(toy(), 2);
        m.zero_transformer_output(&mut store).unwrap();
        let mut tape = Tape::new(&store);
        let tv = tape.constant(SeededRng::new(8).uniform_tensor(&[10, 4], -3.0, 3.0));
        let (enhanced, _, _, _) = m.aggregate_stage(&mut tape, tv).unwrap();
        assert_eq!(tape.value(enhanced), tape.value(tv));
    }

    #[test]
    fn closed_aggregation_gate_leaves_enhanced_features() {
        let (mut store, m) = build(toy(), 2);
        let p = &m.params;
        store.set(p.agg_w, Tensor::zeros(&[4, 4])).unwrap();
        store.set(p.agg_b, Tensor::full(&[4], -20.0)).unwrap();
        let mut tape = Tape::new(&store);
        let tv = tape.constant(SeededRng::new(9).uniform_tensor(&[10, 4], -3.0, 3.0));
        let (enhanced, gate, z, probs) = m.aggregate_stage(&mut tape, tv).unwrap();
        assert_eq!(tape.shape(z), &[1, 40]);
        for (a, b) in tape.value(z).data().iter().zip(tape.value(enhanced).data()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300));
        }
        assert!(tape.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
        assert_eq!(probs.len(), 2);
        for a in probs {
            let a = tape.value(a);
            for r in 0..10 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, m) = build(toy(), 3);
        let x = input(3, 40, 10);
        let run = || {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(x.clone());
            let l = m.forward(&mut tape, xv, "ds").unwrap();
            tape.value(l).clone()
        };
        assert_eq!(run(), run());
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        assert_eq!(m.forward(&mut tape, xv, "other").unwrap_err(), DecoderError::UnknownHead("other".into()));
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let (store, m) = build(toy(), 3);
        let mut grads = Gradients::new();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(input(3, 40, 11));
        let logits = m.forward(&mut tape, xv, "ds").unwrap();
        let loss = tape.cross_entropy(logits, 1).unwrap();
        tape.backward(loss, &mut grads).unwrap();
        for (id, name, _) in store.iter() {
            assert!(grads.norm_sq(id) > 0.0, "{name} has no gradient");
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let config = DecoderConfig {
            c_fix: 4,
            t_fix: 64,
            temporal_filters: 2,
            temporal_kernel: 5,
            gate_kernel: 3,
            spatial_filters: 4,
            rhythm_kernel: 3,
            pool: 16,
            d_model: 4,
            heads: 2,
            ff_width: 4,
            ln_eps: 1e-5,
        };
        let (mut store, m) = build(config, 2);
        let x = input(4, 64, 12);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = check_params(&mut store, &ids, 1e-5, 12, |tape| {
            let xv = tape.constant(x.clone());
            let logits = m.forward(tape, xv, "ds").map_err(|e| match e {
                DecoderError::Numerics(n) => n,
                other => panic!("{other}"),
            })?;
            tape.cross_entropy(logits, 1)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn parameter_count_is_exact() {
        let config = DecoderConfig::default();
        let adapter = AdapterConfig::default();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let mut m = DecoderModel::new(&mut store, config.clone(), &mut rng).unwrap();
        assert_eq!(store.scalar_count(), config.decoder_parameter_count());
        let before = store.scalar_count();
        m.add_head(&mut store, "a", 4, &mut rng).unwrap();
        let d = config.feature_len();
        assert_eq!(store.scalar_count() - before, 4 * d + 4);
        assert_eq!(store.scalar_count(), count_parameters(&config, &adapter, 4) - adapter.parameter_count(32));
        let total = count_parameters(&config, &adapter, 4);
        assert_eq!(total, 15_116);
        assert!(total <= 120_000);
    }

    #[test]
    fn zero_sized_config_counts_nothing() {
        let zero = DecoderConfig {
            c_fix: 0,
            t_fix: 0,
            temporal_filters: 0,
            temporal_kernel: 0,
            gate_kernel: 0,
            spatial_filters: 0,
            rhythm_kernel: 0,
            pool: 0,
            d_model: 0,
            heads: 0,
            ff_width: 0,
            ln_eps: 1e-5,
        };
        let adapter = AdapterConfig { d_node: 0, heads: 0, ..AdapterConfig::default() };
        assert_eq!(count_parameters(&zero, &adapter, 4), 0);
        assert!(zero.validate().is_err());
    }

    #[test]
    fn heads_are_unique_and_rebind() {
        let (mut store, mut m) = build(toy(), 2);
        let mut rng = SeededRng::new(1);
        assert_eq!(m.add_head(&mut store, "ds", 2, &mut rng).unwrap_err(), DecoderError::DuplicateHead("ds".into()));
        m.add_head(&mut store, "other", 5, &mut rng).unwrap();
        let bound = DecoderModel::bind(&store, toy()).unwrap();
        assert_eq!(bound, m);
        assert!(DecoderModel::bind(&store, DecoderConfig { ff_width: 7, ..toy() }).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        assert!(DecoderConfig { heads: 3, ..DecoderConfig::default() }.validate().is_err());
        assert!(DecoderConfig { d_model: 8, ..DecoderConfig::default() }.validate().is_err());
        assert!(DecoderConfig { pool: 600, ..DecoderConfig::default() }.validate().is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, 5.0]), 1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn gates_stay_inside_unit_interval(seed in 0u64..1000, scale in 0.01f64..50.0) {
            let (store, m) = build(toy(), 2);
            let mut tape = Tape::new(&store);
            let xv = tape.constant(input(3, 40, seed).map(|v| v * scale));
            let (_, trace) = m.forward_traced(&mut tape, xv, "ds").unwrap();
            for g in [trace.gate, trace.agg_gate] {
                proptest::prop_assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}
