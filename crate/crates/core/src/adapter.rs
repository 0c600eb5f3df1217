//! Layout-agnostic graph adapter.
//!
//! Each electrode becomes a graph node carrying five spectral statistics.
//! A single graph-attention layer over the Gaussian electrode adjacency turns
//! those into embeddings, a learned map turns each embedding into one row of
//! channel-mixing weights, and the mixed signal is resampled to `T_fix`.
//! Nothing depends on channel order, so relabeling electrodes together with
//! their rows leaves the unified tensor unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, BandDefinition, DspError};
use crate::montage::{self, AdjacencyMatrix, ElectrodeLayout, MontageError};
use crate::numerics::{NumericsError, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

pub const FEATURES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("layout mismatch: adapter `{adapter}` expects [{expected}], trial has [{actual}]")]
    LayoutMismatch { adapter: String, expected: String, actual: String },
    #[error("trial has {rows} rows but layout has {channels} electrodes")]
    ChannelCount { rows: usize, channels: usize },
    #[error("invalid adapter configuration: {0}")]
    Config(String),
    #[error("cannot fit feature statistics on an empty dataset")]
    NoData,
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Montage(#[from] MontageError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_node: usize,
    pub heads: usize,
    pub edge_threshold: f64,
    pub leaky_slope: f64,
    pub sigma_g: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { d_node: 16, heads: 2, edge_threshold: 0.1, leaky_slope: 0.2, sigma_g: montage::DEFAULT_SIGMA }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.d_node == 0 || self.heads == 0 {
            return Err(AdapterError::Config("d_node and heads must be positive".into()));
        }
        if !(self.sigma_g > 0.0) || !self.edge_threshold.is_finite() || !self.leaky_slope.is_finite() {
            return Err(AdapterError::Config("sigma_g must be positive; threshold and slope finite".into()));
        }
        Ok(())
    }

    /// Learnable scalars of one adapter projecting onto `c_fix` channels.
    pub fn parameter_count(&self, c_fix: usize) -> usize {
        let gat = self.heads * (FEATURES * self.d_node + 2 * self.d_node);
        let mix = if c_fix == 0 || self.d_node == 0 { 0 } else { self.d_node * c_fix + c_fix };
        gat + mix
    }
}

/// Raw (unstandardized) per-electrode statistics `[C, 5]`: δ–θ, α, β and γ
/// band power, then variance.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    pub values: Tensor,
    /// Bands whose column is zero because they lie above Nyquist or are
    /// narrower than the spectral resolution.
    pub dropped_bands: Vec<String>,
}

pub fn init_node_features(signal: &Tensor, fs: f64) -> Result<NodeFeatures, AdapterError> {
    let (c, t) = signal.dims2()?;
    if t < 8 {
        return Err(DspError::TooShort(t).into());
    }
    let bands = BandDefinition::rhythms();
    // A band is dropped when it lies above Nyquist or no frequency bin of a
    // `t`-sample spectrum falls inside it.
    let resolution = fs / t as f64;
    let resolvable = |b: &BandDefinition| (0..=t / 2).any(|k| (b.low..=b.high).contains(&(k as f64 * resolution)));
    let keep: Vec<bool> = bands.iter().map(|b| b.fits(fs) && resolvable(b)).collect();
    let dropped_bands: Vec<String> =
        bands.iter().zip(&keep).filter(|(_, &k)| !k).map(|(b, _)| b.name.clone()).collect();
    if !dropped_bands.is_empty() {
        log::warn!("bands {:?} cannot be resolved at {fs} Hz over {t} samples; their features are zero", dropped_bands);
    }
    let mut out = Vec::with_capacity(c * FEATURES);
    for r in 0..c {
        let row = signal.row(r);
        let spec = dsp::power_spectrum(row, fs)?;
        for (b, &k) in bands.iter().zip(&keep) {
            out.push(if k { spec.band(b)? } else { 0.0 });
        }
        out.push(dsp::variance(row));
    }
    Ok(NodeFeatures { values: Tensor::new(vec![c, FEATURES], out)?, dropped_bands })
}

/// Dataset-level normalization frozen when an adapter is created.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
    /// Divides the raw signal before mixing.
    pub signal_scale: f64,
}

impl Default for FeatureStats {
    fn default() -> Self {
        Self { mean: [0.0; FEATURES], std: [1.0; FEATURES], signal_scale: 1.0 }
    }
}

impl FeatureStats {
    /// Per-column mean and standard deviation over every electrode of every
    /// trial, plus the overall signal RMS. Degenerate spreads fall back to 1.
    pub fn fit(features: &[Tensor], signals: &[Tensor]) -> Result<Self, AdapterError> {
        let rows: usize = features.iter().map(|f| f.shape()[0]).sum();
        let samples: usize = signals.iter().map(Tensor::len).sum();
        if rows == 0 || samples == 0 {
            return Err(AdapterError::NoData);
        }
        let mut mean = [0.0; FEATURES];
        for f in features {
            for row in f.data().chunks_exact(FEATURES) {
                for k in 0..FEATURES {
                    mean[k] += row[k];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut std = [0.0; FEATURES];
        for f in features {
            for row in f.data().chunks_exact(FEATURES) {
                for k in 0..FEATURES {
                    std[k] += (row[k] - mean[k]).powi(2);
                }
            }
        }
        for s in &mut std {
            *s = (*s / rows as f64).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        let ss: f64 = signals.iter().flat_map(|s| s.data()).map(|v| v * v).sum::<f64>() / samples as f64;
        let signal_scale = if ss.sqrt() > 1e-12 { ss.sqrt() } else { 1.0 };
        Ok(Self { mean, std, signal_scale })
    }

    pub fn standardize(&self, raw: &Tensor) -> Tensor {
        let data = raw
            .data()
            .chunks_exact(FEATURES)
            .flat_map(|row| (0..FEATURES).map(move |k| (row[k] - self.mean[k]) / self.std[k]))
            .collect();
        Tensor::new(raw.shape().to_vec(), data).expect("finite standardized features")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatHead {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub heads: Vec<GatHead>,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

/// Serializable description of an adapter (everything except learnables).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub name: String,
    pub layout: ElectrodeLayout,
    pub fs: f64,
    pub config: AdapterConfig,
    pub stats: FeatureStats,
    pub c_fix: usize,
    pub t_fix: usize,
}

/// One dataset's adapter: its layout, frozen statistics and parameter ids.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub meta: AdapterMeta,
    pub adjacency: AdjacencyMatrix,
    pub params: AdapterParams,
}

/// A trial reduced to what the adapter consumes; everything here is
/// parameter-free and can be computed once per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTrial {
    /// Standardized node features `[C, 5]`.
    pub features: Tensor,
    /// Scaled signal `[C, T]`.
    pub signal: Tensor,
    /// Row-major `[C, C]` attention mask in the trial's channel order.
    pub mask: Vec<bool>,
    /// Electrodes with no neighbour above the edge threshold.
    pub isolated: Vec<usize>,
    pub dropped_bands: Vec<String>,
}

/// Intermediate values of one adapter pass.
#[derive(Clone, Debug)]
pub struct AdapterTrace {
    pub embeddings: Var,
    pub attention: Vec<Var>,
    pub mixing: Var,
    pub unified: Var,
}

pub fn prefix(name: &str) -> String {
    format!("adapter.{}.", name)
}

/// Boolean edge mask `A[i,j] > threshold`; also returns rows left empty.
pub fn edge_mask(adjacency: &AdjacencyMatrix, threshold: f64) -> (Vec<bool>, Vec<usize>) {
    let n = adjacency.size();
    let mask: Vec<bool> = adjacency.weights.data().iter().map(|&w| w > threshold).collect();
    let isolated = (0..n).filter(|&i| !mask[i * n..(i + 1) * n].iter().any(|&b| b)).collect();
    (mask, isolated)
}

/// One graph-attention layer: for each head, `Wh = F·W`, logits
/// `LeakyReLU(a_srcᵀWh_i + a_dstᵀWh_j)`, masked row softmax, `α·Wh`; heads
/// are averaged. Returns the embeddings `[C, d_node]` and each head's
/// attention matrix.
pub fn gat_forward(
    tape: &mut Tape<'_>,
    features: Var,
    mask: &[bool],
    heads: &[GatHead],
    slope: f64,
) -> Result<(Var, Vec<Var>), NumericsError> {
    let n = tape.shape(features)[0];
    let mut sum: Option<Var> = None;
    let mut attention = Vec::with_capacity(heads.len());
    for h in heads {
        let w = tape.param(h.w);
        let wh = tape.matmul(features, w)?;
        let d = tape.shape(wh)[1];
        let a_src = tape.param(h.a_src);
        let a_dst = tape.param(h.a_dst);
        let a_src = tape.reshape(a_src, &[d, 1])?;
        let a_dst = tape.reshape(a_dst, &[d, 1])?;
        let s = tape.matmul(wh, a_src)?;
        let t = tape.matmul(wh, a_dst)?;
        let e = tape.outer_add(s, t)?;
        let e = tape.leaky_relu(e, slope)?;
        debug_assert_eq!(tape.shape(e), &[n, n]);
        let alpha = tape.masked_softmax_rows(e, mask)?;
        attention.push(alpha);
        let out = tape.matmul(alpha, wh)?;
        sum = Some(match sum {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let sum = sum.ok_or_else(|| NumericsError::contract("gat_forward", "no attention heads".into()))?;
    let emb = tape.scale(sum, 1.0 / heads.len() as f64)?;
    Ok((emb, attention))
}

/// Mixes `[C, T]` into `[C_fix, T]` with `mixing: [C, C_fix]` (each input
/// channel's row of weights), then resamples time to `t_fix`.
pub fn unify(tape: &mut Tape<'_>, signal: Var, mixing: Var, t_fix: usize) -> Result<Var, NumericsError> {
    let mt = tape.transpose(mixing)?;
    let mixed = tape.matmul(mt, signal)?;
    if tape.shape(mixed)[1] == t_fix {
        Ok(mixed)
    } else {
        tape.interpolate_time(mixed, t_fix)
    }
}

fn describe(layout: &ElectrodeLayout) -> String {
    format!("{}: {}", layout.name, layout.names.join(","))
}

impl AdapterState {
    /// Registers a fresh adapter for `layout` in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: ElectrodeLayout,
        fs: f64,
        stats: FeatureStats,
        config: AdapterConfig,
        c_fix: usize,
        t_fix: usize,
        rng: &SeededRng,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        if c_fix == 0 || t_fix == 0 {
            return Err(AdapterError::Config("c_fix and t_fix must be positive".into()));
        }
        let mut rng = rng.split(&format!("adapter.{name}"));
        let p = prefix(name);
        let d = config.d_node;
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            heads.push(GatHead {
                w: store.add(format!("{p}gat{h}.w"), rng.glorot(&[FEATURES, d], FEATURES, d))?,
                a_src: store.add(format!("{p}gat{h}.a_src"), rng.glorot(&[d], 2 * d, 1))?,
                a_dst: store.add(format!("{p}gat{h}.a_dst"), rng.glorot(&[d], 2 * d, 1))?,
            });
        }
        let mix_w = store.add(format!("{p}mix.w"), rng.glorot(&[d, c_fix], d, c_fix))?;
        let mix_b = store.add(format!("{p}mix.b"), Tensor::zeros(&[c_fix]))?;
        let adjacency = montage::gaussian_adjacency(&layout, config.sigma_g)?;
        let meta = AdapterMeta { name: name.to_string(), layout, fs, config, stats, c_fix, t_fix };
        Ok(Self { meta, adjacency, params: AdapterParams { heads, mix_w, mix_b } })
    }

    /// Re-binds an adapter to parameters already in `store`.
    pub fn bind(store: &ParamStore, meta: AdapterMeta) -> Result<Self, AdapterError> {
        meta.config.validate()?;
        let p = prefix(&meta.name);
        let d = meta.config.d_node;
        let get = |n: &str, shape: &[usize]| -> Result<ParamId, AdapterError> {
            let id = store.id(&format!("{p}{n}")).ok_or_else(|| AdapterError::Config(format!("parameter `{p}{n}` missing")))?;
            if store.get(id).shape() != shape {
                return Err(AdapterError::Config(format!("parameter `{p}{n}` has shape {:?}", store.get(id).shape())));
            }
            Ok(id)
        };
        let mut heads = Vec::with_capacity(meta.config.heads);
        for h in 0..meta.config.heads {
            heads.push(GatHead {
                w: get(&format!("gat{h}.w"), &[FEATURES, d])?,
                a_src: get(&format!("gat{h}.a_src"), &[d])?,
                a_dst: get(&format!("gat{h}.a_dst"), &[d])?,
            });
        }
        let mix_w = get("mix.w", &[d, meta.c_fix])?;
        let mix_b = get("mix.b", &[meta.c_fix])?;
        let adjacency = montage::gaussian_adjacency(&meta.layout, meta.config.sigma_g)?;
        Ok(Self { meta, adjacency, params: AdapterParams { heads, mix_w, mix_b } })
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn layout(&self) -> &ElectrodeLayout {
        &self.meta.layout
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.heads.iter().flat_map(|h| [h.w, h.a_src, h.a_dst]).collect();
        ids.extend([self.params.mix_w, self.params.mix_b]);
        ids
    }

    /// Checks that `layout` holds exactly this adapter's electrodes, in any
    /// order.
    pub fn check_layout(&self, layout: &ElectrodeLayout) -> Result<(), AdapterError> {
        let mut a: Vec<&String> = self.meta.layout.names.iter().collect();
        let mut b: Vec<&String> = layout.names.iter().collect();
        a.sort();
        b.sort();
        if a != b {
            return Err(AdapterError::LayoutMismatch {
                adapter: self.meta.name.clone(),
                expected: describe(&self.meta.layout),
                actual: describe(layout),
            });
        }
        Ok(())
    }

    /// Computes the parameter-free inputs for one `[C, T]` trial recorded
    /// with `layout`.
    pub fn prepare(&self, signal: &Tensor, layout: &ElectrodeLayout) -> Result<PreparedTrial, AdapterError> {
        self.check_layout(layout)?;
        let (rows, _) = signal.dims2()?;
        if rows != layout.len() {
            return Err(AdapterError::ChannelCount { rows, channels: layout.len() });
        }
        let raw = init_node_features(signal, self.meta.fs)?;
        let features = self.meta.stats.standardize(&raw.values);
        let scale = self.meta.stats.signal_scale;
        let signal = signal.map(|v| v / scale);
        let (mask, isolated) = if layout.names == self.meta.layout.names {
            edge_mask(&self.adjacency, self.meta.config.edge_threshold)
        } else {
            let adj = montage::gaussian_adjacency(layout, self.meta.config.sigma_g)?;
            edge_mask(&adj, self.meta.config.edge_threshold)
        };
        Ok(PreparedTrial { features, signal, mask, isolated, dropped_bands: raw.dropped_bands })
    }

    /// Embedding-conditioned mixing weights `[C, C_fix]`.
    pub fn mixing(&self, tape: &mut Tape<'_>, embeddings: Var) -> Result<Var, NumericsError> {
        let w = tape.param(self.params.mix_w);
        let b = tape.param(self.params.mix_b);
        let m = tape.matmul(embeddings, w)?;
        tape.add_bias(m, b)
    }

    pub fn forward_traced(&self, tape: &mut Tape<'_>, trial: &PreparedTrial) -> Result<AdapterTrace, AdapterError> {
        let features = tape.constant(trial.features.clone());
        let (embeddings, attention) =
            gat_forward(tape, features, &trial.mask, &self.params.heads, self.meta.config.leaky_slope)?;
        let mixing = self.mixing(tape, embeddings)?;
        let signal = tape.constant(trial.signal.clone());
        let unified = unify(tape, signal, mixing, self.meta.t_fix)?;
        Ok(AdapterTrace { embeddings, attention, mixing, unified })
    }

    /// Unified `[C_fix, T_fix]` tensor for one prepared trial.
    pub fn forward(&self, tape: &mut Tape<'_>, trial: &PreparedTrial) -> Result<Var, AdapterError> {
        Ok(self.forward_traced(tape, trial)?.unified)
    }
}
