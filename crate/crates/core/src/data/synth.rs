//! Forward-model EEG generator: cortical sources, volume conduction, noise.
//!
//! Each trial is built in three explicit stages. Cortical sources emit
//! band-limited oscillations (a sum of sinusoids at random in-band
//! frequencies and phases) whose amplitude is suppressed inside the task
//! window by the source's ERD depth. Every electrode then sees a Gaussian
//! distance-weighted sum of all sources. Finally white Gaussian noise and
//! sparse frontal burst artifacts are added.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetInfo, EegDataset, EegTrial};
use crate::montage::{self, distance, ElectrodeLayout, LayoutDocument, Position};
use crate::numerics::{derive_seed, derive_seed_index, SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Cortical location inside the unit head (norm ≤ 1).
    pub position: Position,
    /// Oscillation band in Hz.
    pub band: [f64; 2],
    /// RMS amplitude in microvolts before suppression.
    pub amplitude: f64,
    /// Fractional amplitude suppression during the task window, in `[0, 1]`.
    #[serde(default)]
    pub erd_depth: f64,
}

impl SourceSpec {
    /// A source `depth` below the named electrode.
    pub fn under(label: &str, depth: f64, band: [f64; 2], amplitude: f64, erd_depth: f64) -> Self {
        let (_, p) = montage::resolve_label(label).expect("registry label");
        Self { position: [p[0] * depth, p[1] * depth, p[2] * depth], band, amplitude, erd_depth }
    }

    /// Reflection across the sagittal plane.
    pub fn mirrored(&self) -> Self {
        let mut s = self.clone();
        s.position[0] = -s.position[0];
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub sources: Vec<SourceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstConfig {
    /// Expected bursts per second.
    pub rate_hz: f64,
    /// Peak amplitude relative to the clean signal's RMS.
    pub amplitude_factor: f64,
    pub duration_s: f64,
    /// Spatial decay length of the burst around Fpz.
    pub spread: f64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        Self { rate_hz: 0.1, amplitude_factor: 10.0, duration_s: 0.1, spread: 0.5 }
    }
}

/// Electrode layout by preset name or inline document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutRef {
    Preset(String),
    Inline(LayoutDocument),
}

impl LayoutRef {
    pub fn resolve(&self) -> Result<ElectrodeLayout, DataError> {
        match self {
            LayoutRef::Preset(name) => montage::preset(name),
            LayoutRef::Inline(doc) => doc.resolve(),
        }
        .map_err(|e| DataError::Synth(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub layout: LayoutRef,
    pub fs: f64,
    pub samples: usize,
    pub classes: Vec<ClassSpec>,
    /// Sources present in every trial regardless of class.
    pub background: Vec<SourceSpec>,
    /// Conduction kernel width λ_c.
    pub lambda_c: f64,
    /// Standard deviation of additive white noise, microvolts.
    pub noise_sigma: f64,
    pub bursts: Option<BurstConfig>,
    /// Task window in seconds from trial start.
    pub task_window: [f64; 2],
    /// Raised-cosine ramp length at window edges, seconds.
    pub ramp_s: f64,
    /// Post-task amplitude gain of suppressed sources (ERS rebound); 0 = none.
    pub rebound_gain: f64,
    /// Sinusoids per source.
    pub components: usize,
    /// Relative per-trial amplitude jitter (uniform ±).
    pub amplitude_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::standard("np16", 0)
    }
}

const MU: [f64; 2] = [8.0, 12.0];
const BETA: [f64; 2] = [16.0, 24.0];

impl SynthConfig {
    /// Four motor-imagery classes over ongoing mu, occipital alpha and
    /// frontal theta activity: left fist desynchronizes mu over C4, right
    /// fist desynchronizes beta over C3, feet both rhythms at the vertex and
    /// tongue both rhythms bilaterally.
    ///
    /// The hand classes differ in rhythm as well as side. The adapter sees
    /// electrodes only through their signals and mutual distances, so a
    /// class that is the exact mirror image of another is indistinguishable
    /// from it after unification.
    pub fn standard(layout: &str, seed: u64) -> Self {
        let depth = 0.85;
        let both = |label: &str| {
            vec![SourceSpec::under(label, depth, MU, 8.0, 0.8), SourceSpec::under(label, depth, BETA, 4.0, 0.6)]
        };
        let tongue = {
            let a = SourceSpec::under("C5", depth, MU, 6.0, 0.8);
            let b = SourceSpec::under("C5", depth, BETA, 3.0, 0.6);
            vec![a.clone(), a.mirrored(), b.clone(), b.mirrored()]
        };
        let classes = vec![
            ClassSpec { name: "left_fist".into(), sources: vec![SourceSpec::under("C4", depth, MU, 8.0, 0.8)] },
            ClassSpec { name: "right_fist".into(), sources: vec![SourceSpec::under("C3", depth, BETA, 6.0, 0.8)] },
            ClassSpec { name: "both_feet".into(), sources: both("Cz") },
            ClassSpec { name: "tongue".into(), sources: tongue },
        ];
        let background = vec![
            SourceSpec::under("C3", depth, MU, 4.0, 0.0),
            SourceSpec::under("C4", depth, MU, 4.0, 0.0),
            SourceSpec::under("Cz", depth, MU, 4.0, 0.0),
            SourceSpec::under("Oz", depth, [8.0, 13.0], 8.0, 0.0),
            SourceSpec::under("Fz", depth, [4.0, 7.0], 5.0, 0.0),
        ];
        Self {
            name: format!("synth-{layout}"),
            layout: LayoutRef::Preset(layout.into()),
            fs: 250.0,
            samples: 500,
            classes,
            background,
            lambda_c: 0.35,
            noise_sigma: 4.0,
            bursts: Some(BurstConfig::default()),
            task_window: [0.5, 1.5],
            ramp_s: 0.1,
            rebound_gain: 0.0,
            components: 6,
            amplitude_jitter: 0.2,
            seed,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Synth(m));
        if self.classes.is_empty() {
            return err("at least one class is required".into());
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return err(format!("fs must be positive, got {}", self.fs));
        }
        if self.samples < 8 {
            return err(format!("samples must be at least 8, got {}", self.samples));
        }
        if !(self.lambda_c > 0.0) {
            return err(format!("lambda_c must be positive, got {}", self.lambda_c));
        }
        if !(self.noise_sigma >= 0.0) {
            return err(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.components == 0 {
            return err("components must be positive".into());
        }
        if !(self.amplitude_jitter >= 0.0 && self.amplitude_jitter < 1.0) {
            return err("amplitude_jitter must lie in [0, 1)".into());
        }
        if !(self.task_window[0] >= 0.0 && self.task_window[0] < self.task_window[1]) {
            return err(format!("task window {:?} is empty", self.task_window));
        }
        let all = self.classes.iter().flat_map(|c| &c.sources).chain(&self.background);
        for s in all {
            let norm = s.position.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 + 1e-12 {
                return err(format!("source position {:?} lies outside the head (norm {norm})", s.position));
            }
            if !(s.band[0] > 0.0 && s.band[0] < s.band[1] && s.band[1] < self.fs / 2.0) {
                return err(format!("source band {:?} invalid at fs {}", s.band, self.fs));
            }
            if !(s.amplitude >= 0.0) || !(0.0..=1.0).contains(&s.erd_depth) {
                return err("source amplitude must be ≥ 0 and erd_depth in [0, 1]".into());
            }
        }
        if let Some(b) = &self.bursts {
            if !(b.rate_hz >= 0.0 && b.amplitude_factor >= 0.0 && b.duration_s > 0.0 && b.spread > 0.0) {
                return err("burst rate/amplitude must be ≥ 0, duration and spread > 0".into());
            }
        }
        self.layout.resolve()?;
        Ok(())
    }

    fn window_samples(&self, w: [f64; 2]) -> (f64, f64) {
        (w[0] * self.fs, w[1] * self.fs)
    }

    /// Task window as a sample range.
    pub fn task_range(&self) -> std::ops::Range<usize> {
        let (a, b) = self.window_samples(self.task_window);
        (a.round() as usize).min(self.samples)..(b.round() as usize).min(self.samples)
    }

    /// Pre-task baseline as a sample range.
    pub fn baseline_range(&self) -> std::ops::Range<usize> {
        0..self.task_range().start
    }

    /// Post-task (rebound) window as a sample range.
    pub fn post_range(&self) -> std::ops::Range<usize> {
        self.task_range().end..self.samples
    }
}

/// Smooth step from 0 to 1 over `[a, a + ramp]`.
fn rise(t: f64, a: f64, ramp: f64) -> f64 {
    if ramp <= 0.0 {
        return if t >= a { 1.0 } else { 0.0 };
    }
    let x = ((t - a) / ramp).clamp(0.0, 1.0);
    0.5 - 0.5 * (PI * x).cos()
}

/// Amplitude envelope of a source: `1 − depth` inside the task window and
/// `1 + rebound` after it, with raised-cosine transitions.
fn envelope(cfg: &SynthConfig, erd_depth: f64, t: f64) -> f64 {
    let [a, b] = cfg.task_window;
    let inside = rise(t, a, cfg.ramp_s) - rise(t, b, cfg.ramp_s);
    let after = rise(t, b, cfg.ramp_s);
    let rebound = if erd_depth > 0.0 { cfg.rebound_gain } else { 0.0 };
    1.0 - erd_depth * inside + rebound * after
}

fn source_signal(cfg: &SynthConfig, spec: &SourceSpec, rng: &mut SeededRng) -> Vec<f64> {
    let n = cfg.components;
    let jitter = 1.0 + cfg.amplitude_jitter * rng.uniform(-1.0, 1.0);
    let a = spec.amplitude * jitter / (n as f64 / 2.0).sqrt();
    let comps: Vec<(f64, f64)> =
        (0..n).map(|_| (rng.uniform(spec.band[0], spec.band[1]), rng.uniform(0.0, 2.0 * PI))).collect();
    (0..cfg.samples)
        .map(|i| {
            let t = i as f64 / cfg.fs;
            let osc: f64 = comps.iter().map(|&(f, ph)| (2.0 * PI * f * t + ph).sin()).sum();
            a * osc * envelope(cfg, spec.erd_depth, t)
        })
        .collect()
}

/// The three stages of one synthetic trial.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthStages {
    /// Source activity `[S, T]`: class sources first, then background.
    pub cortex: Tensor,
    /// Conducted, noise-free scalp signal `[C, T]`.
    pub clean: Tensor,
    /// Additive noise and artifacts `[C, T]`.
    pub noise: Tensor,
    pub trial: EegTrial,
}

fn conduction_gain(e: Position, s: Position, lambda: f64) -> f64 {
    let d = distance(e, s);
    (-(d * d) / (2.0 * lambda * lambda)).exp()
}

/// Generates one trial of `class`, exposing every stage.
pub fn synth_stages(class: usize, cfg: &SynthConfig, layout: &ElectrodeLayout, seed: u64) -> Result<SynthStages, DataError> {
    let spec = cfg
        .classes
        .get(class)
        .ok_or_else(|| DataError::Synth(format!("class {class} out of range for {} classes", cfg.classes.len())))?;
    let t_len = cfg.samples;
    let c = layout.len();

    // Cortex. Class sources are seeded by their index within the class, so
    // mirrored class definitions produce mirrored activity.
    let mut sources: Vec<(&SourceSpec, Vec<f64>)> = Vec::new();
    for (i, s) in spec.sources.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed_index(derive_seed(seed, "class_source"), i as u64));
        sources.push((s, source_signal(cfg, s, &mut rng)));
    }
    for (i, s) in cfg.background.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed_index(derive_seed(seed, "background"), i as u64));
        sources.push((s, source_signal(cfg, s, &mut rng)));
    }

    // Conduction.
    let mut clean = vec![0.0; c * t_len];
    for (e, pos) in layout.positions.iter().enumerate() {
        let row = &mut clean[e * t_len..(e + 1) * t_len];
        for (s, sig) in &sources {
            let g = conduction_gain(*pos, s.position, cfg.lambda_c);
            for (r, v) in row.iter_mut().zip(sig) {
                *r += g * v;
            }
        }
    }

    // Noise.
    let mut rng = SeededRng::new(derive_seed(seed, "noise"));
    let mut noise: Vec<f64> = (0..c * t_len).map(|_| cfg.noise_sigma * rng.normal()).collect();
    if let Some(b) = &cfg.bursts {
        let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
        let peak = b.amplitude_factor * rms;
        let width = ((b.duration_s * cfg.fs).round() as usize).max(1);
        let (_, fpz) = montage::resolve_label("Fpz").expect("registry label");
        let spatial: Vec<f64> = layout.positions.iter().map(|p| conduction_gain(*p, fpz, b.spread)).collect();
        let mut brng = rng.split("bursts");
        let duration = t_len as f64 / cfg.fs;
        let mut t = 0.0;
        if b.rate_hz > 0.0 {
            loop {
                t += -(1.0 - brng.uniform(0.0, 1.0)).ln() / b.rate_hz;
                if t >= duration {
                    break;
                }
                let start = (t * cfg.fs) as usize;
                let sign = if brng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                for k in 0..width.min(t_len - start) {
                    let shape = (PI * (k as f64 + 0.5) / width as f64).sin();
                    for (e, w) in spatial.iter().enumerate() {
                        noise[e * t_len + start + k] += sign * peak * w * shape;
                    }
                }
            }
        }
    }

    let mut cortex = Vec::with_capacity(sources.len() * t_len);
    for (_, s) in &sources {
        cortex.extend_from_slice(s);
    }
    let cortex = if sources.is_empty() { Tensor::zeros(&[1, t_len]) } else { Tensor::new(vec![sources.len(), t_len], cortex).map_err(num)? };
    // Stored precision is f32, so round here to make disk round trips exact.
    let signal: Vec<f64> = clean.iter().zip(&noise).map(|(a, b)| f64::from((a + b) as f32)).collect();
    Ok(SynthStages {
        cortex,
        clean: Tensor::new(vec![c, t_len], clean).map_err(num)?,
        noise: Tensor::new(vec![c, t_len], noise).map_err(num)?,
        trial: EegTrial { signal: Tensor::new(vec![c, t_len], signal).map_err(num)?, label: class },
    })
}

fn num(e: crate::numerics::NumericsError) -> DataError {
    DataError::Synth(e.to_string())
}

pub fn synth_trial(class: usize, cfg: &SynthConfig, seed: u64) -> Result<EegTrial, DataError> {
    cfg.validate()?;
    let layout = cfg.layout.resolve()?;
    Ok(synth_stages(class, cfg, &layout, seed)?.trial)
}

/// `n_per_class` trials of every class, interleaved by class; trial `i` uses
/// a seed derived from `(cfg.seed, i)`.
pub fn synth_dataset(cfg: &SynthConfig, n_per_class: usize) -> Result<EegDataset, DataError> {
    cfg.validate()?;
    let layout = cfg.layout.resolve()?;
    let k = cfg.classes.len();
    let mut trials = Vec::with_capacity(n_per_class * k);
    for i in 0..n_per_class * k {
        let seed = derive_seed_index(cfg.seed, i as u64);
        trials.push(synth_stages(i % k, cfg, &layout, seed)?.trial);
    }
    let metadata = serde_json::to_value(cfg).map_err(|e| DataError::Synth(e.to_string()))?;
    let info = DatasetInfo { name: cfg.name.clone(), layout, fs: cfg.fs, class_names: cfg.class_names(), metadata };
    Ok(EegDataset { info, trials })
}

/// Mean clean-signal power over mean noise power.
pub fn snr(stages: &[SynthStages]) -> f64 {
    let p = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    let s: f64 = stages.iter().map(|s| p(&s.clean)).sum();
    let n: f64 = stages.iter().map(|s| p(&s.noise)).sum();
    s / n
}

/// Electrodes that pick up a suppressed source of `class` with conduction
/// gain of at least `min_gain`.
pub fn motor_adjacent(cfg: &SynthConfig, layout: &ElectrodeLayout, class: usize, min_gain: f64) -> Vec<usize> {
    let Some(spec) = cfg.classes.get(class) else { return Vec::new() };
    (0..layout.len())
        .filter(|&e| {
            spec.sources
                .iter()
                .filter(|s| s.erd_depth > 0.0)
                .any(|s| conduction_gain(layout.positions[e], s.position, cfg.lambda_c) >= min_gain)
        })
        .collect()
}
