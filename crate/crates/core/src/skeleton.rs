//! Procedural skeleton sequences, their augmentations and the teacher network.
//!
//! A sequence is `F` frames of 46 keypoints in body units (y up, z forward,
//! the body's left side at negative x). Each motor-imagery class animates one
//! keypoint cluster from a fixed rest pose; everything else stays put.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Manifest, FORMAT_VERSION};
use crate::numerics::{derive_seed_index, NumericsError, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

pub const KEYPOINTS: usize = 46;
/// Flattened coordinates per frame.
pub const FRAME_FEATURES: usize = KEYPOINTS * 3;
pub const MIN_FRAMES: usize = 16;

pub const FACE: std::ops::Range<usize> = 0..10;
pub const MOUTH: std::ops::Range<usize> = 5..10;
pub const TORSO: std::ops::Range<usize> = 10..20;
pub const LEFT_HAND: std::ops::Range<usize> = 20..30;
pub const RIGHT_HAND: std::ops::Range<usize> = 30..40;
pub const FEET: std::ops::Range<usize> = 40..46;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("unknown motion class `{name}`; expected one of {expected:?}")]
    UnknownClass { name: String, expected: Vec<String> },
    #[error("need at least {min} frames, got {frames}")]
    TooFewFrames { frames: usize, min: usize },
    #[error("invalid skeleton sequence: {0}")]
    Shape(String),
    #[error("invalid skeleton configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    LeftFist,
    RightFist,
    BothFeet,
    Tongue,
}

impl MotionClass {
    pub const ALL: [MotionClass; 4] = [MotionClass::LeftFist, MotionClass::RightFist, MotionClass::BothFeet, MotionClass::Tongue];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::LeftFist => "left_fist",
            MotionClass::RightFist => "right_fist",
            MotionClass::BothFeet => "both_feet",
            MotionClass::Tongue => "tongue",
        }
    }

    pub fn parse(name: &str) -> Result<Self, SkeletonError> {
        Self::ALL.into_iter().find(|c| c.name() == name).ok_or_else(|| SkeletonError::UnknownClass {
            name: name.to_string(),
            expected: Self::ALL.iter().map(|c| c.name().to_string()).collect(),
        })
    }

    /// Keypoints this class moves.
    pub fn cluster(self) -> std::ops::Range<usize> {
        match self {
            MotionClass::LeftFist => LEFT_HAND,
            MotionClass::RightFist => RIGHT_HAND,
            MotionClass::BothFeet => FEET,
            MotionClass::Tongue => MOUTH,
        }
    }
}

/// Right-hand keypoints relative to the wrist: wrist, thumb base and tip,
/// index/middle/ring base and tip, pinky tip.
const HAND_OFFSETS: [[f64; 3]; 10] = [
    [0.0, 0.0, 0.0],
    [0.025, -0.02, 0.02],
    [0.045, -0.06, 0.04],
    [0.015, -0.08, 0.01],
    [0.015, -0.16, 0.01],
    [0.0, -0.085, 0.0],
    [0.0, -0.17, 0.0],
    [-0.015, -0.08, 0.0],
    [-0.015, -0.155, 0.0],
    [-0.03, -0.13, 0.0],
];
const RIGHT_WRIST: [f64; 3] = [0.27, 0.85, 0.08];

fn mirror(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

/// Canonical rest pose, exactly symmetric under `x → −x` with the pairs of
/// [`mirror_index`].
pub fn rest_pose() -> [[f64; 3]; KEYPOINTS] {
    let mut p = [[0.0; 3]; KEYPOINTS];
    let face: [[f64; 3]; 10] = [
        [0.0, 1.60, 0.10],
        [-0.035, 1.65, 0.08],
        [0.035, 1.65, 0.08],
        [-0.08, 1.62, 0.0],
        [0.08, 1.62, 0.0],
        [-0.025, 1.55, 0.09],
        [0.025, 1.55, 0.09],
        [0.0, 1.56, 0.10],
        [0.0, 1.54, 0.10],
        [0.0, 1.50, 0.08],
    ];
    let torso: [[f64; 3]; 10] = [
        [0.0, 1.45, 0.0],
        [-0.2, 1.40, 0.0],
        [0.2, 1.40, 0.0],
        [-0.25, 1.12, 0.02],
        [0.25, 1.12, 0.02],
        [0.0, 1.15, 0.0],
        [-0.12, 0.95, 0.0],
        [0.12, 0.95, 0.0],
        [-0.12, 0.50, 0.02],
        [0.12, 0.50, 0.02],
    ];
    p[FACE].copy_from_slice(&face);
    p[TORSO].copy_from_slice(&torso);
    for (k, off) in HAND_OFFSETS.iter().enumerate() {
        let r = [RIGHT_WRIST[0] + off[0], RIGHT_WRIST[1] + off[1], RIGHT_WRIST[2] + off[2]];
        p[RIGHT_HAND.start + k] = r;
        p[LEFT_HAND.start + k] = mirror(r);
    }
    // ankle, heel, toe; left foot first
    let right_foot = [[0.12, 0.08, 0.0], [0.12, 0.02, -0.05], [0.12, 0.02, 0.15]];
    for (k, r) in right_foot.iter().enumerate() {
        p[FEET.start + k] = mirror(*r);
        p[FEET.start + 3 + k] = *r;
    }
    p
}

/// Index of the keypoint's mirror image (itself on the midline).
pub fn mirror_index(k: usize) -> usize {
    match k {
        1 | 3 | 5 => k + 1,
        2 | 4 | 6 => k - 1,
        11 | 13 | 16 | 18 => k + 1,
        12 | 14 | 17 | 19 => k - 1,
        20..=29 => k + 10,
        30..=39 => k - 10,
        40..=42 => k + 3,
        43..=45 => k - 3,
        _ => k,
    }
}

/// `[F, 46, 3]` keypoint trajectories with a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub frames: Tensor,
    pub label: usize,
    pub rate: f64,
}

impl SkeletonSequence {
    pub fn new(frames: Tensor, label: usize, rate: f64) -> Result<Self, SkeletonError> {
        let s = frames.shape();
        if s.len() != 3 || s[1] != KEYPOINTS || s[2] != 3 {
            return Err(SkeletonError::Shape(format!("expected [F, {KEYPOINTS}, 3], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(SkeletonError::TooFewFrames { frames: s[0], min: 2 });
        }
        Ok(Self { frames, label, rate })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn point(&self, frame: usize, k: usize) -> [f64; 3] {
        let d = &self.frames.data()[(frame * KEYPOINTS + k) * 3..][..3];
        [d[0], d[1], d[2]]
    }

    /// Frames flattened to `[F, 138]`.
    pub fn flattened(&self) -> Tensor {
        self.frames.clone().reshape(&[self.frame_count(), FRAME_FEATURES]).expect("keypoint tensor")
    }
}

/// Movement of a cluster keypoint at envelope value `e`, relative to its rest
/// position, for the right hand / right foot / mouth.
fn hand_displacement(k: usize, rest: [f64; 3], e: f64, gain: f64) -> [f64; 3] {
    let wrist = RIGHT_WRIST;
    if k == 0 {
        return [0.0, 0.02 * e * gain, 0.0];
    }
    // Fingers curl towards a point just in front of the palm.
    let target = [wrist[0], wrist[1] - 0.07, wrist[2] + 0.04];
    let f = e * gain;
    [f * (target[0] - rest[0]), f * (target[1] - rest[1]), f * (target[2] - rest[2])]
}

fn foot_displacement(k: usize, e: f64, gain: f64) -> [f64; 3] {
    match k {
        0 => [0.0, 0.01 * e * gain, 0.0],
        1 => [0.0, 0.0, 0.0],
        _ => [0.0, 0.06 * e * gain, -0.01 * e * gain],
    }
}

fn mouth_displacement(k: usize, e: f64, gain: f64, rest: [f64; 3]) -> [f64; 3] {
    match k {
        // corners draw inwards and down
        0 | 1 => [-0.3 * rest[0] * e * gain, -0.01 * e * gain, 0.0],
        2 => [0.0, 0.005 * e * gain, 0.0],
        _ => [0.0, -0.04 * e * gain, 0.005 * e * gain],
    }
}

/// A sequence of `class` with motion parameters drawn from `seed`: one
/// envelope `a·(1 − cos 2πcu)/2` over normalized time `u` (so the first
/// frame is the rest pose) scales per-keypoint gains.
pub fn generate_skeleton(class: MotionClass, frames: usize, rate: f64, seed: u64) -> Result<SkeletonSequence, SkeletonError> {
    if frames < MIN_FRAMES {
        return Err(SkeletonError::TooFewFrames { frames, min: MIN_FRAMES });
    }
    let mut rng = SeededRng::new(seed);
    let cycles = rng.uniform(1.0, 3.0);
    let amp = rng.uniform(0.6, 1.0);
    let gains: Vec<f64> = (0..10).map(|_| rng.uniform(0.5, 0.9)).collect();
    let rest = rest_pose();
    let label = MotionClass::ALL.iter().position(|&c| c == class).expect("listed class");
    let mut data = Vec::with_capacity(frames * FRAME_FEATURES);
    for f in 0..frames {
        let u = f as f64 / (frames - 1) as f64;
        let e = amp * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * cycles * u).cos());
        let mut pose = rest;
        match class {
            MotionClass::RightFist | MotionClass::LeftFist => {
                for k in 0..10 {
                    let d = hand_displacement(k, rest[RIGHT_HAND.start + k], e, gains[k]);
                    if class == MotionClass::RightFist {
                        let p = &mut pose[RIGHT_HAND.start + k];
                        (0..3).for_each(|i| p[i] += d[i]);
                    } else {
                        let d = mirror(d);
                        let p = &mut pose[LEFT_HAND.start + k];
                        (0..3).for_each(|i| p[i] += d[i]);
                    }
                }
            }
            MotionClass::BothFeet => {
                for k in 0..3 {
                    let d = foot_displacement(k, e, gains[k]);
                    for idx in [FEET.start + k, FEET.start + 3 + k] {
                        (0..3).for_each(|i| pose[idx][i] += d[i]);
                    }
                }
            }
            MotionClass::Tongue => {
                for k in 0..5 {
                    // corners share a gain so the mouth stays symmetric
                    let g = gains[if k == 1 { 0 } else { k }];
                    let d = mouth_displacement(k, e, g, rest[MOUTH.start + k]);
                    (0..3).for_each(|i| pose[MOUTH.start + k][i] += d[i]);
                }
            }
        }
        data.extend(pose.iter().flatten());
    }
    SkeletonSequence::new(Tensor::new(vec![frames, KEYPOINTS, 3], data)?, label, rate)
}

// ---------------------------------------------------------------------------
// Augmentations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Speed,
    Rhythm,
    Rotation,
    Amplitude,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [Augmentation::Speed, Augmentation::Rhythm, Augmentation::Rotation, Augmentation::Amplitude];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub speed: [f64; 2],
    pub rhythm_knots: usize,
    /// Largest knot displacement as a fraction of the duration.
    pub rhythm_shift: f64,
    pub max_rotation_deg: f64,
    pub amplitude: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { speed: [0.75, 1.25], rhythm_knots: 3, rhythm_shift: 0.15, max_rotation_deg: 10.0, amplitude: [0.7, 1.3] }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), SkeletonError> {
        let range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !range(self.speed) || !range(self.amplitude) {
            return Err(SkeletonError::Config("speed and amplitude ranges must be positive and ordered".into()));
        }
        // Knots sit at k/(n+1); a shift below their spacing keeps them inside (0, 1).
        if !(0.0..1.0 / (self.rhythm_knots as f64 + 1.0)).contains(&self.rhythm_shift) {
            return Err(SkeletonError::Config("rhythm shift must be below the knot spacing".into()));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(SkeletonError::Config("max_rotation_deg must lie in [0, 180]".into()));
        }
        Ok(())
    }
}

/// Resamples frames at fractional source positions (linear interpolation).
fn sample_frames(seq: &SkeletonSequence, positions: &[f64]) -> Result<SkeletonSequence, SkeletonError> {
    let f = seq.frame_count();
    let src = seq.frames.data();
    let mut out = Vec::with_capacity(positions.len() * FRAME_FEATURES);
    for &pos in positions {
        let pos = pos.clamp(0.0, (f - 1) as f64);
        let i0 = (pos.floor() as usize).min(f - 2);
        let w = pos - i0 as f64;
        let (a, b) = (&src[i0 * FRAME_FEATURES..][..FRAME_FEATURES], &src[(i0 + 1) * FRAME_FEATURES..][..FRAME_FEATURES]);
        out.extend(a.iter().zip(b).map(|(x, y)| if w == 0.0 { *x } else if w == 1.0 { *y } else { x + w * (y - x) }));
    }
    SkeletonSequence::new(Tensor::new(vec![positions.len(), KEYPOINTS, 3], out)?, seq.label, seq.rate)
}

/// Plays the sequence `factor` times faster: `round(F / factor)` frames
/// spanning the same start and end poses.
pub fn change_speed(seq: &SkeletonSequence, factor: f64) -> Result<SkeletonSequence, SkeletonError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(SkeletonError::Config(format!("speed factor must be positive, got {factor}")));
    }
    let f = seq.frame_count();
    let n = ((f as f64 / factor).round() as usize).max(2);
    let positions: Vec<f64> = (0..n).map(|j| (j * (f - 1)) as f64 / (n - 1) as f64).collect();
    sample_frames(seq, &positions)
}

/// Piecewise-linear time map through `(0,0)`, the given knots `(u, s)` and
/// `(1,1)`; `s` must increase strictly with `u`.
pub fn warp_map(knots: &[(f64, f64)], u: f64) -> f64 {
    let mut pts = vec![(0.0, 0.0)];
    pts.extend_from_slice(knots);
    pts.push((1.0, 1.0));
    for w in pts.windows(2) {
        let ((u0, s0), (u1, s1)) = (w[0], w[1]);
        if u <= u1 {
            return s0 + (s1 - s0) * (u - u0) / (u1 - u0);
        }
    }
    1.0
}

/// Non-linear time warp: output frame `j` shows source time
/// `warp_map(knots, j/(F−1))`.
pub fn time_warp(seq: &SkeletonSequence, knots: &[(f64, f64)]) -> Result<SkeletonSequence, SkeletonError> {
    let mut prev = (0.0, 0.0);
    for &k in knots.iter().chain(std::iter::once(&(1.0, 1.0))) {
        if !(k.0 > prev.0 && k.1 > prev.1) {
            return Err(SkeletonError::Config(format!("warp knots {knots:?} are not strictly increasing")));
        }
        prev = k;
    }
    let f = seq.frame_count();
    let positions: Vec<f64> = (0..f).map(|j| warp_map(knots, j as f64 / (f - 1) as f64) * (f - 1) as f64).collect();
    sample_frames(seq, &positions)
}

/// Rotation matrix for `angle` radians about the unit `axis` (Rodrigues).
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Applies one rotation about the first frame's centroid to every frame.
pub fn rotate(seq: &SkeletonSequence, axis: [f64; 3], angle: f64) -> Result<SkeletonSequence, SkeletonError> {
    let r = rotation_matrix(axis, angle);
    let mut centre = [0.0; 3];
    for k in 0..KEYPOINTS {
        let p = seq.point(0, k);
        (0..3).for_each(|i| centre[i] += p[i] / KEYPOINTS as f64);
    }
    let data = seq
        .frames
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let d = [p[0] - centre[0], p[1] - centre[1], p[2] - centre[2]];
            (0..3).map(move |i| centre[i] + r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
        })
        .collect();
    SkeletonSequence::new(Tensor::new(seq.frames.shape().to_vec(), data)?, seq.label, seq.rate)
}

/// Scales every keypoint's deviation from the first frame by `factor`.
pub fn scale_amplitude(seq: &SkeletonSequence, factor: f64) -> Result<SkeletonSequence, SkeletonError> {
    let first: Vec<f64> = seq.frames.data()[..FRAME_FEATURES].to_vec();
    let data = seq
        .frames
        .data()
        .chunks_exact(FRAME_FEATURES)
        .flat_map(|frame| frame.iter().zip(&first).map(|(v, r)| r + factor * (v - r)).collect::<Vec<_>>())
        .collect();
    SkeletonSequence::new(Tensor::new(seq.frames.shape().to_vec(), data)?, seq.label, seq.rate)
}

/// Applies augmentation `kind` with parameters drawn from `seed`.
pub fn augment(seq: &SkeletonSequence, kind: Augmentation, config: &AugmentConfig, seed: u64) -> Result<SkeletonSequence, SkeletonError> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    match kind {
        Augmentation::Speed => change_speed(seq, rng.uniform(config.speed[0], config.speed[1])),
        Augmentation::Rhythm => {
            let n = config.rhythm_knots;
            let u: Vec<f64> = (1..=n).map(|k| k as f64 / (n + 1) as f64).collect();
            let mut s: Vec<f64> = u.iter().map(|u| u + rng.uniform(-config.rhythm_shift, config.rhythm_shift)).collect();
            // Sorting keeps every knot within the shift bound and makes the map monotone.
            s.sort_by(f64::total_cmp);
            let knots: Vec<(f64, f64)> = u.into_iter().zip(s).collect();
            time_warp(seq, &knots)
        }
        Augmentation::Rotation => {
            let axis = [rng.normal(), rng.normal(), rng.normal()];
            let max = config.max_rotation_deg.to_radians();
            rotate(seq, axis, rng.uniform(-max, max))
        }
        Augmentation::Amplitude => scale_amplitude(seq, rng.uniform(config.amplitude[0], config.amplitude[1])),
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkeletonConfig {
    pub frames: usize,
    pub rate: f64,
    pub per_class: usize,
    /// Augmented copies added per generated sequence, each with one
    /// randomly chosen augmentation.
    pub augmented_copies: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self { frames: 48, rate: 30.0, per_class: 20, augmented_copies: 1, augment: AugmentConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonDataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub sequences: Vec<SkeletonSequence>,
}

impl SkeletonDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label).collect()
    }
}

/// Base sequences for every class (interleaved) followed by their augmented
/// copies.
pub fn generate_dataset(config: &SkeletonConfig) -> Result<SkeletonDataset, SkeletonError> {
    config.augment.validate()?;
    let mut base = Vec::with_capacity(config.per_class * 4);
    for i in 0..config.per_class * 4 {
        let class = MotionClass::ALL[i % 4];
        base.push(generate_skeleton(class, config.frames, config.rate, derive_seed_index(config.seed, i as u64))?);
    }
    let mut sequences = base.clone();
    let aug_rng = SeededRng::new(config.seed).split("augment");
    for copy in 0..config.augmented_copies {
        for (i, seq) in base.iter().enumerate() {
            let mut rng = aug_rng.split_index((copy * base.len() + i) as u64);
            let kind = Augmentation::ALL[rng.below(4)];
            sequences.push(augment(seq, kind, &config.augment, derive_seed_index(rng.seed(), 1))?);
        }
    }
    // Stored precision is f32, so round here to make disk round trips exact.
    for seq in &mut sequences {
        let shape = seq.frames.shape().to_vec();
        let data = seq.frames.data().iter().map(|&v| f64::from(v as f32)).collect();
        seq.frames = Tensor::new(shape, data).expect("same shape");
    }
    Ok(SkeletonDataset {
        name: "skeleton".into(),
        class_names: MotionClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        sequences,
    })
}

/// Writes in the dataset directory format with `kind = "skeleton"` and
/// per-record shape `[F, 46, 3]`.
pub fn write_skeleton_dataset(dataset: &SkeletonDataset, dir: &Path) -> Result<(), SkeletonError> {
    let rate = dataset.sequences.first().map_or(0.0, |s| s.rate);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "skeleton".into(),
        name: dataset.name.clone(),
        layout: None,
        rate,
        class_names: dataset.class_names.clone(),
        metadata: serde_json::Value::Null,
        trials: Vec::new(),
    };
    let records: Vec<(usize, &Tensor)> = dataset.sequences.iter().map(|s| (s.label, &s.frames)).collect();
    Ok(data::write_records(dir, manifest, &records)?)
}

pub fn read_skeleton_dataset(dir: &Path) -> Result<SkeletonDataset, SkeletonError> {
    let (m, records) = data::read_records(dir)?;
    if m.kind != "skeleton" {
        return Err(DataError::Kind { expected: "skeleton".into(), found: m.kind }.into());
    }
    let sequences = records
        .into_iter()
        .map(|(label, frames)| SkeletonSequence::new(frames, label, m.rate))
        .collect::<Result<_, _>>()?;
    Ok(SkeletonDataset { name: m.name, class_names: m.class_names, sequences })
}

// ---------------------------------------------------------------------------
// Teacher

/// Reciprocal of a typical motion size (5 cm) in pose units.
pub const MOTION_SCALE: f64 = 20.0;

/// Teacher input `[F, 138]`: each frame's displacement from the first frame,
/// times [`MOTION_SCALE`]. Class motions are centimetres on a metre-scale
/// pose, so raw coordinates bury them under the static posture; a rigid
/// rotation about the first frame becomes a rotation of the displacements.
pub fn motion_features(seq: &SkeletonSequence) -> Tensor {
    let x = seq.flattened();
    let first = x.row(0).to_vec();
    let data = x.data().chunks_exact(FRAME_FEATURES).flat_map(|r| r.iter().zip(&first).map(|(v, f)| (v - f) * MOTION_SCALE)).collect();
    Tensor::new(vec![seq.frame_count(), FRAME_FEATURES], data).expect("frame shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub conv_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub attention_heads: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { conv_channels: 32, kernel: 5, hidden: 32, attention_heads: 2 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.conv_channels == 0 || self.kernel == 0 || self.hidden == 0 || self.attention_heads == 0 {
            return Err(SkeletonError::Config("teacher sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One GRU direction: input and recurrent weights for the `(r, z, n)` gates
/// stacked along the output axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_i: ParamId,
    pub w_h: ParamId,
    pub b_i: ParamId,
    pub b_h: ParamId,
}

/// One GRU update. `x` is the projected input `[1, 3h]` (including `b_i`),
/// `state` is `[1, h]`, `w_h` is `[h, 3h]` and `b_h` has `3h` entries; gate
/// order is `(r, z, n)` and the new state is `(1 − z)·n + z·h`.
pub fn gru_step(tape: &mut Tape<'_>, x: Var, state: Var, w_h: Var, b_h: Var) -> Result<Var, NumericsError> {
    let h = tape.shape(state)[1];
    let hp = tape.matmul(state, w_h)?;
    let hp = tape.add_bias(hp, b_h)?;
    let xr = tape.slice_cols(x, 0, h)?;
    let hr = tape.slice_cols(hp, 0, h)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let xz = tape.slice_cols(x, h, 2 * h)?;
    let hz = tape.slice_cols(hp, h, 2 * h)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let xn = tape.slice_cols(x, 2 * h, 3 * h)?;
    let hn = tape.slice_cols(hp, 2 * h, 3 * h)?;
    let rn = tape.mul(r, hn)?;
    let n = tape.add(xn, rn)?;
    let n = tape.tanh(n)?;
    // (1 − z)·n + z·h  =  n + z·(h − n)
    let diff = tape.sub(state, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

/// Skeleton classifier: temporal convolution, bidirectional GRU, attention
/// pooling over frames and a linear head. Parameters live under `teacher.`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub config: TeacherConfig,
    pub classes: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub forward_cell: GruCell,
    pub backward_cell: GruCell,
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TeacherTrace {
    pub logits: Var,
    /// `[F, heads]`, each column a distribution over frames.
    pub attention: Var,
    /// `[F, 2h]`, forward states then backward states.
    pub states: Var,
    pub final_forward: Var,
    pub final_backward: Var,
}

impl TeacherModel {
    pub fn new(store: &mut ParamStore, config: TeacherConfig, classes: usize, rng: &SeededRng) -> Result<Self, SkeletonError> {
        config.validate()?;
        if classes == 0 {
            return Err(SkeletonError::Config("teacher needs at least one class".into()));
        }
        let mut rng = rng.split("teacher");
        let (c, k, h, a) = (config.conv_channels, config.kernel, config.hidden, config.attention_heads);
        let mut add = |name: &str, t: Tensor| store.add(format!("teacher.{name}"), t);
        let conv_w = add("conv.w", rng.glorot(&[c, FRAME_FEATURES, k], FRAME_FEATURES * k, c * k))?;
        let conv_b = add("conv.b", Tensor::zeros(&[c]))?;
        let mut cell = |dir: &str, rng: &mut SeededRng| -> Result<GruCell, NumericsError> {
            let bound = 1.0 / (h as f64).sqrt();
            Ok(GruCell {
                w_i: add(&format!("gru.{dir}.w_i"), rng.uniform_tensor(&[c, 3 * h], -bound, bound))?,
                w_h: add(&format!("gru.{dir}.w_h"), rng.uniform_tensor(&[h, 3 * h], -bound, bound))?,
                b_i: add(&format!("gru.{dir}.b_i"), rng.uniform_tensor(&[3 * h], -bound, bound))?,
                b_h: add(&format!("gru.{dir}.b_h"), rng.uniform_tensor(&[3 * h], -bound, bound))?,
            })
        };
        let forward_cell = cell("fwd", &mut rng)?;
        let backward_cell = cell("bwd", &mut rng)?;
        let attn_w = add("attn.w", rng.glorot(&[2 * h, a], 2 * h, a))?;
        let attn_b = add("attn.b", Tensor::zeros(&[a]))?;
        let out_w = add("out.w", rng.glorot(&[2 * h * a, classes], 2 * h * a, classes))?;
        let out_b = add("out.b", Tensor::zeros(&[classes]))?;
        Ok(Self { config, classes, conv_w, conv_b, forward_cell, backward_cell, attn_w, attn_b, out_w, out_b })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let cells = [&self.forward_cell, &self.backward_cell];
        let mut ids = vec![self.conv_w, self.conv_b];
        ids.extend(cells.iter().flat_map(|c| [c.w_i, c.w_h, c.b_i, c.b_h]));
        ids.extend([self.attn_w, self.attn_b, self.out_w, self.out_b]);
        ids
    }

    /// Runs one GRU direction over the rows of `inputs` (already projected:
    /// `[F, 3h]` including `b_i`), returning each step's state.
    fn run_gru(&self, tape: &mut Tape<'_>, cell: &GruCell, inputs: Var, reverse: bool) -> Result<Vec<Var>, NumericsError> {
        let h = self.config.hidden;
        let f = tape.shape(inputs)[0];
        let w_h = tape.param(cell.w_h);
        let b_h = tape.param(cell.b_h);
        let mut state = tape.constant(Tensor::zeros(&[1, h]));
        let mut states = Vec::with_capacity(f);
        let order: Vec<usize> = if reverse { (0..f).rev().collect() } else { (0..f).collect() };
        for t in order {
            let x = tape.slice_rows(inputs, t, t + 1)?;
            state = gru_step(tape, x, state, w_h, b_h)?;
            states.push(state);
        }
        if reverse {
            states.reverse();
        }
        Ok(states)
    }

    pub fn forward_traced(&self, tape: &mut Tape<'_>, seq: &SkeletonSequence) -> Result<TeacherTrace, SkeletonError> {
        let f = seq.frame_count();
        if f < 2 {
            return Err(SkeletonError::TooFewFrames { frames: f, min: 2 });
        }
        let x = tape.constant(motion_features(seq));
        let xt = tape.transpose(x)?;
        let cw = tape.param(self.conv_w);
        let cb = tape.param(self.conv_b);
        let conv = tape.conv1d_same(xt, cw, Some(cb))?;
        let conv = tape.relu(conv)?;
        let feats = tape.transpose(conv)?;
        let mut dirs = Vec::with_capacity(2);
        for (cell, reverse) in [(&self.forward_cell, false), (&self.backward_cell, true)] {
            let w_i = tape.param(cell.w_i);
            let b_i = tape.param(cell.b_i);
            let proj = tape.matmul(feats, w_i)?;
            let proj = tape.add_bias(proj, b_i)?;
            dirs.push(self.run_gru(tape, cell, proj, reverse)?);
        }
        let final_forward = *dirs[0].last().expect("frames");
        let final_backward = dirs[1][0];
        let fwd = tape.concat_rows(&dirs[0])?;
        let bwd = tape.concat_rows(&dirs[1])?;
        let states = tape.concat_cols(&[fwd, bwd])?;
        let aw = tape.param(self.attn_w);
        let ab = tape.param(self.attn_b);
        let scores = tape.matmul(states, aw)?;
        let scores = tape.add_bias(scores, ab)?;
        let attention = tape.softmax(scores, 0)?;
        // Each column of attention pools the states: [heads, 2h].
        let at = tape.transpose(attention)?;
        let pooled = tape.matmul(at, states)?;
        let n = tape.value(pooled).len();
        let pooled = tape.reshape(pooled, &[1, n])?;
        let ow = tape.param(self.out_w);
        let ob = tape.param(self.out_b);
        let logits = tape.matmul(pooled, ow)?;
        let logits = tape.add_bias(logits, ob)?;
        Ok(TeacherTrace { logits, attention, states, final_forward, final_backward })
    }

    /// Class logits `[1, classes]`.
    pub fn forward(&self, tape: &mut Tape<'_>, seq: &SkeletonSequence) -> Result<Var, SkeletonError> {
        Ok(self.forward_traced(tape, seq)?.logits)
    }
}
