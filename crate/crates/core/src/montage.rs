//! International 10-10 electrode registry and geometric graphs over it.
//!
//! Positions live on the unit sphere with `x` pointing right, `y` toward the
//! nasion and `z` up through the vertex (Cz). The circle through Fpz, T7, Oz
//! and T8 is the equator. Along the midline each 10 % step is 22.5°; every
//! lateral row is the circle through its midline electrode and its two
//! equatorial end points (F7/F8, T7/T8, ...), divided into equal arcs. Right
//! hemisphere positions are exact mirror images (x negated) of the left.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub type Position = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MontageError {
    #[error("layout has no electrodes")]
    Empty,
    #[error("unknown electrode label `{label}`; nearest known labels: {}", suggestions.join(", "))]
    UnknownLabel { label: String, suggestions: Vec<String> },
    #[error("electrode `{0}` appears more than once")]
    DuplicateLabel(String),
    #[error("position for `{label}` has norm {norm}, expected 1")]
    BadPosition { label: String, norm: f64 },
    #[error("layout lists {names} names but {positions} positions")]
    PositionCount { names: usize, positions: usize },
    #[error("unknown layout preset `{0}` (known: np32, np16, np8, bcic2a, bcic2b, miku56)")]
    UnknownPreset(String),
    #[error("kernel bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("invalid layout document: {0}")]
    Json(String),
}

const STEP: f64 = std::f64::consts::PI / 8.0; // 22.5°, one 10 % step

struct Row {
    prefix: &'static str,
    /// Polar angle of the midline electrode, in steps; negative = posterior.
    midline_steps: i32,
    /// Angle of the equatorial end point from the nasion direction, degrees.
    equator_deg: f64,
    /// Names for lateral steps 1..=5 (odd/even numbering follows).
    lateral: [Option<&'static str>; 5],
}

const ROWS: &[Row] = &[
    Row { prefix: "AF", midline_steps: 3, equator_deg: 36.0, lateral: [Some("AF"), Some("AF"), Some("AF"), Some("AF"), None] },
    Row { prefix: "F", midline_steps: 2, equator_deg: 54.0, lateral: [Some("F"), Some("F"), Some("F"), Some("F"), Some("F")] },
    Row { prefix: "FC", midline_steps: 1, equator_deg: 72.0, lateral: [Some("FC"), Some("FC"), Some("FC"), Some("FT"), Some("FT")] },
    Row { prefix: "C", midline_steps: 0, equator_deg: 90.0, lateral: [Some("C"), Some("C"), Some("C"), Some("T"), Some("T")] },
    Row { prefix: "CP", midline_steps: -1, equator_deg: 108.0, lateral: [Some("CP"), Some("CP"), Some("CP"), Some("TP"), Some("TP")] },
    Row { prefix: "P", midline_steps: -2, equator_deg: 126.0, lateral: [Some("P"), Some("P"), Some("P"), Some("P"), Some("P")] },
    Row { prefix: "PO", midline_steps: -3, equator_deg: 144.0, lateral: [Some("PO"), Some("PO"), Some("PO"), Some("PO"), Some("PO")] },
];

fn sub(a: Position, b: Position) -> Position {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Position, b: Position) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Position, b: Position) -> Position {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale(a: Position, s: f64) -> Position {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: Position) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: Position) -> Position {
    scale(a, 1.0 / norm(a))
}

pub fn distance(a: Position, b: Position) -> f64 {
    norm(sub(a, b))
}

fn midline(steps: i32) -> Position {
    let theta = steps.unsigned_abs() as f64 * STEP;
    let y = if steps >= 0 { theta.sin() } else { -theta.sin() };
    [0.0, y, theta.cos()]
}

fn left_equator(deg: f64) -> Position {
    let psi = deg.to_radians();
    [-psi.sin(), psi.cos(), 0.0]
}

fn mirror(p: Position) -> Position {
    [-p[0], p[1], p[2]]
}

/// Points on the circle through `m` and `a` (and the mirror of `a`), at
/// `1..=steps_out` equal arc steps from `m`, where `a` sits at step 4.
fn arc_points(m: Position, a: Position, steps_out: usize) -> Vec<Position> {
    let b = mirror(a);
    let (u1, u2) = (sub(a, m), sub(b, m));
    let n = cross(u1, u2);
    let center = [
        m[0] + cross(sub(scale(u2, dot(u1, u1)), scale(u1, dot(u2, u2))), n)[0] / (2.0 * dot(n, n)),
        m[1] + cross(sub(scale(u2, dot(u1, u1)), scale(u1, dot(u2, u2))), n)[1] / (2.0 * dot(n, n)),
        m[2] + cross(sub(scale(u2, dot(u1, u1)), scale(u1, dot(u2, u2))), n)[2] / (2.0 * dot(n, n)),
    ];
    let radius = distance(m, center);
    let u = normalize(sub(m, center));
    let ac = sub(a, center);
    let v = normalize(sub(ac, scale(u, dot(ac, u))));
    let phi_a = dot(ac, v).atan2(dot(ac, u));
    (1..=steps_out)
        .map(|s| {
            let phi = phi_a * s as f64 / 4.0;
            let p = [
                center[0] + radius * (phi.cos() * u[0] + phi.sin() * v[0]),
                center[1] + radius * (phi.cos() * u[1] + phi.sin() * v[1]),
                center[2] + radius * (phi.cos() * u[2] + phi.sin() * v[2]),
            ];
            normalize(p)
        })
        .collect()
}

fn build_registry() -> BTreeMap<String, Position> {
    let mut reg = BTreeMap::new();
    let mut put = |name: String, p: Position| {
        reg.insert(name, p);
    };
    for row in ROWS {
        let m = midline(row.midline_steps);
        put(format!("{}z", row.prefix), m);
        let a = left_equator(row.equator_deg);
        let count = row.lateral.iter().filter(|l| l.is_some()).count();
        for (s, p) in arc_points(m, a, count).into_iter().enumerate() {
            let prefix = row.lateral[s].expect("lateral name");
            let left_num = 2 * s + 1;
            put(format!("{}{}", prefix, left_num), p);
            put(format!("{}{}", prefix, left_num + 1), mirror(p));
        }
    }
    // Frontal-pole and occipital rows lie on the equator.
    put("Fpz".into(), midline(4));
    put("Oz".into(), midline(-4));
    let fp1 = left_equator(18.0);
    put("Fp1".into(), fp1);
    put("Fp2".into(), mirror(fp1));
    let o1 = left_equator(162.0);
    put("O1".into(), o1);
    put("O2".into(), mirror(o1));
    put("Nz".into(), midline(5));
    put("Iz".into(), midline(-5));
    reg
}

fn registry() -> &'static BTreeMap<String, Position> {
    static REG: OnceLock<BTreeMap<String, Position>> = OnceLock::new();
    REG.get_or_init(build_registry)
}

const ALIASES: &[(&str, &str)] = &[("T3", "T7"), ("T4", "T8"), ("T5", "P7"), ("T6", "P8")];

/// Every canonical label in the registry, sorted.
pub fn known_labels() -> Vec<&'static str> {
    registry().keys().map(String::as_str).collect()
}

/// Canonical spelling and position of a label (case-insensitive; legacy
/// 10-20 names T3/T4/T5/T6 are accepted).
pub fn resolve_label(label: &str) -> Result<(&'static str, Position), MontageError> {
    let reg = registry();
    let target = ALIASES
        .iter()
        .find(|(old, _)| old.eq_ignore_ascii_case(label))
        .map_or(label, |(_, new)| new);
    reg.iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(target))
        .map(|(k, p)| (k.as_str(), *p))
        .ok_or_else(|| MontageError::UnknownLabel { label: label.to_string(), suggestions: suggest(label) })
}

fn suggest(label: &str) -> Vec<String> {
    let lower = label.to_ascii_lowercase();
    let mut scored: Vec<(usize, &String)> = registry()
        .keys()
        .map(|k| (strsim::levenshtein(&lower, &k.to_ascii_lowercase()), k))
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, k)| k.clone()).collect()
}

/// An ordered set of 10-10 electrodes with unit-sphere positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub name: String,
    pub names: Vec<String>,
    pub positions: Vec<Position>,
}

impl ElectrodeLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(label))
    }

    /// Reorders electrodes: new position `i` holds old electrode `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
            positions: order.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    /// Sub-layout with the given electrode indices.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let mut s = self.permuted(indices);
        s.name = name.into();
        s
    }

    /// Index of the sagittal mirror image of electrode `i` within this
    /// layout, if present.
    pub fn mirror_index(&self, i: usize) -> Option<usize> {
        let m = mirror(self.positions[i]);
        self.positions.iter().position(|p| distance(*p, m) < 1e-9)
    }

    /// Azimuthal-equidistant projection onto the plane, for plotting.
    pub fn projected_2d(&self) -> Vec<[f64; 2]> {
        self.positions
            .iter()
            .map(|p| {
                let theta = p[2].clamp(-1.0, 1.0).acos();
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if r < 1e-15 {
                    [0.0, 0.0]
                } else {
                    [theta * p[0] / r, theta * p[1] / r]
                }
            })
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self, MontageError> {
        let doc: LayoutDocument = serde_json::from_str(text).map_err(|e| MontageError::Json(e.to_string()))?;
        doc.resolve()
    }

    pub fn to_document(&self) -> LayoutDocument {
        LayoutDocument { name: Some(self.name.clone()), names: self.names.clone(), positions: Some(self.positions.clone()) }
    }
}

/// JSON form of a layout: positions are optional and resolved from the
/// registry when omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<Position>>,
}

impl LayoutDocument {
    pub fn resolve(&self) -> Result<ElectrodeLayout, MontageError> {
        let mut layout = lookup_layout(&self.names)?;
        if let Some(name) = &self.name {
            layout.name = name.clone();
        }
        if let Some(pos) = &self.positions {
            if pos.len() != layout.len() {
                return Err(MontageError::PositionCount { names: layout.len(), positions: pos.len() });
            }
            for (label, p) in layout.names.iter().zip(pos) {
                let n = norm(*p);
                if (n - 1.0).abs() > 1e-9 {
                    return Err(MontageError::BadPosition { label: label.clone(), norm: n });
                }
            }
            layout.positions = pos.clone();
        }
        Ok(layout)
    }
}

/// Builds a layout from labels, in the given order.
pub fn lookup_layout<S: AsRef<str>>(names: &[S]) -> Result<ElectrodeLayout, MontageError> {
    if names.is_empty() {
        return Err(MontageError::Empty);
    }
    let mut canon = Vec::with_capacity(names.len());
    let mut positions = Vec::with_capacity(names.len());
    for n in names {
        let (c, p) = resolve_label(n.as_ref())?;
        if canon.iter().any(|x: &String| x == c) {
            return Err(MontageError::DuplicateLabel(c.to_string()));
        }
        canon.push(c.to_string());
        positions.push(p);
    }
    Ok(ElectrodeLayout { name: "custom".into(), names: canon, positions })
}

pub const PRESET_NAMES: [&str; 6] = ["np32", "np16", "np8", "bcic2a", "bcic2b", "miku56"];

/// Electrode labels of the shipped layout presets.
pub fn preset_labels(name: &str) -> Result<&'static [&'static str], MontageError> {
    Ok(match name {
        "np32" => &[
            "Fp1", "Fp2", "AF3", "AF4", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3",
            "Cz", "C4", "T8", "CP5", "CP1", "CP2", "CP6", "P7", "P3", "Pz", "P4", "P8", "PO3", "PO4", "O1",
            "Oz", "O2",
        ],
        "np16" => &[
            "F3", "Fz", "F4", "FC5", "FC1", "FC2", "FC6", "C3", "Cz", "C4", "CP5", "CP1", "CP2", "CP6", "P3",
            "P4",
        ],
        "np8" => &["FC1", "FC2", "C3", "Cz", "C4", "CP1", "CP2", "Pz"],
        "bcic2a" => &[
            "Fz", "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP3", "CP1",
            "CPz", "CP2", "CP4", "P1", "Pz", "P2", "POz",
        ],
        "bcic2b" => &["C3", "Cz", "C4"],
        "miku56" => &[
            "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4",
            "T8", "TP9", "CP5", "CP1", "CP2", "CP6", "TP10", "P7", "P3", "Pz", "P4", "P8", "PO9", "O1", "Oz",
            "O2", "PO10", "FC3", "FC4", "C5", "C1", "C2", "C6", "CP3", "CPz", "CP4", "P1", "P2", "POz", "FT9",
            "TP7", "FT10", "TP8", "F9", "F10", "AF7", "AF3", "AF4", "AF8", "PO3", "PO4",
        ],
        other => return Err(MontageError::UnknownPreset(other.to_string())),
    })
}

pub fn preset(name: &str) -> Result<ElectrodeLayout, MontageError> {
    let mut layout = lookup_layout(preset_labels(name)?)?;
    layout.name = name.to_string();
    Ok(layout)
}

/// Dense Gaussian-kernel adjacency over electrode distances.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub sigma: f64,
    pub weights: Tensor,
}

impl AdjacencyMatrix {
    pub fn size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights.data()[i * self.size() + j]
    }
}

pub const DEFAULT_SIGMA: f64 = 0.5;

/// `A[i,j] = exp(-d(i,j)² / (2σ²))` with an exact unit diagonal. Weights
/// that would underflow are held at the smallest positive float so every
/// entry stays in `(0, 1]`.
pub fn gaussian_adjacency(layout: &ElectrodeLayout, sigma: f64) -> Result<AdjacencyMatrix, MontageError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MontageError::Bandwidth(sigma));
    }
    let n = layout.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = if i == j {
                1.0
            } else {
                let d = distance(layout.positions[i], layout.positions[j]);
                (-(d * d) / (2.0 * sigma * sigma)).exp().max(f64::MIN_POSITIVE)
            };
        }
    }
    let weights = Tensor::new(vec![n, n], w).map_err(|e| MontageError::Json(e.to_string()))?;
    Ok(AdjacencyMatrix { sigma, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cz_is_vertex() {
        let l = lookup_layout(&["Cz"]).unwrap();
        assert_eq!(l.positions[0], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn c3_c4_mirror() {
        let l = lookup_layout(&["C3", "C4"]).unwrap();
        let (a, b) = (l.positions[0], l.positions[1]);
        assert!(a[0] < 0.0);
        assert!((a[0] + b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9 && (a[2] - b[2]).abs() < 1e-9);
    }

    #[test]
    fn np32_distinct_unit_vectors() {
        let l = preset("np32").unwrap();
        assert_eq!(l.len(), 32);
        for (i, p) in l.positions.iter().enumerate() {
            assert!((norm(*p) - 1.0).abs() < 1e-9);
            for q in &l.positions[i + 1..] {
                assert!(distance(*p, *q) > 1e-3);
            }
        }
    }

    #[test]
    fn preset_sizes() {
        let sizes: Vec<_> = PRESET_NAMES.iter().map(|n| preset(n).unwrap().len()).collect();
        assert_eq!(sizes, vec![32, 16, 8, 22, 3, 56]);
    }

    #[test]
    fn registry_geometry_is_sane() {
        let reg = registry();
        assert!(reg.len() > 80);
        for (name, p) in reg {
            assert!((norm(*p) - 1.0).abs() < 1e-12, "{name}");
        }
        // left hemisphere is x<0, frontal is y>0
        assert!(reg["C3"][0] < 0.0 && reg["F3"][1] > 0.0 && reg["P3"][1] < 0.0);
        // T7 lies on the equator at the left pole
        let t7 = reg["T7"];
        assert!((t7[0] + 1.0).abs() < 1e-12 && t7[2].abs() < 1e-12);
        // ring below the equator
        assert!(reg["T9"][2] < 0.0);
        // C3 halfway along the coronal arc
        assert!((reg["C3"][2] - std::f64::consts::FRAC_PI_4.cos()).abs() < 1e-12);
    }

    #[test]
    fn unknown_label_suggests_neighbours() {
        let err = lookup_layout(&["Cx3"]).unwrap_err();
        match &err {
            MontageError::UnknownLabel { label, suggestions } => {
                assert_eq!(label, "Cx3");
                assert!(suggestions.iter().any(|s| s == "C3"), "{suggestions:?}");
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("Cx3"));
    }

    #[test]
    fn empty_and_duplicate_rejected() {
        assert_eq!(lookup_layout::<&str>(&[]).unwrap_err(), MontageError::Empty);
        assert!(matches!(lookup_layout(&["C3", "c3"]), Err(MontageError::DuplicateLabel(_))));
    }

    #[test]
    fn legacy_aliases() {
        let l = lookup_layout(&["T3", "T6"]).unwrap();
        assert_eq!(l.names, vec!["T7", "P8"]);
    }

    #[test]
    fn adjacency_examples() {
        let l = lookup_layout(&["C3", "Cz", "Pz"]).unwrap();
        let a = gaussian_adjacency(&l, 0.5).unwrap();
        for i in 0..3 {
            assert_eq!(a.get(i, i), 1.0);
            for j in 0..3 {
                if i != j {
                    let d = distance(l.positions[i], l.positions[j]);
                    let want = (-(d * d) / (2.0 * 0.25)).exp();
                    assert!((a.get(i, j) - want).abs() < 1e-12);
                }
            }
        }
        // d = sigma gives exp(-1/2)
        let d = distance(l.positions[0], l.positions[1]);
        let a = gaussian_adjacency(&l, d).unwrap();
        assert!((a.get(0, 1) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((a.get(0, 1) - 0.6065).abs() < 1e-4);
        assert!(gaussian_adjacency(&l, 0.0).is_err());
    }

    #[test]
    fn json_layouts() {
        let l = ElectrodeLayout::from_json(r#"{"names": ["C3", "Cz"]}"#).unwrap();
        assert_eq!(l.positions[1], [0.0, 0.0, 1.0]);
        let l = ElectrodeLayout::from_json(r#"{"name": "mine", "names": ["C3"], "positions": [[0, 1, 0]]}"#).unwrap();
        assert_eq!(l.name, "mine");
        assert_eq!(l.positions[0], [0.0, 1.0, 0.0]);
        assert!(matches!(
            ElectrodeLayout::from_json(r#"{"names": ["C3"], "positions": [[0, 2, 0]]}"#),
            Err(MontageError::BadPosition { .. })
        ));
        assert!(ElectrodeLayout::from_json(r#"{"names": ["C3"], "extra": 1}"#).is_err());
        let back = ElectrodeLayout::from_json(&serde_json::to_string(&preset("np8").unwrap().to_document()).unwrap()).unwrap();
        assert_eq!(back, preset("np8").unwrap());
    }

    #[test]
    fn projection_centres_vertex() {
        let l = lookup_layout(&["Cz", "T7"]).unwrap();
        let p = l.projected_2d();
        assert_eq!(p[0], [0.0, 0.0]);
        assert!((p[1][0] + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    fn full_layout() -> ElectrodeLayout {
        preset("miku56").unwrap()
    }

    proptest! {
        #[test]
        fn adjacency_symmetric_unit_diagonal(sigma in 0.05f64..3.0) {
            let l = full_layout();
            let a = gaussian_adjacency(&l, sigma).unwrap();
            for i in 0..l.len() {
                prop_assert_eq!(a.get(i, i), 1.0);
                for j in 0..l.len() {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    prop_assert!(a.get(i, j) > 0.0 && a.get(i, j) <= 1.0);
                }
            }
        }

        #[test]
        fn adjacency_monotone_in_distance(sigma in 0.1f64..2.0, i in 0usize..56, j in 0usize..56, k in 0usize..56) {
            let l = full_layout();
            let a = gaussian_adjacency(&l, sigma).unwrap();
            let dij = distance(l.positions[i], l.positions[j]);
            let dik = distance(l.positions[i], l.positions[k]);
            if dij > dik + 1e-9 && a.get(i, k) > 1e-300 {
                prop_assert!(a.get(i, j) < a.get(i, k));
            }
        }

        #[test]
        fn adjacency_subset_consistent(sigma in 0.1f64..2.0, picks in prop::collection::btree_set(0usize..56, 1..12)) {
            let l = full_layout();
            let full = gaussian_adjacency(&l, sigma).unwrap();
            let idx: Vec<_> = picks.into_iter().collect();
            let sub = gaussian_adjacency(&l.subset(&idx, "sub"), sigma).unwrap();
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    prop_assert_eq!(sub.get(a, b), full.get(i, j));
                }
            }
        }
    }
}
