//! Adapter and mask data model, and the masking and merging arithmetic.
//!
//! A layer stores the factors `A` (`d_out × r`) and `B` (`r × d_in`) together
//! with the conventional `alpha` scale, so that `ΔW = (alpha / r) · A · B`.
//! A rank mask `m` of length `r` sits between the factors:
//! `ΔW_rank = (alpha / r) · A · diag(m) · B`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// One low-rank adapter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    name: String,
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraLayer {
    pub fn new(name: impl Into<String>, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::validation("layer name must not be empty"));
        }
        if a.cols() != b.rows() {
            return Err(Error::validation(format!(
                "layer {name}: A is {}x{} but B is {}x{} (inner ranks differ)",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::validation(format!(
                "layer {name}: alpha must be positive and finite, got {alpha}"
            )));
        }
        Ok(Self { name, a, b, alpha })
    }

    /// Layer with `alpha = rank`, i.e. unit scale.
    pub fn unscaled(name: impl Into<String>, a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.cols() as f64;
        Self::new(name, a, b, rank)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }

    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Same delta, re-expressed with `alpha = rank` by folding the scale into `A`.
    pub fn normalized(&self) -> LoraLayer {
        if self.scale() == 1.0 {
            return self.clone();
        }
        LoraLayer {
            name: self.name.clone(),
            a: self.a.scale(self.scale()),
            b: self.b.clone(),
            alpha: self.rank() as f64,
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// What an adapter set represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Content,
    Style,
    Merged,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Content => "content",
            Role::Style => "style",
            Role::Merged => "merged",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Role::Content),
            "style" => Ok(Role::Style),
            "merged" => Ok(Role::Merged),
            other => Err(Error::validation(format!(
                "unknown role {other:?} (expected content, style or merged)"
            ))),
        }
    }
}

/// Named collection of adapter layers, ordered by layer name.
///
/// Merged sets may also carry the trained mergers of each layer so that
/// rank analysis can be run on the written file.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub role: Role,
    layers: BTreeMap<String, LoraLayer>,
    mergers: BTreeMap<String, MaskPair>,
}

impl AdapterSet {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            layers: BTreeMap::new(),
            mergers: BTreeMap::new(),
        }
    }

    pub fn from_layers(role: Role, layers: impl IntoIterator<Item = LoraLayer>) -> Result<Self> {
        let mut set = Self::new(role);
        for layer in layers {
            set.insert(layer)?;
        }
        Ok(set)
    }

    /// Adds a layer; names must be unique.
    pub fn insert(&mut self, layer: LoraLayer) -> Result<()> {
        if self.layers.contains_key(layer.name()) {
            return Err(Error::validation(format!(
                "duplicate layer name {}",
                layer.name()
            )));
        }
        self.layers.insert(layer.name().to_string(), layer);
        Ok(())
    }

    /// Attaches the mergers used to build layer `name`.
    pub fn set_mergers(&mut self, name: &str, masks: MaskPair) -> Result<()> {
        if !self.layers.contains_key(name) {
            return Err(Error::validation(format!(
                "mergers given for unknown layer {name}"
            )));
        }
        self.mergers.insert(name.to_string(), masks);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&LoraLayer> {
        self.layers.get(name)
    }

    pub fn layers(&self) -> impl Iterator<Item = &LoraLayer> {
        self.layers.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn mergers(&self) -> &BTreeMap<String, MaskPair> {
        &self.mergers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Relaxed per-rank merger weights, each entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MaskVector(Vec<f64>);

impl MaskVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "mask entry {i} is {} (must lie in [0, 1])",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// One-hot mask `e_k`.
    pub fn one_hot(len: usize, k: usize) -> Self {
        let mut v = vec![0.0; len];
        v[k] = 1.0;
        Self(v)
    }

    /// Clamps every entry into `[lo, hi] ⊆ [0, 1]`; NaN becomes `lo`.
    pub fn clamped(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64) -> Self {
        let lo = lo.max(0.0);
        let hi = hi.min(1.0);
        Self(
            values
                .into_iter()
                .map(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> f64 {
        crate::linalg::l1_norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for MaskVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<MaskVector> for Vec<f64> {
    fn from(m: MaskVector) -> Self {
        m.0
    }
}

/// Content and style mergers `(m_c, m_s)` of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub content: MaskVector,
    pub style: MaskVector,
}

impl MaskPair {
    pub fn new(content: MaskVector, style: MaskVector) -> Self {
        Self { content, style }
    }

    pub fn ones(content_len: usize, style_len: usize) -> Self {
        Self::new(MaskVector::ones(content_len), MaskVector::ones(style_len))
    }
}

fn masked_product(layer: &LoraLayer, mask: &[f64]) -> Result<Matrix> {
    let scaled = layer.a.scale_columns(mask)?;
    Ok(scaled.matmul(&layer.b)?.scale(layer.scale()))
}

/// `ΔW = (alpha / r) · A · B`.
pub fn delta_weight(layer: &LoraLayer) -> Result<Matrix> {
    masked_product(layer, &vec![1.0; layer.rank()])
}

/// `(alpha / r) · A · diag(m) · B`.
pub fn apply_rank_mask(layer: &LoraLayer, m: &MaskVector) -> Result<Matrix> {
    if m.len() != layer.rank() {
        return Err(Error::validation(format!(
            "layer {}: rank mask has length {} but the layer has rank {}",
            layer.name(),
            m.len(),
            layer.rank()
        )));
    }
    masked_product(layer, m.values())
}

/// `diag(m_out) · ΔW`: rows with a zero mask entry are removed.
pub fn apply_output_mask(layer: &LoraLayer, m_out: &[f64]) -> Result<Matrix> {
    if m_out.len() != layer.d_out() {
        return Err(Error::validation(format!(
            "layer {}: output mask has length {} but d_out is {}",
            layer.name(),
            m_out.len(),
            layer.d_out()
        )));
    }
    delta_weight(layer)?.scale_rows(m_out)
}

fn check_same_shape(content: &LoraLayer, style: &LoraLayer) -> Result<()> {
    if (content.d_out(), content.d_in()) != (style.d_out(), style.d_in()) {
        return Err(Error::validation(format!(
            "layer {}: content delta is {}x{} but style delta ({}) is {}x{}",
            content.name(),
            content.d_out(),
            content.d_in(),
            style.name(),
            style.d_out(),
            style.d_in()
        )));
    }
    Ok(())
}

/// `apply_rank_mask(content, m_c) + apply_rank_mask(style, m_s)`.
pub fn merged_delta(content: &LoraLayer, style: &LoraLayer, masks: &MaskPair) -> Result<Matrix> {
    check_same_shape(content, style)?;
    apply_rank_mask(content, &masks.content)?.add(&apply_rank_mask(style, &masks.style)?)
}

/// Materializes the rank-masked merge as a single adapter layer:
/// `A = [s_c·A_c·diag(m_c) | s_s·A_s·diag(m_s)]`, `B = [B_c; B_s]`, unit scale.
pub fn fold_rank_masks(
    content: &LoraLayer,
    style: &LoraLayer,
    masks: &MaskPair,
) -> Result<LoraLayer> {
    check_same_shape(content, style)?;
    for (layer, mask, which) in [
        (content, &masks.content, "content"),
        (style, &masks.style, "style"),
    ] {
        if mask.len() != layer.rank() {
            return Err(Error::validation(format!(
                "layer {}: {which} mask has length {} but rank is {}",
                layer.name(),
                mask.len(),
                layer.rank()
            )));
        }
    }
    let scaled = |layer: &LoraLayer, mask: &MaskVector| -> Result<Matrix> {
        let factors: Vec<f64> = mask.values().iter().map(|m| m * layer.scale()).collect();
        layer.a.scale_columns(&factors)
    };
    let a = scaled(content, &masks.content)?.hstack(&scaled(style, &masks.style)?)?;
    let b = content.b.vstack(&style.b)?;
    LoraLayer::unscaled(content.name(), a, b)
}

/// Materializes an output-masked merge:
/// `A = [s_c·diag(n_c)·A_c | s_s·diag(n_s)·A_s]`, `B = [B_c; B_s]`, unit scale.
pub fn fold_output_masks(
    content: &LoraLayer,
    style: &LoraLayer,
    content_out: &[f64],
    style_out: &[f64],
) -> Result<LoraLayer> {
    check_same_shape(content, style)?;
    let scaled = |layer: &LoraLayer, mask: &[f64]| -> Result<Matrix> {
        let factors: Vec<f64> = mask.iter().map(|m| m * layer.scale()).collect();
        layer.a.scale_rows(&factors)
    };
    let a = scaled(content, content_out)?.hstack(&scaled(style, style_out)?)?;
    let b = content.b.vstack(&style.b)?;
    LoraLayer::unscaled(content.name(), a, b)
}

/// Weighted arithmetic merge `Σ_i w_i · ΔW_i` of several adapter sets.
///
/// Factors are concatenated along the rank dimension, so the result is still
/// an adapter: its rank is `Σ r_i` and its scale is one.
pub fn naive_merge(adapters: &[AdapterSet], weights: &[f64]) -> Result<AdapterSet> {
    if adapters.is_empty() {
        return Err(Error::validation(
            "naive merge needs at least one adapter set",
        ));
    }
    if adapters.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} adapter sets but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::validation(format!("merge weight {w} is not finite")));
    }
    let inventory: std::collections::BTreeSet<&str> =
        adapters.iter().flat_map(|s| s.names()).collect();
    let mut problems = Vec::new();
    for (i, set) in adapters.iter().enumerate() {
        let missing: Vec<&str> = inventory
            .iter()
            .copied()
            .filter(|n| set.get(n).is_none())
            .collect();
        if !missing.is_empty() {
            problems.push(format!("set {i} is missing {}", missing.join(", ")));
        }
    }
    if !problems.is_empty() {
        return Err(Error::validation(format!(
            "adapter inventories differ: {}",
            problems.join("; ")
        )));
    }

    let mut merged = AdapterSet::new(Role::Merged);
    for name in inventory {
        let layers: Vec<&LoraLayer> = adapters.iter().map(|s| &s.layers[name]).collect();
        let first = layers[0];
        for other in &layers[1..] {
            check_same_shape(first, other)?;
        }
        let mut a = first.a.scale(weights[0] * first.scale());
        let mut b = first.b.clone();
        for (layer, &w) in layers.iter().zip(weights).skip(1) {
            a = a.hstack(&layer.a.scale(w * layer.scale()))?;
            b = b.vstack(&layer.b)?;
        }
        merged.insert(LoraLayer::unscaled(name, a, b)?)?;
    }
    Ok(merged)
}

/// Maps entries to `{0, 1}` by the strict comparison `m_i > threshold`.
pub fn binarize(m: &MaskVector, threshold: f64) -> MaskVector {
    MaskVector(
        m.values()
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Number of entries strictly above `threshold`.
pub fn mask_rank(m: &MaskVector, threshold: f64) -> usize {
    m.values().iter().filter(|&&v| v > threshold).count()
}

/// Rejects thresholds outside `[0, 1)`.
pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::validation(format!(
            "threshold {threshold} must lie in [0, 1)"
        )));
    }
    Ok(())
}
