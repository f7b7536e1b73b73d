//! Layer priors: which UNet layers lean towards content or style, the
//! rank-constraint penalty built on that split, and prior-informed merger
//! initialization.
//!
//! Low-resolution layers (< 32) are content-dominant, higher-resolution layers
//! are style-dominant. In a content-dominant layer the penalty is
//! `‖m_c‖₁ + λ·max(0, ‖m_s‖_* − ‖m_c‖_*)`; style-dominant layers swap roles.
//! The mergers are diagonal, so their nuclear norms equal the L1 norms of the
//! mask vectors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{mask_rank, MaskPair, MaskVector};
use crate::random::{rng_from_seed, uniform_open};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    ContentDominant,
    StyleDominant,
    Neutral,
}

impl LayerClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerClass::ContentDominant => "content_dominant",
            LayerClass::StyleDominant => "style_dominant",
            LayerClass::Neutral => "neutral",
        }
    }

    /// Parses the short override spelling used in manifests.
    pub fn from_override(s: &str) -> Option<Self> {
        match s {
            "content" => Some(LayerClass::ContentDominant),
            "style" => Some(LayerClass::StyleDominant),
            "neutral" => Some(LayerClass::Neutral),
            _ => None,
        }
    }
}

impl fmt::Display for LayerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resolution threshold plus a name-pattern fallback table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionRule {
    /// Resolutions strictly below this are content-dominant.
    pub content_threshold: u32,
    /// Substring patterns checked in order; the first hit wins.
    pub patterns: Vec<(String, LayerClass)>,
}

impl Default for ResolutionRule {
    fn default() -> Self {
        let p = |s: &str, c| (s.to_string(), c);
        Self {
            content_threshold: 32,
            patterns: vec![
                p("up_blocks.2", LayerClass::ContentDominant),
                p("down_blocks.2", LayerClass::ContentDominant),
                p("mid_block", LayerClass::ContentDominant),
                p("up_blocks.1", LayerClass::StyleDominant),
                p("down_blocks.1", LayerClass::StyleDominant),
            ],
        }
    }
}

impl ResolutionRule {
    /// An explicit resolution wins; otherwise the pattern table; otherwise
    /// [`LayerClass::Neutral`].
    pub fn classify(&self, name: &str, resolution: Option<u32>) -> LayerClass {
        if let Some(res) = resolution {
            return if res < self.content_threshold {
                LayerClass::ContentDominant
            } else {
                LayerClass::StyleDominant
            };
        }
        self.patterns
            .iter()
            .find(|(pat, _)| name.contains(pat.as_str()))
            .map(|&(_, class)| class)
            .unwrap_or(LayerClass::Neutral)
    }
}

/// Classifies with the default rule.
pub fn classify_layer(name: &str, resolution: Option<u32>) -> LayerClass {
    ResolutionRule::default().classify(name, resolution)
}

/// Initialization thresholds `T_content` and `T_style`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub t_content: f64,
    pub t_style: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_content: 0.1,
            t_style: 0.0,
        }
    }
}

impl Thresholds {
    pub fn new(t_content: f64, t_style: f64) -> Result<Self> {
        let t = Self { t_content, t_style };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_content", self.t_content), ("t_style", self.t_style)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "{name} = {v} must lie in [0, 1]"
                )));
            }
        }
        if self.t_style > self.t_content {
            return Err(Error::validation(format!(
                "t_style ({}) must not exceed t_content ({})",
                self.t_style, self.t_content
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::validation(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// Returns `(dominant, other)` merger views for a class, or `None` when neutral.
fn roles<'a>(class: LayerClass, m_c: &'a [f64], m_s: &'a [f64]) -> Option<(&'a [f64], &'a [f64])> {
    match class {
        LayerClass::ContentDominant => Some((m_c, m_s)),
        LayerClass::StyleDominant => Some((m_s, m_c)),
        LayerClass::Neutral => None,
    }
}

fn l1(v: &[f64]) -> f64 {
    crate::linalg::l1_norm(v)
}

/// Layer-prior penalty for one layer.
pub fn layer_prior_loss(
    m_c: &MaskVector,
    m_s: &MaskVector,
    lambda: f64,
    class: LayerClass,
) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(prior_loss_raw(m_c.values(), m_s.values(), lambda, class))
}

pub(crate) fn prior_loss_raw(m_c: &[f64], m_s: &[f64], lambda: f64, class: LayerClass) -> f64 {
    match roles(class, m_c, m_s) {
        None => 0.0,
        Some((dominant, other)) => {
            let hinge = (l1(other) - l1(dominant)).max(0.0);
            l1(dominant) + lambda * hinge
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`layer_prior_loss`] with `sign(0) = 0`. The hinge counts as
/// active only when the non-dominant mass strictly exceeds the dominant one.
pub fn layer_prior_subgradient(
    m_c: &MaskVector,
    m_s: &MaskVector,
    lambda: f64,
    class: LayerClass,
) -> (Vec<f64>, Vec<f64>) {
    prior_subgradient_raw(m_c.values(), m_s.values(), lambda, class)
}

pub(crate) fn prior_subgradient_raw(
    m_c: &[f64],
    m_s: &[f64],
    lambda: f64,
    class: LayerClass,
) -> (Vec<f64>, Vec<f64>) {
    let Some((dominant, other)) = roles(class, m_c, m_s) else {
        return (vec![0.0; m_c.len()], vec![0.0; m_s.len()]);
    };
    let active = l1(other) > l1(dominant);
    let dominant_weight = if active { 1.0 - lambda } else { 1.0 };
    let other_weight = if active { lambda } else { 0.0 };
    let g_dom: Vec<f64> = dominant
        .iter()
        .map(|&v| dominant_weight * sign(v))
        .collect();
    let g_other: Vec<f64> = other.iter().map(|&v| other_weight * sign(v)).collect();
    match class {
        LayerClass::ContentDominant => (g_dom, g_other),
        _ => (g_other, g_dom),
    }
}

fn indicator(v: &[f64], threshold: f64) -> MaskVector {
    MaskVector::new(
        v.iter()
            .map(|&x| if x > threshold { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("indicator values are 0 or 1")
}

/// Draws `V ~ U(0,1)^len` and normalizes it to unit Euclidean norm.
fn normalized_uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let v = uniform_open(len, &mut rng);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Prior-informed initialization of a layer's mergers.
///
/// A single normalized uniform vector `V'` is shared by both masks. In a
/// content-dominant layer `m_c = 1(V' > t_style)` and `m_s = 1(V' > t_content)`;
/// style-dominant layers swap the thresholds; neutral layers start at all ones.
pub fn init_masks(class: LayerClass, rank: usize, thresholds: Thresholds, seed: u64) -> MaskPair {
    init_masks_uneven(class, rank, rank, thresholds, seed)
}

/// [`init_masks`] for adapters of different ranks: `V'` is drawn at the larger
/// rank and each mask uses its own prefix.
pub fn init_masks_uneven(
    class: LayerClass,
    content_rank: usize,
    style_rank: usize,
    thresholds: Thresholds,
    seed: u64,
) -> MaskPair {
    let (t_c, t_s) = match class {
        LayerClass::Neutral => return MaskPair::ones(content_rank, style_rank),
        LayerClass::ContentDominant => (thresholds.t_style, thresholds.t_content),
        LayerClass::StyleDominant => (thresholds.t_content, thresholds.t_style),
    };
    let v = normalized_uniform(content_rank.max(style_rank), seed);
    MaskPair::new(
        indicator(&v[..content_rank], t_c),
        indicator(&v[..style_rank], t_s),
    )
}

/// Frequencies of binarized mask ranks.
pub type Histogram = BTreeMap<usize, usize>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleHistograms {
    pub content_merger: Histogram,
    pub style_merger: Histogram,
    pub layers: usize,
    pub mean_content_rank: f64,
    pub mean_style_rank: f64,
}

impl RoleHistograms {
    fn add(&mut self, rank_c: usize, rank_s: usize) {
        *self.content_merger.entry(rank_c).or_default() += 1;
        *self.style_merger.entry(rank_s).or_default() += 1;
        let n = self.layers as f64;
        self.mean_content_rank = (self.mean_content_rank * n + rank_c as f64) / (n + 1.0);
        self.mean_style_rank = (self.mean_style_rank * n + rank_s as f64) / (n + 1.0);
        self.layers += 1;
    }
}

/// Rank histograms for content- and style-dominant layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankHistograms {
    pub threshold: f64,
    pub content_dominant: RoleHistograms,
    pub style_dominant: RoleHistograms,
}

/// Builds the per-class histograms of `mask_rank` values. Neutral layers are
/// not counted.
pub fn rank_histogram(
    masks: &BTreeMap<String, MaskPair>,
    classes: &BTreeMap<String, LayerClass>,
    threshold: f64,
) -> Result<RankHistograms> {
    let missing: Vec<&str> = masks
        .keys()
        .filter(|k| !classes.contains_key(*k))
        .chain(classes.keys().filter(|k| !masks.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "mask and class maps disagree on layers: {}",
            missing.join(", ")
        )));
    }
    let mut out = RankHistograms {
        threshold,
        ..Default::default()
    };
    for (name, pair) in masks {
        let rc = mask_rank(&pair.content, threshold);
        let rs = mask_rank(&pair.style, threshold);
        match classes[name] {
            LayerClass::ContentDominant => out.content_dominant.add(rc, rs),
            LayerClass::StyleDominant => out.style_dominant.add(rc, rs),
            LayerClass::Neutral => {}
        }
    }
    Ok(out)
}
