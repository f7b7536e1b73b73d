use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::Thresholds;

/// Which mergers are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// One mask entry per rank component of each adapter.
    #[default]
    RankMask,
    /// One mask entry per output unit of each adapter.
    OutputMask,
}

impl BaselineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMode::RankMask => "rank-mask",
            BaselineMode::OutputMask => "output-mask",
        }
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank-mask" => Ok(BaselineMode::RankMask),
            "output-mask" => Ok(BaselineMode::OutputMask),
            other => Err(Error::validation(format!(
                "unknown baseline mode {other:?} (expected rank-mask or output-mask)"
            ))),
        }
    }
}

/// Adam moment coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Hyperparameters of mask training. Every field has a default, so `{}` is
/// a valid configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub lambda_layer_prior: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub probe_count: usize,
    pub mask_clamp: [f64; 2],
    pub binarize_threshold: f64,
    pub adam: AdamConfig,
    pub baseline_mode: BaselineMode,
    pub similarity_coefficient: f64,
    pub thresholds: Thresholds,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            lambda_layer_prior: 0.1,
            learning_rate: 0.01,
            steps: 100,
            seed: 0,
            probe_count: 256,
            mask_clamp: [0.0, 1.0],
            binarize_threshold: 0.05,
            adam: AdamConfig::default(),
            baseline_mode: BaselineMode::RankMask,
            similarity_coefficient: 0.01,
            thresholds: Thresholds::default(),
        }
    }
}

impl MergeConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, why: &str| Err(Error::validation(format!("config field {field}: {why}")));
        if !(self.lambda_layer_prior.is_finite() && self.lambda_layer_prior >= 0.0) {
            return bad("lambda_layer_prior", "must be finite and >= 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be finite and > 0");
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.probe_count == 0 {
            return bad("probe_count", "must be at least 1");
        }
        let [lo, hi] = self.mask_clamp;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad("mask_clamp", "must satisfy 0 <= lo < hi <= 1");
        }
        if !(0.0..1.0).contains(&self.binarize_threshold) {
            return bad("binarize_threshold", "must lie in [0, 1)");
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return bad("adam", "betas must lie in [0, 1)");
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return bad("adam.epsilon", "must be finite and > 0");
        }
        if !(self.similarity_coefficient.is_finite() && self.similarity_coefficient >= 0.0) {
            return bad("similarity_coefficient", "must be finite and >= 0");
        }
        self.thresholds
            .validate()
            .map_err(|e| Error::validation(format!("config field thresholds: {e}")))
    }

    /// Parses and validates a JSON configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: MergeConfig = crate::io::parse_json(text, "merge config")?;
        config.validate()?;
        Ok(config)
    }
}
