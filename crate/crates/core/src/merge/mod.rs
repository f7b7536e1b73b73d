//! Mask training and adapter merging.
//!
//! [`merge_adapters`] trains one pair of mergers per shared layer, folds them
//! into a single adapter per layer and returns a [`MergeReport`]. Layers are
//! independent and may train concurrently; the report is keyed by layer name
//! so completion order never shows in the output.

mod config;
mod objective;
mod train;

pub use config::{AdamConfig, BaselineMode, MergeConfig};
pub use objective::{
    alignment_loss, cosine, output_alignment_loss, total_gradient, total_loss, OutputObjective,
    ProbeSet, RankObjective,
};
pub use train::{train_masks, train_output_masks, TrainingRecord, MAX_BACKTRACKS};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::LayerManifest;
use crate::lora::{
    fold_output_masks, fold_rank_masks, naive_merge, AdapterSet, LoraLayer, MaskPair, Role,
};
use crate::parallel::{map_slice, Execution};
use crate::prior::{rank_histogram, LayerClass, RankHistograms, ResolutionRule};

pub const MERGE_REPORT_KIND: &str = "merge-report";

/// Where a merged layer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerStatus {
    Trained,
    /// Present only in the content set.
    CopiedContent,
    /// Present only in the style set.
    CopiedStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub class: LayerClass,
    pub status: LayerStatus,
    pub trainable_parameters: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub kind: String,
    pub format_version: String,
    pub mode: BaselineMode,
    pub config: MergeConfig,
    pub layers: Vec<LayerRecord>,
    pub trained_layers: usize,
    pub copied_layers: usize,
    pub trainable_parameters: u64,
    /// Rank histograms of the trained rank-mode mergers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histograms: Option<RankHistograms>,
    /// Only filled in on request, since it would break byte-identical reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_seconds: Option<f64>,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: MergeReport = crate::io::parse_json(text, "merge report")?;
        if report.kind != MERGE_REPORT_KIND {
            return Err(Error::validation(format!(
                "not a merge report (kind {:?})",
                report.kind
            )));
        }
        Ok(report)
    }
}

/// Trainable merger entries for one layer pair.
pub fn trainable_parameters(mode: BaselineMode, content: &LoraLayer, style: &LoraLayer) -> u64 {
    match mode {
        BaselineMode::RankMask => (content.rank() + style.rank()) as u64,
        BaselineMode::OutputMask => (content.d_out() + style.d_out()) as u64,
    }
}

/// Parameter count from dimensions alone: `2·r` per layer for rank masks,
/// `2·d_out` for output masks.
pub fn parameter_count(mode: BaselineMode, d_outs: &[usize], rank: usize) -> u64 {
    match mode {
        BaselineMode::RankMask => 2 * rank as u64 * d_outs.len() as u64,
        BaselineMode::OutputMask => d_outs.iter().map(|&d| 2 * d as u64).sum(),
    }
}

struct Trained {
    layer: LoraLayer,
    masks: MaskPair,
    record: TrainingRecord,
}

fn train_one(
    content: &LoraLayer,
    style: &LoraLayer,
    class: LayerClass,
    config: &MergeConfig,
) -> Result<Trained> {
    match config.baseline_mode {
        BaselineMode::RankMask => {
            let (masks, record) = train_masks(content, style, class, config)?;
            let layer = fold_rank_masks(content, style, &masks)?;
            Ok(Trained {
                layer,
                masks,
                record,
            })
        }
        BaselineMode::OutputMask => {
            let (masks, record) = train_output_masks(content, style, config)?;
            let layer =
                fold_output_masks(content, style, masks.content.values(), masks.style.values())?;
            Ok(Trained {
                layer,
                masks,
                record,
            })
        }
    }
}

/// Merges a content and a style adapter set.
///
/// Layers present in both sets are trained; layers present in only one are
/// copied through unchanged and flagged. An empty style set therefore yields
/// the content set. Two non-empty sets without a common layer are rejected.
pub fn merge_adapters(
    content: &AdapterSet,
    style: &AdapterSet,
    manifest: &LayerManifest,
    config: &MergeConfig,
    exec: Execution,
) -> Result<(AdapterSet, MergeReport)> {
    config.validate()?;
    let shared: Vec<(&LoraLayer, &LoraLayer)> = content
        .layers()
        .filter_map(|c| style.get(c.name()).map(|s| (c, s)))
        .collect();
    if shared.is_empty() && !content.is_empty() && !style.is_empty() {
        return Err(Error::validation(
            "content and style adapters share no layer names; nothing to merge",
        ));
    }
    let rule = ResolutionRule::default();
    let class_of = |name: &str| manifest.classify(name, &rule);

    let trained = map_slice(exec, &shared, |(c, s)| {
        train_one(c, s, class_of(c.name()), config)
    });

    let mut merged = AdapterSet::new(Role::Merged);
    let mut records = BTreeMap::new();
    let mut trained_masks = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for ((c, s), result) in shared.iter().zip(trained) {
        let t = result?;
        let name = c.name().to_string();
        merged.insert(t.layer)?;
        merged.set_mergers(&name, t.masks.clone())?;
        let class = class_of(&name);
        records.insert(
            name.clone(),
            LayerRecord {
                name: name.clone(),
                class,
                status: LayerStatus::Trained,
                trainable_parameters: trainable_parameters(config.baseline_mode, c, s),
                training: Some(t.record),
            },
        );
        trained_masks.insert(name.clone(), t.masks);
        classes.insert(name, class);
    }
    for (set, status) in [
        (content, LayerStatus::CopiedContent),
        (style, LayerStatus::CopiedStyle),
    ] {
        for layer in set.layers() {
            if records.contains_key(layer.name()) {
                continue;
            }
            merged.insert(layer.clone())?;
            records.insert(
                layer.name().to_string(),
                LayerRecord {
                    name: layer.name().to_string(),
                    class: class_of(layer.name()),
                    status,
                    trainable_parameters: 0,
                    training: None,
                },
            );
        }
    }

    let histograms = match config.baseline_mode {
        BaselineMode::RankMask => Some(rank_histogram(
            &trained_masks,
            &classes,
            config.binarize_threshold,
        )?),
        BaselineMode::OutputMask => None,
    };
    let layers: Vec<LayerRecord> = records.into_values().collect();
    let trained_layers = layers
        .iter()
        .filter(|l| l.status == LayerStatus::Trained)
        .count();
    let report = MergeReport {
        kind: MERGE_REPORT_KIND.to_string(),
        format_version: crate::FORMAT_VERSION.to_string(),
        mode: config.baseline_mode,
        config: config.clone(),
        trained_layers,
        copied_layers: layers.len() - trained_layers,
        trainable_parameters: layers.iter().map(|l| l.trainable_parameters).sum(),
        layers,
        histograms,
        wall_time_seconds: None,
    };
    Ok((merged, report))
}

/// Weighted naive merge of already merged concept–style adapters; weights
/// default to `1/n` each.
pub fn multi_concept_merge(
    merged_sets: &[AdapterSet],
    alphas: Option<&[f64]>,
) -> Result<AdapterSet> {
    let n = merged_sets.len();
    let default;
    let weights = match alphas {
        Some(a) => a,
        None => {
            default = vec![1.0 / n.max(1) as f64; n];
            &default
        }
    };
    naive_merge(merged_sets, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, SyntheticSpec};
    use crate::lora::{delta_weight, merged_delta};

    fn sets(n: usize) -> (AdapterSet, AdapterSet) {
        let spec = SyntheticSpec::uniform(n, 12, 3);
        (
            generate_synthetic(&spec, 1).unwrap(),
            generate_synthetic(&spec.clone().with_role(Role::Style), 2).unwrap(),
        )
    }

    fn quick() -> MergeConfig {
        MergeConfig {
            steps: 10,
            probe_count: 16,
            ..MergeConfig::default()
        }
    }

    #[test]
    fn empty_style_copies_content() {
        let (c, _) = sets(3);
        let (merged, report) = merge_adapters(
            &c,
            &AdapterSet::new(Role::Style),
            &LayerManifest::default(),
            &quick(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(
            merged.layers().collect::<Vec<_>>(),
            c.layers().collect::<Vec<_>>()
        );
        assert!(report
            .layers
            .iter()
            .all(|l| l.status == LayerStatus::CopiedContent));
        assert_eq!(report.trainable_parameters, 0);
    }

    #[test]
    fn disjoint_inventories_are_rejected() {
        let (c, _) = sets(1);
        let other = AdapterSet::from_layers(
            Role::Style,
            c.layers().map(|l| l.clone().renamed("elsewhere")),
        )
        .unwrap();
        assert!(merge_adapters(
            &c,
            &other,
            &LayerManifest::default(),
            &quick(),
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn per_layer_results_match_direct_training() {
        let (c, s) = sets(2);
        let manifest = LayerManifest::default();
        let config = quick().with_seed(5);
        let (merged, report) =
            merge_adapters(&c, &s, &manifest, &config, Execution::Parallel).unwrap();
        for record in &report.layers {
            let (lc, ls) = (c.get(&record.name).unwrap(), s.get(&record.name).unwrap());
            let (masks, direct) = train_masks(lc, ls, record.class, &config).unwrap();
            assert_eq!(merged.mergers()[&record.name], masks);
            assert_eq!(record.training.as_ref().unwrap(), &direct);
            let folded = delta_weight(merged.get(&record.name).unwrap()).unwrap();
            let expected = merged_delta(lc, ls, &masks).unwrap();
            assert!(folded.max_abs_diff(&expected) < 1e-9);
        }
    }

    #[test]
    fn sequential_equals_parallel() {
        let (c, s) = sets(5);
        let m = LayerManifest::default();
        let a = merge_adapters(&c, &s, &m, &quick(), Execution::Sequential).unwrap();
        let b = merge_adapters(&c, &s, &m, &quick(), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_accounting() {
        let (c, s) = sets(4);
        let m = LayerManifest::default();
        let (_, rank) = merge_adapters(&c, &s, &m, &quick(), Execution::Sequential).unwrap();
        assert_eq!(rank.trainable_parameters, 4 * 2 * 3);
        let output = MergeConfig {
            baseline_mode: BaselineMode::OutputMask,
            ..quick()
        };
        let (_, out) = merge_adapters(&c, &s, &m, &output, Execution::Sequential).unwrap();
        assert_eq!(out.trainable_parameters, 4 * 2 * 12);
        assert!(out.histograms.is_none());
    }

    #[test]
    fn report_round_trips_through_json() {
        let (c, s) = sets(2);
        let (_, report) = merge_adapters(
            &c,
            &s,
            &LayerManifest::default(),
            &quick(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(MergeReport::from_json(&report.to_json()).unwrap(), report);
    }

    #[test]
    fn single_concept_is_identity() {
        let (c, _) = sets(2);
        let merged = multi_concept_merge(std::slice::from_ref(&c), Some(&[1.0])).unwrap();
        for layer in c.layers() {
            let d = delta_weight(merged.get(layer.name()).unwrap()).unwrap();
            assert!(d.max_abs_diff(&delta_weight(layer).unwrap()) < 1e-12);
        }
    }
}
