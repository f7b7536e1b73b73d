//! Per-layer mask optimization: Adam steps, clamping to the mask range, and
//! a backtracking guard that never accepts an increase of the total loss.

use serde::{Deserialize, Serialize};

use super::config::MergeConfig;
use super::objective::{OutputObjective, ProbeSet, RankObjective};
use crate::error::{Error, Result};
use crate::lora::{mask_rank, LoraLayer, MaskPair, MaskVector};
use crate::prior::{init_masks_uneven, LayerClass};
use crate::random::layer_seed;

/// Halvings tried after a rejected step before the step is skipped.
pub const MAX_BACKTRACKS: usize = 10;

/// Outcome of training one layer's mergers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_alignment_loss: f64,
    pub alignment_loss: f64,
    /// Layer-prior term (rank masks) or similarity term (output masks).
    pub penalty_loss: f64,
    pub mask_rank_content: usize,
    pub mask_rank_style: usize,
    pub steps_run: usize,
    pub accepted_steps: usize,
    pub skipped_steps: usize,
}

struct Progress {
    initial: f64,
    accepted: usize,
    skipped: usize,
}

fn clamp_all(v: &mut [f64], [lo, hi]: [f64; 2]) {
    for x in v {
        *x = x.clamp(lo, hi);
    }
}

fn check_finite(value: f64, layer: &str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(format!(
            "layer {layer}: non-finite loss {value} at step {step}"
        )))
    }
}

fn optimize(
    m: &mut Vec<f64>,
    loss: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    config: &MergeConfig,
    layer: &str,
) -> Result<Progress> {
    clamp_all(m, config.mask_clamp);
    let mut current = check_finite(loss(m), layer, 0)?;
    let initial = current;
    let (b1, b2, eps) = (config.adam.beta1, config.adam.beta2, config.adam.epsilon);
    let mut first = vec![0.0; m.len()];
    let mut second = vec![0.0; m.len()];
    let (mut accepted, mut skipped) = (0, 0);
    for step in 1..=config.steps {
        let g = gradient(m);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "layer {layer}: non-finite gradient at step {step}"
            )));
        }
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let direction: Vec<f64> = g
            .iter()
            .zip(first.iter_mut().zip(second.iter_mut()))
            .map(|(&gi, (f, s))| {
                *f = b1 * *f + (1.0 - b1) * gi;
                *s = b2 * *s + (1.0 - b2) * gi * gi;
                (*f / c1) / ((*s / c2).sqrt() + eps)
            })
            .collect();
        let mut rate = config.learning_rate;
        let mut moved = false;
        for _ in 0..=MAX_BACKTRACKS {
            let mut candidate: Vec<f64> = m
                .iter()
                .zip(&direction)
                .map(|(x, d)| x - rate * d)
                .collect();
            clamp_all(&mut candidate, config.mask_clamp);
            let value = check_finite(loss(&candidate), layer, step)?;
            if value <= current {
                *m = candidate;
                current = value;
                moved = true;
                break;
            }
            rate *= 0.5;
        }
        if moved {
            accepted += 1;
        } else {
            skipped += 1;
        }
    }
    Ok(Progress {
        initial,
        accepted,
        skipped,
    })
}

fn check_pair(content: &LoraLayer, style: &LoraLayer) -> Result<()> {
    if (content.d_out(), content.d_in()) != (style.d_out(), style.d_in()) {
        return Err(Error::validation(format!(
            "layer {}: content is {}x{} but style is {}x{}",
            content.name(),
            content.d_out(),
            content.d_in(),
            style.d_out(),
            style.d_in()
        )));
    }
    Ok(())
}

fn split_masks(m: &[f64], at: usize) -> MaskPair {
    let (c, s) = m.split_at(at);
    MaskPair::new(
        MaskVector::clamped(c.iter().copied(), 0.0, 1.0),
        MaskVector::clamped(s.iter().copied(), 0.0, 1.0),
    )
}

/// Trains rank-dimension mergers for one layer pair.
///
/// Initialization, probes and therefore the result depend only on
/// `(config, content.name())`, never on which other layers are trained.
pub fn train_masks(
    content: &LoraLayer,
    style: &LoraLayer,
    class: LayerClass,
    config: &MergeConfig,
) -> Result<(MaskPair, TrainingRecord)> {
    config.validate()?;
    check_pair(content, style)?;
    let name = content.name();
    let probes = ProbeSet::generate(name, content.d_in(), config.probe_count, config.seed);
    let objective = RankObjective::new(content, style, &probes)?;
    let init = init_masks_uneven(
        class,
        content.rank(),
        style.rank(),
        config.thresholds,
        layer_seed(config.seed, name),
    );
    let mut m = objective.concat(init.content.values(), init.style.values())?;
    let lambda = config.lambda_layer_prior;
    let mut start = m.clone();
    clamp_all(&mut start, config.mask_clamp);
    let initial_alignment = objective.alignment(&start);
    let progress = optimize(
        &mut m,
        |x| objective.total(x, class, lambda),
        |x| objective.total_gradient(x, class, lambda),
        config,
        name,
    )?;
    let masks = split_masks(&m, content.rank());
    let alignment = objective.alignment(&m);
    let penalty = objective.prior(&m, class, lambda);
    let record = TrainingRecord {
        initial_loss: progress.initial,
        final_loss: alignment + penalty,
        initial_alignment_loss: initial_alignment,
        alignment_loss: alignment,
        penalty_loss: penalty,
        mask_rank_content: mask_rank(&masks.content, config.binarize_threshold),
        mask_rank_style: mask_rank(&masks.style, config.binarize_threshold),
        steps_run: config.steps,
        accepted_steps: progress.accepted,
        skipped_steps: progress.skipped,
    };
    Ok((masks, record))
}

/// Trains output-dimension mergers (one weight per output unit of each
/// adapter) against alignment plus a cosine overlap penalty. Starts from all
/// ones; no layer prior.
pub fn train_output_masks(
    content: &LoraLayer,
    style: &LoraLayer,
    config: &MergeConfig,
) -> Result<(MaskPair, TrainingRecord)> {
    config.validate()?;
    check_pair(content, style)?;
    let name = content.name();
    let probes = ProbeSet::generate(name, content.d_in(), config.probe_count, config.seed);
    let objective = OutputObjective::new(content, style, &probes, config.similarity_coefficient)?;
    let d_out = content.d_out();
    let mut m = vec![1.0; 2 * d_out];
    let mut start = m.clone();
    clamp_all(&mut start, config.mask_clamp);
    let initial_alignment = objective.alignment(&start);
    let progress = optimize(
        &mut m,
        |x| objective.total(x),
        |x| objective.total_gradient(x),
        config,
        name,
    )?;
    let masks = split_masks(&m, d_out);
    let alignment = objective.alignment(&m);
    let penalty = objective.similarity(&m);
    let record = TrainingRecord {
        initial_loss: progress.initial,
        final_loss: alignment + penalty,
        initial_alignment_loss: initial_alignment,
        alignment_loss: alignment,
        penalty_loss: penalty,
        mask_rank_content: mask_rank(&masks.content, config.binarize_threshold),
        mask_rank_style: mask_rank(&masks.style, config.binarize_threshold),
        steps_run: config.steps,
        accepted_steps: progress.accepted,
        skipped_steps: progress.skipped,
    };
    Ok((masks, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, SyntheticSpec};
    use crate::linalg::{frobenius_norm, Matrix};
    use crate::lora::{delta_weight, merged_delta, Role};

    fn layers(seed: u64) -> (LoraLayer, LoraLayer) {
        let spec = SyntheticSpec::uniform(1, 16, 4);
        let c = generate_synthetic(&spec, seed).unwrap();
        let s = generate_synthetic(&spec.with_role(Role::Style), seed + 1).unwrap();
        let first = |set: &crate::lora::AdapterSet| set.layers().next().unwrap().clone();
        (first(&c), first(&s))
    }

    #[test]
    fn identical_neutral_layers_share_the_delta() {
        let (c, _) = layers(1);
        let config = MergeConfig::default();
        let (masks, rec) = train_masks(&c, &c, LayerClass::Neutral, &config).unwrap();
        assert!(rec.alignment_loss < rec.initial_alignment_loss);
        // The two mergers see identical gradients, so they stay equal and the
        // continuous merge converges to m_c + m_s ≈ 1.
        assert_eq!(masks.content, masks.style);
        let target = delta_weight(&c).unwrap();
        let merged = merged_delta(&c, &c, &masks).unwrap();
        let rel = frobenius_norm(&merged.sub(&target).unwrap()) / frobenius_norm(&target);
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[test]
    fn large_lambda_keeps_content_dominant() {
        let (c, s) = layers(2);
        let config = MergeConfig {
            lambda_layer_prior: 1e3,
            ..MergeConfig::default()
        };
        let (masks, _) = train_masks(&c, &s, LayerClass::ContentDominant, &config).unwrap();
        // The optimum sits on the hinge kink ‖m_c‖₁ = ‖m_s‖₁; an accepted step may
        // overshoot it by far less than 1e-9.
        assert!(
            masks.content.l1() >= masks.style.l1() - 1e-9,
            "{} vs {}",
            masks.content.l1(),
            masks.style.l1()
        );
    }

    #[test]
    fn descent_and_step_accounting() {
        let (c, s) = layers(3);
        for steps in [1, 5, 100] {
            let config = MergeConfig {
                steps,
                ..MergeConfig::default()
            };
            let (_, rec) = train_masks(&c, &s, LayerClass::StyleDominant, &config).unwrap();
            assert!(rec.final_loss <= rec.initial_loss + 1e-9);
            assert_eq!(rec.accepted_steps + rec.skipped_steps, steps);
        }
        let zero = MergeConfig {
            steps: 0,
            ..MergeConfig::default()
        };
        assert!(train_masks(&c, &s, LayerClass::Neutral, &zero).is_err());
    }

    #[test]
    fn overflow_is_a_numeric_error_naming_the_layer() {
        let big = Matrix::from_fn(4, 2, |_, _| 1e200).unwrap();
        let b = Matrix::from_fn(2, 4, |_, _| 1e200).unwrap();
        let layer = LoraLayer::new("huge", big, b, 2.0).unwrap();
        let err =
            train_masks(&layer, &layer, LayerClass::Neutral, &MergeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(
            err.to_string().contains("huge") && err.to_string().contains("step 0"),
            "{err}"
        );
    }

    #[test]
    fn output_masks_reduce_alignment() {
        let (c, _) = layers(4);
        let config = MergeConfig {
            similarity_coefficient: 0.0,
            ..MergeConfig::default()
        };
        let (masks, rec) = train_output_masks(&c, &c, &config).unwrap();
        assert_eq!(masks.content.len(), c.d_out());
        assert!(rec.alignment_loss < rec.initial_alignment_loss);
    }

    #[test]
    fn deterministic() {
        let (c, s) = layers(5);
        let config = MergeConfig::default().with_seed(11);
        let a = train_masks(&c, &s, LayerClass::ContentDominant, &config).unwrap();
        let b = train_masks(&c, &s, LayerClass::ContentDominant, &config).unwrap();
        assert_eq!(a, b);
    }
}
