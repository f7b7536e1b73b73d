//! Training objectives.
//!
//! The alignment surrogate asks the merged layer to reproduce the content
//! adapter's response on content probes and the style adapter's response on
//! style probes:
//!
//! `L_align = ‖ΔW(m)·X_c − ΔW_c·X_c‖²_F / n + ‖ΔW(m)·X_s − ΔW_s·X_s‖²_F / n`.
//!
//! `ΔW(m)` is linear in the concatenated mask `m = [m_c; m_s]`, so each term is
//! a quadratic form `(m − e)ᵀ G (m − e)` with
//! `G = (ÃᵀÃ) ⊙ (P·Pᵀ) / n`, `Ã = [s_c·A_c | s_s·A_s]`, `P = [B_c; B_s]·X`,
//! and `e` the indicator of the target adapter's block. [`RankObjective`]
//! precomputes both Gram matrices; [`alignment_loss`] evaluates the
//! definition densely.

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, Matrix};
use crate::lora::{apply_output_mask, delta_weight, merged_delta, LoraLayer, MaskPair};
use crate::prior::{prior_loss_raw, prior_subgradient_raw, LayerClass};
use crate::random::{gaussian_matrix, rng_from_seed, stream_seed};

/// Standard-normal probe inputs for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    /// `d_in × n`.
    pub x_content: Matrix,
    pub x_style: Matrix,
}

impl ProbeSet {
    pub fn new(x_content: Matrix, x_style: Matrix) -> Result<Self> {
        if x_content.shape() != x_style.shape() {
            return Err(Error::validation(format!(
                "content probes are {:?} but style probes are {:?}",
                x_content.shape(),
                x_style.shape()
            )));
        }
        Ok(Self { x_content, x_style })
    }

    /// Probes for `layer`, drawn from streams keyed by `(seed, layer, role)`.
    pub fn generate(layer: &str, d_in: usize, count: usize, seed: u64) -> Self {
        let draw = |role: &str| {
            let mut rng = rng_from_seed(stream_seed(seed, layer, &format!("probe/{role}")));
            gaussian_matrix(d_in, count, 1.0, &mut rng)
        };
        Self {
            x_content: draw("content"),
            x_style: draw("style"),
        }
    }

    pub fn count(&self) -> usize {
        self.x_content.cols()
    }

    pub fn d_in(&self) -> usize {
        self.x_content.rows()
    }
}

fn check_probes(layer: &LoraLayer, probes: &ProbeSet) -> Result<()> {
    if probes.d_in() != layer.d_in() {
        return Err(Error::validation(format!(
            "layer {}: probes have {} rows but d_in is {}",
            layer.name(),
            probes.d_in(),
            layer.d_in()
        )));
    }
    Ok(())
}

fn response_error(merged: &Matrix, target: &Matrix, x: &Matrix) -> Result<f64> {
    let diff = merged.sub(target)?.matmul(x)?;
    Ok(frobenius_norm(&diff).powi(2) / x.cols() as f64)
}

/// Dense evaluation of the alignment surrogate for rank masks.
pub fn alignment_loss(
    content: &LoraLayer,
    style: &LoraLayer,
    masks: &MaskPair,
    probes: &ProbeSet,
) -> Result<f64> {
    check_probes(content, probes)?;
    let merged = merged_delta(content, style, masks)?;
    Ok(
        response_error(&merged, &delta_weight(content)?, &probes.x_content)?
            + response_error(&merged, &delta_weight(style)?, &probes.x_style)?,
    )
}

/// Dense evaluation of the alignment surrogate for output masks
/// `diag(n_c)·ΔW_c + diag(n_s)·ΔW_s`.
pub fn output_alignment_loss(
    content: &LoraLayer,
    style: &LoraLayer,
    n_c: &[f64],
    n_s: &[f64],
    probes: &ProbeSet,
) -> Result<f64> {
    check_probes(content, probes)?;
    let merged = apply_output_mask(content, n_c)?.add(&apply_output_mask(style, n_s)?)?;
    Ok(
        response_error(&merged, &delta_weight(content)?, &probes.x_content)?
            + response_error(&merged, &delta_weight(style)?, &probes.x_style)?,
    )
}

/// `alignment_loss + λ · layer_prior_loss(λ)`.
pub fn total_loss(
    content: &LoraLayer,
    style: &LoraLayer,
    masks: &MaskPair,
    probes: &ProbeSet,
    class: LayerClass,
    lambda: f64,
) -> Result<f64> {
    let prior = crate::prior::layer_prior_loss(&masks.content, &masks.style, lambda, class)?;
    Ok(alignment_loss(content, style, masks, probes)? + lambda * prior)
}

/// Analytic (sub)gradient of [`total_loss`] with respect to `(m_c, m_s)`.
pub fn total_gradient(
    content: &LoraLayer,
    style: &LoraLayer,
    masks: &MaskPair,
    probes: &ProbeSet,
    class: LayerClass,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let objective = RankObjective::new(content, style, probes)?;
    let m = objective.concat(masks.content.values(), masks.style.values())?;
    let g = objective.total_gradient(&m, class, lambda);
    let (gc, gs) = g.split_at(content.rank());
    Ok((gc.to_vec(), gs.to_vec()))
}

/// Symmetric `R × R` matrix stored row-major.
#[derive(Debug, Clone)]
struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    /// `(ÃᵀÃ) ⊙ (P·Pᵀ) / count`.
    fn new(a_tilde: &Matrix, p: &Matrix, count: usize) -> Result<Self> {
        let ata = a_tilde.transpose().matmul(a_tilde)?;
        let ppt = p.matmul(&p.transpose())?;
        let n = ata.rows();
        let data = ata
            .data()
            .iter()
            .zip(ppt.data())
            .map(|(x, y)| x * y / count as f64)
            .collect();
        Ok(Self { n, data })
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(v).map(|(g, x)| g * x).sum())
            .collect()
    }

    fn quadratic(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(g, x)| g * x).sum()
    }
}

/// Precomputed alignment objective for rank masks of one layer pair.
#[derive(Debug, Clone)]
pub struct RankObjective {
    content_rank: usize,
    style_rank: usize,
    g_content: Gram,
    g_style: Gram,
}

impl RankObjective {
    pub fn new(content: &LoraLayer, style: &LoraLayer, probes: &ProbeSet) -> Result<Self> {
        if (content.d_out(), content.d_in()) != (style.d_out(), style.d_in()) {
            return Err(Error::validation(format!(
                "layer {}: content and style adapters have different shapes",
                content.name()
            )));
        }
        check_probes(content, probes)?;
        let a_tilde = content
            .a()
            .scale(content.scale())
            .hstack(&style.a().scale(style.scale()))?;
        let b_tilde = content.b().vstack(style.b())?;
        let n = probes.count();
        Ok(Self {
            content_rank: content.rank(),
            style_rank: style.rank(),
            g_content: Gram::new(&a_tilde, &b_tilde.matmul(&probes.x_content)?, n)?,
            g_style: Gram::new(&a_tilde, &b_tilde.matmul(&probes.x_style)?, n)?,
        })
    }

    pub fn content_rank(&self) -> usize {
        self.content_rank
    }

    pub fn style_rank(&self) -> usize {
        self.style_rank
    }

    /// `[m_c; m_s]`, checking lengths.
    pub fn concat(&self, m_c: &[f64], m_s: &[f64]) -> Result<Vec<f64>> {
        if m_c.len() != self.content_rank || m_s.len() != self.style_rank {
            return Err(Error::validation(format!(
                "mask lengths ({}, {}) do not match ranks ({}, {})",
                m_c.len(),
                m_s.len(),
                self.content_rank,
                self.style_rank
            )));
        }
        Ok(m_c.iter().chain(m_s).copied().collect())
    }

    fn offsets(&self, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = self.content_rank;
        let to_content = m
            .iter()
            .enumerate()
            .map(|(i, &x)| if i < r { x - 1.0 } else { x })
            .collect();
        let to_style = m
            .iter()
            .enumerate()
            .map(|(i, &x)| if i < r { x } else { x - 1.0 })
            .collect();
        (to_content, to_style)
    }

    pub fn alignment(&self, m: &[f64]) -> f64 {
        let (dc, ds) = self.offsets(m);
        self.g_content.quadratic(&dc) + self.g_style.quadratic(&ds)
    }

    pub fn alignment_gradient(&self, m: &[f64]) -> Vec<f64> {
        let (dc, ds) = self.offsets(m);
        self.g_content
            .apply(&dc)
            .iter()
            .zip(self.g_style.apply(&ds))
            .map(|(a, b)| 2.0 * (a + b))
            .collect()
    }

    fn split<'a>(&self, m: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        m.split_at(self.content_rank)
    }

    /// `λ · layer_prior_loss(λ)` at `m`.
    pub fn prior(&self, m: &[f64], class: LayerClass, lambda: f64) -> f64 {
        let (c, s) = self.split(m);
        lambda * prior_loss_raw(c, s, lambda, class)
    }

    pub fn total(&self, m: &[f64], class: LayerClass, lambda: f64) -> f64 {
        self.alignment(m) + self.prior(m, class, lambda)
    }

    pub fn total_gradient(&self, m: &[f64], class: LayerClass, lambda: f64) -> Vec<f64> {
        let (c, s) = self.split(m);
        let (pc, ps) = prior_subgradient_raw(c, s, lambda, class);
        self.alignment_gradient(m)
            .into_iter()
            .zip(pc.into_iter().chain(ps))
            .map(|(g, p)| g + lambda * p)
            .collect()
    }
}

/// Precomputed objective for output masks. The alignment term separates by
/// output row: row `i` contributes a quadratic in `(n_c[i], n_s[i])` with a
/// 2×2 Gram matrix per probe role.
#[derive(Debug, Clone)]
pub struct OutputObjective {
    d_out: usize,
    /// Per row: `[cc, cs, ss]` Gram entries on content probes, then on style probes.
    rows: Vec<[f64; 6]>,
    similarity_coefficient: f64,
}

impl OutputObjective {
    pub fn new(
        content: &LoraLayer,
        style: &LoraLayer,
        probes: &ProbeSet,
        similarity_coefficient: f64,
    ) -> Result<Self> {
        if (content.d_out(), content.d_in()) != (style.d_out(), style.d_in()) {
            return Err(Error::validation(format!(
                "layer {}: content and style adapters have different shapes",
                content.name()
            )));
        }
        check_probes(content, probes)?;
        let dc = delta_weight(content)?;
        let ds = delta_weight(style)?;
        let n = probes.count() as f64;
        let on = |x: &Matrix| -> Result<(Matrix, Matrix)> { Ok((dc.matmul(x)?, ds.matmul(x)?)) };
        let (cc, sc) = on(&probes.x_content)?;
        let (cs, ss) = on(&probes.x_style)?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        let rows = (0..content.d_out())
            .map(|i| {
                let (a, b) = (cc.row(i), sc.row(i));
                let (c, d) = (cs.row(i), ss.row(i));
                [
                    dot(a, a),
                    dot(a, b),
                    dot(b, b),
                    dot(c, c),
                    dot(c, d),
                    dot(d, d),
                ]
            })
            .collect();
        Ok(Self {
            d_out: content.d_out(),
            rows,
            similarity_coefficient,
        })
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Row-separable alignment loss at `m = [n_c; n_s]`.
    pub fn alignment(&self, m: &[f64]) -> f64 {
        let (nc, ns) = m.split_at(self.d_out);
        self.rows
            .iter()
            .zip(nc.iter().zip(ns))
            .map(|(g, (&c, &s))| {
                // Content probes target n = (1, 0); style probes target (0, 1).
                let (u, v) = (c - 1.0, s);
                let content = g[0] * u * u + 2.0 * g[1] * u * v + g[2] * v * v;
                let (u, v) = (c, s - 1.0);
                let style = g[3] * u * u + 2.0 * g[4] * u * v + g[5] * v * v;
                content + style
            })
            .sum()
    }

    fn alignment_gradient(&self, m: &[f64]) -> Vec<f64> {
        let (nc, ns) = m.split_at(self.d_out);
        let mut gc = Vec::with_capacity(self.d_out);
        let mut gs = Vec::with_capacity(self.d_out);
        for (g, (&c, &s)) in self.rows.iter().zip(nc.iter().zip(ns)) {
            let (u1, v1) = (c - 1.0, s);
            let (u2, v2) = (c, s - 1.0);
            gc.push(2.0 * (g[0] * u1 + g[1] * v1) + 2.0 * (g[3] * u2 + g[4] * v2));
            gs.push(2.0 * (g[1] * u1 + g[2] * v1) + 2.0 * (g[4] * u2 + g[5] * v2));
        }
        gc.extend(gs);
        gc
    }

    /// `coef · |cos(n_c, n_s)|`; zero when either mask vanishes.
    pub fn similarity(&self, m: &[f64]) -> f64 {
        let (nc, ns) = m.split_at(self.d_out);
        self.similarity_coefficient * cosine(nc, ns).abs()
    }

    pub fn total(&self, m: &[f64]) -> f64 {
        self.alignment(m) + self.similarity(m)
    }

    pub fn total_gradient(&self, m: &[f64]) -> Vec<f64> {
        let mut g = self.alignment_gradient(m);
        let (nc, ns) = m.split_at(self.d_out);
        let norm_c = l2(nc);
        let norm_s = l2(ns);
        if self.similarity_coefficient > 0.0 && norm_c > 0.0 && norm_s > 0.0 {
            let cos = cosine(nc, ns);
            let k = self.similarity_coefficient * sign(cos);
            for i in 0..self.d_out {
                g[i] += k * (ns[i] / (norm_c * norm_s) - cos * nc[i] / (norm_c * norm_c));
                g[self.d_out + i] +=
                    k * (nc[i] / (norm_c * norm_s) - cos * ns[i] / (norm_s * norm_s));
            }
        }
        g
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
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

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::MaskVector;
    use crate::random::{gaussian_matrix, rng_from_seed};

    fn pair(seed: u64, d: usize, r_c: usize, r_s: usize) -> (LoraLayer, LoraLayer, ProbeSet) {
        let mut rng = rng_from_seed(seed);
        let c = LoraLayer::new(
            "l",
            gaussian_matrix(d, r_c, 1.0, &mut rng),
            gaussian_matrix(r_c, d, 1.0, &mut rng),
            3.0,
        )
        .unwrap();
        let s = LoraLayer::new(
            "l",
            gaussian_matrix(d, r_s, 1.0, &mut rng),
            gaussian_matrix(r_s, d, 1.0, &mut rng),
            1.5,
        )
        .unwrap();
        (c, s, ProbeSet::generate("l", d, 7, seed))
    }

    fn random_masks(seed: u64, r_c: usize, r_s: usize) -> MaskPair {
        let mut rng = rng_from_seed(seed);
        let v = crate::random::uniform_open(r_c + r_s, &mut rng);
        MaskPair::new(
            MaskVector::new(v[..r_c].to_vec()).unwrap(),
            MaskVector::new(v[r_c..].to_vec()).unwrap(),
        )
    }

    #[test]
    fn identical_layers_shared_delta_costs_nothing() {
        let (c, _, probes) = pair(1, 5, 3, 3);
        let masks = MaskPair::new(MaskVector::ones(3), MaskVector::zeros(3));
        assert!(alignment_loss(&c, &c, &masks, &probes).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_masks_cost_both_responses() {
        let (c, s, probes) = pair(2, 5, 2, 3);
        let masks = MaskPair::new(MaskVector::zeros(2), MaskVector::zeros(3));
        let n = probes.count() as f64;
        let expected =
            frobenius_norm(&delta_weight(&c).unwrap().matmul(&probes.x_content).unwrap()).powi(2)
                / n
                + frobenius_norm(&delta_weight(&s).unwrap().matmul(&probes.x_style).unwrap())
                    .powi(2)
                    / n;
        let got = alignment_loss(&c, &s, &masks, &probes).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn quadratic_form_matches_dense() {
        for seed in 0..10 {
            let (c, s, probes) = pair(seed, 6, 3, 4);
            let masks = random_masks(seed + 100, 3, 4);
            let obj = RankObjective::new(&c, &s, &probes).unwrap();
            let m = obj
                .concat(masks.content.values(), masks.style.values())
                .unwrap();
            let dense = alignment_loss(&c, &s, &masks, &probes).unwrap();
            assert!((obj.alignment(&m) - dense).abs() <= 1e-9 * dense.max(1.0));
        }
    }

    #[test]
    fn output_objective_matches_dense() {
        let (c, s, probes) = pair(5, 6, 3, 3);
        let mut rng = rng_from_seed(8);
        let m = crate::random::uniform_open(12, &mut rng);
        let obj = OutputObjective::new(&c, &s, &probes, 0.0).unwrap();
        let dense = output_alignment_loss(&c, &s, &m[..6], &m[6..], &probes).unwrap();
        assert!((obj.alignment(&m) - dense).abs() <= 1e-9 * dense.max(1.0));
    }

    #[test]
    fn lambda_zero_is_alignment_only() {
        let (c, s, probes) = pair(3, 5, 2, 2);
        let masks = random_masks(4, 2, 2);
        let a = alignment_loss(&c, &s, &masks, &probes).unwrap();
        let t = total_loss(&c, &s, &masks, &probes, LayerClass::ContentDominant, 0.0).unwrap();
        assert_eq!(a, t);
    }

    #[test]
    fn orthogonal_output_masks_have_no_overlap() {
        let (c, s, probes) = pair(6, 4, 2, 2);
        let obj = OutputObjective::new(&c, &s, &probes, 1.0).unwrap();
        assert_eq!(
            obj.similarity(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
            0.0
        );
    }

    #[test]
    fn probe_shape_mismatch_is_rejected() {
        let (c, s, _) = pair(7, 5, 2, 2);
        let probes = ProbeSet::generate("l", 4, 3, 0);
        let masks = MaskPair::ones(2, 2);
        assert!(alignment_loss(&c, &s, &masks, &probes).is_err());
        assert!(RankObjective::new(&c, &s, &probes).is_err());
    }
}
