//! Seeded synthetic adapters for tests, benchmarks and demos.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::lora::{AdapterSet, LoraLayer, Role};
use crate::random::{gaussian_matrix, rng_from_seed, stream_seed};

const BLOCKS: [&str; 5] = [
    "down_blocks.1",
    "down_blocks.2",
    "mid_block",
    "up_blocks.1",
    "up_blocks.2",
];
const PROJECTIONS: [&str; 8] = [
    "attn1.to_q",
    "attn1.to_k",
    "attn1.to_v",
    "attn1.to_out.0",
    "attn2.to_q",
    "attn2.to_k",
    "attn2.to_v",
    "attn2.to_out.0",
];

/// `n` distinct UNet-style layer names, cycling over blocks so every block
/// class is represented once `n ≥ 5`.
pub fn sdxl_like_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let block = BLOCKS[i % BLOCKS.len()];
            let k = i / BLOCKS.len();
            let proj = PROJECTIONS[k % PROJECTIONS.len()];
            let tb = k / PROJECTIONS.len();
            format!("unet.{block}.attentions.0.transformer_blocks.{tb}.{proj}")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLayer {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub layers: Vec<SyntheticLayer>,
    pub rank: usize,
    /// Defaults to `rank` (unit scale).
    pub alpha: Option<f64>,
    /// Target singular values of `A·B`, one per rank component.
    pub spectrum: Option<Vec<f64>>,
    pub role: Role,
}

impl SyntheticSpec {
    /// `n` square layers of size `dim` with UNet-style names.
    pub fn uniform(n: usize, dim: usize, rank: usize) -> Self {
        Self {
            layers: sdxl_like_names(n)
                .into_iter()
                .map(|name| SyntheticLayer {
                    name,
                    d_out: dim,
                    d_in: dim,
                })
                .collect(),
            rank,
            alpha: None,
            spectrum: None,
            role: Role::Content,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_spectrum(mut self, spectrum: Vec<f64>) -> Self {
        self.spectrum = Some(spectrum);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::validation("synthetic rank must be positive"));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::validation(format!(
                    "synthetic alpha must be positive, got {alpha}"
                )));
            }
        }
        if let Some(s) = &self.spectrum {
            if s.len() != self.rank {
                return Err(Error::validation(format!(
                    "spectrum has {} values but rank is {}",
                    s.len(),
                    self.rank
                )));
            }
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::validation(
                    "spectrum values must be finite and non-negative",
                ));
            }
        }
        for l in &self.layers {
            if l.d_out == 0 || l.d_in == 0 {
                return Err(Error::validation(format!(
                    "layer {}: dimensions must be positive",
                    l.name
                )));
            }
            if self.spectrum.is_some() && self.rank > l.d_out.min(l.d_in) {
                return Err(Error::validation(format!(
                    "layer {}: a spectrum of length {} does not fit {}x{}",
                    l.name, self.rank, l.d_out, l.d_in
                )));
            }
        }
        Ok(())
    }
}

/// Orthonormal `n × k` basis from the SVD of a Gaussian matrix.
fn orthonormal(n: usize, k: usize, rng: &mut crate::random::SeededRng) -> Result<Matrix> {
    let g = gaussian_matrix(n, k, 1.0, rng);
    Ok(svd(&g)?.u)
}

fn synthetic_layer(spec: &SyntheticSpec, layer: &SyntheticLayer, seed: u64) -> Result<LoraLayer> {
    let mut rng = rng_from_seed(stream_seed(seed, &layer.name, "synthetic"));
    let r = spec.rank;
    let alpha = spec.alpha.unwrap_or(r as f64);
    let (a, b) = match &spec.spectrum {
        None => (
            gaussian_matrix(layer.d_out, r, 1.0 / (r as f64).sqrt(), &mut rng),
            gaussian_matrix(r, layer.d_in, 1.0 / (layer.d_in as f64).sqrt(), &mut rng),
        ),
        Some(sigma) => {
            let u = orthonormal(layer.d_out, r, &mut rng)?;
            let v = orthonormal(layer.d_in, r, &mut rng)?;
            let target = u.scale_columns(sigma)?.matmul(&v.transpose())?;
            // Re-factor so A and B share the spectrum evenly.
            let f = svd(&target)?;
            let root: Vec<f64> = f.sigma[..r].iter().map(|s| s.sqrt()).collect();
            let u_r = Matrix::from_fn(layer.d_out, r, |i, j| f.u.get(i, j))?;
            let v_r = Matrix::from_fn(layer.d_in, r, |i, j| f.v.get(i, j))?;
            (
                u_r.scale_columns(&root)?,
                v_r.scale_columns(&root)?.transpose(),
            )
        }
    };
    LoraLayer::new(layer.name.clone(), a, b, alpha)
}

/// Generates an adapter set; each layer draws from its own stream derived
/// from `(seed, layer name)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<AdapterSet> {
    spec.validate()?;
    let mut set = AdapterSet::new(spec.role);
    for layer in &spec.layers {
        set.insert(synthetic_layer(spec, layer, seed)?)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::lora::delta_weight;

    #[test]
    fn shapes_follow_spec() {
        let set = generate_synthetic(&SyntheticSpec::uniform(2, 640, 64), 1).unwrap();
        for l in set.layers() {
            assert_eq!(l.a().shape(), (640, 64));
            assert_eq!(l.b().shape(), (64, 640));
        }
    }

    #[test]
    fn spectrum_is_reproduced() {
        let mut spec = SyntheticSpec::uniform(1, 12, 4).with_spectrum(vec![4.0, 3.0, 2.0, 1.0]);
        spec.alpha = Some(2.0);
        let set = generate_synthetic(&spec, 9).unwrap();
        let delta = delta_weight(set.layers().next().unwrap()).unwrap();
        let sigma = svd(&delta).unwrap().sigma;
        for (got, want) in sigma.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            assert!((got - want * 0.5).abs() < 1e-8, "{got} vs {want}");
        }
        assert!(sigma[4..].iter().all(|s| s.abs() < 1e-8));
    }

    #[test]
    fn names_are_unique_and_cover_blocks() {
        let names = sdxl_like_names(80);
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), 80);
        for b in BLOCKS {
            assert!(names[..5].iter().any(|n| n.contains(b)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::uniform(3, 8, 2);
        assert_eq!(
            generate_synthetic(&spec, 4).unwrap(),
            generate_synthetic(&spec, 4).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spec, 4).unwrap(),
            generate_synthetic(&spec, 5).unwrap()
        );
    }
}
