//! Equal-parameter-budget comparison of rank-dimension and output-dimension
//! masking, and a batch harness that measures both errors on random
//! matrices.
//!
//! For a target `X` with best rank-`r` factorization `Y = U_r Σ_r V_rᵀ`:
//! - keeping `s` rank components costs `s·(d_out + d_in)` parameters and
//!   leaves error `(Σ_{i>s} σ_i²)^{1/2}`;
//! - keeping `d_s` output rows of `Y` costs `r·(d_s + d_in)` parameters.
//!
//! `s` is chosen as the largest count whose cost does not exceed the output
//! side's cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, tail_energy, Matrix};
use crate::parallel::{map_slice, Execution};
use crate::random::{gaussian_matrix, instance_seed, rng_from_seed};

/// Largest output dimension for which exhaustive mask search is allowed.
pub const EXHAUSTIVE_MAX_ROWS: usize = 20;

/// Tolerance used by the `holds` comparisons.
pub const HOLDS_TOLERANCE: f64 = 1e-9;

/// Trainable/effective parameters of a rank mask keeping `s` components.
pub fn param_count_rank(d_out: usize, d_in: usize, s: usize) -> u64 {
    s as u64 * (d_out as u64 + d_in as u64)
}

/// Parameters of an output mask keeping `d_s` rows of a rank-`r` factorization.
pub fn param_count_out(_d_out: usize, d_in: usize, r: usize, d_s: usize) -> u64 {
    r as u64 * (d_s as u64 + d_in as u64)
}

/// `floor(r·(d_s + d_in) / (d_out + d_in))`.
pub fn equal_budget_s(r: usize, d_out: usize, d_in: usize, d_s: usize) -> Result<usize> {
    if d_s > d_out {
        return Err(Error::validation(format!(
            "active outputs {d_s} exceed d_out {d_out}"
        )));
    }
    if d_out + d_in == 0 {
        return Err(Error::validation("dimensions must be positive"));
    }
    Ok((r as u64 * (d_s + d_in) as u64 / (d_out + d_in) as u64) as usize)
}

/// Equal-budget configuration of the two masking schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
    pub d_s: usize,
    pub s: usize,
    /// Masked output fraction `(d_out − d_s) / d_out`.
    pub f: f64,
}

impl BudgetSpec {
    pub fn equal_budget(d_out: usize, d_in: usize, r: usize, d_s: usize) -> Result<Self> {
        if d_out == 0 || d_in == 0 {
            return Err(Error::validation("dimensions must be positive"));
        }
        let s = equal_budget_s(r, d_out, d_in, d_s)?;
        Ok(Self {
            d_out,
            d_in,
            r,
            d_s,
            s,
            f: (d_out - d_s) as f64 / d_out as f64,
        })
    }

    pub fn rank_params(&self) -> u64 {
        param_count_rank(self.d_out, self.d_in, self.s)
    }

    pub fn out_params(&self) -> u64 {
        param_count_out(self.d_out, self.d_in, self.r, self.d_s)
    }

    /// `s = 0` leaves the rank side with nothing; still legal.
    pub fn is_degenerate(&self) -> bool {
        self.s == 0
    }
}

fn check_rank(x: &Matrix, r: usize) -> Result<()> {
    let p = x.rows().min(x.cols());
    if r == 0 || r > p {
        return Err(Error::validation(format!(
            "rank {r} out of range 1..={p} for a {}x{} matrix",
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// Error of keeping the top `s` components of the rank-`r` factorization.
pub fn rank_mask_error(x: &Matrix, r: usize, s: usize) -> Result<f64> {
    check_rank(x, r)?;
    if s > r {
        return Err(Error::validation(format!(
            "active components {s} exceed rank {r}"
        )));
    }
    tail_energy(&svd(x)?.sigma, s)
}

/// How the output-mask minimum is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Exhaustive up to [`EXHAUSTIVE_MAX_ROWS`] rows, greedy above.
    #[default]
    Auto,
    Exhaustive,
    Greedy,
}

/// The search that actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMaskError {
    pub error: f64,
    pub method: SearchMethod,
    /// Kept rows.
    pub mask: Vec<bool>,
}

/// Per-row squared errors when a row of the rank-`r` approximation is kept
/// or dropped.
struct RowCosts {
    kept: Vec<f64>,
    dropped: Vec<f64>,
}

impl RowCosts {
    fn new(x: &Matrix, approx: &Matrix) -> Self {
        let mut kept = Vec::with_capacity(x.rows());
        let mut dropped = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let (xi, yi) = (x.row(i), approx.row(i));
            kept.push(xi.iter().zip(yi).map(|(a, b)| (a - b) * (a - b)).sum());
            dropped.push(xi.iter().map(|a| a * a).sum());
        }
        Self { kept, dropped }
    }

    fn total(&self, mask: &[bool]) -> f64 {
        mask.iter()
            .enumerate()
            .map(|(i, &keep)| if keep { self.kept[i] } else { self.dropped[i] })
            .sum()
    }
}

/// Minimum of `‖X − M_out·Y‖_F` over binary output masks with exactly
/// `d_s` ones, where `Y` is the best rank-`r` approximation of `X`.
pub fn output_mask_error(
    x: &Matrix,
    r: usize,
    d_s: usize,
    mode: SearchMode,
) -> Result<OutputMaskError> {
    check_rank(x, r)?;
    let d_out = x.rows();
    if d_s > d_out {
        return Err(Error::validation(format!(
            "active outputs {d_s} exceed d_out {d_out}"
        )));
    }
    let method = match mode {
        SearchMode::Exhaustive if d_out > EXHAUSTIVE_MAX_ROWS => {
            return Err(Error::validation(format!(
                "exhaustive output-mask search limited to d_out <= {EXHAUSTIVE_MAX_ROWS}, got {d_out}"
            )))
        }
        SearchMode::Exhaustive => SearchMethod::Exhaustive,
        SearchMode::Greedy => SearchMethod::Greedy,
        SearchMode::Auto if d_out <= EXHAUSTIVE_MAX_ROWS => SearchMethod::Exhaustive,
        SearchMode::Auto => SearchMethod::Greedy,
    };
    let approx = svd(x)?.reconstruct(r);
    let costs = RowCosts::new(x, &approx);
    let mask = match method {
        SearchMethod::Exhaustive => exhaustive_mask(&costs, d_out, d_s),
        SearchMethod::Greedy => greedy_mask(&costs, d_out, d_s),
    };
    Ok(OutputMaskError {
        error: costs.total(&mask).sqrt(),
        method,
        mask,
    })
}

/// Enumerates kept-row sets in lexicographic order; the first minimum wins.
fn exhaustive_mask(costs: &RowCosts, n: usize, k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..k).collect();
    let mut mask = vec![false; n];
    let mut best = (f64::INFINITY, vec![false; n]);
    loop {
        mask.iter_mut().for_each(|m| *m = false);
        for &i in &idx {
            mask[i] = true;
        }
        let total = costs.total(&mask);
        if total < best.0 {
            best = (total, mask.clone());
        }
        // Advance to the next k-combination of 0..n.
        let mut pos = k;
        loop {
            if pos == 0 {
                return best.1;
            }
            pos -= 1;
            if idx[pos] < n - k + pos {
                idx[pos] += 1;
                for j in pos + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Starts from all rows kept and repeatedly drops the row whose removal adds
/// the least error.
fn greedy_mask(costs: &RowCosts, n: usize, k: usize) -> Vec<bool> {
    let mut mask = vec![true; n];
    for _ in k..n {
        let pick = (0..n)
            .filter(|&i| mask[i])
            .min_by(|&a, &b| {
                let ga = costs.dropped[a] - costs.kept[a];
                let gb = costs.dropped[b] - costs.kept[b];
                ga.total_cmp(&gb).then(a.cmp(&b))
            })
            .expect("rows remain while dropping");
        mask[pick] = false;
    }
    mask
}

/// `(f·Σ_{i≤r} σ_i² + Σ_{i>r} σ_i²)^{1/2}`: the averaged-energy estimate of the
/// output-mask error.
pub fn output_mask_error_lower_bound(sigma: &[f64], r: usize, f: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::validation(format!(
            "masked fraction {f} must lie in [0, 1]"
        )));
    }
    if r > sigma.len() {
        return Err(Error::validation(format!(
            "rank {r} exceeds the {} singular values",
            sigma.len()
        )));
    }
    let head: f64 = sigma[..r].iter().map(|s| s * s).sum();
    let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
    Ok((f * head + tail).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckResult {
    pub budget: BudgetSpec,
    pub e_rank: f64,
    pub e_out: f64,
    pub e_out_lower_bound: f64,
    pub method: SearchMethod,
    /// `e_rank ≤ e_out + 1e-9`.
    pub holds: bool,
    /// `e_out ≥ e_out_lower_bound − 1e-9`.
    pub bound_respected: bool,
}

/// Measures both masking errors at equal parameter budget.
pub fn theorem_check(
    x: &Matrix,
    r: usize,
    d_s: usize,
    mode: SearchMode,
) -> Result<TheoremCheckResult> {
    check_rank(x, r)?;
    let budget = BudgetSpec::equal_budget(x.rows(), x.cols(), r, d_s)?;
    let sigma = svd(x)?.sigma;
    let e_rank = tail_energy(&sigma, budget.s)?;
    let out = output_mask_error(x, r, d_s, mode)?;
    let e_out_lower_bound = output_mask_error_lower_bound(&sigma, r, budget.f)?;
    Ok(TheoremCheckResult {
        budget,
        e_rank,
        e_out: out.error,
        e_out_lower_bound,
        method: out.method,
        holds: e_rank <= out.error + HOLDS_TOLERANCE,
        bound_respected: out.error >= e_out_lower_bound - HOLDS_TOLERANCE,
    })
}

/// Random-matrix family for verification runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Ensemble {
    /// i.i.d. standard normal entries.
    #[default]
    Gaussian,
    /// Singular values `scale·decay^i` with random orthonormal singular vectors.
    Geometric { scale: f64, decay: f64 },
}

/// Draws one matrix of the ensemble.
pub fn random_instance(d_out: usize, d_in: usize, ensemble: Ensemble, seed: u64) -> Result<Matrix> {
    if d_out == 0 || d_in == 0 {
        return Err(Error::validation("dimensions must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    match ensemble {
        Ensemble::Gaussian => Ok(gaussian_matrix(d_out, d_in, 1.0, &mut rng)),
        Ensemble::Geometric { scale, decay } => {
            if !(scale.is_finite() && decay.is_finite() && scale >= 0.0 && decay >= 0.0) {
                return Err(Error::validation(
                    "geometric spectrum needs finite non-negative scale and decay",
                ));
            }
            let p = d_out.min(d_in);
            let sigma: Vec<f64> = (0..p).map(|i| scale * decay.powi(i as i32)).collect();
            let u = svd(&gaussian_matrix(d_out, p, 1.0, &mut rng))?.u;
            let v = svd(&gaussian_matrix(d_in, p, 1.0, &mut rng))?.u;
            Ok(crate::linalg::SvdFactors { u, sigma, v }.reconstruct(p))
        }
    }
}

/// One instance of a verification batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub seed: u64,
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
    pub d_s: usize,
    #[serde(default)]
    pub ensemble: Ensemble,
}

/// Batch settings shared by every instance of a uniform run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub trials: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
    pub d_s: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: SearchMode,
    #[serde(default)]
    pub ensemble: Ensemble,
}

impl VerifyConfig {
    pub fn instances(&self) -> Vec<InstanceSpec> {
        (0..self.trials)
            .map(|i| InstanceSpec {
                seed: instance_seed(self.seed, i),
                d_out: self.d_out,
                d_in: self.d_in,
                r: self.r,
                d_s: self.d_s,
                ensemble: self.ensemble,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub seed: u64,
    pub dims: [usize; 2],
    pub r: usize,
    pub d_s: usize,
    pub s: usize,
    pub e_rank: f64,
    pub e_out: f64,
    pub e_out_lower_bound: f64,
    pub method: SearchMethod,
    pub holds: bool,
    pub bound_respected: bool,
    pub degenerate: bool,
}

/// A matrix on which rank masking lost, kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub index: usize,
    pub seed: u64,
    pub e_rank: f64,
    pub e_out: f64,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub kind: String,
    pub format_version: String,
    pub trials: usize,
    pub holds_fraction: f64,
    pub bound_respected_fraction: f64,
    pub degenerate_count: usize,
    pub instances: Vec<InstanceRecord>,
    pub counterexamples: Vec<Counterexample>,
}

pub const THEOREM_REPORT_KIND: &str = "theorem-verification";

/// Runs [`theorem_check`] over every instance. Records are ordered by
/// instance index regardless of execution mode.
pub fn verify_instances(
    specs: &[InstanceSpec],
    mode: SearchMode,
    exec: Execution,
) -> Result<VerificationReport> {
    let indexed: Vec<(usize, InstanceSpec)> = specs.iter().copied().enumerate().collect();
    let results = map_slice(
        exec,
        &indexed,
        |&(index, spec)| -> Result<(InstanceRecord, Option<Counterexample>)> {
            let x = random_instance(spec.d_out, spec.d_in, spec.ensemble, spec.seed)?;
            let check = theorem_check(&x, spec.r, spec.d_s, mode)?;
            let record = InstanceRecord {
                index,
                seed: spec.seed,
                dims: [spec.d_out, spec.d_in],
                r: spec.r,
                d_s: spec.d_s,
                s: check.budget.s,
                e_rank: check.e_rank,
                e_out: check.e_out,
                e_out_lower_bound: check.e_out_lower_bound,
                method: check.method,
                holds: check.holds,
                bound_respected: check.bound_respected,
                degenerate: check.budget.is_degenerate(),
            };
            let counter = (!check.holds).then(|| Counterexample {
                index,
                seed: spec.seed,
                e_rank: check.e_rank,
                e_out: check.e_out,
                matrix: (0..x.rows()).map(|i| x.row(i).to_vec()).collect(),
            });
            Ok((record, counter))
        },
    );
    let mut instances = Vec::with_capacity(specs.len());
    let mut counterexamples = Vec::new();
    for result in results {
        let (record, counter) = result?;
        instances.push(record);
        counterexamples.extend(counter);
    }
    let trials = instances.len();
    let frac = |n: usize| {
        if trials == 0 {
            0.0
        } else {
            n as f64 / trials as f64
        }
    };
    Ok(VerificationReport {
        kind: THEOREM_REPORT_KIND.to_string(),
        format_version: crate::FORMAT_VERSION.to_string(),
        trials,
        holds_fraction: frac(instances.iter().filter(|r| r.holds).count()),
        bound_respected_fraction: frac(instances.iter().filter(|r| r.bound_respected).count()),
        degenerate_count: instances.iter().filter(|r| r.degenerate).count(),
        instances,
        counterexamples,
    })
}

/// Uniform batch from a [`VerifyConfig`].
pub fn run_verification(config: &VerifyConfig, exec: Execution) -> Result<VerificationReport> {
    if config.d_s > config.d_out {
        return Err(Error::validation(format!(
            "active outputs {} exceed d_out {}",
            config.d_s, config.d_out
        )));
    }
    if config.mode == SearchMode::Exhaustive && config.d_out > EXHAUSTIVE_MAX_ROWS {
        return Err(Error::validation(format!(
            "exhaustive output-mask search limited to d_out <= {EXHAUSTIVE_MAX_ROWS}, got {}",
            config.d_out
        )));
    }
    verify_instances(&config.instances(), config.mode, exec)
}
