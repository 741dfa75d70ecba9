//! The editing risks: reliability NLL on edit prompts, locality KL against
//! the frozen base model on unrelated prompts, and an MMD generality risk
//! between hidden states of edit and rephrase prompts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, EditDelta, OmegaDist, OmegaSampling, PromptBatch, PromptVec, ToyModel};
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default bandwidth multipliers applied to the median pairwise distance.
pub const DEFAULT_BANDWIDTH_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    #[default]
    MedianHeuristic,
    Fixed,
}

/// Bandwidths of the multi-scale Gaussian kernel
/// `k(a, b) = Σ_q exp(-‖a - b‖² / (2 σ_q²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
    pub rule: BandwidthRule,
}

impl KernelSpec {
    pub fn fixed(bandwidths: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec {
            bandwidths,
            rule: BandwidthRule::Fixed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Median of pooled pairwise distances times each multiplier. A pool
    /// with zero median distance uses a unit base bandwidth.
    pub fn median_heuristic(pooled: &[&[f64]], multipliers: &[f64]) -> Result<Self> {
        let mut dists = Vec::new();
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                dists.push(euclidean_sq(pooled[i], pooled[j]).sqrt());
            }
        }
        let median = median(&mut dists).filter(|&m| m > 0.0).unwrap_or(1.0);
        let spec = KernelSpec {
            bandwidths: multipliers.iter().map(|m| m * median).collect(),
            rule: BandwidthRule::MedianHeuristic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::Config {
                field: "kernel.bandwidths".into(),
                reason: "need at least one bandwidth".into(),
            });
        }
        if let Some(b) = self.bandwidths.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::Config {
                field: "kernel.bandwidths".into(),
                reason: format!("bandwidth {b} is not positive"),
            });
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// V-statistic; always non-negative.
    #[default]
    Biased,
    /// U-statistic; within-set diagonal terms excluded.
    Unbiased,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskWeights {
    pub rel: f64,
    pub loc: f64,
    pub gen: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        RiskWeights {
            rel: 1.0,
            loc: 1.0,
            gen: 1.0,
        }
    }
}

impl RiskWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, w) in [("rel", self.rel), ("loc", self.loc), ("gen", self.gen)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config {
                    field: format!("weights.{field}"),
                    reason: format!("weight {w} must be non-negative"),
                });
            }
        }
        if self.rel == 0.0 && self.loc == 0.0 && self.gen == 0.0 {
            return Err(Error::Config {
                field: "weights".into(),
                reason: "all risk weights are zero".into(),
            });
        }
        Ok(())
    }
}

/// Per-step risk values. `r_rel`, `r_loc`, `r_gen` are the weighted
/// contributions, so they sum to `r_total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub step: usize,
    pub r_rel: f64,
    pub r_loc: f64,
    pub r_gen: f64,
    pub tv_penalty: f64,
    pub lambda: f64,
    pub r_total: f64,
}

/// Mean over rows of `-log p(y_i)`, with `p` floored at [`PROB_FLOOR`].
pub fn nll_from_logits<'g>(logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    let (n, v) = match shape.as_slice() {
        [n, v] if *n == targets.len() => (*n, *v),
        _ => {
            return Err(Error::Dimension(format!(
                "logits {shape:?} vs {} targets",
                targets.len()
            )))
        }
    };
    if n == 0 {
        return Err(Error::Empty("reliability batch"));
    }
    let mut onehot = vec![0.0; n * v];
    for (i, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::Dimension(format!("target {y} outside [0, {v})")));
        }
        onehot[i * v + y] = 1.0;
    }
    let g = logits.graph();
    let logp = logits.log_softmax_rows()?.clamp_min(PROB_FLOOR.ln())?;
    let picked = logp.mul(g.constant(Tensor::matrix(n, v, onehot)?))?.sum()?;
    Ok(picked.mul_scalar(-1.0 / n as f64)?)
}

/// Row-wise log-softmax of a logit matrix, floored at `ln(PROB_FLOOR)`.
pub fn log_probs(logits: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let l = g.constant(logits.clone());
    Ok(l.log_softmax_rows()?.clamp_min(PROB_FLOOR.ln())?.value())
}

/// Mean over rows of `KL(p ‖ q)` where `p = softmax(logits)` and
/// `base_logp` holds the (constant) log-probabilities of `q`.
pub fn kl_from_logits<'g>(logits: Var<'g>, base_logp: &Tensor) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.as_slice() != base_logp.shape() || shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "logits {shape:?} vs base log-probs {:?}",
            base_logp.shape()
        )));
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::Empty("locality batch"));
    }
    let g = logits.graph();
    let logp = logits.log_softmax_rows()?.clamp_min(PROB_FLOOR.ln())?;
    let p = logp.exp()?;
    let diff = logp.sub(g.constant(base_logp.clone()))?;
    Ok(p.mul(diff)?.sum()?.mul_scalar(1.0 / n as f64)?)
}

/// Sum of the multi-scale kernel over all row pairs of `a` and `b`,
/// optionally skipping the diagonal (only meaningful when `a` is `b`).
fn kernel_sum<'g>(a: Var<'g>, b: Var<'g>, spec: &KernelSpec, skip_diagonal: bool) -> Result<Var<'g>> {
    let g = a.graph();
    let d2 = a.sq_dists(b)?;
    let mut k: Option<Var<'g>> = None;
    for &s in &spec.bandwidths {
        let term = d2.mul_scalar(-1.0 / (2.0 * s * s))?.exp()?;
        k = Some(match k {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let k = k.expect("validated kernel has a bandwidth");
    if skip_diagonal {
        let shape = k.shape();
        let (n, m) = (shape[0], shape[1]);
        let mask = (0..n * m)
            .map(|i| if i / m == i % m { 0.0 } else { 1.0 })
            .collect();
        Ok(k.mul(g.constant(Tensor::matrix(n, m, mask)?))?.sum()?)
    } else {
        Ok(k.sum()?)
    }
}

/// Squared MMD between the row sets of `z_e` `[n,d]` and `z_r` `[m,d]` on
/// the graph.
pub fn mmd_graph<'g>(
    z_e: Var<'g>,
    z_r: Var<'g>,
    spec: &KernelSpec,
    estimator: MmdEstimator,
) -> Result<Var<'g>> {
    let (n, m) = (z_e.shape()[0], z_r.shape()[0]);
    if n == 0 || m == 0 {
        return Err(Error::Empty("MMD sample set"));
    }
    let (ee, rr, er) = match estimator {
        MmdEstimator::Biased => (
            kernel_sum(z_e, z_e, spec, false)?.mul_scalar(1.0 / (n * n) as f64)?,
            kernel_sum(z_r, z_r, spec, false)?.mul_scalar(1.0 / (m * m) as f64)?,
            kernel_sum(z_e, z_r, spec, false)?.mul_scalar(2.0 / (n * m) as f64)?,
        ),
        MmdEstimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(Error::TooFewSamples { n, m });
            }
            (
                kernel_sum(z_e, z_e, spec, true)?.mul_scalar(1.0 / (n * (n - 1)) as f64)?,
                kernel_sum(z_r, z_r, spec, true)?.mul_scalar(1.0 / (m * (m - 1)) as f64)?,
                kernel_sum(z_e, z_r, spec, false)?.mul_scalar(2.0 / (n * m) as f64)?,
            )
        }
    };
    Ok(ee.add(rr)?.sub(er)?)
}

/// The multi-scale Gaussian kernel between two vectors.
pub fn kernel_multiscale(a: &[f64], b: &[f64], spec: &KernelSpec) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let d2 = euclidean_sq(a, b);
    spec.bandwidths
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp())
        .sum()
}

/// Squared MMD between two sample sets, evaluated without a graph.
///
/// Each of the three kernel sums is accumulated in sorted order, so a pair
/// of identical multisets yields exactly zero regardless of row order.
pub fn mmd_value(z_e: &[Vec<f64>], z_r: &[Vec<f64>], spec: &KernelSpec, estimator: MmdEstimator) -> Result<f64> {
    let (n, m) = (z_e.len(), z_r.len());
    if n == 0 || m == 0 {
        return Err(Error::Empty("MMD sample set"));
    }
    let sorted_sum = |a: &[Vec<f64>], b: &[Vec<f64>], skip_diag: bool| {
        let mut vals = Vec::with_capacity(a.len() * b.len());
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                if !(skip_diag && i == j) {
                    vals.push(kernel_multiscale(x, y, spec));
                }
            }
        }
        vals.sort_by(f64::total_cmp);
        vals.iter().sum::<f64>()
    };
    Ok(match estimator {
        MmdEstimator::Biased => {
            sorted_sum(z_e, z_e, false) / (n * n) as f64 + sorted_sum(z_r, z_r, false) / (m * m) as f64
                - 2.0 * sorted_sum(z_e, z_r, false) / (n * m) as f64
        }
        MmdEstimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(Error::TooFewSamples { n, m });
            }
            sorted_sum(z_e, z_e, true) / (n * (n - 1)) as f64
                + sorted_sum(z_r, z_r, true) / (m * (m - 1)) as f64
                - 2.0 * sorted_sum(z_e, z_r, false) / (n * m) as f64
        }
    })
}

/// Categorical `KL(p ‖ q)` in nats with `q` floored at [`PROB_FLOOR`].
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// The three prompt groups of one training step, with the frozen base
/// model's log-probabilities on the unrelated prompts.
#[derive(Clone, Debug)]
pub struct EditBatch {
    /// Edit prompts; `y` holds the new target.
    pub inputs: PromptBatch,
    /// Semantic neighbours (rephrases) of the edit prompts.
    pub rephrases: PromptBatch,
    /// Out-of-scope prompts.
    pub unrelated: PromptBatch,
    pub base_logp: Tensor,
}

impl EditBatch {
    pub fn new(
        model: &ToyModel,
        inputs: &[&PromptVec],
        rephrases: &[&PromptVec],
        unrelated: &[&PromptVec],
    ) -> Result<Self> {
        let zero = EditDelta::zeros(model, &[]);
        let base_logits = model.forward_batch(&zero, 0.0, unrelated)?;
        Ok(EditBatch {
            inputs: PromptBatch::new(inputs, &model.dims)?,
            rephrases: PromptBatch::new(rephrases, &model.dims)?,
            unrelated: PromptBatch::new(unrelated, &model.dims)?,
            base_logp: log_probs(&base_logits)?,
        })
    }
}

/// Last hidden states of the three prompt groups on one graph. They do not
/// depend on ω, so one set serves every ω draw.
#[derive(Clone, Copy)]
pub struct HiddenStates<'g> {
    pub inputs: Var<'g>,
    pub rephrases: Var<'g>,
    pub unrelated: Var<'g>,
}

impl<'g> HiddenStates<'g> {
    pub fn compute(model: &BoundModel<'g>, batch: &EditBatch) -> Result<Self> {
        Ok(HiddenStates {
            inputs: model.hidden(&batch.inputs)?,
            rephrases: model.hidden(&batch.rephrases)?,
            unrelated: model.hidden(&batch.unrelated)?,
        })
    }
}

/// Risk settings shared by every evaluation in a run.
#[derive(Clone, Debug)]
pub struct RiskSpec {
    pub weights: RiskWeights,
    pub kernel: KernelSpec,
    pub estimator: MmdEstimator,
}

/// Graph nodes for the weighted risk terms at one ω.
#[derive(Clone, Copy)]
pub struct RiskTerms<'g> {
    pub rel: Var<'g>,
    pub loc: Var<'g>,
    pub gen: Var<'g>,
    pub total: Var<'g>,
}

pub fn reliability_risk<'g>(
    model: &BoundModel<'g>,
    hidden: Var<'g>,
    targets: &[usize],
    omega: Option<Var<'g>>,
) -> Result<Var<'g>> {
    nll_from_logits(model.logits(hidden, omega)?, targets)
}

pub fn locality_risk<'g>(
    model: &BoundModel<'g>,
    hidden: Var<'g>,
    base_logp: &Tensor,
    omega: Option<Var<'g>>,
) -> Result<Var<'g>> {
    kl_from_logits(model.logits(hidden, omega)?, base_logp)
}

/// MMD between ω-perturbed hidden states of edit and rephrase prompts.
pub fn generality_risk<'g>(
    model: &BoundModel<'g>,
    z_e: Var<'g>,
    z_r: Var<'g>,
    omega: Option<Var<'g>>,
    kernel: &KernelSpec,
    estimator: MmdEstimator,
) -> Result<Var<'g>> {
    let z_e = model.perturb(z_e, omega)?;
    let z_r = model.perturb(z_r, omega)?;
    mmd_graph(z_e, z_r, kernel, estimator)
}

/// `w_rel·R_rel + w_loc·R_loc + w_gen·R_gen` at one ω. Terms with zero
/// weight are not built and contribute a constant zero.
pub fn edit_risk_total<'g>(
    model: &BoundModel<'g>,
    hidden: &HiddenStates<'g>,
    batch: &EditBatch,
    omega: Option<Var<'g>>,
    spec: &RiskSpec,
) -> Result<RiskTerms<'g>> {
    let g = hidden.inputs.graph();
    let w = spec.weights;
    let zero = || g.scalar(0.0);
    let rel = if w.rel > 0.0 {
        reliability_risk(model, hidden.inputs, &batch.inputs.y, omega)?.mul_scalar(w.rel)?
    } else {
        zero()
    };
    let loc = if w.loc > 0.0 {
        locality_risk(model, hidden.unrelated, &batch.base_logp, omega)?.mul_scalar(w.loc)?
    } else {
        zero()
    };
    let gen = if w.gen > 0.0 {
        generality_risk(
            model,
            hidden.inputs,
            hidden.rephrases,
            omega,
            &spec.kernel,
            spec.estimator,
        )?
        .mul_scalar(w.gen)?
    } else {
        zero()
    };
    let total = rel.add(loc)?.add(gen)?;
    Ok(RiskTerms { rel, loc, gen, total })
}

/// Mean of `f(ω_i)` over `n_samples` draws of `dist`.
pub fn expectation_over_omega<'g, F>(
    graph: &'g Graph,
    dist: &OmegaDist,
    n_samples: usize,
    seed: u64,
    scheme: OmegaSampling,
    mut f: F,
) -> Result<Var<'g>>
where
    F: FnMut(f64) -> Result<Var<'g>>,
{
    if n_samples == 0 {
        return Err(Error::Config {
            field: "n_omega".into(),
            reason: "need at least one ω sample".into(),
        });
    }
    let mut acc: Option<Var<'g>> = None;
    for w in dist.samples(n_samples, seed, scheme) {
        let v = f(w)?;
        acc = Some(match acc {
            Some(a) => a.add(v)?,
            None => v,
        });
    }
    let acc = acc.unwrap_or_else(|| graph.scalar(0.0));
    Ok(acc.mul_scalar(1.0 / n_samples as f64)?)
}
