//! The IRM-TV objective and its primal-dual optimizer.
//!
//! The penalty is `(E_ω |∂R/∂ω|)²`. With the exact method, every ω draw is
//! a graph leaf seeded in the tangent channel, so `∂R/∂ω` is itself a
//! node and its absolute value can be backpropagated into the edit delta.
//! The penalty is weighted by `λ(δ, φ_e)`, the output of a small network
//! fed with the dual vector δ and pooled statistics of the edit tensors.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, EditDelta, Layer, OmegaDist, OmegaSampling, ToyModel, DEFAULT_EDIT_LAYERS};
use crate::params::{ParamSet, Role};
use crate::risks::{
    edit_risk_total, generality_risk, EditBatch, HiddenStates, KernelSpec, MmdEstimator, RiskReport, RiskSpec,
    RiskWeights, DEFAULT_BANDWIDTH_MULTIPLIERS,
};
use crate::tensor::Tensor;

/// Which risk the TV term differentiates in ω.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTarget {
    /// The weighted sum of all three risks.
    #[default]
    FullEditRisk,
    /// Only the weighted generality term.
    GenRiskOnly,
}

/// How `∂R/∂ω` is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OmegaGradient {
    /// Forward tangent recorded on the reverse graph.
    #[default]
    Exact,
    /// Central differences `(R(ω+h) − R(ω−h)) / 2h`; the difference quotient
    /// stays on the graph, so `abs` supplies the sign rule in φ_e.
    FiniteDifference { step: f64 },
}

/// How the penalty weight is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaMode {
    /// `λ(δ, φ_e)` from the λ network, with dual ascent.
    #[default]
    Adaptive,
    /// A constant weight; no dual parameters.
    Fixed { value: f64 },
    /// No penalty at all.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub n_omega: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub weights: RiskWeights,
    pub penalty_target: PenaltyTarget,
    pub lambda: LambdaMode,
    pub omega: OmegaDist,
    pub omega_sampling: OmegaSampling,
    pub omega_gradient: OmegaGradient,
    pub estimator: MmdEstimator,
    /// Bandwidths for the MMD kernel; derived from the batch when absent.
    pub kernel: Option<KernelSpec>,
    pub edit_layers: Vec<Layer>,
    pub dual_dim: usize,
    pub lambda_hidden: usize,
    /// λ-net output at initialisation, set through the output bias.
    pub lambda_init: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma1: 1e-2,
            gamma2: 1e-3,
            n_omega: 8,
            max_steps: 500,
            seed: 0,
            weights: RiskWeights::default(),
            penalty_target: PenaltyTarget::default(),
            lambda: LambdaMode::default(),
            omega: OmegaDist::default(),
            omega_sampling: OmegaSampling::default(),
            omega_gradient: OmegaGradient::default(),
            estimator: MmdEstimator::default(),
            kernel: None,
            edit_layers: DEFAULT_EDIT_LAYERS.to_vec(),
            dual_dim: 8,
            lambda_hidden: 16,
            lambda_init: 0.01,
            plateau_window: 20,
            plateau_tol: 1e-5,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::Config {
            field: format!("train.{field}"),
            reason,
        });
        if !(self.gamma1.is_finite() && self.gamma1 > 0.0) {
            return bad("gamma1", format!("must be positive, got {}", self.gamma1));
        }
        if !(self.gamma2.is_finite() && self.gamma2 > 0.0) {
            return bad("gamma2", format!("must be positive, got {}", self.gamma2));
        }
        if self.n_omega == 0 {
            return bad("n_omega", "need at least one ω sample".into());
        }
        if self.edit_layers.is_empty() {
            return bad("edit_layers", "need at least one edit layer".into());
        }
        if self.dual_dim == 0 || self.lambda_hidden == 0 {
            return bad("dual_dim", "λ network sizes must be positive".into());
        }
        if !(self.lambda_init.is_finite() && self.lambda_init > LAMBDA_FLOOR) {
            return bad("lambda_init", format!("must exceed {LAMBDA_FLOOR}, got {}", self.lambda_init));
        }
        if let LambdaMode::Fixed { value } = self.lambda {
            if !(value.is_finite() && value >= 0.0) {
                return bad("lambda.value", format!("must be non-negative, got {value}"));
            }
        }
        if let OmegaGradient::FiniteDifference { step } = self.omega_gradient {
            if !(step.is_finite() && step > 0.0) {
                return bad("omega_gradient.step", format!("must be positive, got {step}"));
            }
        }
        self.weights.validate()?;
        self.omega.validate()?;
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        Ok(())
    }

    fn penalty_enabled(&self) -> bool {
        !matches!(self.lambda, LambdaMode::Off)
    }

    /// ω draws for one optimizer step.
    pub fn omegas(&self, step: usize) -> Vec<f64> {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step as u64);
        self.omega.samples(self.n_omega, seed, self.omega_sampling)
    }
}

/// Expectations over ω of the weighted risk terms, and the TV penalty.
#[derive(Clone, Copy)]
pub struct ExpectedTerms<'g> {
    pub rel: Var<'g>,
    pub loc: Var<'g>,
    pub gen: Var<'g>,
    pub total: Var<'g>,
    pub penalty: Option<Var<'g>>,
}

/// Averages the components returned by `f` over `omegas`, and when
/// `penalty` is given also returns `(mean_i |∂target/∂ω(ω_i)|)²`.
///
/// `f` receives ω as a graph node and returns `(components, target)`.
pub fn omega_average<'g, F>(
    graph: &'g Graph,
    omegas: &[f64],
    penalty: Option<OmegaGradient>,
    mut f: F,
) -> Result<(Vec<Var<'g>>, Option<Var<'g>>)>
where
    F: FnMut(Var<'g>) -> Result<(Vec<Var<'g>>, Var<'g>)>,
{
    if omegas.is_empty() {
        return Err(Error::Empty("ω samples"));
    }
    let inv_n = 1.0 / omegas.len() as f64;
    let mut sums: Vec<Var<'g>> = Vec::new();
    let mut abs_sum: Option<Var<'g>> = None;
    for &w in omegas {
        let (parts, slope) = match penalty {
            None => (f(graph.scalar(w))?.0, None),
            Some(OmegaGradient::Exact) => {
                if !graph.tangent_enabled() {
                    graph.enable_tangent();
                }
                let omega = graph.input(Tensor::scalar(w))?;
                graph.seed_tangent(omega, Tensor::scalar(1.0))?;
                let (parts, target) = f(omega)?;
                (parts, Some(graph.tangent(target)?))
            }
            Some(OmegaGradient::FiniteDifference { step }) => {
                let parts = f(graph.scalar(w))?.0;
                let (_, plus) = f(graph.scalar(w + step))?;
                let (_, minus) = f(graph.scalar(w - step))?;
                (parts, Some(plus.sub(minus)?.mul_scalar(0.5 / step)?))
            }
        };
        if sums.is_empty() {
            sums = parts;
        } else {
            if parts.len() != sums.len() {
                return Err(Error::Dimension("component count changed between ω draws".into()));
            }
            for (s, p) in sums.iter_mut().zip(parts) {
                *s = s.add(p)?;
            }
        }
        if let Some(d) = slope {
            let a = d.abs()?;
            abs_sum = Some(match abs_sum {
                Some(acc) => acc.add(a)?,
                None => a,
            });
        }
    }
    let means = sums
        .into_iter()
        .map(|s| s.mul_scalar(inv_n))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let penalty = match abs_sum {
        Some(s) => Some(s.mul_scalar(inv_n)?.square()?),
        None => None,
    };
    Ok((means, penalty))
}

/// Expected weighted risks of the bound model over `omegas`, with the TV
/// penalty when `penalty` is given.
pub fn expected_terms<'g>(
    model: &BoundModel<'g>,
    hidden: &HiddenStates<'g>,
    batch: &EditBatch,
    spec: &RiskSpec,
    omegas: &[f64],
    penalty: Option<(PenaltyTarget, OmegaGradient)>,
) -> Result<ExpectedTerms<'g>> {
    let graph = hidden.inputs.graph();
    let target = penalty.map(|p| p.0).unwrap_or_default();
    let (means, pen) = omega_average(graph, omegas, penalty.map(|p| p.1), |w| {
        let t = edit_risk_total(model, hidden, batch, Some(w), spec)?;
        let tgt = match target {
            PenaltyTarget::FullEditRisk => t.total,
            PenaltyTarget::GenRiskOnly => t.gen,
        };
        Ok((vec![t.rel, t.loc, t.gen, t.total], tgt))
    })?;
    Ok(ExpectedTerms {
        rel: means[0],
        loc: means[1],
        gen: means[2],
        total: means[3],
        penalty: pen,
    })
}

/// The TV penalty `(E_ω |∂R/∂ω|)²` of the bound model as a graph node.
pub fn tv_penalty<'g>(
    model: &BoundModel<'g>,
    hidden: &HiddenStates<'g>,
    batch: &EditBatch,
    spec: &RiskSpec,
    omegas: &[f64],
    target: PenaltyTarget,
    method: OmegaGradient,
) -> Result<Var<'g>> {
    let graph = hidden.inputs.graph();
    let (_, pen) = omega_average(graph, omegas, Some(method), |w| {
        let tgt = match target {
            PenaltyTarget::FullEditRisk => edit_risk_total(model, hidden, batch, Some(w), spec)?.total,
            PenaltyTarget::GenRiskOnly => generality_risk(
                model,
                hidden.inputs,
                hidden.rephrases,
                Some(w),
                &spec.kernel,
                spec.estimator,
            )?
            .mul_scalar(spec.weights.gen)?,
        };
        Ok((Vec::new(), tgt))
    })?;
    Ok(pen.expect("penalty requested"))
}

/// A three-layer perceptron with ReLU hidden units and a Softplus output,
/// producing the penalty weight λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaNet {
    pub params: ParamSet,
    pub input_dim: usize,
    pub hidden: usize,
}

const LAMBDA_LAYERS: [&str; 3] = ["l1", "l2", "l3"];

/// Statistics pooled from each edit tensor: mean, std, L2 norm, max |x|.
pub const STATS_PER_TENSOR: usize = 4;

/// Keeps `sqrt` differentiable at zero spread.
const STAT_EPS: f64 = 1e-12;

/// Added to the Softplus output, which underflows to zero for large
/// negative arguments.
pub const LAMBDA_FLOOR: f64 = 1e-12;

impl LambdaNet {
    /// Xavier-uniform weights, zero biases.
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::with_init(input_dim, hidden, std::f64::consts::LN_2, seed)
    }

    /// Like [`LambdaNet::new`] with the output bias chosen so that a zero
    /// hidden layer yields `lambda0`.
    pub fn with_init(input_dim: usize, hidden: usize, lambda0: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(Role::LambdaNet);
        let sizes = [(input_dim, hidden), (hidden, hidden), (hidden, 1)];
        for (name, (fan_in, fan_out)) in LAMBDA_LAYERS.iter().zip(sizes) {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(&format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
            params.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        }
        // softplus⁻¹(λ0) = ln(e^λ0 − 1)
        let offset = (lambda0 - LAMBDA_FLOOR).exp_m1().ln();
        params.get_mut(&format!("{}.bias", LAMBDA_LAYERS[2])).expect("output layer").data_mut()[0] = offset;
        Ok(LambdaNet {
            params,
            input_dim,
            hidden,
        })
    }

    /// λ for a `[input_dim]` input node. `vars` are the bound parameters.
    pub fn forward<'g>(&self, input: Var<'g>, vars: &BTreeMap<String, Var<'g>>) -> Result<Var<'g>> {
        let mut h = input.reshape(&[1, self.input_dim])?;
        for (i, name) in LAMBDA_LAYERS.iter().enumerate() {
            h = h
                .matmul(vars[&format!("{name}.weight")])?
                .add_row(vars[&format!("{name}.bias")])?;
            if i + 1 < LAMBDA_LAYERS.len() {
                h = h.relu()?;
            }
        }
        Ok(h.softplus()?.add_scalar(LAMBDA_FLOOR)?.reshape(&[])?)
    }

    /// λ on plain values.
    pub fn eval(&self, input: &[f64]) -> Result<f64> {
        let g = Graph::new();
        let vars = self.params.bind_const(&g);
        let x = g.constant(Tensor::vector(input.to_vec()));
        Ok(self.forward(x, &vars)?.item())
    }
}

/// Mean, std, L2 norm and max |x| of a tensor node, each as a `[1]` node.
fn pooled_stats<'g>(x: Var<'g>) -> Result<Vec<Var<'g>>> {
    let mean = x.mean()?;
    let sq = x.square()?;
    let var = sq.mean()?.sub(mean.square()?)?.clamp_min(0.0)?;
    let std = var.add_scalar(STAT_EPS)?.sqrt()?;
    let l2 = sq.sum()?.add_scalar(STAT_EPS)?.sqrt()?;
    let max_abs = x.abs()?.max_all()?;
    [mean, std, l2, max_abs]
        .into_iter()
        .map(|v| Ok(v.reshape(&[1])?))
        .collect()
}

/// The dual vector δ and the λ network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualParams {
    /// Holds the single tensor `"delta"`.
    pub delta: ParamSet,
    pub net: LambdaNet,
}

impl DualParams {
    /// δ ~ U(±0.1); the network input is δ plus the pooled statistics of
    /// every edit tensor.
    pub fn new(dual_dim: usize, n_edit_tensors: usize, hidden: usize, lambda0: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut delta = ParamSet::new(Role::Dual);
        delta.insert(
            "delta",
            Tensor::vector((0..dual_dim).map(|_| rng.random_range(-0.1..0.1)).collect()),
        )?;
        let net = LambdaNet::with_init(
            dual_dim + STATS_PER_TENSOR * n_edit_tensors,
            hidden,
            lambda0,
            seed.wrapping_add(1),
        )?;
        Ok(DualParams { delta, net })
    }

    pub fn for_config(cfg: &TrainConfig, edit: &EditDelta) -> Result<Self> {
        DualParams::new(
            cfg.dual_dim,
            edit.params.len(),
            cfg.lambda_hidden,
            cfg.lambda_init,
            cfg.seed.wrapping_add(0x1a4b_da00),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().chain(self.net.params.iter()).all(|(_, t)| t.is_finite())
    }

    /// `λ(δ, φ_e)` as a node. With `trainable`, δ and the network weights
    /// are named leaves (`dual.*`, `lambda.*`).
    pub fn lambda<'g>(
        &self,
        graph: &'g Graph,
        edit_vars: &BTreeMap<String, Var<'g>>,
        trainable: bool,
    ) -> Result<Var<'g>> {
        let (dvars, nvars) = if trainable {
            (self.delta.bind(graph)?, self.net.params.bind(graph)?)
        } else {
            (self.delta.bind_const(graph), self.net.params.bind_const(graph))
        };
        let mut parts = vec![dvars["delta"]];
        for v in edit_vars.values() {
            parts.extend(pooled_stats(*v)?);
        }
        let input = graph.concat(&parts)?;
        if input.numel() != self.net.input_dim {
            return Err(Error::Dimension(format!(
                "λ network expects {} inputs, got {}",
                self.net.input_dim,
                input.numel()
            )));
        }
        self.net.forward(input, &nvars)
    }

    /// Ascent step `dual += γ2·grad` using gradients of a graph on which
    /// the dual parameters were bound as trainable.
    pub fn ascend(&mut self, grads: &Gradients, gamma2: f64, step: usize) -> Result<()> {
        for set in [&mut self.delta, &mut self.net.params] {
            let g = set.grads_from(grads);
            check_finite(&g, set.role, step)?;
            set.apply(&g, gamma2)?;
        }
        Ok(())
    }
}

fn check_finite(grads: &BTreeMap<String, Tensor>, role: Role, step: usize) -> Result<()> {
    match grads.iter().find(|(_, t)| !t.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteGradient {
            param: format!("{}.{name}", role.prefix()),
            step,
        }),
        None => Ok(()),
    }
}

/// Risk settings for a run: the kernel is taken from `cfg` or, failing
/// that, from the median heuristic on the base hidden states of the edit
/// and rephrase prompts in `batch`.
pub fn risk_spec_for(model: &ToyModel, batch: &EditBatch, cfg: &TrainConfig) -> Result<RiskSpec> {
    let kernel = match &cfg.kernel {
        Some(k) => k.clone(),
        None => {
            let g = Graph::new();
            let zero = EditDelta::zeros(model, &[]);
            let bound = model.bind(&g, &zero, false)?;
            let mut rows = Vec::new();
            for b in [&batch.inputs, &batch.rephrases] {
                let h = bound.hidden(b)?.value();
                rows.extend((0..b.len()).map(|i| h.row(i).to_vec()));
            }
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            KernelSpec::median_heuristic(&refs, &DEFAULT_BANDWIDTH_MULTIPLIERS)?
        }
    };
    Ok(RiskSpec {
        weights: cfg.weights,
        kernel,
        estimator: cfg.estimator,
    })
}

/// One forward pass at the current edit delta: expected risks, the penalty
/// and the delta leaves they hang from.
struct Forward<'g> {
    terms: ExpectedTerms<'g>,
    edit_vars: BTreeMap<String, Var<'g>>,
}

fn forward_pass<'g>(
    graph: &'g Graph,
    model: &ToyModel,
    delta: &EditDelta,
    batch: &EditBatch,
    spec: &RiskSpec,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Forward<'g>> {
    let bound = model.bind(graph, delta, true)?;
    let hidden = HiddenStates::compute(&bound, batch)?;
    let penalty = cfg
        .penalty_enabled()
        .then_some((cfg.penalty_target, cfg.omega_gradient));
    let terms = expected_terms(&bound, &hidden, batch, spec, &cfg.omegas(step), penalty)?;
    Ok(Forward {
        terms,
        edit_vars: bound.delta_vars,
    })
}

/// `G = E_ω[R] + λ·P` on a forward pass. Returns `(G, λ)`.
fn attach_lambda<'g>(
    graph: &'g Graph,
    fwd: &Forward<'g>,
    dual: Option<&DualParams>,
    cfg: &TrainConfig,
) -> Result<(Var<'g>, Var<'g>)> {
    let Some(pen) = fwd.terms.penalty else {
        return Ok((fwd.terms.total, graph.scalar(0.0)));
    };
    let lambda = match (cfg.lambda, dual) {
        (LambdaMode::Fixed { value }, _) => graph.scalar(value),
        (LambdaMode::Adaptive, Some(d)) => d.lambda(graph, &fwd.edit_vars, false)?,
        (LambdaMode::Adaptive, None) => {
            return Err(Error::Config {
                field: "train.lambda".into(),
                reason: "adaptive λ needs dual parameters".into(),
            })
        }
        (LambdaMode::Off, _) => graph.scalar(0.0),
    };
    Ok((fwd.terms.total.add(lambda.mul(pen)?)?, lambda))
}

fn report<'g>(step: usize, fwd: &Forward<'g>, lambda: Var<'g>) -> RiskReport {
    RiskReport {
        step,
        r_rel: fwd.terms.rel.item(),
        r_loc: fwd.terms.loc.item(),
        r_gen: fwd.terms.gen.item(),
        tv_penalty: fwd.terms.penalty.map_or(0.0, |p| p.item()),
        lambda: lambda.item(),
        r_total: fwd.terms.total.item(),
    }
}

/// The Lagrangian `G = E_ω[w·R] + λ(δ, φ_e)·P` at `(delta, dual)` for the
/// ω draws of `step`. The edit delta is bound as named leaves `edit.*`.
pub fn lagrangian<'g>(
    graph: &'g Graph,
    model: &ToyModel,
    delta: &EditDelta,
    dual: Option<&DualParams>,
    batch: &EditBatch,
    spec: &RiskSpec,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Var<'g>, RiskReport)> {
    let fwd = forward_pass(graph, model, delta, batch, spec, cfg, step)?;
    let (g, lambda) = attach_lambda(graph, &fwd, dual, cfg)?;
    Ok((g, report(step, &fwd, lambda)))
}

/// `φ_e ← φ_e − γ1·∂G/∂φ_e` at the current dual parameters.
pub fn primal_step(
    model: &ToyModel,
    delta: &mut EditDelta,
    dual: Option<&DualParams>,
    batch: &EditBatch,
    spec: &RiskSpec,
    cfg: &TrainConfig,
    step: usize,
) -> Result<RiskReport> {
    let graph = Graph::new();
    let (g, rep) = lagrangian(&graph, model, delta, dual, batch, spec, cfg, step)?;
    let grads = graph.backward(g)?;
    descend(delta, &grads, cfg.gamma1, step)?;
    Ok(rep)
}

fn descend(delta: &mut EditDelta, grads: &Gradients, gamma1: f64, step: usize) -> Result<()> {
    let g = delta.params.grads_from(grads);
    check_finite(&g, Role::Edit, step)?;
    delta.params.apply(&g, -gamma1)
}

/// `δ ← δ + γ2·∇_δ G` at the current edit delta. Only the `λ·P` term
/// depends on the dual parameters, so this is `γ2·P·∇λ`.
pub fn dual_step(
    dual: &mut DualParams,
    model: &ToyModel,
    delta: &EditDelta,
    batch: &EditBatch,
    spec: &RiskSpec,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    let graph = Graph::new();
    let fwd = forward_pass(&graph, model, delta, batch, spec, cfg, step)?;
    let p = fwd.terms.penalty.map_or(0.0, |p| p.item());
    dual_ascent(dual, &fwd.edit_vars, p, cfg, step)
}

/// Ascent on `λ(δ, φ_e)·p` with `p` and `φ_e` held constant, on a small
/// graph of its own.
fn dual_ascent(
    dual: &mut DualParams,
    edit_vars: &BTreeMap<String, Var<'_>>,
    penalty: f64,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    let graph = Graph::new();
    let consts: BTreeMap<String, Var<'_>> = edit_vars
        .iter()
        .map(|(k, v)| (k.clone(), graph.constant(v.value())))
        .collect();
    let lambda = dual.lambda(&graph, &consts, true)?;
    let objective = lambda.mul_scalar(penalty)?;
    let grads = graph.backward(objective)?;
    dual.ascend(&grads, cfg.gamma2, step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub delta: EditDelta,
    pub dual: Option<DualParams>,
    /// One report per primal step, evaluated before that step's update.
    pub history: Vec<RiskReport>,
    pub stop: StopReason,
}

fn plateaued(history: &[RiskReport], window: usize, tol: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let now = history[history.len() - 1].r_total;
    let then = history[history.len() - 1 - window].r_total;
    (now - then).abs() <= tol * then.abs().max(f64::MIN_POSITIVE)
}

/// Alternating primal descent and dual ascent from `init`.
///
/// Iteration k takes a primal step at `δ^k`, then a dual step at the
/// updated `φ_e^{k+1}`. The forward pass at `φ_e^{k+1}` serves both that
/// dual step and the next primal step, so each iteration costs one pass.
pub fn train_edit(
    model: &ToyModel,
    batch: &EditBatch,
    cfg: &TrainConfig,
    init: &EditDelta,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = risk_spec_for(model, batch, cfg)?;
    let mut delta = init.clone();
    let mut dual = match cfg.lambda {
        LambdaMode::Adaptive => Some(DualParams::for_config(cfg, &delta)?),
        _ => None,
    };
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut stop = StopReason::MaxSteps;
    for step in 0..cfg.max_steps {
        let graph = Graph::new();
        let fwd = forward_pass(&graph, model, &delta, batch, &spec, cfg, step)?;
        if step > 0 {
            if let (Some(d), Some(p)) = (dual.as_mut(), fwd.terms.penalty) {
                dual_ascent(d, &fwd.edit_vars, p.item(), cfg, step - 1)?;
            }
        }
        let (g, lambda) = attach_lambda(&graph, &fwd, dual.as_ref(), cfg)?;
        let rep = report(step, &fwd, lambda);
        if !rep.r_total.is_finite() || rep.r_total > cfg.divergence_threshold {
            return Err(Error::Diverged {
                step,
                value: rep.r_total,
            });
        }
        history.push(rep);
        if plateaued(&history, cfg.plateau_window, cfg.plateau_tol) {
            stop = StopReason::Plateau;
            break;
        }
        let grads = graph.backward(g)?;
        descend(&mut delta, &grads, cfg.gamma1, step)?;
    }
    Ok(TrainOutcome {
        delta,
        dual,
        history,
        stop,
    })
}

pub fn write_history_csv(path: &Path, history: &[RiskReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The λ that makes the penalised expected risk equal the worst-case risk:
/// `(max_ω R − E_ω R) / (E_ω|∂R/∂ω|)²`.
pub fn analytic_lambda(max_risk: f64, expected_risk: f64, expected_abs_grad: f64) -> Result<f64> {
    if expected_abs_grad == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let gap = max_risk - expected_risk;
    if gap < -1e-12 * max_risk.abs().max(1.0) {
        return Err(Error::NegativeGap {
            max: max_risk,
            expected: expected_risk,
        });
    }
    Ok(gap.max(0.0) / (expected_abs_grad * expected_abs_grad))
}

/// The one-dimensional example: `R(ω, φ) = |ωφ + 1|`, ω ~ U[−0.9, 0.1].
pub mod oned {
    use super::*;

    pub const LOW: f64 = -0.9;
    pub const HIGH: f64 = 0.1;

    pub fn risk(omega: f64, phi: f64) -> f64 {
        (omega * phi + 1.0).abs()
    }

    /// `E_ω R = 1 − 0.4φ` (the argument of |·| stays positive for |φ| ≤ 1).
    pub fn expected_risk(phi: f64) -> f64 {
        1.0 + phi * 0.5 * (LOW + HIGH)
    }

    /// `(E_ω |∂R/∂ω|)² = φ²`.
    pub fn penalty(phi: f64) -> f64 {
        phi * phi
    }

    /// `max_ω R`: `1 + 0.1φ` for φ ≥ 0 and `1 − 0.9φ` otherwise.
    pub fn max_risk(phi: f64) -> f64 {
        risk(LOW, phi).max(risk(HIGH, phi))
    }

    /// `R` as a graph node.
    pub fn risk_node<'g>(omega: Var<'g>, phi: Var<'g>) -> Result<Var<'g>> {
        Ok(omega.mul(phi)?.add_scalar(1.0)?.abs()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OnedLambda {
    Fixed { value: f64 },
    /// λ chosen per φ by [`analytic_lambda`].
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnedReport {
    pub phi_star: f64,
    pub value: f64,
    pub ood_phi_star: f64,
    pub ood_value: f64,
}

/// Golden-section refinement of a grid minimum. Both objectives here are
/// convex on [−1, 1], so the bracket around the best grid point holds the
/// minimiser.
fn minimize_on_grid(f: impl Fn(f64) -> f64, n: usize) -> (f64, f64) {
    let n = n.max(3);
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let (mut best, mut best_v) = (0, f64::INFINITY);
    for (i, &x) in grid.iter().enumerate() {
        let v = f(x);
        if v < best_v {
            best = i;
            best_v = v;
        }
    }
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n - 1)]);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        if b - a < 1e-14 {
            break;
        }
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let x = 0.5 * (a + b);
    let (x, v) = if f(x) < best_v { (x, f(x)) } else { (grid[best], best_v) };
    (x, v)
}

/// Minimises the IRM-TV objective `E_ω R + λ·P` and the worst-case
/// objective `max_ω R` over φ ∈ [−1, 1] for the one-dimensional example.
pub fn oned_counterexample(lambda: OnedLambda, grid: usize) -> OnedReport {
    let objective = |phi: f64| {
        let lam = match lambda {
            OnedLambda::Fixed { value } => value,
            OnedLambda::Analytic => {
                analytic_lambda(oned::max_risk(phi), oned::expected_risk(phi), phi.abs()).unwrap_or(0.0)
            }
        };
        oned::expected_risk(phi) + lam * oned::penalty(phi)
    };
    let (phi_star, value) = minimize_on_grid(objective, grid);
    let (ood_phi_star, ood_value) = minimize_on_grid(oned::max_risk, grid);
    OnedReport {
        phi_star,
        value,
        ood_phi_star,
        ood_value,
    }
}

/// Worst total risk over `omega_grid`, evaluated without gradients.
pub fn ood_objective_grid(
    model: &ToyModel,
    delta: &EditDelta,
    batch: &EditBatch,
    spec: &RiskSpec,
    omega_grid: &[f64],
) -> Result<f64> {
    if omega_grid.is_empty() {
        return Err(Error::Empty("ω grid"));
    }
    let graph = Graph::new();
    let bound = model.bind(&graph, delta, false)?;
    let hidden = HiddenStates::compute(&bound, batch)?;
    let mut worst = f64::NEG_INFINITY;
    for &w in omega_grid {
        let t = edit_risk_total(&bound, &hidden, batch, Some(graph.scalar(w)), spec)?;
        worst = worst.max(t.total.item());
    }
    Ok(worst)
}

/// `max_ω R` over a grid for any scalar risk function of ω.
pub fn grid_max(omega_grid: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    omega_grid.iter().map(|&w| f(w)).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::model::{init_model, ModelDims, PromptVec};

    fn oned_graph_penalty(phi: f64, omegas: &[f64], method: OmegaGradient) -> (f64, f64) {
        let g = Graph::with_tangent();
        let p = g.param("phi", Tensor::scalar(phi)).unwrap();
        let (_, pen) = omega_average(&g, omegas, Some(method), |w| {
            let r = oned::risk_node(w, p)?;
            Ok((vec![r], r))
        })
        .unwrap();
        let pen = pen.unwrap();
        let grad = g.backward(pen).unwrap().get("phi").unwrap().item();
        (pen.item(), grad)
    }

    #[test]
    fn oned_penalty_is_phi_squared_for_any_draws() {
        for omegas in [vec![-0.5], vec![-0.9, 0.0, 0.05], OmegaDist::default().samples(17, 3, OmegaSampling::MonteCarlo)] {
            let (p, dp) = oned_graph_penalty(0.5, &omegas, OmegaGradient::Exact);
            assert!((p - 0.25).abs() < 1e-15);
            assert!((dp - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_route_agrees_with_exact() {
        let omegas = OmegaDist::default().samples(8, 1, OmegaSampling::MonteCarlo);
        for phi in [-0.7, 0.3, 0.9] {
            let (p0, d0) = oned_graph_penalty(phi, &omegas, OmegaGradient::Exact);
            let (p1, d1) = oned_graph_penalty(phi, &omegas, OmegaGradient::FiniteDifference { step: 1e-4 });
            assert!((p0 - p1).abs() <= 1e-3 * p0.abs());
            assert!((d0 - d1).abs() <= 1e-3 * d0.abs());
        }
    }

    #[test]
    fn constant_risk_has_zero_penalty() {
        let g = Graph::with_tangent();
        let c = g.param("c", Tensor::scalar(2.0)).unwrap();
        let (_, pen) = omega_average(&g, &[-0.3, 0.0], Some(OmegaGradient::Exact), |_| Ok((vec![c], c))).unwrap();
        assert_eq!(pen.unwrap().item(), 0.0);
    }

    #[test]
    fn fixed_lambda_lagrangian_on_oned_example() {
        // Midpoint nodes integrate the linear-in-ω risk exactly.
        let omegas = OmegaDist::default().samples(10, 0, OmegaSampling::Midpoint);
        let g = Graph::with_tangent();
        let p = g.param("phi", Tensor::scalar(0.5)).unwrap();
        let (m, pen) = omega_average(&g, &omegas, Some(OmegaGradient::Exact), |w| {
            let r = oned::risk_node(w, p)?;
            Ok((vec![r], r))
        })
        .unwrap();
        let lagr = m[0].add(pen.unwrap().mul_scalar(0.4).unwrap()).unwrap();
        assert!((lagr.item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn counterexample_closed_forms() {
        for lam in [0.25, 0.4, 1.0] {
            let r = oned_counterexample(OnedLambda::Fixed { value: lam }, 2001);
            assert!((r.phi_star - 0.2 / lam).abs() < 1e-3, "{lam}: {r:?}");
            assert!((r.value - (1.0 - 0.04 / lam)).abs() < 1e-3);
        }
        for lam in [0.05, 0.1, 0.2] {
            let r = oned_counterexample(OnedLambda::Fixed { value: lam }, 2001);
            assert!((r.phi_star - 1.0).abs() < 1e-3, "{lam}: {r:?}");
            assert!((r.value - (0.6 + lam)).abs() < 1e-3);
        }
        let r = oned_counterexample(OnedLambda::Fixed { value: 0.4 }, 2001);
        assert!(r.ood_phi_star.abs() < 1e-6);
        assert!((r.ood_value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn analytic_lambda_examples() {
        let lam = analytic_lambda(1.1, 0.6, 1.0).unwrap();
        assert!((lam - 0.5).abs() < 1e-15);
        assert!((0.6 + lam * 1.0 - 1.1).abs() < 1e-15);
        assert_eq!(analytic_lambda(0.7, 0.7, 0.3).unwrap(), 0.0);
        assert!(matches!(analytic_lambda(1.0, 0.5, 0.0), Err(Error::ZeroDenominator)));
        assert!(matches!(analytic_lambda(0.5, 1.0, 1.0), Err(Error::NegativeGap { .. })));
        let grid = OmegaDist::default().grid(1001);
        assert!((grid_max(&grid, |w| oned::risk(w, 1.0)) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn analytic_lambda_recovers_worst_case() {
        let r = oned_counterexample(OnedLambda::Analytic, 2001);
        assert!(r.phi_star.abs() < 1e-3);
        assert!((r.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lambda_net_is_positive() {
        let net = LambdaNet::new(6, 4, 2).unwrap();
        assert!(net.eval(&[0.0; 6]).unwrap() > 0.0);
        assert!(net.eval(&[-1e3, 1e3, -50.0, 4.0, 0.0, 9.0]).unwrap() > 0.0);
    }

    fn small_setup() -> (ToyModel, EditBatch) {
        let dims = ModelDims {
            d_img: 4,
            d_txt: 4,
            d_h: 6,
            n_classes: 5,
        };
        let model = init_model(dims, 11).unwrap();
        let mk = |s: f64, y| PromptVec {
            m: (0..4).map(|i| (i as f64 * 0.9 + s).sin()).collect(),
            x: (0..4).map(|i| (i as f64 * 0.4 - s).cos()).collect(),
            y,
        };
        let e = [mk(0.2, 3), mk(1.1, 1)];
        let r = [mk(0.25, 3), mk(1.2, 1)];
        let o = [mk(2.5, 0)];
        let batch = EditBatch::new(
            &model,
            &e.iter().collect::<Vec<_>>(),
            &r.iter().collect::<Vec<_>>(),
            &o.iter().collect::<Vec<_>>(),
        )
        .unwrap();
        (model, batch)
    }

    #[test]
    fn model_penalty_gradient_matches_finite_differences() {
        let (model, batch) = small_setup();
        let cfg = TrainConfig::default();
        let spec = risk_spec_for(&model, &batch, &cfg).unwrap();
        let mut delta = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
        let names = delta.tensor_names();
        for (k, name) in names.iter().enumerate() {
            let t = delta.params.get_mut(name).unwrap();
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.05 * ((k * 31 + j) as f64 * 0.7).sin();
            }
        }
        let omegas = cfg.omegas(0);
        let params: BTreeMap<String, Tensor> = delta
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let report = finite_diff_check(
            |g, vars| {
                g.enable_tangent();
                let bound = model.bind_with(g, vars)?;
                let hidden = HiddenStates::compute(&bound, &batch)?;
                tv_penalty(&bound, &hidden, &batch, &spec, &omegas, PenaltyTarget::FullEditRisk, OmegaGradient::Exact)
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn zero_steps_leave_delta_untouched_and_runs_repeat() {
        let (model, batch) = small_setup();
        let init = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let out = train_edit(&model, &batch, &cfg, &init).unwrap();
        assert!(out.delta.is_zero());
        assert!(out.history.is_empty());

        let cfg = TrainConfig {
            max_steps: 15,
            ..TrainConfig::default()
        };
        let a = train_edit(&model, &batch, &cfg, &init).unwrap();
        let b = train_edit(&model, &batch, &cfg, &init).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn train_edit_alternation_matches_separate_steps() {
        let (model, batch) = small_setup();
        let init = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
        let cfg = TrainConfig {
            max_steps: 3,
            plateau_window: 0,
            ..TrainConfig::default()
        };
        let spec = risk_spec_for(&model, &batch, &cfg).unwrap();
        let mut delta = init.clone();
        let mut dual = DualParams::for_config(&cfg, &delta).unwrap();
        for step in 0..3 {
            if step > 0 {
                dual_step(&mut dual, &model, &delta, &batch, &spec, &cfg, step).unwrap();
            }
            primal_step(&model, &mut delta, Some(&dual), &batch, &spec, &cfg, step).unwrap();
        }
        let fused = train_edit(&model, &batch, &cfg, &init).unwrap();
        assert_eq!(fused.delta, delta);
    }

    #[test]
    fn primal_step_decreases_reliability_risk() {
        let (model, batch) = small_setup();
        let cfg = TrainConfig {
            weights: RiskWeights {
                rel: 1.0,
                loc: 0.0,
                gen: 0.0,
            },
            lambda: LambdaMode::Off,
            gamma1: 1e-3,
            ..TrainConfig::default()
        };
        let spec = risk_spec_for(&model, &batch, &cfg).unwrap();
        let mut delta = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
        let before = primal_step(&model, &mut delta, None, &batch, &spec, &cfg, 0).unwrap();
        let g = Graph::new();
        let (_, after) = lagrangian(&g, &model, &delta, None, &batch, &spec, &cfg, 0).unwrap();
        assert!(after.r_rel < before.r_rel);
    }

    #[test]
    fn dual_step_without_penalty_is_noop() {
        let (model, _) = small_setup();
        let cfg = TrainConfig::default();
        let delta = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
        let mut dual = DualParams::for_config(&cfg, &delta).unwrap();
        let before = dual.clone();
        let g = Graph::new();
        let vars = delta.params.bind_const(&g);
        dual_ascent(&mut dual, &vars, 0.0, &cfg, 0).unwrap();
        assert_eq!(before, dual);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            gamma1: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            n_omega: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn analytic_lambda_closes_the_gap_to_worst_case(phi in -1.0f64..1.0) {
                prop_assume!(phi.abs() > 1e-3);
                let lam = analytic_lambda(oned::max_risk(phi), oned::expected_risk(phi), phi.abs()).unwrap();
                let value = oned::expected_risk(phi) + lam * oned::penalty(phi);
                prop_assert!((value - oned::max_risk(phi)).abs() < 1e-9);
            }

            #[test]
            fn lambda_net_output_is_positive(
                dim in 1usize..12, hidden in 1usize..8, seed in 0u64..1000,
                inputs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 12), 100),
            ) {
                let net = LambdaNet::new(dim, hidden, seed).unwrap();
                for x in &inputs {
                    prop_assert!(net.eval(&x[..dim]).unwrap() > 0.0);
                }
            }

            #[test]
            fn dual_ascent_never_lowers_the_weighted_penalty(penalty in 0.01f64..2.0, seed in 0u64..1000) {
                let (model, _) = small_setup();
                let cfg = TrainConfig { seed, ..TrainConfig::default() };
                let mut delta = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for name in delta.tensor_names() {
                    for v in delta.params.get_mut(&name).unwrap().data_mut() {
                        *v = rng.random_range(-0.2..0.2);
                    }
                }
                let mut dual = DualParams::for_config(&cfg, &delta).unwrap();
                let weighted = |dual: &DualParams| {
                    let g = Graph::new();
                    let vars = delta.params.bind_const(&g);
                    dual.lambda(&g, &vars, false).unwrap().item() * penalty
                };
                let mut last = weighted(&dual);
                for step in 0..100 {
                    let g = Graph::new();
                    let vars = delta.params.bind_const(&g);
                    dual_ascent(&mut dual, &vars, penalty, &cfg, step).unwrap();
                    let now = weighted(&dual);
                    prop_assert!(now >= last, "step {step}: {now} < {last}");
                    last = now;
                }
            }
        }
    }
}
