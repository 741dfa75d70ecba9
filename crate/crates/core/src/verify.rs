//! Self-contained numerical checks: the one-dimensional counterexample,
//! the analytic-λ construction, gradient contracts and divergence axioms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{compare_gradients, finite_diff_check, GradCheckReport, Graph};
use crate::error::Result;
use crate::irm_tv::{
    analytic_lambda, oned, oned_counterexample, risk_spec_for, tv_penalty, OmegaGradient, OnedLambda, PenaltyTarget,
    TrainConfig,
};
use crate::model::{init_model, EditDelta, ModelDims, PromptVec, ToyModel, DEFAULT_EDIT_LAYERS};
use crate::risks::{
    generality_risk, kl_categorical, locality_risk, mmd_value, reliability_risk, EditBatch, HiddenStates, KernelSpec,
    MmdEstimator, RiskSpec,
};
use crate::tensor::Tensor;

pub const OPTIMUM_TOL: f64 = 1e-3;
pub const OOD_VALUE_TOL: f64 = 1e-6;
pub const ANALYTIC_TOL: f64 = 1e-9;
pub const RISK_GRAD_TOL: f64 = 1e-4;
pub const PENALTY_GRAD_TOL: f64 = 1e-3;
pub const GRAD_INSTANCES: usize = 20;
pub const KL_PAIRS: usize = 1000;
pub const MMD_SHIFT_SEEDS: usize = 20;
pub const MMD_SHIFT_REQUIRED: usize = 18;
pub const MMD_SHIFTS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
pub const MMD_SHIFT_SAMPLES: usize = 256;

/// λ values whose minimiser lies inside (0, 1).
pub const INTERIOR_LAMBDAS: [f64; 3] = [0.25, 0.4, 1.0];
/// λ values whose minimiser sits on the boundary φ = 1.
pub const BOUNDARY_LAMBDAS: [f64; 3] = [0.05, 0.1, 0.2];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub observed: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, observed: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            observed: observed.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Negate the analytic penalty gradient before comparing, to confirm
    /// the gradient check can fail.
    pub inject_sign_flip: bool,
}

pub const GRID: usize = 2001;

/// Closed-form minimiser and value of `E-risk + λ·penalty` on [−1, 1].
pub fn oned_closed_form(lambda: f64) -> (f64, f64) {
    if lambda >= 0.2 {
        (0.2 / lambda, 1.0 - 0.04 / lambda)
    } else {
        (1.0, 0.6 + lambda)
    }
}

pub fn check_counterexample() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for lambda in INTERIOR_LAMBDAS.into_iter().chain(BOUNDARY_LAMBDAS) {
        let r = oned_counterexample(OnedLambda::Fixed { value: lambda }, GRID);
        let (phi, value) = oned_closed_form(lambda);
        let ok = (r.phi_star - phi).abs() <= OPTIMUM_TOL && (r.value - value).abs() <= OPTIMUM_TOL;
        out.push(CheckResult::new(
            format!("counterexample λ={lambda}"),
            ok,
            format!("φ*={:.6} value={:.6} (expected {phi:.6}, {value:.6})", r.phi_star, r.value),
        ));
    }
    let r = oned_counterexample(OnedLambda::Fixed { value: 0.4 }, GRID);
    out.push(CheckResult::new(
        "worst-case objective minimum",
        r.ood_phi_star.abs() <= OPTIMUM_TOL && (r.ood_value - 1.0).abs() <= OOD_VALUE_TOL,
        format!("φ*={:.3e} value={:.9}", r.ood_phi_star, r.ood_value),
    ));
    for lambda in [0.0, 0.05, 0.1, 0.2, 0.4, 1.0] {
        let r = oned_counterexample(OnedLambda::Fixed { value: lambda }, GRID);
        out.push(CheckResult::new(
            format!("fixed λ={lambda} misses the worst-case optimum"),
            r.phi_star.abs() > 0.1 && (r.value - 1.0).abs() > OPTIMUM_TOL,
            format!("φ*={:.6} value={:.6}", r.phi_star, r.value),
        ));
    }
    out
}

pub fn check_analytic_lambda(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let phi: f64 = rng.random_range(-1.0..=1.0);
        if phi.abs() <= 1e-3 {
            continue;
        }
        n += 1;
        let max = oned::max_risk(phi);
        let e = oned::expected_risk(phi);
        match analytic_lambda(max, e, phi.abs()) {
            Ok(lam) => worst = worst.max((e + lam * oned::penalty(phi) - max).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    CheckResult::new(
        "analytic λ reproduces the worst-case risk",
        worst < ANALYTIC_TOL,
        format!("max |gap| = {worst:.3e} over 100 φ"),
    )
}

/// A small random model, batch, delta and ω for gradient checks.
pub struct GradInstance {
    pub model: ToyModel,
    pub batch: EditBatch,
    pub spec: RiskSpec,
    pub params: BTreeMap<String, Tensor>,
    pub omega: f64,
    pub omegas: Vec<f64>,
}

pub fn grad_instance(seed: u64) -> Result<GradInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        d_img: rng.random_range(2..=4),
        d_txt: rng.random_range(2..=4),
        d_h: rng.random_range(3..=6),
        n_classes: rng.random_range(3..=5),
    };
    let model = init_model(dims, rng.random())?;
    let prompt = |rng: &mut ChaCha8Rng| PromptVec {
        m: (0..dims.d_img).map(|_| rng.sample(StandardNormal)).collect(),
        x: (0..dims.d_txt).map(|_| rng.sample(StandardNormal)).collect(),
        y: rng.random_range(0..dims.n_classes),
    };
    let e: Vec<PromptVec> = (0..2).map(|_| prompt(&mut rng)).collect();
    let r: Vec<PromptVec> = (0..3).map(|_| prompt(&mut rng)).collect();
    let o: Vec<PromptVec> = (0..2).map(|_| prompt(&mut rng)).collect();
    let batch = EditBatch::new(
        &model,
        &e.iter().collect::<Vec<_>>(),
        &r.iter().collect::<Vec<_>>(),
        &o.iter().collect::<Vec<_>>(),
    )?;
    let cfg = TrainConfig {
        n_omega: 4,
        seed: rng.random(),
        ..TrainConfig::default()
    };
    let spec = risk_spec_for(&model, &batch, &cfg)?;
    let delta = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
    let mut params = BTreeMap::new();
    for (k, t) in delta.params.iter() {
        let v = (0..t.numel()).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        params.insert(k.clone(), Tensor::new(t.shape().to_vec(), v)?);
    }
    Ok(GradInstance {
        model,
        batch,
        spec,
        params,
        omega: rng.random_range(-0.9..0.1),
        omegas: cfg.omegas(0),
    })
}

impl GradInstance {
    pub fn check_rel(&self) -> Result<GradCheckReport> {
        finite_diff_check(
            |g, vars| {
                let b = self.model.bind_with(g, vars)?;
                let h = HiddenStates::compute(&b, &self.batch)?;
                reliability_risk(&b, h.inputs, &self.batch.inputs.y, Some(g.scalar(self.omega)))
            },
            &self.params,
            1e-6,
            RISK_GRAD_TOL,
        )
    }

    pub fn check_loc(&self) -> Result<GradCheckReport> {
        finite_diff_check(
            |g, vars| {
                let b = self.model.bind_with(g, vars)?;
                let h = HiddenStates::compute(&b, &self.batch)?;
                locality_risk(&b, h.unrelated, &self.batch.base_logp, Some(g.scalar(self.omega)))
            },
            &self.params,
            1e-6,
            RISK_GRAD_TOL,
        )
    }

    pub fn check_gen(&self) -> Result<GradCheckReport> {
        finite_diff_check(
            |g, vars| {
                let b = self.model.bind_with(g, vars)?;
                let h = HiddenStates::compute(&b, &self.batch)?;
                generality_risk(
                    &b,
                    h.inputs,
                    h.rephrases,
                    Some(g.scalar(self.omega)),
                    &self.spec.kernel,
                    self.spec.estimator,
                )
            },
            &self.params,
            1e-6,
            RISK_GRAD_TOL,
        )
    }

    fn penalty_value(&self, params: &BTreeMap<String, Tensor>) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let g = Graph::new();
        g.enable_tangent();
        let vars = params
            .iter()
            .map(|(k, t)| Ok((k.clone(), g.param(k, t.clone())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let b = self.model.bind_with(&g, &vars)?;
        let h = HiddenStates::compute(&b, &self.batch)?;
        let p = tv_penalty(
            &b,
            &h,
            &self.batch,
            &self.spec,
            &self.omegas,
            PenaltyTarget::FullEditRisk,
            OmegaGradient::Exact,
        )?;
        Ok((p.item(), g.backward(p)?.into_named()))
    }

    /// Penalty gradient against nested central differences; `flip`
    /// negates the analytic side.
    pub fn check_penalty(&self, flip: bool) -> Result<GradCheckReport> {
        let (_, mut analytic) = self.penalty_value(&self.params)?;
        if flip {
            for t in analytic.values_mut() {
                *t = t.map(|v| -v);
            }
        }
        compare_gradients(&analytic, |p| Ok(self.penalty_value(p)?.0), &self.params, 1e-5, PENALTY_GRAD_TOL)
    }
}

pub fn check_gradients(opts: VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut worst = [0.0f64; 4];
    let mut fails = [0usize; 4];
    for i in 0..GRAD_INSTANCES {
        let inst = grad_instance(0xD1CE + i as u64)?;
        let reports = [
            inst.check_rel()?,
            inst.check_loc()?,
            inst.check_gen()?,
            inst.check_penalty(opts.inject_sign_flip)?,
        ];
        for (k, r) in reports.iter().enumerate() {
            worst[k] = worst[k].max(r.max_rel_err);
            fails[k] += !r.passed as usize;
        }
    }
    let names = ["reliability", "locality", "generality", "tv penalty"];
    let tols = [RISK_GRAD_TOL, RISK_GRAD_TOL, RISK_GRAD_TOL, PENALTY_GRAD_TOL];
    Ok((0..4)
        .map(|k| {
            CheckResult::new(
                format!("{} gradient matches finite differences", names[k]),
                fails[k] == 0,
                format!(
                    "max rel err {:.3e} (tol {:.0e}), {} of {GRAD_INSTANCES} instances failed",
                    worst[k], tols[k], fails[k]
                ),
            )
        })
        .collect())
}

/// The penalty gradient check must reject a sign-flipped gradient.
pub fn check_canary() -> Result<CheckResult> {
    let inst = grad_instance(0xCA7A)?;
    let r = inst.check_penalty(true)?;
    Ok(CheckResult::new(
        "sign-flip canary is caught",
        !r.passed,
        format!("flipped max rel err {:.3e}", r.max_rel_err),
    ))
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| rng.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn check_divergences(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = KernelSpec::fixed(vec![0.5, 1.0, 2.0, 4.0])?;
    let mut out = Vec::new();

    let (mut nonneg, mut symmetric, mut self_zero) = (true, true, true);
    for _ in 0..50 {
        let n = rng.random_range(1..8);
        let m = rng.random_range(1..8);
        let x = gaussian_rows(&mut rng, n, 3, 0.0);
        let shift = rng.random_range(-1.0..1.0);
        let y = gaussian_rows(&mut rng, m, 3, shift);
        let xy = mmd_value(&x, &y, &kernel, MmdEstimator::Biased)?;
        let yx = mmd_value(&y, &x, &kernel, MmdEstimator::Biased)?;
        nonneg &= xy >= 0.0;
        symmetric &= xy == yx;
        self_zero &= mmd_value(&x, &x, &kernel, MmdEstimator::Biased)? == 0.0;
    }
    out.push(CheckResult::new("biased MMD is non-negative", nonneg, "50 random pairs"));
    out.push(CheckResult::new("biased MMD is symmetric", symmetric, "50 random pairs"));
    out.push(CheckResult::new("biased MMD vanishes on identical sets", self_zero, "50 random sets"));

    let mut min_kl = f64::INFINITY;
    let mut self_kl: f64 = 0.0;
    for _ in 0..KL_PAIRS {
        let k = rng.random_range(2..10);
        let mut draw = || {
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(), draw());
        min_kl = min_kl.min(kl_categorical(&p, &q));
        self_kl = self_kl.max(kl_categorical(&p, &p).abs());
    }
    out.push(CheckResult::new(
        "KL is non-negative",
        min_kl >= 0.0,
        format!("min KL {min_kl:.3e} over {KL_PAIRS} pairs"),
    ));
    out.push(CheckResult::new(
        "KL vanishes at equality",
        self_kl == 0.0,
        format!("max |KL(p,p)| {self_kl:.3e}"),
    ));

    let mut monotone = 0;
    for s in 0..MMD_SHIFT_SEEDS {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ (0x5EED + s as u64));
        let x = gaussian_rows(&mut r, MMD_SHIFT_SAMPLES, 4, 0.0);
        let vals: Vec<f64> = MMD_SHIFTS
            .iter()
            .map(|&mu| mmd_value(&x, &gaussian_rows(&mut r, MMD_SHIFT_SAMPLES, 4, mu), &kernel, MmdEstimator::Biased))
            .collect::<Result<_>>()?;
        monotone += vals.windows(2).all(|w| w[0] < w[1]) as usize;
    }
    out.push(CheckResult::new(
        "MMD grows with mean shift",
        monotone >= MMD_SHIFT_REQUIRED,
        format!("{monotone}/{MMD_SHIFT_SEEDS} seeds monotone"),
    ));
    Ok(out)
}

/// Every check, in a fixed order.
pub fn run_verify(opts: VerifyOptions) -> Result<VerifyReport> {
    let mut checks = check_counterexample();
    checks.push(check_analytic_lambda(7));
    checks.extend(check_gradients(opts)?);
    checks.push(check_canary()?);
    checks.extend(check_divergences(11)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_rows_pass() {
        for c in check_counterexample() {
            assert!(c.passed, "{}: {}", c.name, c.observed);
        }
        let r = oned_counterexample(OnedLambda::Fixed { value: 0.4 }, GRID);
        assert!((r.phi_star - 0.5).abs() < 1e-3 && (r.value - 0.9).abs() < 1e-3);
    }

    #[test]
    fn sign_flip_is_caught_and_clean_gradient_passes() {
        let inst = grad_instance(3).unwrap();
        assert!(inst.check_penalty(false).unwrap().passed);
        assert!(!inst.check_penalty(true).unwrap().passed);
    }

    #[test]
    fn divergence_axioms_hold() {
        for c in check_divergences(1).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.observed);
        }
    }
}
