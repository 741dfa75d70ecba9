//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so components that are zero in
/// both routes compare on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Max relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares a gradient `loss` produces through [`Graph::backward`] with
/// central differences of its value, perturbing every element of every
/// parameter by `±h`.
pub fn finite_diff_check<F>(
    loss: F,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &BTreeMap<String, Var<'g>>) -> Result<Var<'g>>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = {
        let g = Graph::new();
        let vars = bind(&g, params)?;
        let out = loss(&g, &vars)?;
        g.backward(out)?.into_named()
    };
    let value = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let g = Graph::new();
        let vars = bind(&g, p)?;
        Ok(loss(&g, &vars)?.item())
    };
    compare_gradients(&analytic, value, params, h, tolerance)
}

/// Compares precomputed `analytic` gradients against central differences of
/// `value`. Parameters missing from `analytic` are treated as zero.
pub fn compare_gradients<V>(
    analytic: &BTreeMap<String, Tensor>,
    value: V,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    V: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut per_param = BTreeMap::new();
    let mut work = params.clone();
    for (name, tensor) in params {
        let mut worst: f64 = 0.0;
        for k in 0..tensor.numel() {
            let base = tensor.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = base + h;
            let plus = value(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = base - h;
            let minus = value(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
        per_param.insert(name.clone(), worst);
    }
    let max_rel_err = per_param.values().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    })
}

fn bind<'g>(g: &'g Graph, params: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Var<'g>>> {
    params
        .iter()
        .map(|(name, t)| Ok((name.clone(), g.param(name, t.clone())?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::vector(vec![0.3, -1.2, 2.0]));
        let report = finite_diff_check(
            |_, v| Ok(v["x"].square()?.sum()?),
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::scalar(1.5));
        let mut wrong = BTreeMap::new();
        wrong.insert("x".to_string(), Tensor::scalar(-3.0));
        let report = compare_gradients(
            &wrong,
            |p| Ok(p["x"].item().powi(2)),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_err > 1.0);
    }
}
