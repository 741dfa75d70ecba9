//! Named parameter collections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{AutodiffError, Error, Result};
use crate::tensor::Tensor;

/// What a parameter set is for. Sets with different roles never share names
/// on one graph because names are prefixed by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Edit,
    Dual,
    LambdaNet,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Base => "base",
            Role::Edit => "edit",
            Role::Dual => "dual",
            Role::LambdaNet => "lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub role: Role,
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        ParamSet {
            role,
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()).into());
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// A set with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            role: self.role,
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros_like(v)))
                .collect(),
        }
    }

    pub fn graph_name(&self, name: &str) -> String {
        format!("{}.{}", self.role.prefix(), name)
    }

    /// Registers every tensor as a named leaf `"<role>.<name>"`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Result<BTreeMap<String, Var<'g>>> {
        self.params
            .iter()
            .map(|(k, v)| Ok((k.clone(), g.param(&self.graph_name(k), v.clone())?)))
            .collect()
    }

    /// Registers every tensor as a constant.
    pub fn bind_const<'g>(&self, g: &'g Graph) -> BTreeMap<String, Var<'g>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect()
    }

    /// Gradients of this set's leaves, keyed by local name.
    pub fn grads_from(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .get(&self.graph_name(k))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros_like(v));
                (k.clone(), g)
            })
            .collect()
    }

    /// `self += scale * step` for every parameter named in `step`.
    pub fn apply(&mut self, step: &BTreeMap<String, Tensor>, scale: f64) -> Result<()> {
        for (k, s) in step {
            let p = self
                .params
                .get_mut(k)
                .ok_or_else(|| Error::Dimension(format!("no parameter `{k}`")))?;
            if p.shape() != s.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "apply",
                    lhs: p.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                }
                .into());
            }
            p.axpy(scale, s);
        }
        Ok(())
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn from_map(role: Role, params: BTreeMap<String, Tensor>) -> Self {
        ParamSet { role, params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::new(Role::Edit);
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn roles_keep_graph_names_apart() {
        let mut a = ParamSet::new(Role::Edit);
        a.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut b = ParamSet::new(Role::Dual);
        b.insert("w", Tensor::scalar(2.0)).unwrap();
        let g = Graph::new();
        let va = a.bind(&g).unwrap();
        let vb = b.bind(&g).unwrap();
        let f = va["w"].mul(vb["w"]).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(a.grads_from(&grads)["w"].item(), 2.0);
        assert_eq!(b.grads_from(&grads)["w"].item(), 1.0);
    }
}
