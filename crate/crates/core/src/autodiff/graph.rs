//! Recorded computation graph with reverse-mode gradients and a forward
//! tangent channel.
//!
//! Every primitive appends a node holding its value. When the tangent
//! channel is enabled, any node whose inputs carry tangents also gets a
//! tangent, and that tangent is itself built out of recorded primitives.
//! A directional derivative read off the tangent channel is therefore an
//! ordinary node: calling [`Graph::backward`] on it differentiates the
//! derivative (forward-over-reverse).
//!
//! Masks used by piecewise-linear ops (`relu`, `abs`, `clamp_min`, `max`)
//! enter tangents as constants, so their second derivative is zero
//! almost everywhere and `abs` has subgradient 0 at the origin.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use crate::error::AutodiffError;
use crate::tensor::Tensor;

type Res<T> = Result<T, AutodiffError>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Scale(usize, usize),
    MulScalar(usize, f64),
    AddScalar(usize),
    Neg(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    LogSumExpRows(usize),
    MaxAll(usize),
    SqDists(usize, usize),
    Concat(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tangent: Option<usize>,
}

/// Append-only record of primitive operations.
///
/// A graph is confined to the thread that builds it. Independent graphs
/// can be built in parallel.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    names: RefCell<BTreeMap<String, usize>>,
    tangent_enabled: Cell<bool>,
    tangent_suspended: Cell<bool>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of a scalar output with respect to the graph's leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    named: BTreeMap<String, Tensor>,
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose tangent channel is on from the start.
    pub fn with_tangent() -> Self {
        let g = Graph::new();
        g.enable_tangent();
        g
    }

    /// Turns on the forward tangent channel. Only nodes recorded after
    /// this call carry tangents.
    pub fn enable_tangent(&self) {
        self.tangent_enabled.set(true);
    }

    pub fn tangent_enabled(&self) -> bool {
        self.tangent_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A named leaf. Backward reports a gradient for every named leaf.
    pub fn param(&self, name: &str, value: Tensor) -> Res<Var<'_>> {
        if self.names.borrow().contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let v = self.leaf(value)?;
        self.names.borrow_mut().insert(name.to_string(), v.id);
        Ok(v)
    }

    /// An unnamed leaf; its gradient is available through [`Gradients::wrt`].
    pub fn input(&self, value: Tensor) -> Res<Var<'_>> {
        self.leaf(value)
    }

    /// A constant. Identical to an unnamed leaf; kept separate for intent.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor) -> Res<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(Op::Leaf, value))
    }

    /// Seeds the tangent of a leaf with `direction`.
    pub fn seed_tangent(&self, leaf: Var<'_>, direction: Tensor) -> Res<()> {
        if !self.tangent_enabled.get() {
            return Err(AutodiffError::TangentInactive);
        }
        let shape = self.nodes.borrow()[leaf.id].value.shape().to_vec();
        if !matches!(self.nodes.borrow()[leaf.id].op, Op::Leaf) {
            return Err(AutodiffError::SeedOnNonLeaf(leaf.id));
        }
        if direction.shape() != shape.as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                op: "seed_tangent",
                lhs: shape,
                rhs: direction.shape().to_vec(),
            });
        }
        let t = self.constant(direction);
        self.nodes.borrow_mut()[leaf.id].tangent = Some(t.id);
        Ok(())
    }

    /// Directional derivative of `var` along the seeded tangents, as a node
    /// on this graph. Nodes that do not depend on any seeded leaf get a
    /// zero constant.
    pub fn tangent<'g>(&'g self, var: Var<'g>) -> Res<Var<'g>> {
        if !self.tangent_enabled.get() {
            return Err(AutodiffError::TangentInactive);
        }
        let (t, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[var.id].tangent, nodes[var.id].value.shape().to_vec())
        };
        Ok(match t {
            Some(id) => Var { graph: self, id },
            None => self.constant(Tensor::zeros(&shape)),
        })
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn push_unchecked(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            tangent: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, op: Op, value: Tensor) -> Res<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let inputs = op_inputs(&op);
        let out = self.push_unchecked(op, value);
        if self.tangent_enabled.get() && !self.tangent_suspended.get() {
            let any = {
                let nodes = self.nodes.borrow();
                inputs.iter().any(|&i| nodes[i].tangent.is_some())
            };
            if any {
                self.tangent_suspended.set(true);
                let t = self.tangent_rule(out);
                self.tangent_suspended.set(false);
                let t = t?;
                self.nodes.borrow_mut()[out.id].tangent = Some(t.id);
            }
        }
        Ok(out)
    }

    fn tangent_or_zero(&self, id: usize) -> Var<'_> {
        let (t, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[id].tangent, nodes[id].value.shape().to_vec())
        };
        match t {
            Some(t) => Var { graph: self, id: t },
            None => self.constant(Tensor::zeros(&shape)),
        }
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Builds the tangent of `out` from its inputs' tangents. Runs with the
    /// channel suspended so tangent nodes do not get tangents of their own.
    fn tangent_rule<'g>(&'g self, out: Var<'g>) -> Res<Var<'g>> {
        let op = self.nodes.borrow()[out.id].op.clone();
        let t = |id| self.tangent_or_zero(id);
        let v = |id| self.var(id);
        let mask = |id: usize, f: &dyn Fn(f64) -> f64| {
            let m = self.nodes.borrow()[id].value.map(f);
            self.constant(m)
        };
        match op {
            Op::Leaf => unreachable!("leaves are seeded, not derived"),
            Op::Add(a, b) => t(a).add(t(b)),
            Op::Sub(a, b) => t(a).sub(t(b)),
            Op::Mul(a, b) => t(a).mul(v(b))?.add(v(a).mul(t(b))?),
            Op::Div(a, b) => {
                let first = t(a).div(v(b))?;
                let second = out.mul(t(b))?.div(v(b))?;
                first.sub(second)
            }
            Op::AddRow(a, b) => t(a).add_row(t(b)),
            Op::AddCol(a, b) => t(a).add_col(t(b)),
            Op::Scale(a, s) => t(a).scale(v(s))?.add(v(a).scale(t(s))?),
            Op::MulScalar(a, c) => t(a).mul_scalar(c),
            Op::AddScalar(a) => Ok(t(a)),
            Op::Neg(a) => t(a).neg(),
            Op::MatMul(a, b) => t(a).matmul(v(b))?.add(v(a).matmul(t(b))?),
            Op::Transpose(a) => t(a).transpose(),
            Op::Relu(a) => t(a).mul(mask(a, &|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Softplus(a) => t(a).mul(v(a).sigmoid()?),
            Op::Sigmoid(a) => {
                let one_minus = out.neg()?.add_scalar(1.0)?;
                t(a).mul(out.mul(one_minus)?)
            }
            Op::Exp(a) => t(a).mul(out),
            Op::Log(a) => t(a).div(v(a)),
            Op::Sqrt(a) => t(a).div(out)?.mul_scalar(0.5),
            Op::Square(a) => t(a).mul(v(a))?.mul_scalar(2.0),
            Op::Abs(a) => t(a).mul(mask(a, &sign)),
            Op::ClampMin(a, c) => t(a).mul(mask(a, &|x| if x > c { 1.0 } else { 0.0 })),
            Op::Sum(a) => t(a).sum(),
            Op::Mean(a) => t(a).mean(),
            Op::SumRows(a) => t(a).sum_rows(),
            Op::LogSumExpRows(a) => {
                let softmax = v(a).add_col(out.neg()?)?.exp()?;
                softmax.mul(t(a))?.sum_rows()
            }
            Op::MaxAll(a) => {
                let onehot = {
                    let nodes = self.nodes.borrow();
                    let val = &nodes[a].value;
                    let k = argmax(val.data());
                    let mut m = Tensor::zeros_like(val);
                    m.data_mut()[k] = 1.0;
                    m
                };
                t(a).mul(self.constant(onehot))?.sum()
            }
            Op::SqDists(a, b) => {
                let (a, b, ta, tb) = (v(a), v(b), t(a), t(b));
                let p = a.mul(ta)?.sum_rows()?;
                let q = b.mul(tb)?.sum_rows()?;
                let cross = a
                    .matmul(tb.transpose()?)?
                    .add(ta.matmul(b.transpose()?)?)?;
                cross.neg()?.add_col(p)?.add_row(q)?.mul_scalar(2.0)
            }
            Op::Concat(ids) => {
                let parts: Vec<Var<'g>> = ids.iter().map(|&i| t(i)).collect();
                self.concat(&parts)
            }
            Op::Reshape(a) => {
                let shape = out.shape();
                t(a).reshape(&shape)
            }
        }
    }

    /// Concatenates vectors end to end, or matrices along columns.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Res<Var<'g>> {
        let nodes = self.nodes.borrow();
        let first = nodes[parts[0].id].value.shape().to_vec();
        let value = match first.as_slice() {
            [_] => {
                let mut data = Vec::new();
                for p in parts {
                    let t = &nodes[p.id].value;
                    if t.rank() != 1 {
                        return Err(mismatch("concat", &first, t.shape()));
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            [rows, _] => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| match nodes[p.id].value.dims2() {
                        Some((r, c)) if r == *rows => Ok(c),
                        _ => Err(mismatch("concat", &first, nodes[p.id].value.shape())),
                    })
                    .collect::<Res<_>>()?;
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for i in 0..*rows {
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.row(i));
                    }
                }
                Tensor::matrix(*rows, total, data)?
            }
            _ => return Err(mismatch("concat", &first, &[])),
        };
        drop(nodes);
        self.push(
            "concat",
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            value,
        )
    }

    /// Reverse-mode gradients of a scalar `output` with respect to every
    /// leaf. Named leaves not on any path to `output` receive zeros.
    pub fn backward(&self, output: Var<'_>) -> Res<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if nodes[output.id].value.numel() != 1 {
            return Err(AutodiffError::NotScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(out_shape, 1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in vjp(&nodes, node, &g) {
                assert!(input < id, "graph is not topologically ordered");
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = Gradients::default();
        for (name, &id) in self.names.borrow().iter() {
            let g = grads
                .get(id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros_like(&nodes[id].value));
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            out.named.insert(name.clone(), g);
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                out.by_leaf.insert(id, g);
            }
        }
        Ok(out)
    }
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

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::AddCol(a, b)
        | Op::Scale(a, b)
        | Op::SqDists(a, b)
        | Op::MatMul(a, b) => vec![*a, *b],
        Op::MulScalar(a, _)
        | Op::AddScalar(a)
        | Op::Neg(a)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Softplus(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Abs(a)
        | Op::ClampMin(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::LogSumExpRows(a)
        | Op::MaxAll(a)
        | Op::Reshape(a) => vec![*a],
        Op::Concat(ids) => ids.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Vector-Jacobian products of one node: (input id, contribution) pairs.
fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |id: usize| &nodes[id].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |g, b| g * b)),
            (*b, g.zip_map(val(*a), |g, a| g * a)),
        ],
        Op::Div(a, b) => {
            let ga = g.zip_map(val(*b), |g, b| g / b);
            let gb = g.zip_map(y, |g, y| g * y).zip_map(val(*b), |gy, b| -gy / b);
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow(a, b) => {
            let (r, c) = g.dims2().unwrap();
            let mut gb = vec![0.0; c];
            for i in 0..r {
                for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*b, Tensor::vector(gb))]
        }
        Op::AddCol(a, b) => {
            let (r, _) = g.dims2().unwrap();
            let gb = (0..r).map(|i| g.row(i).iter().sum()).collect();
            vec![(*a, g.clone()), (*b, Tensor::vector(gb))]
        }
        Op::Scale(a, s) => {
            let sv = val(*s).item();
            let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(g, a)| g * a).sum();
            vec![(*a, g.map(|g| g * sv)), (*s, Tensor::full(val(*s).shape(), gs))]
        }
        Op::MulScalar(a, c) => vec![(*a, g.map(|g| g * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Neg(a) => vec![(*a, g.map(|g| -g))],
        Op::MatMul(a, b) => vec![
            (*a, g.matmul(&val(*b).transpose())),
            (*b, val(*a).transpose().matmul(g)),
        ],
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x)))],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |g, s| g * s * (1.0 - s)))],
        Op::Exp(a) => vec![(*a, g.zip_map(y, |g, e| g * e))],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |g, x| g / x))],
        Op::Sqrt(a) => vec![(*a, g.zip_map(y, |g, s| g / (2.0 * s)))],
        Op::Square(a) => vec![(*a, g.zip_map(val(*a), |g, x| 2.0 * x * g))],
        Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sign(x)))],
        Op::ClampMin(a, c) => vec![(*a, g.zip_map(val(*a), |g, x| if x > *c { g } else { 0.0 }))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::SumRows(a) => {
            let x = val(*a);
            let (r, c) = x.dims2().unwrap();
            let data = (0..r)
                .flat_map(|i| std::iter::repeat_n(g.data()[i], c))
                .collect();
            vec![(*a, Tensor::matrix(r, c, data).unwrap())]
        }
        Op::LogSumExpRows(a) => {
            let x = val(*a);
            let (r, c) = x.dims2().unwrap();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let lse = y.data()[i];
                data.extend(x.row(i).iter().map(|&v| g.data()[i] * (v - lse).exp()));
            }
            vec![(*a, Tensor::matrix(r, c, data).unwrap())]
        }
        Op::MaxAll(a) => {
            let x = val(*a);
            let mut ga = Tensor::zeros_like(x);
            ga.data_mut()[argmax(x.data())] = g.item();
            vec![(*a, ga)]
        }
        Op::SqDists(a, b) => {
            let (x, z) = (val(*a), val(*b));
            let (n, d) = x.dims2().unwrap();
            let (m, _) = z.dims2().unwrap();
            let gz = g.matmul(z);
            let gtx = g.transpose().matmul(x);
            let mut ga = vec![0.0; n * d];
            for i in 0..n {
                let rs: f64 = g.row(i).iter().sum();
                for k in 0..d {
                    ga[i * d + k] = 2.0 * (rs * x.row(i)[k] - gz.row(i)[k]);
                }
            }
            let mut gb = vec![0.0; m * d];
            for j in 0..m {
                let cs: f64 = (0..n).map(|i| g.row(i)[j]).sum();
                for k in 0..d {
                    gb[j * d + k] = 2.0 * (cs * z.row(j)[k] - gtx.row(j)[k]);
                }
            }
            vec![
                (*a, Tensor::matrix(n, d, ga).unwrap()),
                (*b, Tensor::matrix(m, d, gb).unwrap()),
            ]
        }
        Op::Concat(ids) => match g.shape() {
            [_] => {
                let mut offset = 0;
                ids.iter()
                    .map(|&id| {
                        let n = val(id).numel();
                        let part = Tensor::vector(g.data()[offset..offset + n].to_vec());
                        offset += n;
                        (id, part)
                    })
                    .collect()
            }
            _ => {
                let (r, _) = g.dims2().unwrap();
                let mut offset = 0;
                ids.iter()
                    .map(|&id| {
                        let (_, c) = val(id).dims2().unwrap();
                        let data = (0..r)
                            .flat_map(|i| g.row(i)[offset..offset + c].to_vec())
                            .collect();
                        offset += c;
                        (id, Tensor::matrix(r, c, data).unwrap())
                    })
                    .collect()
            }
        },
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec()).unwrap())],
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    /// The value of a one-element node.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// A constant copy of this node's value; gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Res<Var<'g>> {
        let value = self.graph.nodes.borrow()[self.id].value.map(f);
        self.graph.push(name, op, value)
    }

    fn binary_same(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            a.zip_map(b, f)
        };
        self.graph.push(name, op, value)
    }

    pub fn add(self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary_same(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// `[n,m] + [m]`, adding the vector to every row.
    pub fn add_row(self, row: Var<'g>) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
            match (a.dims2(), b.shape()) {
                (Some((r, c)), [n]) if *n == c => {
                    let mut out = a.clone();
                    for i in 0..r {
                        for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                            *o += v;
                        }
                    }
                    out
                }
                _ => return Err(mismatch("add_row", a.shape(), b.shape())),
            }
        };
        self.graph.push("add_row", Op::AddRow(self.id, row.id), value)
    }

    /// `[n,m] + [n]`, adding entry `i` to every element of row `i`.
    pub fn add_col(self, col: Var<'g>) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[col.id].value);
            match (a.dims2(), b.shape()) {
                (Some((r, c)), [n]) if *n == r => {
                    let mut out = a.clone();
                    for i in 0..r {
                        let v = b.data()[i];
                        out.data_mut()[i * c..(i + 1) * c]
                            .iter_mut()
                            .for_each(|o| *o += v);
                    }
                    out
                }
                _ => return Err(mismatch("add_col", a.shape(), b.shape())),
            }
        };
        self.graph.push("add_col", Op::AddCol(self.id, col.id), value)
    }

    /// Multiplies every element by a one-element node.
    pub fn scale(self, s: Var<'g>) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let sv = &nodes[s.id].value;
            if sv.numel() != 1 {
                return Err(mismatch("scale", nodes[self.id].value.shape(), sv.shape()));
            }
            let k = sv.item();
            nodes[self.id].value.map(|x| x * k)
        };
        self.graph.push("scale", Op::Scale(self.id, s.id), value)
    }

    pub fn mul_scalar(self, c: f64) -> Res<Var<'g>> {
        self.unary("mul_scalar", Op::MulScalar(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Res<Var<'g>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    pub fn neg(self) -> Res<Var<'g>> {
        self.unary("neg", Op::Neg(self.id), |x| -x)
    }

    pub fn matmul(self, other: Var<'g>) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            match (a.dims2(), b.dims2()) {
                (Some((_, k)), Some((k2, _))) if k == k2 => a.matmul(b),
                _ => return Err(mismatch("matmul", a.shape(), b.shape())),
            }
        };
        self.graph.push("matmul", Op::MatMul(self.id, other.id), value)
    }

    pub fn transpose(self) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 {
                return Err(mismatch("transpose", a.shape(), &[]));
            }
            a.transpose()
        };
        self.graph.push("transpose", Op::Transpose(self.id), value)
    }

    pub fn relu(self) -> Res<Var<'g>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn softplus(self) -> Res<Var<'g>> {
        self.unary("softplus", Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Res<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Res<Var<'g>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Res<Var<'g>> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Res<Var<'g>> {
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Res<Var<'g>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn abs(self) -> Res<Var<'g>> {
        self.unary("abs", Op::Abs(self.id), f64::abs)
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: f64) -> Res<Var<'g>> {
        self.unary("clamp_min", Op::ClampMin(self.id, floor), |x| x.max(floor))
    }

    pub fn sum(self) -> Res<Var<'g>> {
        let s = self.graph.nodes.borrow()[self.id].value.sum();
        self.graph.push("sum", Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(self) -> Res<Var<'g>> {
        let m = {
            let nodes = self.graph.nodes.borrow();
            let v = &nodes[self.id].value;
            v.sum() / v.numel() as f64
        };
        self.graph.push("mean", Op::Mean(self.id), Tensor::scalar(m))
    }

    /// Largest element, as a scalar. Ties go to the first occurrence.
    pub fn max_all(self) -> Res<Var<'g>> {
        let m = {
            let nodes = self.graph.nodes.borrow();
            let v = nodes[self.id].value.data();
            v[argmax(v)]
        };
        self.graph.push("max_all", Op::MaxAll(self.id), Tensor::scalar(m))
    }

    /// `[n,d], [m,d] -> [n,m]` squared Euclidean distances between rows.
    pub fn sq_dists(self, other: Var<'g>) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            match (a.dims2(), b.dims2()) {
                (Some((n, d)), Some((m, d2))) if d == d2 => {
                    let mut out = Vec::with_capacity(n * m);
                    for i in 0..n {
                        for j in 0..m {
                            out.push(
                                a.row(i)
                                    .iter()
                                    .zip(b.row(j))
                                    .map(|(x, y)| (x - y) * (x - y))
                                    .sum(),
                            );
                        }
                    }
                    Tensor::matrix(n, m, out)?
                }
                _ => return Err(mismatch("sq_dists", a.shape(), b.shape())),
            }
        };
        self.graph
            .push("sq_dists", Op::SqDists(self.id, other.id), value)
    }

    /// `[n,m] -> [n]`, summing each row.
    pub fn sum_rows(self) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            let (r, _) = a
                .dims2()
                .ok_or_else(|| mismatch("sum_rows", a.shape(), &[]))?;
            Tensor::vector((0..r).map(|i| a.row(i).iter().sum()).collect())
        };
        self.graph.push("sum_rows", Op::SumRows(self.id), value)
    }

    /// `[n,m] -> [n]`, numerically stable `log Σ_j exp(x_ij)`.
    pub fn logsumexp_rows(self) -> Res<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            let (r, _) = a
                .dims2()
                .ok_or_else(|| mismatch("logsumexp_rows", a.shape(), &[]))?;
            Tensor::vector(
                (0..r)
                    .map(|i| {
                        let row = a.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                    })
                    .collect(),
            )
        };
        self.graph
            .push("logsumexp_rows", Op::LogSumExpRows(self.id), value)
    }

    /// Row-wise log-softmax of a `[n,m]` logit matrix.
    pub fn log_softmax_rows(self) -> Res<Var<'g>> {
        let lse = self.logsumexp_rows()?;
        self.add_col(lse.neg()?)
    }

    /// Row-wise softmax of a `[n,m]` logit matrix, or of a vector.
    pub fn softmax_logits(self) -> Res<Var<'g>> {
        match self.shape().as_slice() {
            [n] => {
                let n = *n;
                self.reshape(&[1, n])?
                    .log_softmax_rows()?
                    .exp()?
                    .reshape(&[n])
            }
            _ => self.log_softmax_rows()?.exp(),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Res<Var<'g>> {
        let value = self.graph.nodes.borrow()[self.id]
            .value
            .reshape(shape.to_vec())?;
        self.graph.push("reshape", Op::Reshape(self.id), value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn primitive_values() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
        let z = g.scalar(0.0);
        assert!(close(z.softplus().unwrap().item(), std::f64::consts::LN_2, 1e-15));
        let l = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(l.softmax_logits().unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_and_product_gradients() {
        let g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let y = x.square().unwrap();
        assert_eq!(g.backward(y).unwrap().get("x").unwrap().item(), 6.0);

        let g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0)).unwrap();
        let y = g.param("y", Tensor::scalar(5.0)).unwrap();
        let f = x.mul(y).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 5.0);
        assert_eq!(grads.get("y").unwrap().item(), 2.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        g.param("unused", Tensor::vector(vec![4.0, 5.0, 6.0])).unwrap();
        let f = x.sum().unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(AutodiffError::ShapeMismatch { .. })));
        let z = g.scalar(0.0);
        assert!(matches!(z.log(), Err(AutodiffError::NonFinite { op: "log" })));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let g = Graph::new();
        g.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(g.param("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn tangent_requires_enabled_channel() {
        let g = Graph::new();
        let w = g.input(Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            g.seed_tangent(w, Tensor::scalar(1.0)),
            Err(AutodiffError::TangentInactive)
        );
        assert!(g.tangent(w).is_err());
    }

    #[test]
    fn linear_and_quadratic_directional_derivatives() {
        // f(w) = w*phi + 1 with phi = 0.7
        let g = Graph::with_tangent();
        let w = g.input(Tensor::scalar(0.3)).unwrap();
        g.seed_tangent(w, Tensor::scalar(1.0)).unwrap();
        let phi = g.scalar(0.7);
        let f = w.mul(phi).unwrap().add_scalar(1.0).unwrap();
        assert!(close(g.tangent(f).unwrap().item(), 0.7, 1e-15));

        let g = Graph::with_tangent();
        let w = g.input(Tensor::scalar(3.0)).unwrap();
        g.seed_tangent(w, Tensor::scalar(1.0)).unwrap();
        let f = w.square().unwrap();
        assert_eq!(g.tangent(f).unwrap().item(), 6.0);
    }

    #[test]
    fn forward_over_reverse_abs() {
        // g(phi) = d/dw |w*phi + 1| at w = 0, phi = 0.5 -> 0.5; dg/dphi -> 1
        let g = Graph::with_tangent();
        let w = g.input(Tensor::scalar(0.0)).unwrap();
        g.seed_tangent(w, Tensor::scalar(1.0)).unwrap();
        let phi = g.param("phi", Tensor::scalar(0.5)).unwrap();
        let r = w.mul(phi).unwrap().add_scalar(1.0).unwrap().abs().unwrap();
        let d = g.tangent(r).unwrap();
        assert_eq!(d.item(), 0.5);
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.get("phi").unwrap().item(), 1.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let g = Graph::new();
        let x = g.param("x", Tensor::scalar(0.0)).unwrap();
        let y = x.abs().unwrap();
        assert_eq!(g.backward(y).unwrap().get("x").unwrap().item(), 0.0);
    }

    #[test]
    fn nodes_independent_of_seed_have_zero_tangent() {
        let g = Graph::with_tangent();
        let w = g.input(Tensor::scalar(1.0)).unwrap();
        g.seed_tangent(w, Tensor::scalar(1.0)).unwrap();
        let c = g.param("c", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let s = c.square().unwrap().sum().unwrap();
        assert_eq!(g.tangent(s).unwrap().item(), 0.0);
    }

    mod props {
        use super::*;
        use crate::autodiff::finite_diff_check;
        use proptest::prelude::*;

        type Unit = for<'a, 'g> fn(&'a BTreeMap<String, Var<'g>>) -> Res<Var<'g>>;

        fn weighted<'g>(g: &'g Graph, out: Var<'g>) -> Res<Var<'g>> {
            let shape = out.shape();
            let n: usize = shape.iter().product();
            let w = Tensor::new(shape, (0..n).map(|k| (k as f64 * 0.7).sin() + 1.1).collect())?;
            out.mul(g.constant(w))?.sum()
        }

        fn ops() -> Vec<(&'static str, Unit)> {
            vec![
                ("add", |v| v["x"].add(v["y"])),
                ("sub", |v| v["x"].sub(v["y"])),
                ("mul", |v| v["x"].mul(v["y"])),
                ("div", |v| v["x"].div(v["p"])),
                ("add_row", |v| v["x"].add_row(v["row"])),
                ("add_col", |v| v["x"].add_col(v["col"])),
                ("scale", |v| v["x"].scale(v["s"])),
                ("mul_scalar", |v| v["x"].mul_scalar(-1.7)),
                ("add_scalar", |v| v["x"].add_scalar(0.3)),
                ("neg", |v| v["x"].neg()),
                ("matmul", |v| v["x"].matmul(v["z"])),
                ("transpose", |v| v["x"].transpose()),
                ("relu", |v| v["x"].relu()),
                ("softplus", |v| v["x"].softplus()),
                ("sigmoid", |v| v["x"].sigmoid()),
                ("exp", |v| v["x"].exp()),
                ("log", |v| v["p"].log()),
                ("sqrt", |v| v["p"].sqrt()),
                ("square", |v| v["x"].square()),
                ("abs", |v| v["x"].abs()),
                ("clamp_min", |v| v["x"].clamp_min(0.1)),
                ("sum", |v| v["x"].sum()),
                ("mean", |v| v["x"].mean()),
                ("max_all", |v| v["x"].max_all()),
                ("sq_dists", |v| v["x"].sq_dists(v["y"])),
                ("sum_rows", |v| v["x"].sum_rows()),
                ("logsumexp_rows", |v| v["x"].logsumexp_rows()),
                ("log_softmax_rows", |v| v["x"].log_softmax_rows()),
                ("softmax_logits", |v| v["x"].softmax_logits()),
                ("reshape", |v| v["x"].reshape(&[v["x"].shape().iter().product()])),
            ]
        }

        fn entries(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec((0.2f64..2.0, any::<bool>()), n)
                .prop_map(|v| v.into_iter().map(|(m, s)| if s { m } else { -m }).collect())
        }

        fn leaves(r: usize, c: usize, v: &[f64]) -> BTreeMap<String, Tensor> {
            let take = |off: usize, n: usize| v[off..off + n].to_vec();
            let mut m = BTreeMap::new();
            m.insert("x".into(), Tensor::matrix(r, c, take(0, r * c)).unwrap());
            m.insert("y".into(), Tensor::matrix(r, c, take(16, r * c)).unwrap());
            m.insert("p".into(), Tensor::matrix(r, c, take(32, r * c).iter().map(|x| x.abs()).collect()).unwrap());
            m.insert("z".into(), Tensor::matrix(c, r, take(48, r * c)).unwrap());
            m.insert("row".into(), Tensor::vector(take(64, c)));
            m.insert("col".into(), Tensor::vector(take(68, r)));
            m.insert("s".into(), Tensor::scalar(v[72]));
            m
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn every_primitive_matches_central_differences(
                r in 1usize..5, c in 1usize..5, v in entries(73),
            ) {
                let params = leaves(r, c, &v);
                for (name, op) in ops() {
                    let report = finite_diff_check(
                        |g, vars| Ok(weighted(g, op(vars)?)?),
                        &params,
                        1e-5,
                        1e-4,
                    )
                    .unwrap();
                    prop_assert!(report.passed, "{name}: {:?}", report.per_param);
                }
            }

            #[test]
            fn replay_is_bit_identical(r in 1usize..5, c in 1usize..5, v in entries(73)) {
                let params = leaves(r, c, &v);
                let run = || {
                    let g = Graph::with_tangent();
                    let w = g.input(Tensor::scalar(0.4)).unwrap();
                    g.seed_tangent(w, Tensor::scalar(1.0)).unwrap();
                    let vars: BTreeMap<String, Var<'_>> =
                        params.iter().map(|(k, t)| (k.clone(), g.param(k, t.clone()).unwrap())).collect();
                    let h = vars["x"].scale(w).unwrap().matmul(vars["z"]).unwrap().softplus().unwrap();
                    let out = h.logsumexp_rows().unwrap().sum().unwrap();
                    let d = g.tangent(out).unwrap().abs().unwrap().add(out).unwrap();
                    (d.item().to_bits(), g.backward(d).unwrap().into_named())
                };
                let (a, b) = (run(), run());
                prop_assert_eq!(a.0, b.0);
                for (k, t) in &a.1 {
                    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    prop_assert_eq!(bits(t), bits(&b.1[k]), "{}", k);
                }
            }

            #[test]
            fn directional_then_backward_matches_nested_differences(
                theta in entries(3), a in entries(3), b in entries(3), omega in -0.9f64..0.1,
            ) {
                let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
                prop_assume!((omega * dot(&a, &theta) + dot(&b, &theta)).abs() > 0.1);
                // f(θ, ω) = |ω a·θ + b·θ| + ω (a·θ)(b·θ)
                let f = |th: &[f64], w: f64| {
                    (w * dot(&a, th) + dot(&b, th)).abs() + w * dot(&a, th) * dot(&b, th)
                };
                let g = Graph::with_tangent();
                let w = g.input(Tensor::scalar(omega)).unwrap();
                g.seed_tangent(w, Tensor::scalar(1.0)).unwrap();
                let th = g.param("theta", Tensor::vector(theta.clone())).unwrap();
                let av = g.constant(Tensor::vector(a.clone()));
                let bv = g.constant(Tensor::vector(b.clone()));
                let (ta, tb) = (th.mul(av).unwrap().sum().unwrap(), th.mul(bv).unwrap().sum().unwrap());
                let out = ta.scale(w).unwrap().add(tb).unwrap().abs().unwrap()
                    .add(ta.mul(tb).unwrap().scale(w).unwrap()).unwrap();
                let d = g.tangent(out).unwrap().abs().unwrap();
                let grad = g.backward(d).unwrap().get("theta").unwrap().clone();
                let (h1, h2) = (1e-5, 1e-4);
                let inner = |th: &[f64]| ((f(th, omega + h1) - f(th, omega - h1)) / (2.0 * h1)).abs();
                for k in 0..3 {
                    let (mut up, mut dn) = (theta.clone(), theta.clone());
                    up[k] += h2;
                    dn[k] -= h2;
                    let numeric = (inner(&up) - inner(&dn)) / (2.0 * h2);
                    prop_assert!(
                        crate::autodiff::relative_error(grad.data()[k], numeric) < 1e-3,
                        "component {k}: {} vs {numeric}", grad.data()[k]
                    );
                }
            }
        }
    }
}
