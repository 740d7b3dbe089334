use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{
    axis_split, broadcast_map, broadcast_shapes, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, permute,
};
use super::{numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    Abs(usize),
    Acos(usize),
    Powf(usize, f64),
    Square(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Select(usize, usize, Vec<usize>),
    SumAxis(usize, usize),
    SumAll(usize),
    Softmax(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid topological order for backward.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
    // (store address, param id) -> leaf node
    params: RefCell<HashMap<(usize, ParamId), usize>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Forward-evaluation context: a tape plus the parameter store it reads.
/// A frozen context binds parameters as constants.
#[derive(Clone, Copy)]
pub struct Fwd<'a> {
    pub graph: &'a Graph,
    pub params: &'a ParamStore,
    trainable: bool,
}

impl<'a> Fwd<'a> {
    pub fn new(graph: &'a Graph, params: &'a ParamStore) -> Self {
        Self {
            graph,
            params,
            trainable: true,
        }
    }

    pub fn frozen(graph: &'a Graph, params: &'a ParamStore) -> Self {
        Self {
            graph,
            params,
            trainable: false,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'a> {
        self.graph.param(self.params, id, self.trainable)
    }

    pub fn constant(&self, t: Tensor) -> Var<'a> {
        self.graph.constant(t)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf holding `t`'s values; gradients are collected when
    /// `requires_grad` is set.
    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let shape = t.shape().to_vec();
        let value = t.into_data();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a stored parameter. Repeated calls return the same leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId, trainable: bool) -> Var<'_> {
        let key = (store as *const ParamStore as usize, id);
        if let Some(&node) = self.params.borrow().get(&key) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let t = store.get(id);
        let v = self.leaf(
            Tensor::new(t.shape(), t.data().to_vec()).expect("stored tensors are well-formed"),
            trainable,
        );
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    /// Gradients accumulated on the parameter leaves of `store`.
    pub fn param_grads_for(&self, store: &ParamStore) -> Vec<(ParamId, Vec<f64>)> {
        let addr = store as *const ParamStore as usize;
        let leaf = self.leaf_grads.borrow();
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .borrow()
            .iter()
            .filter(|((a, _), _)| *a == addr)
            .filter_map(|((_, pid), node)| leaf.get(node).map(|g| (*pid, g.clone())))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], j: usize, delta: Vec<f64>) {
    if !nodes[j].requires_grad {
        return;
    }
    match &mut grads[j] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => grads[j] = Some(delta),
    }
}

/// Sums `g` (shaped like `out`) down to the broadcast source shape `src`.
fn reduce_to(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if out == src {
        return g.to_vec();
    }
    let mut r = vec![0.0; numel(src)];
    for (gi, &m) in g.iter().zip(broadcast_map(out, src).iter()) {
        r[m] += gi;
    }
    r
}

fn unary_grad(g: &[f64], f: impl Fn(usize) -> f64) -> Vec<f64> {
    g.iter().enumerate().map(|(i, gi)| gi * f(i)).collect()
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            acc(grads, nodes, *a, reduce_to(g, &node.shape, &nodes[*a].shape));
            acc(grads, nodes, *b, reduce_to(g, &node.shape, &nodes[*b].shape));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, reduce_to(g, &node.shape, &nodes[*a].shape));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            acc(grads, nodes, *b, reduce_to(&neg, &node.shape, &nodes[*b].shape));
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let ma = broadcast_map(&node.shape, &na.shape);
            let mb = broadcast_map(&node.shape, &nb.shape);
            let is_div = matches!(node.op, Op::Div(..));
            if na.requires_grad {
                let mut ga = vec![0.0; na.value.len()];
                for i in 0..g.len() {
                    let bv = nb.value[mb[i]];
                    ga[ma[i]] += if is_div { g[i] / bv } else { g[i] * bv };
                }
                acc(grads, nodes, *a, ga);
            }
            if nb.requires_grad {
                let mut gb = vec![0.0; nb.value.len()];
                for i in 0..g.len() {
                    let av = na.value[ma[i]];
                    let bv = nb.value[mb[i]];
                    gb[mb[i]] += if is_div {
                        -g[i] * av / (bv * bv)
                    } else {
                        g[i] * av
                    };
                }
                acc(grads, nodes, *b, gb);
            }
        }
        Op::Neg(a) => acc(grads, nodes, *a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, c) => acc(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => acc(grads, nodes, *a, g.to_vec()),
        Op::Exp(a) => acc(grads, nodes, *a, unary_grad(g, |i| y[i])),
        Op::Log(a) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| 1.0 / x[i]))
        }
        Op::Tanh(a) => acc(grads, nodes, *a, unary_grad(g, |i| 1.0 - y[i] * y[i])),
        Op::Sigmoid(a) => acc(grads, nodes, *a, unary_grad(g, |i| y[i] * (1.0 - y[i]))),
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 }))
        }
        Op::Sqrt(a) => acc(grads, nodes, *a, unary_grad(g, |i| 0.5 / y[i])),
        Op::Abs(a) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| x[i].signum() * (x[i] != 0.0) as u8 as f64))
        }
        Op::Acos(a) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| -1.0 / (1.0 - x[i] * x[i]).sqrt()))
        }
        Op::Powf(a, p) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| p * x[i].powf(p - 1.0)))
        }
        Op::Square(a) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| 2.0 * x[i]))
        }
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, unary_grad(g, |i| (x[i] >= *lo && x[i] <= *hi) as u8 as f64))
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let dims = matmul_dims(&na.shape, &nb.shape).expect("validated at construction");
            let MatDims { batch, n, m, p, a_batched, b_batched } = dims;
            if na.requires_grad {
                let mut ga = vec![0.0; na.value.len()];
                for bi in 0..batch {
                    let ao = if a_batched { bi * n * m } else { 0 };
                    let bo = if b_batched { bi * m * p } else { 0 };
                    gemm_a_bt_acc(
                        &g[bi * n * p..(bi + 1) * n * p],
                        &nb.value[bo..bo + m * p],
                        &mut ga[ao..ao + n * m],
                        n,
                        m,
                        p,
                    );
                }
                acc(grads, nodes, *a, ga);
            }
            if nb.requires_grad {
                let mut gb = vec![0.0; nb.value.len()];
                for bi in 0..batch {
                    let ao = if a_batched { bi * n * m } else { 0 };
                    let bo = if b_batched { bi * m * p } else { 0 };
                    gemm_at_b_acc(
                        &na.value[ao..ao + n * m],
                        &g[bi * n * p..(bi + 1) * n * p],
                        &mut gb[bo..bo + m * p],
                        n,
                        m,
                        p,
                    );
                }
                acc(grads, nodes, *b, gb);
            }
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            acc(grads, nodes, *a, permute(g, &node.shape, &inv));
        }
        Op::Reshape(a) => acc(grads, nodes, *a, g.to_vec()),
        Op::BroadcastTo(a) => acc(grads, nodes, *a, reduce_to(g, &node.shape, &nodes[*a].shape)),
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split(&node.shape, *axis);
            let total_len = node.shape[*axis];
            let mut offset = 0;
            for &part in parts {
                let len = nodes[part].shape[*axis];
                if nodes[part].requires_grad {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total_len + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    acc(grads, nodes, part, gp);
                }
                offset += len;
            }
        }
        Op::Slice(a, axis, start) => {
            let src = &nodes[*a].shape;
            let (outer, len, inner) = axis_split(src, *axis);
            let slen = node.shape[*axis];
            let mut ga = vec![0.0; numel(src)];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                let from = o * slen * inner;
                ga[dst..dst + slen * inner].copy_from_slice(&g[from..from + slen * inner]);
            }
            acc(grads, nodes, *a, ga);
        }
        Op::Select(a, axis, idx) => {
            let src = &nodes[*a].shape;
            let (outer, len, inner) = axis_split(src, *axis);
            let mut ga = vec![0.0; numel(src)];
            for o in 0..outer {
                for (k, &i) in idx.iter().enumerate() {
                    let dst = (o * len + i) * inner;
                    let from = (o * idx.len() + k) * inner;
                    for t in 0..inner {
                        ga[dst + t] += g[from + t];
                    }
                }
            }
            acc(grads, nodes, *a, ga);
        }
        Op::SumAxis(a, axis) => {
            let src = &nodes[*a].shape;
            let (outer, len, inner) = axis_split(src, *axis);
            let mut ga = vec![0.0; numel(src)];
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * len + l) * inner;
                    ga[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            acc(grads, nodes, *a, ga);
        }
        Op::SumAll(a) => acc(grads, nodes, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::Softmax(a) => {
            let last = *node.shape.last().unwrap();
            let mut ga = vec![0.0; y.len()];
            for r in 0..y.len() / last {
                let ys = &y[r * last..(r + 1) * last];
                let gs = &g[r * last..(r + 1) * last];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for c in 0..last {
                    ga[r * last + c] = ys[c] * (gs[c] - dot);
                }
            }
            acc(grads, nodes, *a, ga);
        }
    }
}

struct MatDims {
    batch: usize,
    n: usize,
    m: usize,
    p: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatDims> {
    let (ab, n, m) = match a {
        [n, m] => (None, *n, *m),
        [bt, n, m] => (Some(*bt), *n, *m),
        _ => return None,
    };
    let (bb, m2, p) = match b {
        [m, p] => (None, *m, *p),
        [bt, m, p] => (Some(*bt), *m, *p),
        _ => return None,
    };
    if m != m2 {
        return None;
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return None,
        (Some(x), _) | (_, Some(x)) => x,
        (None, None) => 1,
    };
    Some(MatDims {
        batch,
        n,
        m,
        p,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

macro_rules! unary {
    ($(#[$doc:meta])* $name:ident, $op:ident, $f:expr) => {
        $(#[$doc])*
        pub fn $name(self) -> Var<'g> {
            let (shape, value) = self.map(|x| $f(x));
            self.graph.push(shape, value, Op::$op(self.id), &[self.id])
        }
    };
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes are well-formed")
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "item() on non-scalar");
        nodes[self.id].value[0]
    }

    /// A constant copy of this node, cut from the tape.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant(self.tensor())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })?;
            let value = if a.shape == b.shape {
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()
            } else if b.value.len() == 1 && shape == a.shape {
                let y = b.value[0];
                a.value.iter().map(|&x| f(x, y)).collect()
            } else {
                let ma = broadcast_map(&shape, &a.shape);
                let mb = broadcast_map(&shape, &b.shape);
                ma.iter()
                    .zip(&mb)
                    .map(|(&i, &j)| f(a.value[i], b.value[j]))
                    .collect()
            };
            (shape, value)
        };
        Ok(self.graph.push(shape, value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'g> {
        let (shape, value) = self.map(|x| -x);
        self.graph.push(shape, value, Op::Neg(self.id), &[self.id])
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let (shape, value) = self.map(|x| x * c);
        self.graph.push(shape, value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let (shape, value) = self.map(|x| x + c);
        self.graph.push(shape, value, Op::AddScalar(self.id), &[self.id])
    }

    unary!(exp, Exp, f64::exp);
    unary!(log, Log, f64::ln);
    unary!(tanh, Tanh, f64::tanh);
    unary!(sigmoid, Sigmoid, |x: f64| 1.0 / (1.0 + (-x).exp()));
    unary!(relu, Relu, |x: f64| x.max(0.0));
    unary!(sqrt, Sqrt, f64::sqrt);
    unary!(abs, Abs, f64::abs);
    unary!(
        /// Input must lie strictly inside (-1, 1) for a finite gradient.
        acos,
        Acos,
        f64::acos
    );
    unary!(square, Square, |x: f64| x * x);

    pub fn powf(self, p: f64) -> Var<'g> {
        let (shape, value) = self.map(|x| x.powf(p));
        self.graph.push(shape, value, Op::Powf(self.id, p), &[self.id])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let (shape, value) = self.map(|x| x.clamp(lo, hi));
        self.graph.push(shape, value, Op::Clamp(self.id, lo, hi), &[self.id])
    }

    /// Matrix product over the last two axes; either operand may carry a
    /// leading batch axis, a rank-2 operand is shared across the batch.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let d = matmul_dims(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })?;
            let mut out = vec![0.0; d.batch * d.n * d.p];
            for bi in 0..d.batch {
                let ao = if d.a_batched { bi * d.n * d.m } else { 0 };
                let bo = if d.b_batched { bi * d.m * d.p } else { 0 };
                gemm_acc(
                    &a.value[ao..ao + d.n * d.m],
                    &b.value[bo..bo + d.m * d.p],
                    &mut out[bi * d.n * d.p..(bi + 1) * d.n * d.p],
                    d.n,
                    d.m,
                    d.p,
                );
            }
            let shape = if d.a_batched || d.b_batched {
                vec![d.batch, d.n, d.p]
            } else {
                vec![d.n, d.p]
            };
            (shape, out)
        };
        Ok(self
            .graph
            .push(shape, value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} invalid for shape {shape:?}"
            )));
        }
        let value = self.with_value(|v| permute(v, &shape, perm));
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self
            .graph
            .push(out_shape, value, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::AxisOutOfRange {
                axis: 1,
                shape: self.shape(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let n = self.numel();
        if numel(shape) != n {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value();
        Ok(self
            .graph
            .push(shape.to_vec(), value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let src = self.shape();
        match broadcast_shapes(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: src,
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = broadcast_map(shape, &src);
        let value = self.with_value(|v| map.iter().map(|&i| v[i]).collect());
        Ok(self
            .graph
            .push(shape.to_vec(), value, Op::BroadcastTo(self.id), &[self.id]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let graph = first.graph;
        let (shape, value) = {
            let nodes = graph.nodes.borrow();
            let base = &nodes[first.id].shape;
            if axis >= base.len() {
                return Err(Error::AxisOutOfRange {
                    axis,
                    shape: base.clone(),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                let ok = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !ok {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.clone(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut value = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let chunk = n.shape[axis] * inner;
                    value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, value)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(shape, value, Op::Concat(ids.clone(), axis), &ids))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let src = self.shape();
        if axis >= src.len() {
            return Err(Error::AxisOutOfRange { axis, shape: src });
        }
        if len == 0 || start + len > src[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range on axis {axis} of {src:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&src, axis);
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                out.extend_from_slice(&v[s..s + len * inner]);
            }
            out
        });
        let mut shape = src;
        shape[axis] = len;
        Ok(self
            .graph
            .push(shape, value, Op::Slice(self.id, axis, start), &[self.id]))
    }

    /// Gathers the given indices along `axis` (repeats allowed).
    pub fn select(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let src = self.shape();
        if axis >= src.len() {
            return Err(Error::AxisOutOfRange { axis, shape: src });
        }
        if indices.is_empty() || indices.iter().any(|&i| i >= src[axis]) {
            return Err(Error::InvalidArgument(format!(
                "select indices {indices:?} out of range on axis {axis} of {src:?}"
            )));
        }
        let (outer, full, inner) = axis_split(&src, axis);
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    let s = (o * full + i) * inner;
                    out.extend_from_slice(&v[s..s + inner]);
                }
            }
            out
        });
        let mut shape = src;
        shape[axis] = indices.len();
        Ok(self.graph.push(
            shape,
            value,
            Op::Select(self.id, axis, indices.to_vec()),
            &[self.id],
        ))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let src = self.shape();
        if axis >= src.len() {
            return Err(Error::AxisOutOfRange { axis, shape: src });
        }
        let (outer, len, inner) = axis_split(&src, axis);
        let value = self.with_value(|v| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let s = (o * len + l) * inner;
                    for t in 0..inner {
                        out[o * inner + t] += v[s + t];
                    }
                }
            }
            out
        });
        let mut shape = src;
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self
            .graph
            .push(shape, value, Op::SumAxis(self.id, axis), &[self.id]))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::AxisOutOfRange {
                axis,
                shape: self.shape(),
            })?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let s = self.with_value(|v| v.iter().sum());
        self.graph.push(vec![1], vec![s], Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn l1_norm(self) -> Var<'g> {
        self.abs().sum()
    }

    pub fn l2_norm(self) -> Var<'g> {
        self.square().sum().sqrt()
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let shape = self.shape();
        let last = *shape.last().unwrap();
        let value = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            for r in 0..v.len() / last {
                let row = &v[r * last..(r + 1) * last];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..last {
                    let e = (row[c] - max).exp();
                    out[r * last + c] = e;
                    z += e;
                }
                for c in 0..last {
                    out[r * last + c] /= z;
                }
            }
            out
        });
        self.graph.push(shape, value, Op::Softmax(self.id), &[self.id])
    }

    /// Log-softmax over the last axis (composed, so it differentiates through
    /// existing ops).
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let last_axis = shape.len() - 1;
        let max: Vec<f64> = self.with_value(|v| {
            let last = shape[last_axis];
            (0..v.len() / last)
                .map(|r| v[r * last..(r + 1) * last].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        });
        let mut max_shape = shape.clone();
        max_shape[last_axis] = 1;
        let shift = self.graph.constant(Tensor::new(&max_shape, max)?);
        let shifted = self.sub(shift)?;
        let lse = shifted.exp().sum_axis(last_axis, true)?.log();
        shifted.sub(lse)
    }
}
