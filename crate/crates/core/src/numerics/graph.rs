//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order; [`Graph::backward`] walks them in
//! exact reverse order, so every adjoint is complete before it is propagated.

use std::sync::Arc;

use super::backend::{row_of, Backend};
use super::tensor::{
    self, classify_broadcast, clamp_time, guard_re, last_extent, matmul_a_bt_into,
    matmul_at_b_into, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Outer(NodeId, NodeId),
    Phase(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SqrtEps(NodeId),
    Square(NodeId),
    Cos(NodeId),
    Sin(NodeId),
    Scale(NodeId, f64),
    ReduceSum(NodeId, usize),
    SumAll(NodeId),
    Row(NodeId, usize),
    Gather(NodeId, Arc<[usize]>),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Conv1d(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records operations and their forward values for one evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `id`; zeros when nothing flowed into it.
    pub fn get(&self, id: NodeId) -> Tensor {
        self.adjoints[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.adjoints[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut adj);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (p, q) = match av.shape() {
                    [p, q] => (*p, *q),
                    [q] => (1, *q),
                    _ => (1, 1),
                };
                let r = match bv.shape() {
                    [_, r] => *r,
                    _ => 1,
                };
                if self.wants(*a) {
                    accumulate(adj, *a, av.shape(), |out| {
                        matmul_a_bt_into(gd, bv.data(), out, p, q, r)
                    });
                }
                if self.wants(*b) {
                    accumulate(adj, *b, bv.shape(), |out| {
                        matmul_at_b_into(av.data(), gd, out, p, q, r)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let bc = classify_broadcast(av.shape(), bv.shape())
                    .expect("broadcast was validated on the forward pass");
                let cols = last_extent(node.value.shape());
                let (kind_mul, sign_b) = match node.op {
                    Op::Mul(..) => (true, 1.0),
                    Op::Sub(..) => (false, -1.0),
                    _ => (false, 1.0),
                };
                if self.wants(*a) {
                    accumulate(adj, *a, av.shape(), |out| {
                        for (i, &gi) in gd.iter().enumerate() {
                            let (ia, ib) = bc.index(i, cols);
                            out[ia] += if kind_mul { gi * bv.data()[ib] } else { gi };
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(adj, *b, bv.shape(), |out| {
                        for (i, &gi) in gd.iter().enumerate() {
                            let (ia, ib) = bc.index(i, cols);
                            out[ib] += if kind_mul { gi * av.data()[ia] } else { sign_b * gi };
                        }
                    });
                }
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let v = bv.numel();
                if self.wants(*a) {
                    accumulate(adj, *a, av.shape(), |out| {
                        for (s, o) in out.iter_mut().enumerate() {
                            let grow = &gd[s * v..(s + 1) * v];
                            *o += grow.iter().zip(bv.data()).map(|(x, y)| x * y).sum::<f64>();
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(adj, *b, bv.shape(), |out| {
                        for (s, &as_) in av.data().iter().enumerate() {
                            let grow = &gd[s * v..(s + 1) * v];
                            for (o, &gv) in out.iter_mut().zip(grow) {
                                *o += gv * as_;
                            }
                        }
                    });
                }
            }
            Op::Phase(re, im) => {
                let (rv, iv) = (self.val(*re), self.val(*im));
                let partials = |k: usize| {
                    let r = rv.data()[k];
                    let rg = guard_re(r);
                    let y = iv.data()[k];
                    let den = rg * rg + y * y;
                    let d_re = if r.abs() >= tensor::SQRT_EPS { -y / den } else { 0.0 };
                    (d_re, rg / den)
                };
                if self.wants(*re) {
                    accumulate(adj, *re, rv.shape(), |out| {
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += gd[k] * partials(k).0;
                        }
                    });
                }
                if self.wants(*im) {
                    accumulate(adj, *im, iv.shape(), |out| {
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += gd[k] * partials(k).1;
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                unary(adj, *a, self.val(*a).shape(), gd, |k| y[k] * (1.0 - y[k]));
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                unary(adj, *a, self.val(*a).shape(), gd, |k| {
                    if x[k] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::SqrtEps(a) => {
                let y = node.value.data();
                unary(adj, *a, self.val(*a).shape(), gd, |k| 0.5 / y[k]);
            }
            Op::Square(a) => {
                let x = self.val(*a).data();
                unary(adj, *a, self.val(*a).shape(), gd, |k| 2.0 * x[k]);
            }
            Op::Cos(a) => {
                let x = self.val(*a).data();
                unary(adj, *a, self.val(*a).shape(), gd, |k| -x[k].sin());
            }
            Op::Sin(a) => {
                let x = self.val(*a).data();
                unary(adj, *a, self.val(*a).shape(), gd, |k| x[k].cos());
            }
            Op::Scale(a, c) => {
                let c = *c;
                unary(adj, *a, self.val(*a).shape(), gd, |_| c);
            }
            Op::ReduceSum(a, axis) => {
                let shape = self.val(*a).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                accumulate(adj, *a, shape, |out| {
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for (d, &s) in out[base..base + inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let g0 = gd[0];
                unary(adj, *a, self.val(*a).shape(), &[], |_| g0);
            }
            Op::Row(a, i) => {
                let shape = self.val(*a).shape();
                let c = shape[1];
                accumulate(adj, *a, shape, |out| {
                    for (o, &gv) in out[i * c..(i + 1) * c].iter_mut().zip(gd) {
                        *o += gv;
                    }
                });
            }
            Op::Gather(a, index) => {
                accumulate(adj, *a, self.val(*a).shape(), |out| {
                    for (&src, &gv) in index.iter().zip(gd) {
                        out[src] += gv;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.val(*p).shape();
                    let n = self.val(*p).numel();
                    if self.wants(*p) {
                        accumulate(adj, *p, shape, |out| {
                            for (o, &gv) in out.iter_mut().zip(&gd[offset..offset + n]) {
                                *o += gv;
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                unary(adj, *a, self.val(*a).shape(), gd, |_| 1.0);
            }
            Op::Conv1d(x, kern) => {
                let (xv, kv) = (self.val(*x), self.val(*kern));
                let (t_len, d) = (xv.shape()[0], xv.shape()[1]);
                let k = kv.shape()[0];
                let half = (k / 2) as isize;
                if self.wants(*x) {
                    accumulate(adj, *x, xv.shape(), |out| {
                        for t in 0..t_len {
                            let grow = &gd[t * d..(t + 1) * d];
                            for j in 0..k {
                                let src = clamp_time(t as isize + j as isize - half, t_len);
                                for e in 0..d {
                                    let krow = &kv.data()[(j * d + e) * d..(j * d + e + 1) * d];
                                    out[src * d + e] +=
                                        grow.iter().zip(krow).map(|(g, w)| g * w).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                if self.wants(*kern) {
                    accumulate(adj, *kern, kv.shape(), |out| {
                        for t in 0..t_len {
                            let grow = &gd[t * d..(t + 1) * d];
                            for j in 0..k {
                                let src = clamp_time(t as isize + j as isize - half, t_len);
                                for e in 0..d {
                                    let xe = xv.data()[src * d + e];
                                    let orow = &mut out[(j * d + e) * d..(j * d + e + 1) * d];
                                    for (o, &gv) in orow.iter_mut().zip(grow) {
                                        *o += gv * xe;
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Adds into the adjoint of `id`, allocating it on first contact.
fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = adj[id.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

/// Elementwise chain rule: `adj[a][k] += g[k] * d(k)`. An empty `g` means a
/// broadcast scalar already folded into `d`.
fn unary(adj: &mut [Option<Tensor>], a: NodeId, shape: &[usize], g: &[f64], d: impl Fn(usize) -> f64) {
    accumulate(adj, a, shape, |out| {
        if g.is_empty() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += d(k);
            }
        } else {
            for (k, o) in out.iter_mut().enumerate() {
                *o += g[k] * d(k);
            }
        }
    });
}

impl Backend for Graph {
    type Var = NodeId;

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn param(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        self.val(*v)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::MatMul(*a, *b), v, &[*a, *b]))
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Add(*a, *b), v, &[*a, *b]))
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Sub(*a, *b), v, &[*a, *b]))
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Mul(*a, *b), v, &[*a, *b]))
    }
    fn outer(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::outer(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Outer(*a, *b), v, &[*a, *b]))
    }
    fn phase(&mut self, re: &NodeId, im: &NodeId) -> Result<NodeId> {
        let v = tensor::phase(self.val(*re), self.val(*im))?;
        Ok(self.push(Op::Phase(*re, *im), v, &[*re, *im]))
    }
    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        let v = tensor::sigmoid(self.val(*a));
        self.push(Op::Sigmoid(*a), v, &[*a])
    }
    fn relu(&mut self, a: &NodeId) -> NodeId {
        let v = tensor::relu(self.val(*a));
        self.push(Op::Relu(*a), v, &[*a])
    }
    fn sqrt_eps(&mut self, a: &NodeId) -> Result<NodeId> {
        let v = tensor::sqrt_eps(self.val(*a))?;
        Ok(self.push(Op::SqrtEps(*a), v, &[*a]))
    }
    fn square(&mut self, a: &NodeId) -> NodeId {
        let v = tensor::square(self.val(*a));
        self.push(Op::Square(*a), v, &[*a])
    }
    fn cos(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(f64::cos);
        self.push(Op::Cos(*a), v, &[*a])
    }
    fn sin(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).map(f64::sin);
        self.push(Op::Sin(*a), v, &[*a])
    }
    fn scale(&mut self, a: &NodeId, c: f64) -> NodeId {
        let v = tensor::scale(self.val(*a), c);
        self.push(Op::Scale(*a, c), v, &[*a])
    }
    fn reduce_sum(&mut self, a: &NodeId, axis: usize) -> Result<NodeId> {
        let v = tensor::reduce_sum(self.val(*a), axis)?;
        Ok(self.push(Op::ReduceSum(*a, axis), v, &[*a]))
    }
    fn sum_all(&mut self, a: &NodeId) -> NodeId {
        let v = Tensor::scalar(self.val(*a).sum());
        self.push(Op::SumAll(*a), v, &[*a])
    }
    fn row(&mut self, a: &NodeId, i: usize) -> Result<NodeId> {
        let v = row_of(self.val(*a), i)?;
        Ok(self.push(Op::Row(*a, i), v, &[*a]))
    }
    fn gather(&mut self, a: &NodeId, index: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let v = tensor::gather(self.val(*a), &index, shape)?;
        Ok(self.push(Op::Gather(*a, index), v, &[*a]))
    }
    fn concat(&mut self, parts: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let v = {
            let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
            tensor::concat(&refs, shape)?
        };
        Ok(self.push(Op::Concat(parts.to_vec()), v, parts))
    }
    fn reshape(&mut self, a: &NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.val(*a).reshape(shape)?;
        Ok(self.push(Op::Reshape(*a), v, &[*a]))
    }
    fn conv1d(&mut self, x: &NodeId, kernel: &NodeId) -> Result<NodeId> {
        let v = tensor::conv1d(self.val(*x), self.val(*kernel))?;
        Ok(self.push(Op::Conv1d(*x, *kernel), v, &[*x, *kernel]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.square(&p);
        let loss = g.sum_all(&sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_parameter_gets_zero() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let q = g.param(Tensor::vector(vec![5.0]));
        let loss = g.sum_all(&q);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(q).data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(p * p) through a shared node
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.5, -2.0]));
        let m = g.mul(&p, &p).unwrap();
        let loss = g.sum_all(&m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).data(), &[3.0, -4.0]);
    }
}
