//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and enough
//! saved state to run its backward rule. Nodes are only ever appended, so
//! the tape is always in topological order and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    axis_split, bmm, bmm_acc, gelu, gelu_grad, inverse_permutation, matmul_shapes, permute,
    rms_norm_rows, softmax_in_place, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of 2-D operands or batched 3-D operands, with optional
    /// transposition of the last two axes of either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_shapes(av.shape(), bv.shape(), trans_a, trans_b)?;
        let mut out = vec![T::zero(); batch * m * n];
        bmm(batch, m, k, n, av.data(), trans_a, bv.data(), trans_b, &mut out);
        let shape = if av.ndim() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds `bias` to every trailing block of `x`; `bias`'s shape must equal
    /// the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (xs, bs) = (xv.shape(), bv.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(self.shape_err("add_broadcast", x, bias));
        }
        let width = bv.numel();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(width) {
            for (d, &b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        self.push("add_broadcast", value, Op::AddBroadcast { x, bias }, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let shape = value.shape().to_vec();
        softmax_in_place(value.data_mut(), &shape, axis);
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.ndim() != 1 || gv.numel() != xv.last_dim() {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let mut out = vec![T::zero(); xv.numel()];
        let inv_rms = rms_norm_rows(xv.data(), gv.data(), eps, &mut out);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("rms_norm", value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`, shape `[ids.len(), width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab: rows,
                });
            }
            data.extend_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], data)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.ndim()];
        if perm.len() != xv.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "bad permutation {perm:?} for shape {:?}",
                xv.shape()
            )));
        }
        let (data, shape) = permute(xv.data(), xv.shape(), perm);
        let value = Tensor::new(shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Mean token-level negative log-likelihood. `logits` has the vocabulary
    /// on its last axis; `targets` has one entry per row, `None` meaning the
    /// row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, (p, t)) in probs.chunks_mut(vocab).zip(targets).enumerate() {
            let logits_row = &lv.data()[row * vocab..(row + 1) * vocab];
            let max = logits_row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in p.iter_mut() {
                *v /= denom;
            }
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::TokenOutOfRange {
                        id: t as u32,
                        vocab,
                    });
                }
                total += denom.ln() + max - logits_row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every position is ignored"));
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Back-propagates from the scalar `loss`. Every trainable leaf gets a
    /// gradient; leaves that do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(_) if matches!(node.op, Op::Leaf) => continue,
                Some(_) => grads[i].take().unwrap(),
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k, n) =
                    matmul_shapes(av.shape(), bv.shape(), trans_a, trans_b).expect("recorded shapes");
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.numel()];
                    if trans_a {
                        bmm(batch, k, n, m, bv.data(), trans_b, g, true, &mut da);
                    } else {
                        bmm(batch, m, n, k, g, false, bv.data(), !trans_b, &mut da);
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.numel()];
                    if trans_b {
                        bmm(batch, n, m, k, g, true, av.data(), trans_a, &mut db);
                    } else {
                        bmm_acc(batch, k, m, n, av.data(), !trans_a, g, false, T::zero(), &mut db);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.to_vec());
                }
            }
            &Op::AddBroadcast { x, bias } => {
                if self.wants(x) {
                    self.accumulate(grads, x, g.to_vec());
                }
                if self.wants(bias) {
                    let width = self.value(bias).numel();
                    let mut db = vec![T::zero(); width];
                    for row in g.chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let da = g.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = g.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            &Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            dx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let width = gv.numel();
                let wf = T::lit(width as f64);
                let mut dgain = vec![T::zero(); width];
                let mut dx = vec![T::zero(); xv.numel()];
                for (r, ((xrow, grow), dxrow)) in xv
                    .data()
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(dx.chunks_mut(width))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let mut ux = T::zero();
                    for j in 0..width {
                        dgain[j] += grow[j] * xrow[j] * inv;
                        ux += grow[j] * gv.data()[j] * xrow[j];
                    }
                    let c = inv * inv * inv * ux / wf;
                    for j in 0..width {
                        dxrow[j] = inv * grow[j] * gv.data()[j] - c * xrow[j];
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, dgain);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let width = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.numel()];
                for (row, &id) in g.chunks(width).zip(ids) {
                    for (d, &v) in dt[id * width..(id + 1) * width].iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Permute { x, perm } => {
                let (dx, _) = permute(g, node.value.shape(), &inverse_permutation(perm));
                self.accumulate(grads, *x, dx);
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, g.to_vec());
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, vec![g[0]; self.value(x).numel()]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / T::lit(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for ((drow, prow), t) in dl.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                    if let Some(t) = *t {
                        for (d, &p) in drow.iter_mut().zip(prow) {
                            *d = p * scale;
                        }
                        drow[t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4]));
        let l = tape.cross_entropy(x, &[Some(2)]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_target() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 5];
        logits[3] = 1e6;
        let x = tape.constant(t(&[1, 5], &logits));
        let l = tape.cross_entropy(x, &[Some(3)]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(tape.cross_entropy(x, &[None, None]), Err(Error::Empty(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }
}
