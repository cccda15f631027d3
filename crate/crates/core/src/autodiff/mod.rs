//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its variables in creation
//! order. Since an operation can only consume variables that already exist,
//! creation order is a topological order, and [`Graph::backward`] simply walks
//! the node list in reverse, visiting each node once.
//!
//! ```
//! use dovmm::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod gemm;
mod optim;
mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub(crate) use gemm::gemm;
pub use optim::{Adam, AdamConfig, Params};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("mask complement has no retained-for-loss positions")]
    EmptyMask,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    AddTiled(usize, usize),
    GroupMean(usize, usize),
    RepeatRows(usize, usize),
    Reshape(usize),
    Sum(usize),
    MaskedMse {
        pred: usize,
        target: usize,
        mask: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if `var` was on the loss path and
    /// needs a gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.graph, self.id, "variable from a different graph");
        &self.nodes[var.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn finish(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddTiled(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::GroupMean(a, _)
            | Op::RepeatRows(a, _)
            | Op::Reshape(a)
            | Op::Sum(a) => {
                self.needs(*a)
            }
            Op::MaskedMse { pred, target, .. } => self.needs(*pred) || self.needs(*target),
        };
        Ok(self.push(value, op, needs_grad))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.nodes[ia].value.dims2()?;
        let (k2, n) = self.nodes[ib].value.dims2()?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul inner dimensions {k} and {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            false,
            self.nodes[ib].value.data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.finish(value, Op::MatMul(ia, ib), "matmul")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Tensor), AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        Ok((ia, ib, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib, v) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.finish(v, Op::Add(ia, ib), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib, v) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.finish(v, Op::Sub(ia, ib), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib, v) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.finish(v, Op::Mul(ia, ib), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())?;
        self.finish(v, Op::Scale(ia, factor), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.finish(v, Op::Relu(ia), "relu")
    }

    /// Adds `b` (shape `[r, c]`) to every consecutive block of `r` rows of `a`
    /// (shape `[k * r, c]`). With `r = 1` this is a bias add.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (rows, cols) = ta.dims2()?;
        let (br, bc) = match tb.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "add_tiled operand shape {s:?}"
                )))
            }
        };
        if bc != cols || rows % br != 0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add_tiled: [{rows}, {cols}] with [{br}, {bc}]"
            )));
        }
        let block = br * cols;
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        self.finish(v, Op::AddTiled(ia, ib), "add_tiled")
    }

    /// Replaces each row of `a` (shape `[k * group, c]`) with the mean of the
    /// `group` rows in its block.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = t.dims2()?;
        if group == 0 || rows % group != 0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "group_mean: {rows} rows not divisible into groups of {group}"
            )));
        }
        let mut data = vec![0.0; rows * cols];
        let inv = 1.0 / group as f64;
        for (src, dst) in t.data().chunks(group * cols).zip(data.chunks_mut(group * cols)) {
            let mut mean = vec![0.0; cols];
            for row in src.chunks(cols) {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv);
            for row in dst.chunks_mut(cols) {
                row.copy_from_slice(&mean);
            }
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        self.finish(v, Op::GroupMean(ia, group), "group_mean")
    }

    /// Repeats every row of `a` (shape `[k, c]`) `times` times in place,
    /// giving `[k * times, c]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = t.dims2()?;
        if times == 0 {
            return Err(AutodiffError::InvalidShape("repeat_rows: zero repetitions".into()));
        }
        let mut data = Vec::with_capacity(rows * cols * times);
        for row in t.data().chunks(cols) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let v = Tensor::new(vec![rows * times, cols], data)?;
        self.finish(v, Op::RepeatRows(ia, times), "repeat_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let v = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.finish(v, Op::Reshape(ia), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.finish(Tensor::scalar(s), Op::Sum(ia), "sum")
    }

    /// Masked mean squared error, averaged over rows.
    ///
    /// For each row: `sum((pred - target)^2 * mask) / sum(mask)`, where `mask`
    /// holds 1 at positions that count towards the loss. Operands are `[n]`
    /// or `[rows, n]`; every row of the mask must contain at least one 1.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var, AutodiffError> {
        let (ip, it, im) = (self.idx(pred)?, self.idx(target)?, self.idx(mask)?);
        let (tp, tt, tm) = (
            &self.nodes[ip].value,
            &self.nodes[it].value,
            &self.nodes[im].value,
        );
        if tp.shape() != tt.shape() || tp.shape() != tm.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "masked_mse: pred {:?}, target {:?}, mask {:?}",
                tp.shape(),
                tt.shape(),
                tm.shape()
            )));
        }
        let width = *tp.shape().last().expect("non-empty shape");
        let mut total = 0.0;
        let mut rows = 0usize;
        for ((p, t), m) in tp
            .data()
            .chunks(width)
            .zip(tt.data().chunks(width))
            .zip(tm.data().chunks(width))
        {
            let count: f64 = m.iter().sum();
            if count <= 0.0 {
                return Err(AutodiffError::EmptyMask);
            }
            let sq: f64 = p
                .iter()
                .zip(t)
                .zip(m)
                .map(|((p, t), m)| (p - t) * (p - t) * m)
                .sum();
            total += sq / count;
            rows += 1;
        }
        let v = Tensor::scalar(total / rows as f64);
        self.finish(
            v,
            Op::MaskedMse {
                pred: ip,
                target: it,
                mask: im,
            },
            "masked_mse",
        )
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a].value.dims2()?;
                    let (_, n) = self.nodes[b].value.dims2()?;
                    if self.needs(a) {
                        // dA = dC * B^T
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, self.nodes[b].value.data(), true, 0.0, &mut da);
                        accumulate(&mut grads[a], da);
                    }
                    if self.needs(b) {
                        // dB = A^T * dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.nodes[a].value.data(), true, &g, false, 0.0, &mut db);
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.needs(a) {
                        let ga = reduce_to(&g, &self.nodes[a].value, 1.0);
                        accumulate(&mut grads[a], ga);
                    }
                    if self.needs(b) {
                        let gb = reduce_to(&g, &self.nodes[b].value, sign);
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.needs(a) {
                        let prod = product_with(&g, vb);
                        accumulate(&mut grads[a], reduce_to(&prod, va, 1.0));
                    }
                    if self.needs(b) {
                        let prod = product_with(&g, va);
                        accumulate(&mut grads[b], reduce_to(&prod, vb, 1.0));
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads[a], g.iter().map(|x| x * f).collect());
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a], ga);
                }
                Op::AddTiled(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if self.needs(b) {
                        let block = self.nodes[b].value.numel();
                        let mut gb = vec![0.0; block];
                        for chunk in g.chunks(block) {
                            for (acc, x) in gb.iter_mut().zip(chunk) {
                                *acc += x;
                            }
                        }
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::GroupMean(a, group) => {
                    // The mean is linear and symmetric within a block, so the
                    // adjoint is the same operation applied to the gradient.
                    let cols = self.nodes[a].value.dims2()?.1;
                    let inv = 1.0 / group as f64;
                    let mut ga = vec![0.0; g.len()];
                    for (src, dst) in g.chunks(group * cols).zip(ga.chunks_mut(group * cols)) {
                        let mut s = vec![0.0; cols];
                        for row in src.chunks(cols) {
                            for (acc, x) in s.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        for row in dst.chunks_mut(cols) {
                            for (d, x) in row.iter_mut().zip(&s) {
                                *d = x * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[a], ga);
                }
                Op::RepeatRows(a, times) => {
                    let cols = self.nodes[a].value.dims2()?.1;
                    let mut ga = vec![0.0; g.len() / times];
                    for (dst, src) in ga.chunks_mut(cols).zip(g.chunks(times * cols)) {
                        for row in src.chunks(cols) {
                            for (d, x) in dst.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                    accumulate(&mut grads[a], ga);
                }
                Op::Reshape(a) => accumulate(&mut grads[a], g),
                Op::Sum(a) => {
                    let n = self.nodes[a].value.numel();
                    accumulate(&mut grads[a], vec![g[0]; n]);
                }
                Op::MaskedMse { pred, target, mask } => {
                    let (tp, tt, tm) = (
                        &self.nodes[pred].value,
                        &self.nodes[target].value,
                        &self.nodes[mask].value,
                    );
                    let width = *tp.shape().last().expect("non-empty shape");
                    let rows = tp.numel() / width;
                    let mut gp = vec![0.0; tp.numel()];
                    for (((dst, p), t), m) in gp
                        .chunks_mut(width)
                        .zip(tp.data().chunks(width))
                        .zip(tt.data().chunks(width))
                        .zip(tm.data().chunks(width))
                    {
                        let count: f64 = m.iter().sum();
                        let c = 2.0 * g[0] / (count * rows as f64);
                        for (((d, p), t), m) in dst.iter_mut().zip(p).zip(t).zip(m) {
                            *d = c * (p - t) * m;
                        }
                    }
                    if self.needs(target) {
                        accumulate(&mut grads[target], gp.iter().map(|x| -x).collect());
                    }
                    if self.needs(pred) {
                        accumulate(&mut grads[pred], gp);
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.needs_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Gradient of a broadcast binary op reduced to the shape of `operand`.
fn reduce_to(g: &[f64], operand: &Tensor, sign: f64) -> Vec<f64> {
    if operand.numel() == g.len() {
        g.iter().map(|x| x * sign).collect()
    } else {
        vec![sign * g.iter().sum::<f64>()]
    }
}

/// `g * other`, broadcasting a scalar `other`.
fn product_with(g: &[f64], other: &Tensor) -> Vec<f64> {
    if other.numel() == g.len() {
        g.iter().zip(other.data()).map(|(a, b)| a * b).collect()
    } else {
        let s = other.item();
        g.iter().map(|a| a * s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let b = g.constant(Tensor::matrix(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch(_))));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[-1.0, 0.5, 2.0]).with_grad());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[0.0]).with_grad());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn add_zero_is_identity_and_shapes_checked() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.5, -2.0, 3.0]));
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), g.value(a).data());

        let b = g.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch(_))));
    }

    #[test]
    fn masked_mse_hand_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(&[1.0, 0.0, 0.0, 4.0]));
        let t = g.constant(Tensor::vector(&[1.0, 2.0, 3.0, 4.0]));
        let m = g.constant(Tensor::vector(&[0.0, 1.0, 1.0, 0.0]));
        let l = g.masked_mse(p, t, m).unwrap();
        assert_eq!(g.value(l).item(), 6.5);

        let ones = g.constant(Tensor::filled(&[4], 1.0));
        let l = g.masked_mse(p, t, ones).unwrap();
        assert_eq!(g.value(l).item(), 13.0 / 4.0);

        let l = g.masked_mse(t, t, m).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn masked_mse_rejects_empty_mask() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(&[1.0, 2.0]));
        let m = g.constant(Tensor::vector(&[0.0, 0.0]));
        assert_eq!(g.masked_mse(p, p, m), Err(AutodiffError::EmptyMask));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[5.0, -1.0, 2.0]).with_grad());
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));

        let mut other = Graph::new();
        let y = other.leaf(Tensor::scalar(1.0).with_grad());
        assert_eq!(g.backward(y).unwrap_err(), AutodiffError::ForeignVar);
        assert_eq!(g.relu(y).unwrap_err(), AutodiffError::ForeignVar);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1e200, 1.0]));
        assert_eq!(g.mul(x, x).unwrap_err(), AutodiffError::NonFinite("mul"));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) => grad = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, -3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[3.0, -5.0]);
    }

    #[test]
    fn add_tiled_and_group_mean_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
        let b = g.constant(Tensor::matrix(&[&[10.0, 20.0], &[30.0, 40.0]]));
        let s = g.add_tiled(a, b).unwrap();
        assert_eq!(
            g.value(s).data(),
            &[10.0, 21.0, 32.0, 43.0, 14.0, 25.0, 36.0, 47.0]
        );
        let m = g.group_mean(a, 2).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 2.0, 1.0, 2.0, 5.0, 6.0, 5.0, 6.0]);
        assert!(g.group_mean(a, 3).is_err());
    }
}
