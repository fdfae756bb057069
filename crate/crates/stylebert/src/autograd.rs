//! Reverse-mode automatic differentiation on a per-thread tape.
//!
//! Every operation pushes a node holding its value and a pullback closure
//! that maps the upstream gradient to gradients for the node's parents.
//! Node ids grow monotonically, so visiting them in reverse order is a
//! reverse topological traversal.

use std::cell::{Cell, RefCell};

use crate::masking::IGNORE_LABEL;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("cross_entropy: every position carries the ignore marker")]
    AllLabelsIgnored,
}

type Pullback = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    pullback: Option<Pullback>,
}

/// Single-threaded computation graph. Confined to one thread; tensors
/// themselves are value-semantic and sendable.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, pullback: Option<Pullback>) -> Var<'_> {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, pullback });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Introduce an input (parameter or data) onto the tape.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Reverse pass from a scalar loss. Gradients of disconnected leaves
    /// are zero. A second call without `reset` is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutogradError> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(AutogradError::NonScalarLoss(
                nodes[loss.id].value.shape().to_vec(),
            ));
        }
        if self.consumed.get() {
            return Err(AutogradError::BackwardTwice);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pb) = &node.pullback {
                let parent_grads = pb(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients per tape node, indexed by the `Var`s the forward pass produced.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

/// Handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<(), AutogradError> {
        let a = self.shape();
        let b = other.shape();
        if a != b {
            return Err(AutogradError::Shape { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.same_shape(other, "add")?;
        let out = self.value().add(&other.value())?;
        Ok(self.tape.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.same_shape(other, "sub")?;
        let out = self.value().sub(&other.value())?;
        Ok(self.tape.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g| vec![g.clone(), g.scale(-1.0)])),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutogradError> {
        self.same_shape(other, "mul")?;
        let a = self.value();
        let b = other.value();
        let out = a.mul(&b)?;
        Ok(self.tape.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                vec![g.mul(&b).unwrap(), g.mul(&a).unwrap()]
            })),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        self.tape
            .push(out, vec![self.id], Some(Box::new(move |g| vec![g.scale(c)])))
    }

    /// Elementwise add of a constant (not differentiated) tensor.
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>, AutogradError> {
        let out = self.value().add(c)?;
        Ok(self
            .tape
            .push(out, vec![self.id], Some(Box::new(|g| vec![g.clone()]))))
    }

    /// Elementwise multiply by a constant (not differentiated) tensor.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>, AutogradError> {
        let out = self.value().mul(c)?;
        let c = c.clone();
        Ok(self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.mul(&c).unwrap()])),
        ))
    }

    /// `x [..., n] + b [n]`, broadcasting over leading dimensions.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        let b = bias.value();
        let n = *x.shape().last().unwrap_or(&0);
        if b.rank() != 1 || b.shape()[0] != n {
            return Err(AutogradError::Shape {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        Ok(self.tape.push(
            out,
            vec![self.id, bias.id],
            Some(Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for (i, &gv) in g.data().iter().enumerate() {
                    gb[i % n] += gv;
                }
                vec![g.clone(), Tensor::new(vec![n], gb)]
            })),
        ))
    }

    /// `x [r, d] * c [r, 1]` broadcast along the last axis.
    pub fn mul_broadcast_col(self, col: Var<'t>) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        let c = col.value();
        if x.rank() != 2 || c.rank() != 2 || c.shape()[1] != 1 || c.shape()[0] != x.shape()[0] {
            return Err(AutogradError::Shape {
                op: "mul_broadcast_col",
                lhs: x.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let (r, d) = (x.shape()[0], x.shape()[1]);
        let mut out = x.clone();
        for i in 0..r {
            for j in 0..d {
                out.data_mut()[i * d + j] *= c.data()[i];
            }
        }
        let xc = x.clone();
        let cc = c.clone();
        Ok(self.tape.push(
            out,
            vec![self.id, col.id],
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                let mut gc = vec![0.0; r];
                for i in 0..r {
                    for j in 0..d {
                        gx.data_mut()[i * d + j] *= cc.data()[i];
                        gc[i] += g.data()[i * d + j] * xc.data()[i * d + j];
                    }
                }
                vec![gx, Tensor::new(vec![r, 1], gc)]
            })),
        ))
    }

    /// Scale each row of `x [r, d]` by a fixed factor (not differentiated
    /// with respect to the factors).
    pub fn scale_rows(self, factors: &[f64]) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != factors.len() {
            return Err(AutogradError::Shape {
                op: "scale_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let (r, d) = (x.shape()[0], x.shape()[1]);
        let f = factors.to_vec();
        let mut out = x;
        for i in 0..r {
            for j in 0..d {
                out.data_mut()[i * d + j] *= f[i];
            }
        }
        Ok(self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                for i in 0..r {
                    for j in 0..d {
                        gx.data_mut()[i * d + j] *= f[i];
                    }
                }
                vec![gx]
            })),
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutogradError> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul2(&b)?;
        Ok(self.tape.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                vec![
                    g.matmul2(&b.transposed()).unwrap(),
                    a.transposed().matmul2(g).unwrap(),
                ]
            })),
        ))
    }

    pub fn matmul3(self, other: Var<'t>) -> Result<Var<'t>, AutogradError> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul3(&b)?;
        Ok(self.tape.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                vec![
                    g.matmul3(&b.transposed()).unwrap(),
                    a.transposed().matmul3(g).unwrap(),
                ]
            })),
        ))
    }

    /// Transpose the last two axes (rank 2 or 3).
    pub fn transpose_last(self) -> Var<'t> {
        let out = self.value().transposed();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(|g| vec![g.transposed()])),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        let from = x.shape().to_vec();
        let out = x.reshaped(shape)?;
        Ok(self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.reshaped(&from).unwrap()])),
        ))
    }

    /// `[B, S, H*dh] -> [B*H, S, dh]`.
    pub fn split_heads(self, heads: usize) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 3 || x.shape()[2] % heads != 0 {
            return Err(AutogradError::Shape {
                op: "split_heads",
                lhs: x.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = d / heads;
        let mut out = vec![0.0; b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                for si in 0..s {
                    for k in 0..dh {
                        out[((bi * heads + h) * s + si) * dh + k] =
                            x.data()[(bi * s + si) * d + h * dh + k];
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![b * heads, s, dh], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; b * s * d];
                for bi in 0..b {
                    for h in 0..heads {
                        for si in 0..s {
                            for k in 0..dh {
                                gx[(bi * s + si) * d + h * dh + k] =
                                    g.data()[((bi * heads + h) * s + si) * dh + k];
                            }
                        }
                    }
                }
                vec![Tensor::new(vec![b, s, d], gx)]
            })),
        ))
    }

    /// `[B*H, S, dh] -> [B, S, H*dh]`, the inverse of `split_heads`.
    pub fn merge_heads(self, heads: usize) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 3 || x.shape()[0] % heads != 0 {
            return Err(AutogradError::Shape {
                op: "merge_heads",
                lhs: x.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let (bh, s, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let b = bh / heads;
        let d = heads * dh;
        let mut out = vec![0.0; b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                for si in 0..s {
                    for k in 0..dh {
                        out[(bi * s + si) * d + h * dh + k] =
                            x.data()[((bi * heads + h) * s + si) * dh + k];
                    }
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![b, s, d], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; bh * s * dh];
                for bi in 0..b {
                    for h in 0..heads {
                        for si in 0..s {
                            for k in 0..dh {
                                gx[((bi * heads + h) * s + si) * dh + k] =
                                    g.data()[(bi * s + si) * d + h * dh + k];
                            }
                        }
                    }
                }
                vec![Tensor::new(vec![bh, s, dh], gx)]
            })),
        ))
    }

    /// Pick step `t` from `[B, T, d]`, yielding `[B, d]`.
    pub fn slice_axis1(self, t: usize) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 3 || t >= x.shape()[1] {
            return Err(AutogradError::IndexOutOfRange {
                op: "slice_axis1",
                index: t,
                bound: if x.rank() == 3 { x.shape()[1] } else { 0 },
            });
        }
        let (b, tt, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            out[bi * d..(bi + 1) * d]
                .copy_from_slice(&x.data()[(bi * tt + t) * d..(bi * tt + t) * d + d]);
        }
        Ok(self.tape.push(
            Tensor::new(vec![b, d], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[b, tt, d]);
                for bi in 0..b {
                    gx.data_mut()[(bi * tt + t) * d..(bi * tt + t) * d + d]
                        .copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                vec![gx]
            })),
        ))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&0);
        if start + len > n {
            return Err(AutogradError::IndexOutOfRange {
                op: "slice_last",
                index: start + len,
                bound: n,
            });
        }
        let rows = x.size() / n;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&x.data()[r * n + start..r * n + start + len]);
        }
        let full_shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(shape, out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&full_shape);
                for r in 0..rows {
                    gx.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![gx]
            })),
        ))
    }

    /// Sum over axis 1 of `[B, T, d]`, yielding `[B, d]`.
    pub fn sum_axis1(self) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(AutogradError::Shape {
                op: "sum_axis1",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                for k in 0..d {
                    out[bi * d + k] += x.data()[(bi * t + ti) * d + k];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![b, d], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[b, t, d]);
                for bi in 0..b {
                    for ti in 0..t {
                        for k in 0..d {
                            gx.data_mut()[(bi * t + ti) * d + k] = g.data()[bi * d + k];
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Mean over axis 1 of `[B, T, d]`.
    pub fn mean_axis1(self) -> Result<Var<'t>, AutogradError> {
        let t = self.shape().get(1).copied().unwrap_or(0).max(1) as f64;
        Ok(self.sum_axis1()?.scale(1.0 / t))
    }

    /// Sliding windows over axis 1: `[B, T, d] -> [B, T-w+1, w*d]`.
    pub fn windows_axis1(self, w: usize) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 3 || w == 0 || w > x.shape()[1] {
            return Err(AutogradError::IndexOutOfRange {
                op: "windows_axis1",
                index: w,
                bound: if x.rank() == 3 { x.shape()[1] } else { 0 },
            });
        }
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let tw = t - w + 1;
        let mut out = vec![0.0; b * tw * w * d];
        for bi in 0..b {
            for i in 0..tw {
                for j in 0..w {
                    let src = (bi * t + i + j) * d;
                    let dst = (bi * tw + i) * w * d + j * d;
                    out[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![b, tw, w * d], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[b, t, d]);
                for bi in 0..b {
                    for i in 0..tw {
                        for j in 0..w {
                            let dst = (bi * t + i + j) * d;
                            let src = (bi * tw + i) * w * d + j * d;
                            for k in 0..d {
                                gx.data_mut()[dst + k] += g.data()[src + k];
                            }
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Max over axis 1 of `[B, T, c]` restricted to valid positions; the
    /// gradient routes to the argmax. Rows must have at least one valid
    /// position.
    pub fn max_axis1_masked(self, valid: &[Vec<bool>]) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        if x.rank() != 3 || valid.len() != x.shape()[0] {
            return Err(AutogradError::Shape {
                op: "max_axis1_masked",
                lhs: x.shape().to_vec(),
                rhs: vec![valid.len()],
            });
        }
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            assert!(valid[bi].iter().take(t).any(|&v| v), "row {bi} has no valid position");
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_t = 0;
                for (ti, &ok) in valid[bi].iter().take(t).enumerate() {
                    if !ok {
                        continue;
                    }
                    let v = x.data()[(bi * t + ti) * c + ch];
                    if v > best {
                        best = v;
                        best_t = ti;
                    }
                }
                out[bi * c + ch] = best;
                argmax[bi * c + ch] = best_t;
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![b, c], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[b, t, c]);
                for bi in 0..b {
                    for ch in 0..c {
                        let ti = argmax[bi * c + ch];
                        gx.data_mut()[(bi * t + ti) * c + ch] += g.data()[bi * c + ch];
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Row gather from an embedding table; the gradient scatter-adds back.
    pub fn embedding_lookup(self, indices: &[u32]) -> Result<Var<'t>, AutogradError> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(AutogradError::Shape {
                op: "embedding_lookup",
                lhs: table.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= v) {
            return Err(AutogradError::IndexOutOfRange {
                op: "embedding_lookup",
                index: bad as usize,
                bound: v,
            });
        }
        let n = indices.len();
        let mut out = vec![0.0; n * d];
        for (i, &ix) in indices.iter().enumerate() {
            out[i * d..(i + 1) * d]
                .copy_from_slice(&table.data()[ix as usize * d..(ix as usize + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(self.tape.push(
            Tensor::new(vec![n, d], out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gt = Tensor::zeros(&[v, d]);
                for (i, &ix) in idx.iter().enumerate() {
                    for k in 0..d {
                        gt.data_mut()[ix as usize * d + k] += g.data()[i * d + k];
                    }
                }
                vec![gt]
            })),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let rows = x.size() / n;
        let mut out = x.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = out.clone();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let dot: f64 =
                        (0..n).map(|j| g.data()[r * n + j] * y.data()[r * n + j]).sum();
                    for j in 0..n {
                        gx.data_mut()[r * n + j] =
                            y.data()[r * n + j] * (g.data()[r * n + j] - dot);
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Layer norm over the last axis followed by the affine (γ, β).
    pub fn layer_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>, AutogradError> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&0);
        let gm = gamma.value();
        let bt = beta.value();
        if gm.shape() != [n] || bt.shape() != [n] {
            return Err(AutogradError::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gm.shape().to_vec(),
            });
        }
        let rows = x.size() / n;
        let mut xhat = vec![0.0; rows * n];
        let mut inv_sigma = vec![0.0; rows];
        let mut out = x.clone();
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out.data_mut()[r * n + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let gm_c = gm.clone();
        Ok(self.tape.push(
            out,
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(&[rows * n]);
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    let mut mean_dy = 0.0;
                    let mut mean_dyxh = 0.0;
                    for j in 0..n {
                        let dy = g.data()[r * n + j] * gm_c.data()[j];
                        mean_dy += dy;
                        mean_dyxh += dy * xhat[r * n + j];
                        gg[j] += g.data()[r * n + j] * xhat[r * n + j];
                        gb[j] += g.data()[r * n + j];
                    }
                    mean_dy /= n as f64;
                    mean_dyxh /= n as f64;
                    for j in 0..n {
                        let dy = g.data()[r * n + j] * gm_c.data()[j];
                        gx.data_mut()[r * n + j] =
                            inv_sigma[r] * (dy - mean_dy - xhat[r * n + j] * mean_dyxh);
                    }
                }
                let gx = gx.reshaped(g.shape()).unwrap();
                vec![gx, Tensor::new(vec![n], gg), Tensor::new(vec![n], gb)]
            })),
        ))
    }

    /// GeLU, tanh approximation with constant 0.044715.
    pub fn gelu(self) -> Var<'t> {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let x = self.value();
        let out = x.map(|v| 0.5 * v * (1.0 + (K * (v + C * v * v * v)).tanh()));
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                let dx = x.map(|v| {
                    let u = K * (v + C * v * v * v);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * K * (1.0 + 3.0 * C * v * v)
                });
                vec![g.mul(&dx).unwrap()]
            })),
        )
    }

    pub fn tanh_act(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        let y = out.clone();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g.mul(&y.map(|t| 1.0 - t * t)).unwrap()]
            })),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let y = out.clone();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g.mul(&y.map(|s| s * (1.0 - s))).unwrap()]
            })),
        )
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>, AutogradError> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let lead: Vec<usize> =
            values[0].shape()[..values[0].rank() - 1].to_vec();
        for v in &values[1..] {
            if v.shape()[..v.rank() - 1] != lead[..] {
                return Err(AutogradError::Shape {
                    op: "concat_last",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (v, &w) in values.iter().zip(&widths) {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let widths_c = widths.clone();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.push(
            Tensor::new(shape, out),
            ids,
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths_c.len());
                let mut off = 0;
                for (wi, &w) in widths_c.iter().enumerate() {
                    let mut gd = vec![0.0; rows * w];
                    for r in 0..rows {
                        gd[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    grads.push(Tensor::new(shapes[wi].clone(), gd));
                    off += w;
                }
                grads
            })),
        ))
    }

    /// Mean cross-entropy over positions whose label is not the ignore
    /// marker. Logits are `[n, V]`, labels length `n`.
    pub fn cross_entropy(self, labels: &[i64]) -> Result<Var<'t>, AutogradError> {
        let logits = self.value();
        if logits.rank() != 2 || logits.shape()[0] != labels.len() {
            return Err(AutogradError::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, v) = (logits.shape()[0], logits.shape()[1]);
        let counted: Vec<usize> =
            (0..n).filter(|&i| labels[i] != IGNORE_LABEL).collect();
        if counted.is_empty() {
            return Err(AutogradError::AllLabelsIgnored);
        }
        if let Some(&i) = counted.iter().find(|&&i| labels[i] < 0 || labels[i] as usize >= v) {
            return Err(AutogradError::IndexOutOfRange {
                op: "cross_entropy",
                index: labels[i].max(0) as usize,
                bound: v,
            });
        }
        let count = counted.len() as f64;
        let mut loss = 0.0;
        // softmax rows cached for the pullback
        let mut probs = vec![0.0; counted.len() * v];
        for (ci, &i) in counted.iter().enumerate() {
            let row = &logits.data()[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[ci * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[ci * v + j] /= sum;
            }
            loss += sum.ln() + max - row[labels[i] as usize];
        }
        loss /= count;
        let labels_c: Vec<i64> = labels.to_vec();
        let counted_c = counted.clone();
        Ok(self.tape.push(
            Tensor::scalar(loss),
            vec![self.id],
            Some(Box::new(move |g| {
                let s = g.item() / count;
                let mut gx = Tensor::zeros(&[n, v]);
                for (ci, &i) in counted_c.iter().enumerate() {
                    for j in 0..v {
                        gx.data_mut()[i * v + j] = probs[ci * v + j] * s;
                    }
                    gx.data_mut()[i * v + labels_c[i] as usize] -= s;
                }
                vec![gx]
            })),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum_all();
        self.tape.push(
            Tensor::scalar(s),
            vec![self.id],
            Some(Box::new(move |g| vec![Tensor::filled(&shape, g.item())])),
        )
    }
}
