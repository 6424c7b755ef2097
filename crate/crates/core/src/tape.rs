//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! stored in creation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Forward ops validate shapes and reject non-finite outputs.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Square(usize),
    Softmax(usize, usize),
    NormalizeAxis(usize, usize, T),
    LayerNorm(usize, Vec<T>),
    L2NormalizeRows(usize, Vec<T>),
    SumAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    BceLogits {
        x: usize,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    CrossEntropy {
        x: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaskedLse {
        x: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b)
            | Minimum(a, b) | Maximum(a, b) | AddRow(a, b) | MulRow(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Relu(a)
            | Exp(a) | Ln(a) | Abs(a) | Square(a) | Softmax(a, _) | NormalizeAxis(a, _, _)
            | LayerNorm(a, _) | L2NormalizeRows(a, _) | SumAxis(a, _) | SumAll(a)
            | MeanAll(a) | SliceCols(a, _) | GatherRows(a, _) | Reshape(a) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            BceLogits { x, .. } | CrossEntropy { x, .. } | MaskedLse { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive ops for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the leaf.
    pub fn tensor(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::from_parts(v.shape(), g.to_vec()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t.with_requires_grad(requires_grad)),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Differentiable leaf.
    pub fn param(&self, t: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(t, false)
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a single-element loss node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        let mut leaves: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                leaves[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::invalid(format!("{op} expects rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1..].iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Copy of the value as a fresh constant; gradients stop here.
    pub fn detach(&self) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().with_requires_grad(false);
        self.tape.constant(v)
    }

    fn binary_ew(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape
            .push(name, Tensor::from_parts(a.shape().to_vec(), data), op)
    }

    fn unary_ew(self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let out = a.map(f);
        self.tape.push(name, out, op)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        self.tape.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, rhs.id),
        )
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2("matmul_t", &a)?;
        let (n, k2) = dims2("matmul_t", &b)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", a.shape(), b.shape()));
        }
        let out = kernels::matmul_nt(a.data(), b.data(), m, k, n);
        self.tape.push(
            "matmul_t",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(self.id, rhs.id),
        )
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("transpose", &a)?;
        let out = kernels::transpose(a.data(), m, n);
        self.tape.push(
            "transpose",
            Tensor::from_parts(vec![n, m], out),
            Op::Transpose(self.id),
        )
    }

    pub fn add(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_ew(o, "add", |x, y| x + y, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_ew(o, "sub", |x, y| x - y, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_ew(o, "mul", |x, y| x * y, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_ew(o, "div", |x, y| x / y, Op::Div(self.id, o.id))
    }

    pub fn minimum(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_ew(o, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(self.id, o.id))
    }

    pub fn maximum(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_ew(o, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(self.id, o.id))
    }

    fn row_broadcast(
        self,
        row: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, r) = (self.value(), row.value());
        let (m, n) = dims2(name, &a)?;
        if r.len() != n {
            return Err(Error::shape(name, a.shape(), r.shape()));
        }
        let rd = r.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(a.row(i).iter().zip(rd).map(|(&x, &y)| f(x, y)));
        }
        self.tape.push(name, Tensor::from_parts(vec![m, n], out), op)
    }

    /// Adds a length-n row to every row of an m×n matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, "add_row", |x, y| x + y, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a length-n row.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, "mul_row", |x, y| x * y, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        self.unary_ew("scale", |x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Result<Var<'t, T>> {
        self.unary_ew("add_scalar", |x| x + s, Op::AddScalar(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary_ew("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary_ew("tanh", |x| x.tanh(), Op::Tanh(self.id))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary_ew("relu", |x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary_ew("exp", |x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary_ew("ln", |x| x.ln(), Op::Ln(self.id))
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary_ew("abs", |x| x.abs(), Op::Abs(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary_ew("square", |x| x * x, Op::Square(self.id))
    }

    /// Numerically stable softmax along `axis` of a rank-2 tensor.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("softmax", &a)?;
        if axis > 1 {
            return Err(Error::invalid(format!("softmax axis {axis} >= rank 2")));
        }
        let mut out = a.data().to_vec();
        for_each_lane(m, n, axis, |idx| {
            let mx = idx.iter().map(|&i| out[i]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for &i in idx {
                out[i] = (out[i] - mx).exp();
                s = s + out[i];
            }
            for &i in idx {
                out[i] = out[i] / s;
            }
        });
        self.tape.push(
            "softmax",
            Tensor::from_parts(vec![m, n], out),
            Op::Softmax(self.id, axis),
        )
    }

    /// Shifts each entry by `eps`, then divides every lane along `axis` by its sum.
    pub fn normalize_axis(self, axis: usize, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("normalize_axis", &a)?;
        if axis > 1 {
            return Err(Error::invalid(format!("normalize axis {axis} >= rank 2")));
        }
        let mut out = a.data().to_vec();
        for_each_lane(m, n, axis, |idx| {
            for &i in idx {
                out[i] = out[i] + eps;
            }
            let s = idx.iter().map(|&i| out[i]).sum::<T>();
            for &i in idx {
                out[i] = out[i] / s;
            }
        });
        self.tape.push(
            "normalize_axis",
            Tensor::from_parts(vec![m, n], out),
            Op::NormalizeAxis(self.id, axis, eps),
        )
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(self, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("layer_norm", &a)?;
        let nf = T::c(n as f64);
        let mut out = Vec::with_capacity(m * n);
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = a.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv.push(is);
            out.extend(row.iter().map(|&x| (x - mean) * is));
        }
        self.tape.push(
            "layer_norm",
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm(self.id, inv),
        )
    }

    /// Rows scaled to unit length, `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(self, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("l2_normalize_rows", &a)?;
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = a.row(i);
            let nr = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            norms.push(nr);
            out.extend(row.iter().map(|&x| x / nr));
        }
        self.tape.push(
            "l2_normalize_rows",
            Tensor::from_parts(vec![m, n], out),
            Op::L2NormalizeRows(self.id, norms),
        )
    }

    /// Sum along `axis`: 0 → 1×n, 1 → m×1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("sum_axis", &a)?;
        let (shape, out) = match axis {
            0 => {
                let mut s = vec![T::zero(); n];
                for i in 0..m {
                    for (acc, &x) in s.iter_mut().zip(a.row(i)) {
                        *acc = *acc + x;
                    }
                }
                (vec![1, n], s)
            }
            1 => (
                vec![m, 1],
                (0..m).map(|i| a.row(i).iter().copied().sum()).collect(),
            ),
            _ => return Err(Error::invalid(format!("sum axis {axis} >= rank 2"))),
        };
        self.tape
            .push("sum_axis", Tensor::from_parts(shape, out), Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("mean_axis", &a)?;
        let count = if axis == 0 { m } else { n };
        self.sum_axis(axis)?.scale(T::one() / T::c(count as f64))
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = a.data().iter().copied().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = a.data().iter().copied().sum::<T>() / T::c(a.len() as f64);
        self.tape.push("mean", Tensor::scalar(s), Op::MeanAll(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let a = self.value();
        let r = a.reshape(shape)?;
        self.tape.push("reshape", r, Op::Reshape(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("slice_cols", &a)?;
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!("column slice {start}+{len} out of {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&a.row(i)[start..start + len]);
        }
        self.tape.push(
            "slice_cols",
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols(self.id, start),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    /// Rows in the given order; gradients scatter back to the source rows.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if idx.is_empty() {
            return Err(Error::invalid("gather of zero rows"));
        }
        let out = a.select_rows(idx)?;
        self.tape
            .push("gather_rows", out, Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Binary cross-entropy on logits, summed: Σ wᵢ·BCE(tᵢ, σ(xᵢ)).
    pub fn bce_with_logits(self, targets: &[T], weights: &[T]) -> Result<Var<'t, T>> {
        let a = self.value();
        if targets.len() != a.len() || weights.len() != a.len() {
            return Err(Error::shape("bce_with_logits", a.shape(), &[targets.len()]));
        }
        let mut s = T::zero();
        for ((&x, &t), &w) in a.data().iter().zip(targets).zip(weights) {
            let l = x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
            s = s + w * l;
        }
        self.tape.push(
            "bce_with_logits",
            Tensor::scalar(s),
            Op::BceLogits {
                x: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Row-wise softmax cross-entropy against class labels, summed over rows.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("cross_entropy", &a)?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", a.shape(), &[labels.len()]));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut s = T::zero();
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= n {
                return Err(Error::invalid(format!("label {lab} out of {n} classes")));
            }
            let row = a.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&x| (x - mx).exp()).sum::<T>();
            let lse = mx + z.ln();
            s = s + lse - row[lab];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(s),
            Op::CrossEntropy {
                x: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Per-row log-sum-exp over the entries where `mask` is set (m×1 output).
    pub fn masked_logsumexp(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("masked_logsumexp", &a)?;
        if mask.len() != m * n {
            return Err(Error::shape("masked_logsumexp", a.shape(), &[mask.len()]));
        }
        let mut out = Vec::with_capacity(m);
        let mut probs = vec![T::zero(); m * n];
        for i in 0..m {
            let row = a.row(i);
            let sel = &mask[i * n..(i + 1) * n];
            if !sel.iter().any(|&b| b) {
                return Err(Error::invalid(format!("masked_logsumexp: row {i} has empty mask")));
            }
            let mx = row
                .iter()
                .zip(sel)
                .filter(|(_, &b)| b)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            let z: T = row
                .iter()
                .zip(sel)
                .filter(|(_, &b)| b)
                .map(|(&x, _)| (x - mx).exp())
                .sum();
            let lse = mx + z.ln();
            out.push(lse);
            for j in 0..n {
                if sel[j] {
                    probs[i * n + j] = (row[j] - lse).exp();
                }
            }
        }
        self.tape.push(
            "masked_logsumexp",
            Tensor::from_parts(vec![m, 1], out),
            Op::MaskedLse { x: self.id, probs },
        )
    }
}

fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    for v in &vals {
        dims2("concat", v)?;
    }
    let ids = parts.iter().map(|p| p.id).collect();
    if axis == 0 {
        let n = vals[0].shape()[1];
        let mut out = Vec::new();
        let mut m = 0;
        for v in &vals {
            if v.shape()[1] != n {
                return Err(Error::shape("concat_rows", vals[0].shape(), v.shape()));
            }
            m += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        first
            .tape
            .push("concat_rows", Tensor::from_parts(vec![m, n], out), Op::ConcatRows(ids))
    } else {
        let m = vals[0].shape()[0];
        let mut n = 0;
        for v in &vals {
            if v.shape()[0] != m {
                return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
            }
            n += v.shape()[1];
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        first
            .tape
            .push("concat_cols", Tensor::from_parts(vec![m, n], out), Op::ConcatCols(ids))
    }
}

/// Stacks rank-2 tensors vertically.
pub fn concat_rows<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    concat(parts, 0)
}

/// Stacks rank-2 tensors horizontally.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    concat(parts, 1)
}

fn for_each_lane(m: usize, n: usize, axis: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::with_capacity(m.max(n));
    if axis == 1 {
        for i in 0..m {
            idx.clear();
            idx.extend(i * n..(i + 1) * n);
            f(&idx);
        }
    } else {
        for j in 0..n {
            idx.clear();
            idx.extend((0..m).map(|i| i * n + j));
            f(&idx);
        }
    }
}

fn acc<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let d = kernels::matmul_nt(g, bv.data(), m, n, k);
                add_into(acc(nodes, grads, *a).unwrap(), &d);
            }
            if nodes[*b].requires_grad {
                let d = kernels::matmul_tn(av.data(), g, m, k, n);
                add_into(acc(nodes, grads, *b).unwrap(), &d);
            }
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            if nodes[*a].requires_grad {
                let d = kernels::matmul(g, bv.data(), m, n, k);
                add_into(acc(nodes, grads, *a).unwrap(), &d);
            }
            if nodes[*b].requires_grad {
                let d = kernels::matmul_tn(g, av.data(), m, n, k);
                add_into(acc(nodes, grads, *b).unwrap(), &d);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            if let Some(d) = acc(nodes, grads, *a) {
                add_into(d, &kernels::transpose(g, m, n));
            }
        }
        Op::Add(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                add_into(d, g);
            }
            if let Some(d) = acc(nodes, grads, *b) {
                add_into(d, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                add_into(d, g);
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for (x, &gi) in d.iter_mut().zip(g) {
                    *x = *x - gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(d) = acc(nodes, grads, *a) {
                for ((x, &gi), &y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *x = *x + gi * y;
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for ((x, &gi), &y) in d.iter_mut().zip(g).zip(av.data()) {
                    *x = *x + gi * y;
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(d) = acc(nodes, grads, *a) {
                for ((x, &gi), &y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *x = *x + gi / y;
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for (((x, &gi), &y), &num) in d.iter_mut().zip(g).zip(bv.data()).zip(av.data()) {
                    *x = *x - gi * num / (y * y);
                }
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(nodes[id].op, Op::Minimum(..));
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            let pick_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                .collect();
            if let Some(d) = acc(nodes, grads, *a) {
                for ((x, &gi), &p) in d.iter_mut().zip(g).zip(&pick_a) {
                    if p {
                        *x = *x + gi;
                    }
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for ((x, &gi), &p) in d.iter_mut().zip(g).zip(&pick_a) {
                    if !p {
                        *x = *x + gi;
                    }
                }
            }
        }
        Op::AddRow(a, r) => {
            let n = out.shape()[1];
            if let Some(d) = acc(nodes, grads, *a) {
                add_into(d, g);
            }
            if let Some(d) = acc(nodes, grads, *r) {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            }
        }
        Op::MulRow(a, r) => {
            let n = out.shape()[1];
            let (av, rv) = (val(*a).clone(), val(*r).clone());
            if let Some(d) = acc(nodes, grads, *a) {
                for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                    for ((x, &gi), &y) in drow.iter_mut().zip(grow).zip(rv.data()) {
                        *x = *x + gi * y;
                    }
                }
            }
            if let Some(d) = acc(nodes, grads, *r) {
                for (grow, arow) in g.chunks(n).zip(av.data().chunks(n)) {
                    for ((x, &gi), &y) in d.iter_mut().zip(grow).zip(arow) {
                        *x = *x + gi * y;
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for (x, &gi) in d.iter_mut().zip(g) {
                    *x = *x + gi * *s;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                add_into(d, g);
            }
        }
        Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) => {
            let kind = &nodes[id].op;
            if let Some(d) = acc(nodes, grads, *a) {
                for ((x, &gi), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    let local = match kind {
                        Op::Sigmoid(_) => y * (T::one() - y),
                        Op::Tanh(_) => T::one() - y * y,
                        _ => y,
                    };
                    *x = *x + gi * local;
                }
            }
        }
        Op::Relu(a) | Op::Ln(a) | Op::Abs(a) | Op::Square(a) => {
            let kind = &nodes[id].op;
            let av = val(*a).clone();
            if let Some(d) = acc(nodes, grads, *a) {
                for ((x, &gi), &v) in d.iter_mut().zip(g).zip(av.data()) {
                    let local = match kind {
                        Op::Relu(_) => {
                            if v > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Op::Ln(_) => T::one() / v,
                        Op::Abs(_) => {
                            if v > T::zero() {
                                T::one()
                            } else if v < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        _ => v + v,
                    };
                    *x = *x + gi * local;
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let y = out.data();
            if let Some(d) = acc(nodes, grads, *a) {
                for_each_lane(m, n, *axis, |idx| {
                    let dot: T = idx.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in idx {
                        d[i] = d[i] + y[i] * (g[i] - dot);
                    }
                });
            }
        }
        Op::NormalizeAxis(a, axis, eps) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let y = out.data();
            let xv = val(*a).clone();
            if let Some(d) = acc(nodes, grads, *a) {
                for_each_lane(m, n, *axis, |idx| {
                    let s = idx.iter().map(|&i| xv.data()[i] + *eps).sum::<T>();
                    let dot: T = idx.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in idx {
                        d[i] = d[i] + (g[i] - dot) / s;
                    }
                });
            }
        }
        Op::LayerNorm(a, inv) => {
            let n = out.shape()[1];
            let nf = T::c(n as f64);
            if let Some(d) = acc(nodes, grads, *a) {
                for (i, &is) in inv.iter().enumerate() {
                    let xh = &out.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = d[i * n + j] + is / nf * (nf * gr[j] - sg - xh[j] * sgx);
                    }
                }
            }
        }
        Op::L2NormalizeRows(a, norms) => {
            let n = out.shape()[1];
            if let Some(d) = acc(nodes, grads, *a) {
                for (i, &nr) in norms.iter().enumerate() {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: T = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = d[i * n + j] + (gr[j] - y[j] * dot) / nr;
                    }
                }
            }
        }
        Op::SumAxis(a, axis) => {
            let (m, n) = {
                let s = val(*a).shape();
                (s[0], s[1])
            };
            if let Some(d) = acc(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        let gi = if *axis == 0 { g[j] } else { g[i] };
                        d[i * n + j] = d[i * n + j] + gi;
                    }
                }
            }
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            let len = val(*a).len();
            let gi = if matches!(nodes[id].op, Op::MeanAll(_)) {
                g[0] / T::c(len as f64)
            } else {
                g[0]
            };
            if let Some(d) = acc(nodes, grads, *a) {
                for x in d.iter_mut() {
                    *x = *x + gi;
                }
            }
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &p in ids {
                let len = val(p).len();
                if let Some(d) = acc(nodes, grads, p) {
                    add_into(d, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::ConcatCols(ids) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let mut off = 0;
            for &p in ids {
                let w = val(p).shape()[1];
                if let Some(d) = acc(nodes, grads, p) {
                    for i in 0..m {
                        add_into(&mut d[i * w..(i + 1) * w], &g[i * n + off..i * n + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (m, len) = (out.shape()[0], out.shape()[1]);
            let n = val(*a).shape()[1];
            if let Some(d) = acc(nodes, grads, *a) {
                for i in 0..m {
                    add_into(
                        &mut d[i * n + start..i * n + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let n = out.shape()[1];
            if let Some(d) = acc(nodes, grads, *a) {
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut d[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
        }
        Op::BceLogits { x, targets, weights } => {
            let xv = val(*x).clone();
            if let Some(d) = acc(nodes, grads, *x) {
                for (i, v) in d.iter_mut().enumerate() {
                    *v = *v + g[0] * weights[i] * (sigmoid(xv.data()[i]) - targets[i]);
                }
            }
        }
        Op::CrossEntropy { x, labels, probs } => {
            let n = val(*x).shape()[1];
            if let Some(d) = acc(nodes, grads, *x) {
                for (i, v) in d.iter_mut().enumerate() {
                    let onehot = if labels[i / n] == i % n { T::one() } else { T::zero() };
                    *v = *v + g[0] * (probs[i] - onehot);
                }
            }
        }
        Op::MaskedLse { x, probs } => {
            let n = val(*x).shape()[1];
            if let Some(d) = acc(nodes, grads, *x) {
                for (i, v) in d.iter_mut().enumerate() {
                    *v = *v + g[i / n] * probs[i];
                }
            }
        }
    }
}
