//! Reverse-mode differentiable compute graph over dense `f64` tensors.
//!
//! Nodes are appended to a tape in creation order, so the tape is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//! Broadcasting is limited to scalar-tensor pairs; anything else needs an
//! explicit [`Graph::expand`].

mod kernels;
mod tensor;

pub use kernels::ConvGeometry;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use kernels::{gemm, View};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the forward inputs, output and the
    /// gradient arriving at the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Neg(Var),
    Log(Var),
    Recip(Var),
    ClampMin(Var, f64),
    L2Norm(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mask(Var, Tensor),
    Softmax {
        x: Var,
        axis: usize,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Expand(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    StraightThrough(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::Neg(..) => "neg",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::ClampMin(..) => "clamp_min",
            Op::L2Norm(..) => "l2_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Mask(..) => "mask",
            Op::Softmax { .. } => "softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::IndexSelect { .. } => "index_select",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StraightThrough(..) => "straight_through",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddScalar(a) => vec![*a],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Abs(x)
            | Op::Neg(x)
            | Op::Log(x)
            | Op::Recip(x)
            | Op::ClampMin(x, _)
            | Op::L2Norm(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Mask(x, _)
            | Op::Reshape(x)
            | Op::Expand(x)
            | Op::StraightThrough(x) => vec![*x],
            Op::Softmax { x, .. } | Op::IndexSelect { x, .. } | Op::Permute { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of nodes. Build with the op methods, then call [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {}",
            op.name()
        );
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Whether `ancestor` is reachable from `v` through op inputs.
    pub fn depends_on(&self, v: Var, ancestor: Var) -> bool {
        if ancestor.0 > v.0 {
            return false;
        }
        let mut seen = vec![false; v.0 + 1];
        let mut stack = vec![v];
        while let Some(n) = stack.pop() {
            if n == ancestor {
                return true;
            }
            if n.0 < ancestor.0 || seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            stack.extend(self.nodes[n.0].op.parents());
        }
        false
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|x| f(s, x))
        } else {
            return Err(mismatch(name, ta, tb));
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            ta.data(),
            View::row_major(m, k),
            tb.data(),
            View::row_major(k, n),
            0.0,
            &mut out,
            View::row_major(m, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// 2-D convolution of a `(C_in, H, W)` input with a
    /// `(C_out, C_in, KH, KW)` kernel and optional `(C_out)` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (tx, tw) = (self.value(input), self.value(weight));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(mismatch("conv2d", tx, tw));
        }
        if xs[1] + 2 * padding.0 < ws[2] || xs[2] + 2 * padding.1 < ws[3] {
            return Err(mismatch("conv2d", tx, tw));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [ws[0]] {
                return Err(mismatch("conv2d bias", tw, tb));
            }
        }
        let geo = ConvGeometry {
            in_channels: xs[0],
            height: xs[1],
            width: xs[2],
            out_channels: ws[0],
            kernel: (ws[2], ws[3]),
            stride,
            padding,
        };
        let value = kernels::conv2d_forward(
            &geo,
            tx.data(),
            tw.data(),
            bias.map(|b| self.value(b).data()),
        );
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| -v);
        self.push(value, Op::Neg(x))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / v);
        self.push(value, Op::Recip(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let value = self.value(x).map(|v| v.max(min));
        self.push(value, Op::ClampMin(x, min))
    }

    /// Euclidean norm over all elements, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).norm());
        self.push(value, Op::L2Norm(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first,
                right: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(mismatch("mask", t, &mask));
        }
        let value = t.zip_map(&mask, |a, m| a * m);
        Ok(self.push(value, Op::Mask(x, mask)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: t.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (d[idx(k)] - max).exp();
                    d[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    d[idx(k)] /= z;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// Rows of a 2-D `table` selected by `index`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(mismatch("gather_rows", t, t));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::SymbolOutOfRange {
                id: bad,
                num_symbols: rows,
            });
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
        ))
    }

    /// Entries along `axis` picked by `index` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || index.iter().any(|&i| i >= t.shape()[axis]) {
            return Err(Error::ShapeMismatch {
                op: "index_select",
                left: t.shape().to_vec(),
                right: vec![axis, index.iter().copied().max().unwrap_or(0)],
            });
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &k in index {
                let start = (o * n + k) * inner;
                data.extend_from_slice(&t.data()[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = index.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape().len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != rank || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::ShapeMismatch {
                op: "permute",
                left: t.shape().to_vec(),
                right: perm.to_vec(),
            });
        }
        let value = permute_tensor(t, perm);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !t.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "expand",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::full(shape, t.item());
        Ok(self.push(value, Op::Expand(x)))
    }

    /// Mean over columns of `-log softmax(logits[:, t])[targets[t]]` for
    /// `(classes, columns)` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[1] != targets.len() || targets.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let (classes, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&k| k >= classes) {
            return Err(Error::SymbolOutOfRange {
                id: bad,
                num_symbols: classes,
            });
        }
        let d = t.data();
        let mut total = 0.0;
        for (c, &target) in targets.iter().enumerate() {
            let max = (0..classes)
                .map(|k| d[k * cols + c])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..classes)
                    .map(|k| (d[k * cols + c] - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - d[target * cols + c];
        }
        let value = Tensor::scalar(total / cols as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Forward value `transform(x)`, identity backward.
    pub fn straight_through(
        &mut self,
        x: Var,
        transform: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let before = self.value(x);
        let value = transform(before)?;
        if value.shape() != before.shape() {
            return Err(Error::StraightThroughShape {
                before: before.shape().to_vec(),
                after: value.shape().to_vec(),
            });
        }
        Ok(self.push(value, Op::StraightThrough(x)))
    }

    /// Node with a precomputed value and an externally supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Reverse sweep from a scalar root; gradients accumulate additively into
    /// every node that requires them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(root_value.shape(), 1.0);
        accumulate(&mut self.nodes[root.0].grad, seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (parent, g) in contributions {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut self.nodes[parent.0].grad, g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of `grad` flowing back to a broadcast operand of `shape`.
    fn unbroadcast(target: &Tensor, grad: Tensor) -> Tensor {
        if target.shape() == grad.shape() {
            grad
        } else {
            Tensor::full(target.shape(), grad.sum())
        }
    }

    fn local_grads(&self, i: usize, grad: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    res.push((*a, Self::unbroadcast(val(*a), grad.clone())));
                }
                if self.needs(*b) {
                    res.push((*b, Self::unbroadcast(val(*b), grad.map(|g| sign * g))));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let times = |other: &Tensor| -> Tensor {
                    if other.shape() == grad.shape() {
                        grad.zip_map(other, |g, o| g * o)
                    } else {
                        let s = other.item();
                        grad.map(|g| g * s)
                    }
                };
                if self.needs(*a) {
                    res.push((*a, Self::unbroadcast(ta, times(tb))));
                }
                if self.needs(*b) {
                    res.push((*b, Self::unbroadcast(tb, times(ta))));
                }
            }
            Op::Scale(x, k) => res.push((*x, grad.map(|g| g * k))),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                let g = grad.clone().reshaped(val(*x).shape().to_vec()).expect("same size");
                res.push((*x, g));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(
                        grad.data(),
                        View::row_major(m, n),
                        tb.data(),
                        View::row_major(k, n).t(),
                        0.0,
                        &mut d,
                        View::row_major(m, k),
                    );
                    res.push((*a, Tensor::new(vec![m, k], d).expect("shape")));
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(
                        ta.data(),
                        View::row_major(m, k).t(),
                        grad.data(),
                        View::row_major(m, n),
                        0.0,
                        &mut d,
                        View::row_major(k, n),
                    );
                    res.push((*b, Tensor::new(vec![k, n], d).expect("shape")));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            } => {
                let need_bias = bias.is_some_and(|b| self.needs(b));
                let g = kernels::conv2d_backward(
                    geo,
                    val(*input).data(),
                    val(*weight).data(),
                    grad.data(),
                    (self.needs(*input), self.needs(*weight), need_bias),
                );
                if let Some(d) = g.input {
                    res.push((*input, d));
                }
                if let Some(d) = g.weight {
                    res.push((*weight, d));
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    res.push((*b, d));
                }
            }
            Op::Relu(x) => res.push((*x, grad.zip_map(val(*x), |g, v| if v > 0.0 { g } else { 0.0 }))),
            Op::Sigmoid(x) => res.push((*x, grad.zip_map(out, |g, y| g * y * (1.0 - y)))),
            Op::Tanh(x) => res.push((*x, grad.zip_map(out, |g, y| g * (1.0 - y * y)))),
            Op::Abs(x) => res.push((
                *x,
                grad.zip_map(val(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            )),
            Op::Neg(x) => res.push((*x, grad.map(|g| -g))),
            Op::Log(x) => res.push((*x, grad.zip_map(val(*x), |g, v| g / v))),
            Op::Recip(x) => res.push((*x, grad.zip_map(out, |g, y| -g * y * y))),
            Op::ClampMin(x, m) => {
                let m = *m;
                res.push((*x, grad.zip_map(val(*x), |g, v| if v > m { g } else { 0.0 })))
            }
            Op::L2Norm(x) => {
                let n = out.item();
                let g = grad.item();
                let d = if n > 0.0 {
                    val(*x).map(|v| g * v / n)
                } else {
                    Tensor::zeros(val(*x).shape())
                };
                res.push((*x, d));
            }
            Op::Sum(x) => res.push((*x, Tensor::full(val(*x).shape(), grad.item()))),
            Op::Mean(x) => {
                let t = val(*x);
                res.push((*x, Tensor::full(t.shape(), grad.item() / t.len() as f64)))
            }
            Op::Expand(x) => res.push((*x, Tensor::full(val(*x).shape(), grad.sum()))),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let n = t.shape()[*axis];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&grad.data()[start..start + n * inner]);
                        }
                        res.push((p, Tensor::new(t.shape().to_vec(), d).expect("shape")));
                    }
                    offset += n;
                }
            }
            Op::Mask(x, m) => res.push((*x, grad.zip_map(m, |g, m| g * m))),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let g = grad.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                res.push((*x, Tensor::new(out.shape().to_vec(), d).expect("shape")));
            }
            Op::GatherRows { table, index } => {
                let t = val(*table);
                let cols = t.shape()[1];
                let mut d = Tensor::zeros(t.shape());
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * cols..(i + 1) * cols];
                    dst.iter_mut()
                        .zip(&grad.data()[r * cols..(r + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                res.push((*table, d));
            }
            Op::IndexSelect { x, axis, index } => {
                let t = val(*x);
                let (outer, n, inner) = split_axis(t.shape(), *axis);
                let mut d = Tensor::zeros(t.shape());
                let m = index.len();
                for o in 0..outer {
                    for (j, &k) in index.iter().enumerate() {
                        let src = (o * m + j) * inner;
                        let dst = (o * n + k) * inner;
                        for e in 0..inner {
                            d.data_mut()[dst + e] += grad.data()[src + e];
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                res.push((*x, permute_tensor(grad, &inverse)));
            }
            Op::CrossEntropy { logits, targets } => {
                let t = val(*logits);
                let (classes, cols) = (t.shape()[0], t.shape()[1]);
                let scale = grad.item() / cols as f64;
                let d = t.data();
                let mut out = vec![0.0; d.len()];
                for (c, &target) in targets.iter().enumerate() {
                    let max = (0..classes)
                        .map(|k| d[k * cols + c])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..classes).map(|k| (d[k * cols + c] - max).exp()).sum();
                    for k in 0..classes {
                        let p = (d[k * cols + c] - max).exp() / z;
                        let onehot = if k == target { 1.0 } else { 0.0 };
                        out[k * cols + c] = scale * (p - onehot);
                    }
                }
                res.push((*logits, Tensor::new(t.shape().to_vec(), out).expect("shape")));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&ins, out, grad);
                for (&v, g) in inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        debug_assert_eq!(g.shape(), val(v).shape(), "{} gradient shape", op.name());
                        res.push((v, g));
                    }
                }
            }
        }
        res
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut data = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.len() {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        data.push(t.data()[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(new_shape, data).expect("permute shape")
}

#[cfg(test)]
mod tests;
