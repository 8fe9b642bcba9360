use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, Unary};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `m x n` plus a broadcast `1 x n` row.
    AddRow(usize, usize),
    /// `m x n` times a broadcast `m x 1` column.
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Sum(usize),
    MeanRows(usize),
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::Softmax(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::MeanRows(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => u.name(),
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Node ids are assigned in creation order, which is a topological order, so
/// backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
    check_finite: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every op checks that finite inputs produced a finite output.
    pub fn with_finite_checks() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        let parents = op.parents();
        if self.check_finite
            && !value.is_finite()
            && parents.iter().all(|&p| nodes[p].value.is_finite())
        {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_rows of nothing".into()))?
            .value();
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.rank() != 2 || v.cols() != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_cols of nothing".into()))?
            .value();
        let rows = first.rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rank() != 2 || v.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse sweep from a scalar `loss`. Gradients stay readable through
    /// [`Var::grad`] until [`Graph::reset_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if loss.value().numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value().shape()
            )));
        }
        if self.backward_done.get() {
            return Err(TensorError::Usage(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(Tensor::full(loss.value().shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, &node.op, &node.value, &g, &mut pending)?;
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }
}

fn accumulate(nodes: &[Node], pending: &mut [Option<Tensor>], id: usize, contribution: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut pending[id] {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate(
    nodes: &[Node],
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    pending: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |id: usize| &*nodes[id].value;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = kernels::matmul(g, &val(*b).transpose()?)?;
                accumulate(nodes, pending, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = kernels::matmul(&val(*a).transpose()?, g)?;
                accumulate(nodes, pending, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, pending, *a, g.clone());
            accumulate(nodes, pending, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, pending, *a, g.clone());
            accumulate(nodes, pending, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, pending, *a, zip_with(g, bv, |x, y| x * y));
            accumulate(nodes, pending, *b, zip_with(g, av, |x, y| x * y));
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, pending, *a, g.clone());
            let n = g.cols();
            let mut gb = vec![0.0; n];
            for r in 0..g.rows() {
                for (s, v) in gb.iter_mut().zip(g.row_slice(r)) {
                    *s += v;
                }
            }
            accumulate(nodes, pending, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
        }
        Op::MulCol(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            let n = g.cols();
            let mut ga = vec![0.0; g.numel()];
            let mut gc = vec![0.0; g.rows()];
            for r in 0..g.rows() {
                let cr = cv.data()[r];
                for j in 0..n {
                    let gij = g.data()[r * n + j];
                    ga[r * n + j] = gij * cr;
                    gc[r] += gij * av.data()[r * n + j];
                }
            }
            accumulate(nodes, pending, *a, Tensor::new(g.shape().to_vec(), ga)?);
            accumulate(nodes, pending, *c, Tensor::new(cv.shape().to_vec(), gc)?);
        }
        Op::Scale(a, s) => accumulate(nodes, pending, *a, g.map(|v| v * s)),
        Op::AddScalar(a) => accumulate(nodes, pending, *a, g.clone()),
        Op::Unary(a, u) => {
            let x = val(*a);
            let ga: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(out.data()))
                .map(|(gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                .collect();
            accumulate(nodes, pending, *a, Tensor::new(g.shape().to_vec(), ga)?);
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = kernels::axis_split(out.shape(), *axis)?;
            let (y, gd) = (out.data(), g.data());
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        ga[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            accumulate(nodes, pending, *a, Tensor::new(out.shape().to_vec(), ga)?);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let n = g.cols();
            let rows = g.numel() / n;
            let gv = val(*gain).data();
            let mut gx = vec![0.0; g.numel()];
            let mut ggain = vec![0.0; n];
            let mut gbias = vec![0.0; n];
            for r in 0..rows {
                let gr = &g.data()[r * n..(r + 1) * n];
                let xh = &normalized[r * n..(r + 1) * n];
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..n {
                    let d = gr[j] * gv[j];
                    sum_d += d;
                    sum_dx += d * xh[j];
                    ggain[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                }
                let scale = inv_std[r] / n as f64;
                for j in 0..n {
                    let d = gr[j] * gv[j];
                    gx[r * n + j] = scale * (n as f64 * d - sum_d - xh[j] * sum_dx);
                }
            }
            accumulate(nodes, pending, *x, Tensor::new(g.shape().to_vec(), gx)?);
            accumulate(nodes, pending, *gain, Tensor::new(val(*gain).shape().to_vec(), ggain)?);
            accumulate(nodes, pending, *bias, Tensor::new(val(*bias).shape().to_vec(), gbias)?);
        }
        Op::Transpose(a) => accumulate(nodes, pending, *a, g.transpose()?),
        Op::Reshape(a) => accumulate(nodes, pending, *a, g.reshape(val(*a).shape())?),
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            let cols = g.cols();
            for &p in parts {
                let rows = val(p).rows();
                let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                accumulate(nodes, pending, p, Tensor::matrix(rows, cols, slice)?);
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).cols();
                let mut slice = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    slice.extend_from_slice(&g.row_slice(r)[offset..offset + cols]);
                }
                accumulate(nodes, pending, p, Tensor::matrix(rows, cols, slice)?);
                offset += cols;
            }
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let cols = src.cols();
            let mut ga = vec![0.0; src.numel()];
            ga[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
            accumulate(nodes, pending, *a, Tensor::new(src.shape().to_vec(), ga)?);
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let (cols, width) = (src.cols(), g.cols());
            let mut ga = vec![0.0; src.numel()];
            for r in 0..src.rows() {
                ga[r * cols + start..r * cols + start + width].copy_from_slice(g.row_slice(r));
            }
            accumulate(nodes, pending, *a, Tensor::new(src.shape().to_vec(), ga)?);
        }
        Op::Sum(a) => {
            let ga = Tensor::full(val(*a).shape(), g.data()[0]);
            accumulate(nodes, pending, *a, ga);
        }
        Op::MeanRows(a) => {
            let src = val(*a);
            let m = src.rows() as f64;
            let cols = src.cols();
            let ga: Vec<f64> = (0..src.numel()).map(|i| g.data()[i % cols] / m).collect();
            accumulate(nodes, pending, *a, Tensor::new(src.shape().to_vec(), ga)?);
        }
        Op::CrossEntropy {
            logits,
            label,
            probs,
        } => {
            let s = g.data()[0];
            let ga: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(j, p)| s * (p - if j == *label { 1.0 } else { 0.0 }))
                .collect();
            accumulate(nodes, pending, *logits, Tensor::new(val(*logits).shape().to_vec(), ga)?);
        }
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient from the last [`Graph::backward`], if this node received one.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grads.borrow().get(self.id).cloned().flatten()
    }

    fn same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = kernels::matmul(&self.value(), &other.value())?;
        self.graph.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "add")?;
        self.graph.push(zip_with(&a, &b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "sub")?;
        self.graph.push(zip_with(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "mul")?;
        self.graph.push(zip_with(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    /// Adds a row vector (`1 x n` or `[n]`) to every row.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), row.value());
        let n = a.cols();
        if a.rank() != 2 || b.numel() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data();
        let data = a.data().iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data)?, Op::AddRow(self.id, row.id))
    }

    /// Scales row `i` by `col[i]` where `col` is `m x 1`.
    pub fn mul_col(&self, col: &Var<'g>) -> Result<Var<'g>> {
        let (a, c) = (self.value(), col.value());
        if a.rank() != 2 || c.numel() != a.rows() {
            return Err(TensorError::Shape {
                op: "mul_col",
                lhs: a.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let n = a.cols();
        let cd = c.data();
        let data = a.data().iter().enumerate().map(|(i, v)| v * cd[i / n]).collect();
        self.graph
            .push(Tensor::new(a.shape().to_vec(), data)?, Op::MulCol(self.id, col.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        self.graph.push(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'g>> {
        self.graph.push(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Var<'g>> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    pub fn unary(&self, op: Unary) -> Result<Var<'g>> {
        let value = kernels::unary(op, &self.value())?;
        self.graph.push(value, Op::Unary(self.id, op))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(Unary::Relu)
    }

    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary(Unary::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        self.unary(Unary::Log)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let value = kernels::softmax(&self.value(), axis)?;
        self.graph.push(value, Op::Softmax(self.id, axis))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let parts = kernels::layernorm_parts(&self.value(), &gain.value(), &bias.value(), eps)?;
        self.graph.push(
            parts.output,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized: parts.normalized,
                inv_std: parts.inv_std,
            },
        )
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let value = self.value().transpose()?;
        self.graph.push(value, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshape(shape)?;
        self.graph.push(value, Op::Reshape(self.id))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let src = self.value();
        if src.rank() != 2 || start >= end || end > src.rows() {
            return Err(TensorError::Usage(format!(
                "row slice {start}..{end} of shape {:?}",
                src.shape()
            )));
        }
        let cols = src.cols();
        let value = Tensor::matrix(end - start, cols, src.data()[start * cols..end * cols].to_vec())?;
        self.graph.push(value, Op::SliceRows(self.id, start))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let src = self.value();
        if src.rank() != 2 || start >= end || end > src.cols() {
            return Err(TensorError::Usage(format!(
                "column slice {start}..{end} of shape {:?}",
                src.shape()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row_slice(r)[start..end]);
        }
        let value = Tensor::matrix(src.rows(), end - start, data)?;
        self.graph.push(value, Op::SliceCols(self.id, start))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let total = self.value().data().iter().sum();
        self.graph.push(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean over the row axis: `m x n -> 1 x n`.
    pub fn mean_rows(&self) -> Result<Var<'g>> {
        let src = self.value();
        if src.rank() != 2 {
            return Err(TensorError::Usage("mean_rows needs a matrix".into()));
        }
        let (m, n) = (src.rows(), src.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(src.row_slice(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.graph.push(Tensor::matrix(1, n, out)?, Op::MeanRows(self.id))
    }

    /// `-log softmax(self)[label]` for a logit vector, via log-sum-exp.
    pub fn cross_entropy(&self, label: usize) -> Result<Var<'g>> {
        let logits = self.value();
        if label >= logits.numel() {
            return Err(TensorError::Usage(format!(
                "label {label} out of range for {} classes",
                logits.numel()
            )));
        }
        let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.data().iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        let probs = logits.data().iter().map(|v| (v - max).exp() / total).collect();
        let loss = lse - logits.data()[label];
        self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                label,
                probs,
            },
        )
    }
}
