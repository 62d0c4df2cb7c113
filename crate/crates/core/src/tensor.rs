//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation returns a new [`Tensor`] that remembers its inputs, so a
//! scalar result can be differentiated with [`Tensor::backward`]. Only leaf
//! tensors created with [`Tensor::param`] receive gradient buffers; interior
//! gradients live in a scratch map for the duration of one backward pass.
//!
//! Most operations work on 2-D row-major matrices. The convolution kernel is
//! the one 3-D value (`[window, in_channels, out_channels]`).
//!
//! ```
//! use fewshot_acd::tensor::Tensor;
//!
//! let x = Tensor::param(vec![1, 1], vec![3.0]).unwrap();
//! let loss = x.square().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0]);
//! ```

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Operation tag of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    Matmul,
    Transpose,
    Square,
    Tanh,
    Sqrt,
    Softplus,
    LnGamma,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    ConcatRows,
    Softmax,
    Conv1dSame,
    Gather,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRow(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Square(Tensor),
    Tanh(Tensor),
    Sqrt(Tensor),
    Softplus(Tensor),
    LnGamma(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumAxis(Tensor, usize),
    MeanAxis(Tensor, usize),
    ConcatRows(Vec<Tensor>),
    Softmax { input: Tensor, temperature: f64 },
    Conv1dSame { input: Tensor, kernel: Tensor, bias: Tensor },
    Gather { table: Tensor, rows: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Square(..) => OpKind::Square,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Softplus(..) => OpKind::Softplus,
            Op::LnGamma(..) => OpKind::LnGamma,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Conv1dSame { .. } => OpKind::Conv1dSame,
            Op::Gather { .. } => OpKind::Gather,
        }
    }

    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::Matmul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::LnGamma(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _) => vec![a],
            Op::ConcatRows(parts) => parts.iter().collect(),
            Op::Softmax { input, .. } => vec![input],
            Op::Conv1dSame {
                input,
                kernel,
                bias,
            } => vec![input, kernel, bias],
            Op::Gather { table, .. } => vec![table],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// A reference-counted node of the computation graph.
///
/// Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.kind())
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

impl Tensor {
    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != len {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {len}"),
            ));
        }
        Ok(())
    }

    /// A constant tensor that never receives a gradient.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Self::leaf(shape, data, false))
    }

    /// A trainable leaf tensor.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Self::leaf(shape, data, true))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::leaf(shape, vec![0.0; len], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1, 1], vec![value], false)
    }

    /// A 1×n constant row.
    pub fn row(values: &[f64]) -> Self {
        Self::leaf(vec![1, values.len()], values.to_vec(), false)
    }

    /// Builds a constant matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: Op::Leaf,
        }))
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.0.requires_grad);
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_kind(&self) -> OpKind {
        self.0.op.kind()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.0.shape
            ))),
        }
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    fn is_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.0.shape != other.0.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.0.shape, other.0.shape),
            ));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.0.data.iter().map(|&x| f(x)).collect();
        Self::from_op(self.0.shape.clone(), data, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = zip_with(&self.0.data, &other.0.data, |a, b| a + b);
        Ok(Self::from_op(
            self.0.shape.clone(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = zip_with(&self.0.data, &other.0.data, |a, b| a - b);
        Ok(Self::from_op(
            self.0.shape.clone(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = zip_with(&self.0.data, &other.0.data, |a, b| a * b);
        Ok(Self::from_op(
            self.0.shape.clone(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor, Op::Scale(self.clone(), factor))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.is_matrix("add_row")?;
        if row.numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("row of {} values for {c} columns", row.numel()),
            ));
        }
        let mut data = self.0.data.clone();
        for i in 0..r {
            for (x, b) in data[i * c..(i + 1) * c].iter_mut().zip(&row.0.data) {
                *x += b;
            }
        }
        Ok(Self::from_op(
            vec![r, c],
            data,
            Op::AddRow(self.clone(), row.clone()),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.is_matrix("matmul")?;
        let (k2, c) = other.is_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{r}x{k} times {k2}x{c}")));
        }
        let data = matmul_raw(&self.0.data, &other.0.data, r, k, c);
        Ok(Self::from_op(
            vec![r, c],
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.is_matrix("transpose")?;
        Ok(Self::from_op(
            vec![c, r],
            transpose_raw(&self.0.data, r, c),
            Op::Transpose(self.clone()),
        ))
    }

    pub fn square(&self) -> Tensor {
        self.map(|x| x * x, Op::Square(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh, Op::Tanh(self.clone()))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(x) = self.0.data.iter().find(|x| **x < 0.0 || !x.is_finite()) {
            return Err(Error::Numeric(format!("sqrt of {x}")));
        }
        Ok(self.map(f64::sqrt, Op::Sqrt(self.clone())))
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.map(softplus, Op::Softplus(self.clone()))
    }

    /// Elementwise log-gamma; inputs must be positive.
    pub fn ln_gamma(&self) -> Result<Tensor> {
        if let Some(x) = self.0.data.iter().find(|x| **x <= 0.0 || !x.is_finite()) {
            return Err(Error::Domain(format!("ln_gamma of {x}")));
        }
        Ok(self.map(ln_gamma, Op::LnGamma(self.clone())))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.0.data.iter().sum();
        Self::from_op(vec![1, 1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.0.data.iter().sum();
        Self::from_op(vec![1, 1], vec![s / n], Op::Mean(self.clone()))
    }

    /// Sum along an axis of a matrix: axis 0 gives a 1×c row, axis 1 an r×1 column.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (shape, data) = self.reduce_axis(axis, "sum_axis")?;
        Ok(Self::from_op(shape, data, Op::SumAxis(self.clone(), axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (shape, mut data) = self.reduce_axis(axis, "mean_axis")?;
        let n = self.0.shape[axis] as f64;
        data.iter_mut().for_each(|x| *x /= n);
        Ok(Self::from_op(shape, data, Op::MeanAxis(self.clone(), axis)))
    }

    fn reduce_axis(&self, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (r, c) = self.is_matrix(op)?;
        let d = &self.0.data;
        match axis {
            0 => {
                if r == 0 {
                    return Err(Error::shape(op, "no rows to reduce"));
                }
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                Ok((vec![1, c], out))
            }
            1 => {
                let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
                Ok((vec![r, 1], out))
            }
            _ => Err(Error::shape(op, format!("axis {axis} out of range"))),
        }
    }

    /// Row-wise softmax of `self / temperature` with max subtraction.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        let (r, c) = self.is_matrix("softmax")?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Numeric(format!("temperature {temperature}")));
        }
        if c == 0 {
            return Err(Error::shape("softmax", "empty row"));
        }
        if let Some(x) = self.0.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite softmax score {x}")));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&self.0.data[i * c..(i + 1) * c], temperature, &mut data[i * c..(i + 1) * c]);
        }
        Ok(Self::from_op(
            vec![r, c],
            data,
            Op::Softmax {
                input: self.clone(),
                temperature,
            },
        ))
    }

    /// Gathers rows of an embedding table.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (v, c) = self.is_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= v {
                return Err(Error::Lookup(format!("row {i} of a table with {v} rows")));
            }
            data.extend_from_slice(&self.0.data[i * c..(i + 1) * c]);
        }
        Ok(Self::from_op(
            vec![rows.len(), c],
            data,
            Op::Gather {
                table: self.clone(),
                rows: rows.to_vec(),
            },
        ))
    }

    /// Backpropagates from a one-element tensor.
    ///
    /// Gradients accumulate into the `grad` buffers of trainable leaves, so a
    /// second call without [`Tensor::zero_grad`] adds to the first.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any trainable tensor".into(),
            ));
        }
        let order = self.topo_order();
        let mut grads = Grads::default();
        grads.0.insert(self.ptr(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.0.remove(&node.ptr()) else {
                continue;
            };
            if let Op::Leaf = node.0.op {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            } else {
                node.propagate(&g, &mut grads);
            }
        }
        Ok(())
    }

    /// Nodes that require grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.0.requires_grad || !seen.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.0.op.inputs() {
                if input.0.requires_grad && !seen.contains(&input.ptr()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], grads: &mut Grads) {
        let out = &self.0.data;
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                grads.add(a, g);
                grads.add(b, g);
            }
            Op::Sub(a, b) => {
                grads.add(a, g);
                if let Some(s) = grads.slot(b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = grads.slot(a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&b.0.data) {
                        *s += g * y;
                    }
                }
                if let Some(s) = grads.slot(b) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&a.0.data) {
                        *s += g * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = grads.slot(a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f);
                }
            }
            Op::AddRow(a, row) => {
                grads.add(a, g);
                if let Some(s) = grads.slot(row) {
                    let c = s.len();
                    for chunk in g.chunks(c) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (r, k) = (a.0.shape[0], a.0.shape[1]);
                let c = b.0.shape[1];
                if a.0.requires_grad {
                    // dA = G Bᵀ
                    let bt = transpose_raw(&b.0.data, k, c);
                    let da = matmul_raw(g, &bt, r, c, k);
                    grads.add(a, &da);
                }
                if b.0.requires_grad {
                    // dB = Aᵀ G
                    let at = transpose_raw(&a.0.data, r, k);
                    let db = matmul_raw(&at, g, k, r, c);
                    grads.add(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                grads.add(a, &transpose_raw(g, c, r));
            }
            Op::Square(a) => {
                if let Some(s) = grads.slot(a) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&a.0.data) {
                        *s += 2.0 * x * g;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = grads.slot(a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sqrt(a) => {
                // subgradient 0 at the origin
                if let Some(s) = grads.slot(a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *s += g * 0.5 / y;
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                if let Some(s) = grads.slot(a) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&a.0.data) {
                        *s += g * sigmoid(*x);
                    }
                }
            }
            Op::LnGamma(a) => {
                if let Some(s) = grads.slot(a) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&a.0.data) {
                        *s += g * digamma(*x);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = grads.slot(a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = a.numel() as f64;
                if let Some(s) = grads.slot(a) {
                    s.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (r, c) = (a.0.shape[0], a.0.shape[1]);
                let div = match self.0.op {
                    Op::MeanAxis(..) => a.0.shape[*axis] as f64,
                    _ => 1.0,
                };
                if let Some(s) = grads.slot(a) {
                    for i in 0..r {
                        for j in 0..c {
                            let gi = if *axis == 0 { g[j] } else { g[i] };
                            s[i * c + j] += gi / div;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    grads.add(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Softmax { input, temperature } => {
                let c = self.0.shape[1];
                if let Some(s) = grads.slot(input) {
                    for ((s, g), y) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                            *s += y * (g - dot) / temperature;
                        }
                    }
                }
            }
            Op::Conv1dSame {
                input,
                kernel,
                bias,
            } => {
                let (n, d_in) = (input.0.shape[0], input.0.shape[1]);
                let (m, d_out) = (kernel.0.shape[0], kernel.0.shape[2]);
                let pad = (m - 1) / 2;
                if let Some(s) = grads.slot(bias) {
                    for row in g.chunks(d_out) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
                if let Some(s) = grads.slot(input) {
                    let w = &kernel.0.data;
                    for i in 0..n {
                        let gi = &g[i * d_out..(i + 1) * d_out];
                        for k in 0..m {
                            let Some(src) = (i + k).checked_sub(pad).filter(|&p| p < n) else {
                                continue;
                            };
                            for ch in 0..d_in {
                                let wrow = &w[(k * d_in + ch) * d_out..(k * d_in + ch + 1) * d_out];
                                s[src * d_in + ch] +=
                                    wrow.iter().zip(gi).map(|(w, g)| w * g).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(s) = grads.slot(kernel) {
                    let x = &input.0.data;
                    for i in 0..n {
                        let gi = &g[i * d_out..(i + 1) * d_out];
                        for k in 0..m {
                            let Some(src) = (i + k).checked_sub(pad).filter(|&p| p < n) else {
                                continue;
                            };
                            for ch in 0..d_in {
                                let xv = x[src * d_in + ch];
                                let srow =
                                    &mut s[(k * d_in + ch) * d_out..(k * d_in + ch + 1) * d_out];
                                srow.iter_mut().zip(gi).for_each(|(s, g)| *s += xv * g);
                            }
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                let c = table.0.shape[1];
                if let Some(s) = grads.slot(table) {
                    for (r, gi) in rows.iter().zip(g.chunks(c)) {
                        s[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
        }
    }
}

#[derive(Default)]
struct Grads(HashMap<*const Node, Vec<f64>>);

impl Grads {
    fn slot(&mut self, t: &Tensor) -> Option<&mut Vec<f64>> {
        if !t.0.requires_grad {
            return None;
        }
        Some(
            self.0
                .entry(t.ptr())
                .or_insert_with(|| vec![0.0; t.numel()]),
        )
    }

    fn add(&mut self, t: &Tensor, g: &[f64]) {
        if let Some(s) = self.slot(t) {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
        }
    }
}

/// Stacks matrices with equal column counts on top of each other.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
    let c = first.is_matrix("concat_rows")?.1;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = p.is_matrix("concat_rows")?;
        if pc != c {
            return Err(Error::shape("concat_rows", format!("{pc} columns vs {c}")));
        }
        rows += r;
        data.extend_from_slice(&p.0.data);
    }
    Ok(Tensor::from_op(
        vec![rows, c],
        data,
        Op::ConcatRows(parts.to_vec()),
    ))
}

/// Same-length 1-D convolution with zero padding of `(m - 1) / 2` on each side.
///
/// `input` is n×d_in, `kernel` is `[m, d_in, d_out]` with odd `m`, `bias` has
/// d_out entries. Output row i depends on input rows `i - (m-1)/2 ..= i + (m-1)/2`.
pub fn conv1d_same(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in) = input.is_matrix("conv1d_same")?;
    let [m, k_in, d_out] = kernel.shape() else {
        return Err(Error::shape(
            "conv1d_same",
            format!("kernel must be 3-D, got {:?}", kernel.shape()),
        ));
    };
    let (m, k_in, d_out) = (*m, *k_in, *d_out);
    if m % 2 == 0 {
        return Err(Error::shape("conv1d_same", format!("window {m} is even")));
    }
    if k_in != d_in {
        return Err(Error::shape(
            "conv1d_same",
            format!("kernel expects {k_in} input channels, input has {d_in}"),
        ));
    }
    if bias.numel() != d_out {
        return Err(Error::shape(
            "conv1d_same",
            format!("bias has {} entries for {d_out} outputs", bias.numel()),
        ));
    }
    let pad = (m - 1) / 2;
    let x = input.data();
    let w = kernel.data();
    let mut out = Vec::with_capacity(n * d_out);
    for i in 0..n {
        let mut row = bias.data().to_vec();
        for k in 0..m {
            let Some(src) = (i + k).checked_sub(pad).filter(|&p| p < n) else {
                continue;
            };
            for ch in 0..d_in {
                let xv = x[src * d_in + ch];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[(k * d_in + ch) * d_out..(k * d_in + ch + 1) * d_out];
                row.iter_mut().zip(wrow).for_each(|(o, w)| *o += xv * w);
            }
        }
        out.extend(row);
    }
    Ok(Tensor::from_op(
        vec![n, d_out],
        out,
        Op::Conv1dSame {
            input: input.clone(),
            kernel: kernel.clone(),
            bias: bias.clone(),
        },
    ))
}

/// Softmax of a plain vector at a temperature, without graph tracking.
pub fn softmax_t(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::shape("softmax_t", "empty score vector"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Numeric(format!("temperature {temperature}")));
    }
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite softmax score {x}")));
    }
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, temperature, &mut out);
    Ok(out)
}

fn softmax_into(scores: &[f64], temperature: f64, out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = ((s - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
