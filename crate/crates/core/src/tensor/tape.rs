use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies the primitive that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Log,
    SoftmaxRows,
    LogSoftmaxRows,
    CausalSoftmaxRows,
    Gather,
    IndexRows,
    Sum,
    Mean,
    Max,
    Relu,
    Tanh,
    Scale,
    Concat,
    Transpose,
    SliceCols,
    AddRow,
    MulRow,
    LayerNormRows,
    Clamp,
    Minimum,
    Maximum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    Gather(Var, Vec<usize>),
    IndexRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Relu(Var),
    Tanh(Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Transpose(Var),
    SliceCols(Var, usize),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNormRows(Var, Vec<f64>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::CausalSoftmaxRows(_) => OpKind::CausalSoftmaxRows,
            Op::Gather(..) => OpKind::Gather,
            Op::IndexRows(..) => OpKind::IndexRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Max(..) => OpKind::Max,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::Transpose(_) => OpKind::Transpose,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::LayerNormRows(..) => OpKind::LayerNormRows,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Minimum(..) => OpKind::Minimum,
            Op::Maximum(..) => OpKind::Maximum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::CausalSoftmaxRows(a)
            | Op::Gather(a, _)
            | Op::IndexRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Max(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::LayerNormRows(a, _)
            | Op::Clamp(a, _, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of the node consuming it.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target`'s grad buffer. Leaves that
    /// the root does not depend on contribute zeros.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.wrt(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.numel()]),
        }
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Every recorded node, oldest first.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Ids of the inputs consumed by `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf holding a copy of `t`'s values.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.detached(), Op::Leaf, true)
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.detached(), Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("primitive produced a consistent shape");
        self.push_raw(value, op, requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise binary ops with scalar broadcast ----

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_with(&self, a: Var, b: Var, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.data(a), self.data(b));
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        (0..n).map(|i| f(at(da, i), at(db, i))).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let data = self.zip_with(a, b, shape.iter().product(), |x, y| x + y);
        Ok(self.push(&shape, data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let data = self.zip_with(a, b, shape.iter().product(), |x, y| x - y);
        Ok(self.push(&shape, data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let data = self.zip_with(a, b, shape.iter().product(), |x, y| x * y);
        Ok(self.push(&shape, data, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self.zip_with(a, b, self.value(a).numel(), f64::min);
        Ok(self.push(&shape, data, Op::Minimum(a, b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self.zip_with(a, b, self.value(a).numel(), f64::max);
        Ok(self.push(&shape, data, Op::Maximum(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(&[m, n], data, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(&[c, r], out, Op::Transpose(a)))
    }

    /// Columns `start..start + len` of a row-major matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let cols = *s.last().unwrap();
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", &s, &[start, len]));
        }
        let rows = self.value(a).rows();
        let d = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(&shape, out, Op::SliceCols(a, start)))
    }

    /// Concatenation along the last axis; all parts must agree on the leading axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(&shape, out, Op::Concat(parts.to_vec())))
    }

    /// `x[r, :] + b` for every row r.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.row_operand_check("add_row", x, b)?;
        let shape = self.shape(x).to_vec();
        let bd = self.data(b);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        Ok(self.push(&shape, out, Op::AddRow(x, b)))
    }

    /// `x[r, :] * g` elementwise for every row r.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let cols = self.row_operand_check("mul_row", x, g)?;
        let shape = self.shape(x).to_vec();
        let gd = self.data(g);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[i % cols])
            .collect();
        Ok(self.push(&shape, out, Op::MulRow(x, g)))
    }

    fn row_operand_check(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let cols = self.value(x).cols();
        if self.shape(b) != [cols] {
            return Err(Error::shape(op, self.shape(x), self.shape(b)));
        }
        Ok(cols)
    }

    // ---- unary elementwise ----

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(&shape, data, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        Ok(self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi)))
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::softmax_into(t.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = t.shape().to_vec();
        self.push(&shape, out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let lse = kernels::log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let shape = t.shape().to_vec();
        self.push(&shape, out, Op::LogSoftmaxRows(a))
    }

    /// Softmax of a square score matrix where row i only attends to columns `<= i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("causal_softmax_rows", s, &[]));
        }
        let n = s[0];
        let d = self.data(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            kernels::softmax_into(&d[i * n..i * n + i + 1], &mut out[i * n..i * n + i + 1]);
        }
        Ok(self.push(&[n, n], out, Op::CausalSoftmaxRows(a)))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            inv_std.push(kernels::layer_norm_into(
                t.row(r),
                LN_EPS,
                &mut out[r * cols..(r + 1) * cols],
            ));
        }
        let shape = t.shape().to_vec();
        self.push(&shape, out, Op::LayerNormRows(a, inv_std))
    }

    // ---- indexing ----

    /// Picks `x[r, index[r]]` for every row r.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if index.len() != rows || index.iter().any(|&i| i >= cols) {
            return Err(Error::shape("gather", t.shape(), &[index.len()]));
        }
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &c)| t.data()[r * cols + c])
            .collect();
        Ok(self.push(&[rows], out, Op::Gather(x, index.to_vec())))
    }

    /// Stacks rows `table[ids[i], :]`; used for embeddings and row selection.
    pub fn index_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        if ids.is_empty() || ids.iter().any(|&i| i >= rows) {
            return Err(Error::shape("index_rows", t.shape(), &[ids.len()]));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(&[ids.len(), cols], out, Op::IndexRows(table, ids.to_vec())))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(&[1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(&[1], vec![m], Op::Mean(a))
    }

    /// Global maximum; the gradient flows to the first maximal element.
    pub fn max(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        let v = d[best];
        self.push(&[1], vec![v], Op::Max(a, best))
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |gi, _| gi);
                self.acc_broadcast(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |gi, _| gi);
                self.acc_broadcast(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                self.acc_broadcast(grads, *a, g, |gi, i| gi * pick(db, i));
                self.acc_broadcast(grads, *b, g, |gi, i| gi * pick(da, i));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (da, db) = (self.data(*a), self.data(*b));
                let to_a = |i: usize| if is_min { da[i] <= db[i] } else { da[i] >= db[i] };
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if to_a(i) {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        if !to_a(i) {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bd = self.data(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_bt_acc(g, bd, m, n, k, ga);
                }
                let ad = self.data(*a);
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(ad, g, m, k, n, gb);
                }
            }
            Op::Exp(a) => self.acc_unary(grads, *a, |i| g[i] * y[i]),
            Op::Log(a) => {
                let x = self.data(*a);
                self.acc_unary(grads, *a, |i| g[i] / x[i])
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc_unary(grads, *a, |i| if x[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Tanh(a) => self.acc_unary(grads, *a, |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Scale(a, c) => self.acc_unary(grads, *a, |i| g[i] * c),
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                self.acc_unary(grads, *a, |i| {
                    if x[i] >= *lo && x[i] <= *hi {
                        g[i]
                    } else {
                        0.0
                    }
                })
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let inner = kernels::dot(yr, gr);
                        for (j, o) in ga[span].iter_mut().enumerate() {
                            *o += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let total: f64 = gr.iter().sum();
                        for (j, o) in ga[span].iter_mut().enumerate() {
                            *o += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNormRows(a, inv_std) => {
                let cols = node.value.cols();
                let n = cols as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, s) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = kernels::dot(gr, yr) / n;
                        for (j, o) in ga[span].iter_mut().enumerate() {
                            *o += s * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Gather(x, index) => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &c) in index.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
            }
            Op::IndexRows(t, ids) => {
                let cols = self.value(*t).cols();
                if let Some(gt) = self.slot(grads, *t) {
                    for (i, &row) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        for (o, v) in gt[row * cols..(row + 1) * cols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sum(a) => self.acc_unary(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc_unary(grads, *a, |_| g[0] / n)
            }
            Op::Max(a, at) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga[*at] += g[0];
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.value(*a).cols();
                let len = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..node.value.rows() {
                        let dst = &mut ga[r * src_cols + start..r * src_cols + start + len];
                        for (o, v) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (o, v) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::AddRow(x, b) => {
                let cols = node.value.cols();
                self.acc_unary(grads, *x, |i| g[i]);
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                }
            }
            Op::MulRow(x, w) => {
                let cols = node.value.cols();
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.acc_unary(grads, *x, |i| g[i] * wd[i % cols]);
                if let Some(gw) = self.slot(grads, *w) {
                    for (i, v) in g.iter().enumerate() {
                        gw[i % cols] += v * xd[i];
                    }
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc_unary(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(gv) = self.slot(grads, v) {
            for (i, o) in gv.iter_mut().enumerate() {
                *o += f(i);
            }
        }
    }

    /// Accumulates `f(g[i], i)` into `v`, summing over the broadcast axis when
    /// `v` is a scalar operand of a larger output.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        if let Some(gv) = self.slot(grads, v) {
            if gv.len() == g.len() {
                for (i, o) in gv.iter_mut().enumerate() {
                    *o += f(g[i], i);
                }
            } else {
                gv[0] += g.iter().enumerate().map(|(i, &gi)| f(gi, i)).sum::<f64>();
            }
        }
    }
}
