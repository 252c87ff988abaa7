use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Floor applied to the argument of every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-15;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    SelectColumns(Var, Vec<usize>),
    ConcatColumns(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse. Gradients of leaves
/// accumulate across `backward` calls until [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.value(v).shape().to_vec(), g.to_vec())
                .expect("gradient is shape-congruent with its leaf")
        })
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Broadcast::Same)
        } else if bv.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if av.is_matrix() && bv.rows() == 1 && bv.len() == av.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(
                op,
                format!("cannot combine {:?} with {:?}", av.shape(), bv.shape()),
            ))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let cols = av.cols();
        let data: Vec<f64> = match kind {
            Broadcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Row => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % cols]))
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, make(a, b, kind), rg))
    }

    /// Elementwise `a + b`; `b` may be a scalar or a row vector over matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Columns `idx` of matrix `a`, in order. Indices may repeat.
    pub fn select_columns(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::shape("select_columns", "empty column list"));
        }
        let value = self.value(a).select_columns(idx)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectColumns(a, idx.to_vec()), rg))
    }

    /// Contiguous column range `start..end`.
    pub fn slice_columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end {
            return Err(Error::shape(
                "slice_columns",
                format!("empty range {start}..{end}"),
            ));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.select_columns(a, &idx)
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_columns", "no inputs"));
        };
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_columns",
                    format!("row counts {} and {}", rows, v.rows()),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatColumns(parts.to_vec()), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss has shape {:?}, expected a scalar",
                    self.value(loss).shape()
                ),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, m * k);
                        // dA += dC * B^T
                        gemm(m, nn, k, &g, (nn, 1), bv.data(), (1, nn), da, 1.0);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut grads, *b, k * nn);
                        // dB += A^T * dC
                        gemm(k, m, nn, av.data(), (1, k), &g, (nn, 1), db, 1.0);
                    }
                }
                Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    let (a, b, kind) = (*a, *b, *kind);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, a, g.len());
                        da.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if self.nodes[b.0].requires_grad {
                        let blen = self.nodes[b.0].value.len();
                        let db = slot(&mut grads, b, blen);
                        reduce_into(db, &g, kind, sign, |_| 1.0);
                    }
                }
                Op::Mul(a, b, kind) => {
                    let (a, b, kind) = (*a, *b, *kind);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.nodes[a.0].requires_grad {
                        let bd = bv.data();
                        let cols = av.cols();
                        let da = slot(&mut grads, a, g.len());
                        for (j, (x, y)) in da.iter_mut().zip(&g).enumerate() {
                            let bj = match kind {
                                Broadcast::Same => bd[j],
                                Broadcast::Scalar => bd[0],
                                Broadcast::Row => bd[j % cols],
                            };
                            *x += y * bj;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let ad = av.data();
                        let db = slot(&mut grads, b, bv.len());
                        reduce_into(db, &g, kind, 1.0, |j| ad[j]);
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = self.nodes[a.0].value.data();
                    let da = slot(&mut grads, a, g.len());
                    for ((d, &gi), &xi) in da.iter_mut().zip(&g).zip(x) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Log(a) => {
                    let a = *a;
                    let x = self.nodes[a.0].value.data();
                    let da = slot(&mut grads, a, g.len());
                    for ((d, &gi), &xi) in da.iter_mut().zip(&g).zip(x) {
                        if xi >= LOG_FLOOR {
                            *d += gi / xi;
                        }
                    }
                }
                Op::Exp(a) => {
                    let a = *a;
                    let y = node.value.data();
                    let da = slot(&mut grads, a, g.len());
                    for ((d, &gi), &yi) in da.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi;
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    let len = self.nodes[a.0].value.len();
                    let da = slot(&mut grads, a, len);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let len = self.nodes[a.0].value.len();
                    let da = slot(&mut grads, a, len);
                    let s = g[0] / len as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
                Op::Scale(a, f) => {
                    let (a, f) = (*a, *f);
                    let da = slot(&mut grads, a, g.len());
                    da.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi * f);
                }
                Op::SelectColumns(a, idx) => {
                    let a = *a;
                    let src_cols = self.nodes[a.0].value.cols();
                    let len = self.nodes[a.0].value.len();
                    let k = idx.len();
                    let da = slot(&mut grads, a, len);
                    for (r, grow) in g.chunks(k).enumerate() {
                        let drow = &mut da[r * src_cols..(r + 1) * src_cols];
                        for (&j, &gj) in idx.iter().zip(grow) {
                            drow[j] += gj;
                        }
                    }
                }
                Op::ConcatColumns(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].requires_grad {
                            let len = self.nodes[p.0].value.len();
                            let dp = slot(&mut grads, p, len);
                            for (r, drow) in dp.chunks_mut(pc).enumerate() {
                                let grow = &g[r * total + offset..r * total + offset + pc];
                                drow.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let da = slot(&mut grads, a, g.len());
                    for ((drow, grow), yrow) in
                        da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let da = slot(&mut grads, a, g.len());
                    for ((drow, grow), yrow) in
                        da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, created zeroed on first use.
fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Accumulate `sign * g * factor(j)` into `db`, summing over broadcast axes.
fn reduce_into(
    db: &mut [f64],
    g: &[f64],
    kind: Broadcast,
    sign: f64,
    factor: impl Fn(usize) -> f64,
) {
    match kind {
        Broadcast::Same => {
            for (j, (d, gi)) in db.iter_mut().zip(g).enumerate() {
                *d += sign * gi * factor(j);
            }
        }
        Broadcast::Scalar => {
            let s: f64 = g.iter().enumerate().map(|(j, gi)| gi * factor(j)).sum();
            db[0] += sign * s;
        }
        Broadcast::Row => {
            let cols = db.len();
            for (j, gi) in g.iter().enumerate() {
                db[j % cols] += sign * gi * factor(j);
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major operands given as (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the assertion above bounds every offset the strides can reach,
    // since each operand is a dense m*k, k*n or m*n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a matrix (or a single row).
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}
