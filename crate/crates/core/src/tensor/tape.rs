//! Recording tape for reverse-mode differentiation.
//!
//! Every forward op validates shapes, computes its value eagerly, and pushes
//! one node. `backward` replays nodes in reverse, accumulating gradients into
//! the leaves. Values are immutable once written; node ids are append-only.

use std::sync::atomic::{AtomicU32, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: u32,
    tape: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Tanh,
    Sigmoid,
    Relu,
    SoftmaxLastDim,
}

enum Op<S> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// out = a · bᵀ with b stored row-major [N, K].
    MatmulTransposeB { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Broadcast a [1, N] row over every row of x.
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, c: S },
    AddConst { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    /// The mask is consumed at forward time; masked outputs are exactly 0,
    /// which the backward formula handles on its own.
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, rstd: Vec<S> },
    Conv1d { x: Var, w: Var, bias: Var, stride: usize },
    Gather { table: Var, indices: Vec<usize> },
    RepeatRow { row: Var, times: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    MeanRows { x: Var },
    SumAll { x: Var },
    BceWithLogits { logits: Var, targets: Vec<S>, weights: Vec<S> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<S> },
}

pub struct Tape<S: Scalar> {
    id: u32,
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
    requires: Vec<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; gradient populated by `backward`.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        &self.values[v.id as usize]
    }

    /// Gradient of a var after `backward`; `None` if nothing flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        self.grads[v.id as usize].as_deref()
    }

    /// Reset all accumulated gradients. Backward without a reset accumulates.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var {
        debug_assert!(value.all_finite(), "op produced non-finite values");
        let id = self.values.len() as u32;
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        self.requires.push(requires);
        Var { id, tape: self.id }
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.tape != self.id || v.id as usize >= self.values.len() {
            return Err(Error::Contract(format!("{op}: var not produced on this tape")));
        }
        Ok(())
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.id as usize])
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), &mut out, m, k, n);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, req))
    }

    /// a[M,K] · b[N,K]ᵀ -> [M,N]; used for attention scores.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul_bt")?;
        self.check(b, "matmul_bt")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_bt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_bt(ta.data(), tb.data(), &mut out, m, k, n);
        let req = self.req(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatmulTransposeB { a, b },
            req,
        ))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Vec<S>, Vec<usize>)> {
        self.check(a, name)?;
        self.check(b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((tb.data().to_vec(), ta.shape().to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bd, shape) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<S> = self.value(a).data().iter().zip(&bd).map(|(&x, &y)| x + y).collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bd, shape) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<S> = self.value(a).data().iter().zip(&bd).map(|(&x, &y)| x - y).collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bd, shape) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<S> = self.value(a).data().iter().zip(&bd).map(|(&x, &y)| x * y).collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, req))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.check(x, "scale")?;
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x, c }, req))
    }

    pub fn add_const(&mut self, x: Var, c: S) -> Result<Var> {
        self.check(x, "add_const")?;
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| v + c).collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddConst { x }, req))
    }

    fn row_op_check(&self, x: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        self.check(x, name)?;
        self.check(row, name)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let (t, n) = (tx.rows(), tx.cols());
        if tr.len() != n || tr.rows() != 1 {
            return Err(Error::Dimension {
                op: name,
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        Ok((t, n))
    }

    /// x[T,N] + row[1,N] broadcast over rows; the bias op.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, n) = self.row_op_check(x, row, "add_row")?;
        let rd = self.value(row).data().to_vec();
        let tx = self.value(x);
        let mut out = Vec::with_capacity(t * n);
        for r in 0..t {
            for (j, &rv) in rd.iter().enumerate() {
                out.push(tx.data()[r * n + j] + rv);
            }
        }
        let req = self.req(&[x, row]);
        Ok(self.push(Tensor::new(vec![t, n], out)?, Op::AddRow { x, row }, req))
    }

    /// x[T,N] ⊙ row[1,N] broadcast over rows; the SE channel-scale op.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, n) = self.row_op_check(x, row, "mul_row")?;
        let rd = self.value(row).data().to_vec();
        let tx = self.value(x);
        let mut out = Vec::with_capacity(t * n);
        for r in 0..t {
            for (j, &rv) in rd.iter().enumerate() {
                out.push(tx.data()[r * n + j] * rv);
            }
        }
        let req = self.req(&[x, row]);
        Ok(self.push(Tensor::new(vec![t, n], out)?, Op::MulRow { x, row }, req))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x, "relu")?;
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| v.max(S::zero())).collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu { x }, req))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x, "tanh")?;
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| v.tanh()).collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Tanh { x }, req))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sigmoid")?;
        let t = self.value(x);
        let out: Vec<S> = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sigmoid { x }, req))
    }

    pub fn activation(&mut self, x: Var, kind: ActKind) -> Result<Var> {
        match kind {
            ActKind::Tanh => self.tanh(x),
            ActKind::Sigmoid => self.sigmoid(x),
            ActKind::Relu => self.relu(x),
            ActKind::SoftmaxLastDim => self.softmax_rows(x, None),
        }
    }

    /// Row-wise softmax. `mask[r*N + c] == true` excludes the cell: it gets
    /// weight exactly 0 and no gradient. A fully-masked row is rejected.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.check(x, "softmax_rows")?;
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.cols());
        if let Some(m) = &mask {
            if m.len() != rows * n {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            for r in 0..rows {
                if m[r * n..(r + 1) * n].iter().all(|&b| b) {
                    return Err(Error::DegenerateMask { row: r });
                }
            }
        }
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mrow = mask.as_ref().map(|m| &m[r * n..(r + 1) * n]);
            kernels::softmax_row(row, mrow, &mut out[r * n..(r + 1) * n]);
        }
        let shape = t.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x }, req))
    }

    /// Per-last-dimension mean-0/var-1 normalization then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        self.check(x, "layer_norm")?;
        self.check(gamma, "layer_norm")?;
        self.check(beta, "layer_norm")?;
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); rows * d];
        let mut means = vec![S::zero(); rows];
        let mut rstds = vec![S::zero(); rows];
        let dn = S::from_usize(d);
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rstd = (var + eps).sqrt().recip();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let req = self.req(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            req,
        ))
    }

    /// Cross-correlation along the time axis, zero padding (k-1)/2 at both
    /// ends. x: [T, Cin], w: [k, Cin, Cout], bias: [Cout].
    /// Output length is T for stride 1, ceil(T/stride) otherwise.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        self.check(x, "conv1d")?;
        self.check(w, "conv1d")?;
        self.check(bias, "conv1d")?;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let wshape = tw.shape();
        if wshape.len() != 3 {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: wshape.to_vec(),
            });
        }
        let (k, cin, cout) = (wshape[0], wshape[1], wshape[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        if tx.cols() != cin || tb.len() != cout {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: wshape.to_vec(),
            });
        }
        let t_in = tx.rows();
        let pad = (k - 1) / 2;
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let mut out = vec![S::zero(); t_out * cout];
        kernels::conv1d(
            tx.data(), tw.data(), tb.data(), &mut out, t_in, cin, cout, k, stride, pad,
        );
        let req = self.req(&[x, w, bias]);
        Ok(self.push(
            Tensor::new(vec![t_out, cout], out)?,
            Op::Conv1d { x, w, bias, stride },
            req,
        ))
    }

    // ── Structure ops ───────────────────────────────────────────────

    /// Row lookup: out[i] = table[indices[i]]; the embedding op.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table, "gather")?;
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        for (pos, &ix) in indices.iter().enumerate() {
            if ix >= v {
                return Err(Error::Input(format!(
                    "gather index {ix} at position {pos} out of range (table has {v} rows)"
                )));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            out.extend_from_slice(&t.data()[ix * d..(ix + 1) * d]);
        }
        let req = self.req(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Gather { table, indices: indices.to_vec() },
            req,
        ))
    }

    pub fn repeat_row(&mut self, row: Var, times: usize) -> Result<Var> {
        self.check(row, "repeat_row")?;
        let t = self.value(row);
        if t.rows() != 1 || times == 0 {
            return Err(Error::Dimension {
                op: "repeat_row",
                lhs: t.shape().to_vec(),
                rhs: vec![times],
            });
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(t.data());
        }
        let req = self.req(&[row]);
        Ok(self.push(Tensor::new(vec![times, n], out)?, Op::RepeatRow { row, times }, req))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x, "slice_cols")?;
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.cols());
        if start + len > n || len == 0 {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, req))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts".into()));
        }
        for &p in parts {
            self.check(p, "concat_cols")?;
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0usize;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = &self.values[p.id as usize];
                let n = t.cols();
                out.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
            }
        }
        let req = self.req(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            req,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x, "slice_rows")?;
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.cols());
        if start + len > rows || len == 0 {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = t.data()[start * n..(start + len) * n].to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { x, start }, req))
    }

    /// Mean over the row axis: [T, C] -> [1, C]; the SE squeeze.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x, "mean_rows")?;
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.cols());
        let inv = S::from_usize(rows).recip();
        let mut out = vec![S::zero(); n];
        for r in 0..rows {
            for j in 0..n {
                out[j] += t.data()[r * n + j];
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows { x }, req))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sum_all")?;
        let s: S = self.value(x).data().iter().copied().sum();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, req))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Weighted binary cross-entropy over logits, normalized by the weight
    /// sum. Numerically stable for large |logit|.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S], weights: &[S]) -> Result<Var> {
        self.check(logits, "bce_with_logits")?;
        let t = self.value(logits);
        if t.len() != targets.len() || t.len() != weights.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let wsum: S = weights.iter().copied().sum();
        if wsum <= S::zero() {
            return Err(Error::Contract("bce_with_logits: weight sum must be positive".into()));
        }
        let mut acc = S::zero();
        for ((&x, &t0), &w) in t.data().iter().zip(targets).zip(weights) {
            let l = x.max(S::zero()) - x * t0 + (S::one() + (-x.abs()).exp()).ln();
            acc += w * l;
        }
        let loss = acc / wsum;
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            req,
        ))
    }

    /// Mean softmax cross-entropy over rows of logits [N, C] against class
    /// indices; the classifier loss.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits, "softmax_xent")?;
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "softmax_xent",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t0| t0 >= c) {
            return Err(Error::Input(format!("softmax_xent target {bad} out of range ({c} classes)")));
        }
        let mut probs = vec![S::zero(); n * c];
        let mut acc = S::zero();
        for r in 0..n {
            let row = &t.data()[r * c..(r + 1) * c];
            kernels::softmax_row(row, None, &mut probs[r * c..(r + 1) * c]);
            let p = probs[r * c + targets[r]].max(S::from_f64(1e-30));
            acc -= p.ln();
        }
        let loss = acc / S::from_usize(n);
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
            req,
        ))
    }

    // ── Composites ──────────────────────────────────────────────────

    /// softmax(q·kᵀ/√D + mask)·v. Returns (output, attention weights).
    /// `mask[i*Tk + j] == true` excludes key j for query i.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Vec<bool>>,
    ) -> Result<(Var, Var)> {
        let d = self.value(q).cols();
        if self.value(k).cols() != d {
            return Err(Error::Dimension {
                op: "scaled_dot_attention",
                lhs: self.value(q).shape().to_vec(),
                rhs: self.value(k).shape().to_vec(),
            });
        }
        if self.value(k).rows() != self.value(v).rows() {
            return Err(Error::Dimension {
                op: "scaled_dot_attention",
                lhs: self.value(k).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let scores = self.matmul_bt(q, k)?;
        let scaled = self.scale(scores, S::from_f64(1.0 / (d as f64).sqrt()))?;
        let weights = self.softmax_rows(scaled, mask)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Populates the grad of every
    /// requires-grad leaf (zeros if unreachable). Accumulates on repeat.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss, "backward")?;
        let lid = loss.id as usize;
        if self.values[lid].len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[lid].shape()
            )));
        }
        match &mut self.grads[lid] {
            Some(g) => g[0] += S::one(),
            None => self.grads[lid] = Some(vec![S::one()]),
        }

        let values = &self.values;
        let requires = &self.requires;
        let grads = &mut self.grads;

        // Accumulate g into the grad slot of `v` unless it needs no gradient.
        macro_rules! accum {
            ($v:expr, $g:expr) => {{
                let id = $v.id as usize;
                if requires[id] {
                    match &mut grads[id] {
                        Some(dst) => {
                            for (d, s) in dst.iter_mut().zip($g) {
                                *d += *s;
                            }
                        }
                        None => grads[id] = Some($g.to_vec()),
                    }
                }
            }};
        }

        for id in (0..=lid).rev() {
            if matches!(self.ops[id], Op::Leaf) || !requires[id] {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[id] {
                Op::Leaf => unreachable!(),
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&values[a.id as usize], &values[b.id as usize]);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if requires[a.id as usize] {
                        let mut da = vec![S::zero(); m * k];
                        kernels::matmul_bt(&g, tb.data(), &mut da, m, n, k);
                        accum!(a, &da);
                    }
                    if requires[b.id as usize] {
                        let mut db = vec![S::zero(); k * n];
                        kernels::matmul_at_b(ta.data(), &g, &mut db, m, k, n);
                        accum!(b, &db);
                    }
                }
                Op::MatmulTransposeB { a, b } => {
                    let (ta, tb) = (&values[a.id as usize], &values[b.id as usize]);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if requires[a.id as usize] {
                        let mut da = vec![S::zero(); m * k];
                        kernels::matmul(&g, tb.data(), &mut da, m, n, k);
                        accum!(a, &da);
                    }
                    if requires[b.id as usize] {
                        let mut db = vec![S::zero(); n * k];
                        kernels::matmul_at_b(&g, ta.data(), &mut db, m, n, k);
                        accum!(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    accum!(a, &g);
                    accum!(b, &g);
                }
                Op::Sub { a, b } => {
                    accum!(a, &g);
                    if requires[b.id as usize] {
                        let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                        accum!(b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if requires[a.id as usize] {
                        let da: Vec<S> = g
                            .iter()
                            .zip(values[b.id as usize].data())
                            .map(|(&d, &bv)| d * bv)
                            .collect();
                        accum!(a, &da);
                    }
                    if requires[b.id as usize] {
                        let db: Vec<S> = g
                            .iter()
                            .zip(values[a.id as usize].data())
                            .map(|(&d, &av)| d * av)
                            .collect();
                        accum!(b, &db);
                    }
                }
                Op::AddRow { x, row } => {
                    accum!(x, &g);
                    if requires[row.id as usize] {
                        let n = values[row.id as usize].len();
                        let mut dr = vec![S::zero(); n];
                        for chunk in g.chunks_exact(n) {
                            for (d, s) in dr.iter_mut().zip(chunk) {
                                *d += *s;
                            }
                        }
                        accum!(row, &dr);
                    }
                }
                Op::MulRow { x, row } => {
                    let n = values[row.id as usize].len();
                    if requires[x.id as usize] {
                        let rd = values[row.id as usize].data();
                        let dx: Vec<S> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &d)| d * rd[i % n])
                            .collect();
                        accum!(x, &dx);
                    }
                    if requires[row.id as usize] {
                        let xd = values[x.id as usize].data();
                        let mut dr = vec![S::zero(); n];
                        for (i, &d) in g.iter().enumerate() {
                            dr[i % n] += d * xd[i];
                        }
                        accum!(row, &dr);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<S> = g.iter().map(|&d| d * *c).collect();
                    accum!(x, &dx);
                }
                Op::AddConst { x } => {
                    accum!(x, &g);
                }
                Op::Relu { x } => {
                    let xd = values[x.id as usize].data();
                    let dx: Vec<S> = g
                        .iter()
                        .zip(xd)
                        .map(|(&d, &v)| if v > S::zero() { d } else { S::zero() })
                        .collect();
                    accum!(x, &dx);
                }
                Op::Tanh { x } => {
                    let yd = values[id].data();
                    let dx: Vec<S> = g.iter().zip(yd).map(|(&d, &y)| d * (S::one() - y * y)).collect();
                    accum!(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let yd = values[id].data();
                    let dx: Vec<S> = g.iter().zip(yd).map(|(&d, &y)| d * y * (S::one() - y)).collect();
                    accum!(x, &dx);
                }
                Op::SoftmaxRows { x } => {
                    let y = values[id].data();
                    let n = values[id].cols();
                    let mut dx = vec![S::zero(); y.len()];
                    for r in 0..values[id].rows() {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    accum!(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let xd = values[x.id as usize].data();
                    let gd = values[gamma.id as usize].data();
                    let rows = values[id].rows();
                    let d = values[id].cols();
                    let dn = S::from_usize(d);
                    let mut dx = vec![S::zero(); xd.len()];
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    for r in 0..rows {
                        let xs = &xd[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let (m, rs) = (mean[r], rstd[r]);
                        let mut sum_dyg = S::zero();
                        let mut sum_dyg_xhat = S::zero();
                        for j in 0..d {
                            let xhat = (xs[j] - m) * rs;
                            let dyg = gs[j] * gd[j];
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                            dgamma[j] += gs[j] * xhat;
                            dbeta[j] += gs[j];
                        }
                        let mean_dyg = sum_dyg / dn;
                        let mean_dyg_xhat = sum_dyg_xhat / dn;
                        for j in 0..d {
                            let xhat = (xs[j] - m) * rs;
                            dx[r * d + j] = rs * (gs[j] * gd[j] - mean_dyg - xhat * mean_dyg_xhat);
                        }
                    }
                    accum!(x, &dx);
                    accum!(gamma, &dgamma);
                    accum!(beta, &dbeta);
                }
                Op::Conv1d { x, w, bias, stride } => {
                    let tx = &values[x.id as usize];
                    let tw = &values[w.id as usize];
                    let (t_in, cin) = (tx.rows(), tx.cols());
                    let k = tw.shape()[0];
                    let cout = tw.shape()[2];
                    let pad = (k - 1) / 2;
                    let t_out = values[id].rows();
                    let mut dx = vec![S::zero(); t_in * cin];
                    let mut dw = vec![S::zero(); k * cin * cout];
                    let mut db = vec![S::zero(); cout];
                    kernels::conv1d_backward(
                        tx.data(), tw.data(), &g, &mut dx, &mut dw, &mut db,
                        t_in, cin, cout, k, *stride, pad, t_out,
                    );
                    accum!(x, &dx);
                    accum!(w, &dw);
                    accum!(bias, &db);
                }
                Op::Gather { table, indices } => {
                    if requires[table.id as usize] {
                        let t = &values[table.id as usize];
                        let d = t.cols();
                        let mut dt = vec![S::zero(); t.len()];
                        for (pos, &ix) in indices.iter().enumerate() {
                            for j in 0..d {
                                dt[ix * d + j] += g[pos * d + j];
                            }
                        }
                        accum!(table, &dt);
                    }
                }
                Op::RepeatRow { row, times } => {
                    if requires[row.id as usize] {
                        let n = values[row.id as usize].len();
                        let mut dr = vec![S::zero(); n];
                        for r in 0..*times {
                            for j in 0..n {
                                dr[j] += g[r * n + j];
                            }
                        }
                        accum!(row, &dr);
                    }
                }
                Op::SliceCols { x, start } => {
                    if requires[x.id as usize] {
                        let t = &values[x.id as usize];
                        let (rows, n) = (t.rows(), t.cols());
                        let len = values[id].cols();
                        let mut dx = vec![S::zero(); rows * n];
                        for r in 0..rows {
                            for j in 0..len {
                                dx[r * n + start + j] = g[r * len + j];
                            }
                        }
                        accum!(x, &dx);
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = values[id].rows();
                    let total = values[id].cols();
                    let mut offset = 0usize;
                    for &p in parts {
                        let n = values[p.id as usize].cols();
                        if requires[p.id as usize] {
                            let mut dp = vec![S::zero(); rows * n];
                            for r in 0..rows {
                                dp[r * n..(r + 1) * n]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + n]);
                            }
                            accum!(p, &dp);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    if requires[x.id as usize] {
                        let t = &values[x.id as usize];
                        let (rows, n) = (t.rows(), t.cols());
                        let len = values[id].rows();
                        let mut dx = vec![S::zero(); rows * n];
                        dx[start * n..(start + len) * n].copy_from_slice(&g);
                        accum!(x, &dx);
                    }
                }
                Op::MeanRows { x } => {
                    if requires[x.id as usize] {
                        let t = &values[x.id as usize];
                        let (rows, n) = (t.rows(), t.cols());
                        let inv = S::from_usize(rows).recip();
                        let mut dx = vec![S::zero(); rows * n];
                        for r in 0..rows {
                            for j in 0..n {
                                dx[r * n + j] = g[j] * inv;
                            }
                        }
                        accum!(x, &dx);
                    }
                }
                Op::SumAll { x } => {
                    if requires[x.id as usize] {
                        let dx = vec![g[0]; values[x.id as usize].len()];
                        accum!(x, &dx);
                    }
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    if requires[logits.id as usize] {
                        let xd = values[logits.id as usize].data();
                        let wsum: S = weights.iter().copied().sum();
                        let scale = g[0] / wsum;
                        let dx: Vec<S> = xd
                            .iter()
                            .zip(targets)
                            .zip(weights)
                            .map(|((&x0, &t0), &w)| scale * w * (kernels::sigmoid(x0) - t0))
                            .collect();
                        accum!(logits, &dx);
                    }
                }
                Op::SoftmaxXent { logits, targets, probs } => {
                    if requires[logits.id as usize] {
                        let c = values[logits.id as usize].cols();
                        let n = targets.len();
                        let scale = g[0] / S::from_usize(n);
                        let mut dx = probs.clone();
                        for (r, &t0) in targets.iter().enumerate() {
                            dx[r * c + t0] -= S::one();
                        }
                        for v in &mut dx {
                            *v *= scale;
                        }
                        accum!(logits, &dx);
                    }
                }
            }
        }

        // Every requires-grad leaf ends up with a populated grad.
        for id in 0..=lid {
            if matches!(self.ops[id], Op::Leaf) && requires[id] && grads[id].is_none() {
                grads[id] = Some(vec![S::zero(); values[id].len()]);
            }
        }
        Ok(())
    }
}

mod kernels {
    use super::Scalar;

    #[inline]
    pub fn sigmoid<S: Scalar>(x: S) -> S {
        if x >= S::zero() {
            (S::one() + (-x).exp()).recip()
        } else {
            let e = x.exp();
            e / (S::one() + e)
        }
    }

    /// c[M,N] += a[M,K] · b[K,N]
    pub fn matmul<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for k0 in 0..k {
                let aik = a[i * k + k0];
                if aik == S::zero() {
                    continue;
                }
                let brow = &b[k0 * n..(k0 + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }

    /// c[M,N] += a[M,K] · b[N,K]ᵀ
    pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                c[i * n + j] += acc;
            }
        }
    }

    /// c[K,N] += a[M,K]ᵀ · b[M,N]
    pub fn matmul_at_b<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for k0 in 0..k {
                let aik = a[i * k + k0];
                if aik == S::zero() {
                    continue;
                }
                let crow = &mut c[k0 * n..(k0 + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }

    pub fn softmax_row<S: Scalar>(row: &[S], mask: Option<&[bool]>, out: &mut [S]) {
        let mut max = S::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if mask.map_or(true, |m| !m[j]) && v > max {
                max = v;
            }
        }
        let mut sum = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = if mask.map_or(true, |m| !m[j]) {
                (v - max).exp()
            } else {
                S::zero()
            };
            out[j] = e;
            sum += e;
        }
        let inv = sum.recip();
        for v in out.iter_mut() {
            *v *= inv;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d<S: Scalar>(
        x: &[S],
        w: &[S],
        bias: &[S],
        out: &mut [S],
        t_in: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) {
        let t_out = out.len() / cout;
        for to in 0..t_out {
            let orow = &mut out[to * cout..(to + 1) * cout];
            orow.copy_from_slice(bias);
            for dt in 0..k {
                let ti = (to * stride + dt) as isize - pad as isize;
                if ti < 0 || ti >= t_in as isize {
                    continue;
                }
                let xrow = &x[ti as usize * cin..(ti as usize + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    let wrow = &w[(dt * cin + ci) * cout..(dt * cin + ci + 1) * cout];
                    for (ov, &wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_backward<S: Scalar>(
        x: &[S],
        w: &[S],
        g: &[S],
        dx: &mut [S],
        dw: &mut [S],
        db: &mut [S],
        t_in: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        t_out: usize,
    ) {
        for to in 0..t_out {
            let grow = &g[to * cout..(to + 1) * cout];
            for (co, &gv) in grow.iter().enumerate() {
                db[co] += gv;
            }
            for dt in 0..k {
                let ti = (to * stride + dt) as isize - pad as isize;
                if ti < 0 || ti >= t_in as isize {
                    continue;
                }
                let ti = ti as usize;
                for ci in 0..cin {
                    let xv = x[ti * cin + ci];
                    let wrow = &w[(dt * cin + ci) * cout..(dt * cin + ci + 1) * cout];
                    let dwrow = &mut dw[(dt * cin + ci) * cout..(dt * cin + ci + 1) * cout];
                    let mut acc = S::zero();
                    for ((&gv, &wv), dwv) in grow.iter().zip(wrow).zip(dwrow.iter_mut()) {
                        acc += gv * wv;
                        *dwv += gv * xv;
                    }
                    dx[ti * cin + ci] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t32(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let i2 = tape.leaf(t32(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.leaf(t32(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(t32(&[&[1.0, 2.0]]));
        let z = tape.leaf(t32(&[&[0.0], &[0.0]]));
        let c2 = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(c2).data(), &[0.0]);
    }

    #[test]
    fn matmul_hand_case_vs_triple_loop() {
        // Independent naive ijk oracle.
        fn naive(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut c = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    for k0 in 0..k {
                        c[i * n + j] += a.at2(i, k0) * b.at2(k0, j);
                    }
                }
            }
            c
        }
        let ta = t32(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let tb = t32(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let expect = naive(&ta, &tb);
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);

        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(ta);
        let b = tape.leaf(tb);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), expect.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv1d_hand_case() {
        // x=[1,2,3] (T=3,Cin=1), k=3, w=[1,1,1], bias=0 -> [3,6,5]
        // (independent sliding-window sum with explicit zero pads:
        //  [0+1+2, 1+2+3, 2+3+0]).
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_zero_and_identity_kernel() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 2]));
        let w = tape.leaf(Tensor::rand_uniform(
            &[3, 2, 3],
            0.5,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
        ));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        // k=1 identity mapping: w[0, ci, co] = delta(ci, co)
        let x2 = tape.leaf(t32(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let eye = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b2 = tape.leaf(Tensor::zeros(&[2]));
        let y2 = tape.conv1d(x2, eye, b2, 1).unwrap();
        assert_eq!(tape.value(y2).data(), tape.value(x2).data());
    }

    #[test]
    fn conv1d_even_kernel_rejected() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 1]));
        let w = tape.leaf(Tensor::zeros(&[2, 1, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv1d(x, w, b, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_stride2_length() {
        let mut tape: Tape<f32> = Tape::new();
        for t_in in [1usize, 2, 3, 7, 8] {
            let x = tape.leaf(Tensor::full(&[t_in, 1], 1.0f32));
            let w = tape.leaf(Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
            let b = tape.leaf(Tensor::zeros(&[1]));
            let y = tape.conv1d(x, w, b, 2).unwrap();
            assert_eq!(tape.value(y).rows(), t_in.div_ceil(2), "t_in={t_in}");
        }
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, -1.0, 1.0]).unwrap());
        let th = tape.activation(x, ActKind::Tanh).unwrap();
        assert_eq!(tape.value(th).data()[0], 0.0);
        let sg = tape.activation(x, ActKind::Sigmoid).unwrap();
        assert_eq!(tape.value(sg).data()[0], 0.5);
        // sigmoid(1.0): frozen from a high-precision evaluation of 1/(1+e^-1).
        assert!((tape.value(sg).data()[2] - 0.731_058_6).abs() < 1e-6);
        let rl = tape.activation(x, ActKind::Relu).unwrap();
        assert_eq!(tape.value(rl).data()[1], 0.0);

        let c = tape.leaf(Tensor::new(vec![1, 3], vec![7.25, 7.25, 7.25]).unwrap());
        let sm = tape.activation(c, ActKind::SoftmaxLastDim).unwrap();
        for &v in tape.value(sm).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape: Tape<f32> = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[3], 1.0f32));
        let beta = tape.leaf(Tensor::zeros(&[3]));

        // Constant row -> zeros (eps keeps it finite).
        let c = tape.leaf(Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap());
        let y = tape.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        // [1,2,3], eps=0: mean 2, population std sqrt(2/3).
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y2 = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
        let want = [-1.224_744_9, 0.0, 1.224_744_9];
        for (got, w) in tape.value(y2).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-5, "{got} vs {w}");
        }
    }

    #[test]
    fn layer_norm_normalizes_random_rows() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut tape: Tape<f64> = Tape::new();
        let d = 16;
        let x = tape.leaf(Tensor::<f64>::rand_uniform(&[5, d], 2.0, &mut rng));
        let gamma = tape.leaf(Tensor::full(&[d], 1.0f64));
        let beta = tape.leaf(Tensor::zeros(&[d]));
        let y = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row_slice(r);
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_single_key_and_uniform() {
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(t32(&[&[0.3, -0.7]]));
        let k = tape.leaf(t32(&[&[1.0, 2.0]]));
        let v = tape.leaf(t32(&[&[5.0, -3.0]]));
        let (out, w) = tape.scaled_dot_attention(q, k, v, None).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, -3.0]);
        assert_eq!(tape.value(w).data(), &[1.0]);

        // Identical keys -> uniform weights.
        let k2 = tape.leaf(t32(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]));
        let v2 = tape.leaf(t32(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
        let (_, w2) = tape.scaled_dot_attention(q, k2, v2, None).unwrap();
        for &x in tape.value(w2).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_hand_case() {
        // q=[[1,0]], k=[[1,0],[0,1]], D=2 -> weights = softmax([1/sqrt(2), 0]).
        // Independent direct formula:
        let s = 1.0f64 / 2.0f64.sqrt();
        let e0 = s.exp();
        let want0 = e0 / (e0 + 1.0);
        let want1 = 1.0 / (e0 + 1.0);

        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(t32(&[&[1.0, 0.0]]));
        let k = tape.leaf(t32(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = tape.leaf(t32(&[&[2.0, 0.0], &[0.0, 2.0]]));
        let (_, w) = tape.scaled_dot_attention(q, k, v, None).unwrap();
        let got = tape.value(w).data();
        assert!((got[0] as f64 - want0).abs() < 1e-6);
        assert!((got[1] as f64 - want1).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_zeroes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(Tensor::rand_uniform(&[4, 8], 1.0, &mut rng));
        let k = tape.leaf(Tensor::rand_uniform(&[5, 8], 1.0, &mut rng));
        let v = tape.leaf(Tensor::rand_uniform(&[5, 8], 1.0, &mut rng));
        // Causal-ish mask: row i may not see j > i.
        let mut mask = vec![false; 4 * 5];
        for i in 0..4 {
            for j in 0..5 {
                mask[i * 5 + j] = j > i;
            }
        }
        let (_, w) = tape.scaled_dot_attention(q, k, v, Some(mask)).unwrap();
        let wt = tape.value(w);
        for i in 0..4 {
            let row = wt.row_slice(i);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            for (j, &x) in row.iter().enumerate() {
                if j > i {
                    assert!(x < 1e-7, "masked weight leaked: {x}");
                }
            }
        }
    }

    #[test]
    fn attention_fully_masked_row_rejected() {
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(Tensor::zeros(&[2, 2]));
        let k = tape.leaf(Tensor::zeros(&[2, 2]));
        let v = tape.leaf(Tensor::zeros(&[2, 2]));
        let mask = vec![false, false, true, true];
        match tape.scaled_dot_attention(q, k, v, Some(mask)) {
            Err(Error::DegenerateMask { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate mask error, got {other:?}"),
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_zero_path_gives_zeros() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.param(t32(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let mut tape2: Tape<f32> = Tape::new();
        let x2 = tape2.param(t32(&[&[1.0, -2.0]]));
        let y = tape2.tanh(x2).unwrap();
        let s2 = tape2.sum_all(y).unwrap();
        let z = tape2.scale(s2, 0.0).unwrap();
        tape2.backward(z).unwrap();
        assert_eq!(tape2.grad(x2).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_least_squares_matches_closed_form() {
        // loss = sum((A·x - y)^2); grad_x = 2·Aᵀ(Ax - y) on a 3x2 instance.
        let a_rows = [[1.0f64, 2.0], [-0.5, 1.5], [2.0, -1.0]];
        let x0 = [0.7f64, -0.3];
        let y0 = [1.0f64, 0.5, -2.0];

        // Hand-derived closed form, computed independently of the tape.
        let mut resid = [0.0f64; 3];
        for i in 0..3 {
            resid[i] = a_rows[i][0] * x0[0] + a_rows[i][1] * x0[1] - y0[i];
        }
        let mut want = [0.0f64; 2];
        for j in 0..2 {
            for i in 0..3 {
                want[j] += 2.0 * a_rows[i][j] * resid[i];
            }
        }

        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&a_rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()));
        let x = tape.param(Tensor::new(vec![2, 1], x0.to_vec()).unwrap());
        let y = tape.leaf(Tensor::new(vec![3, 1], y0.to_vec()).unwrap());
        let ax = tape.matmul(a, x).unwrap();
        let d = tape.sub(ax, y).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let got = tape.grad(x).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates_on_repeat() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.param(t32(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn bce_with_logits_saturates_to_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![3, 1], vec![-40.0, -40.0, 40.0]).unwrap());
        let loss = tape
            .bce_with_logits(logits, &[0.0, 0.0, 1.0], &[1.0, 1.0, 2.0])
            .unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn softmax_xent_uniform_is_log_c() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = tape.softmax_xent(logits, &[1, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(Tensor::rand_uniform(&[6, 8], 1.0, &mut rng));
            let w = tape.leaf(Tensor::rand_uniform(&[8, 8], 1.0, &mut rng));
            let y = tape.matmul(x, w).unwrap();
            let y = tape.tanh(y).unwrap();
            let g = tape.leaf(Tensor::full(&[8], 1.0f32));
            let b = tape.leaf(Tensor::zeros(&[8]));
            let y = tape.layer_norm(y, g, b, 1e-5).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    use rand::SeedableRng;
}
