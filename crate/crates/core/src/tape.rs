//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass, in
//! creation order. Each tensor records the operation that produced it,
//! so replaying the arena in reverse index order is a reverse
//! topological walk; [`Tape::backward`] does exactly that, accumulating
//! vector-Jacobian products into per-tensor gradient buffers.
//!
//! The tape is per-pass: build one, run forward, call `backward` once,
//! read gradients, drop it. There is no global graph and no interior
//! mutability, which keeps repeated runs bit-deterministic.
//!
//! Broadcasting in binary ops is restricted to rank <= 2 with numpy
//! trailing-dimension alignment (scalar, row, column, outer), so every
//! backward reduction is a plain sum over the broadcast axes.

use crate::error::{Error, Result};

/// Index of a tensor in its tape's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// Epsilon added to the variance inside [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    /// Multiply by a compile-time-known constant (not a tape tensor).
    Scale(f64),
    /// Add a constant to every element.
    AddScalar(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Binary { kind: BinaryKind, a: TensorId, b: TensorId },
    Unary { kind: UnaryKind, x: TensorId },
    Softmax { x: TensorId, axis: usize },
    LogSoftmax { x: TensorId, axis: usize },
    SumAxis { x: TensorId, axis: usize },
    SumAll { x: TensorId },
    Concat { xs: Vec<TensorId>, axis: usize },
    SliceCols { x: TensorId, start: usize },
    GatherRows { x: TensorId, rows: Vec<usize> },
    Reshape { x: TensorId },
}

/// A dense row-major f64 tensor living in a tape arena.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Interpret a rank-1 or rank-2 shape as (rows, cols).
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("tape tensors are rank 1 or 2"),
    }
}

/// Wengert-style tape: arena of tensors plus parallel gradient buffers.
pub struct Tape {
    nodes: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        self.grads.push(None);
        id
    }

    /// Create a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn tensor(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch { op: "tensor", lhs: shape.to_vec(), rhs: vec![] });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch { op: "tensor", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        Ok(self.push(Tensor { shape: shape.to_vec(), data, requires_grad, op: Op::Leaf }))
    }

    /// Leaf that never receives gradients (masks, labels, injected data).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.tensor(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Tensor { shape: vec![1, 1], data: vec![v], requires_grad: false, op: Op::Leaf })
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<TensorId> {
        let numel = shape.iter().product();
        self.constant(vec![0.0; numel], shape)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape_of(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer of `id`, populated by [`Tape::backward`] for every
    /// tensor with `requires_grad` reachable from the loss.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Extract the value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> Result<f64> {
        let t = &self.nodes[id.0];
        if t.numel() != 1 {
            return Err(Error::Usage(format!("item() on tensor of shape {:?}", t.shape)));
        }
        Ok(t.data[0])
    }

    fn out_grad_flag(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Standard matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.out_grad_flag(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data, requires_grad: rg, op: Op::MatMul { a, b } }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape: vec![c, r], data, requires_grad: rg, op: Op::Transpose { x } }))
    }

    // ── Elementwise with broadcasting ───────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = as_2d(&self.nodes[a.0].shape);
        let (rb, cb) = as_2d(&self.nodes[b.0].shape);
        let compat = |x: usize, y: usize| x == y || x == 1 || y == 1;
        if !compat(ra, rb) || !compat(ca, cb) {
            return Err(Error::ShapeMismatch {
                op: binary_name(kind),
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        if kind == BinaryKind::Div && self.nodes[b.0].data.iter().any(|&v| v == 0.0) {
            return Err(Error::Domain { op: "div", msg: "division by zero".into() });
        }
        let (ro, co) = (ra.max(rb), ca.max(cb));
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = vec![0.0; ro * co];
        for i in 0..ro {
            for j in 0..co {
                let va = da[bcast_idx(i, j, ra, ca)];
                let vb = db[bcast_idx(i, j, rb, cb)];
                data[i * co + j] = match kind {
                    BinaryKind::Add => va + vb,
                    BinaryKind::Sub => va - vb,
                    BinaryKind::Mul => va * vb,
                    BinaryKind::Div => va / vb,
                };
            }
        }
        let rank = self.nodes[a.0].shape.len().max(self.nodes[b.0].shape.len());
        let shape = if rank == 1 { vec![co] } else { vec![ro, co] };
        let rg = self.out_grad_flag(&[a, b]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, op: Op::Binary { kind, a, b } }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> Result<TensorId> {
        if kind == UnaryKind::Log && self.nodes[x.0].data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", msg: "log of non-positive value".into() });
        }
        if kind == UnaryKind::Sqrt && self.nodes[x.0].data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain { op: "sqrt", msg: "sqrt of negative value".into() });
        }
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Relu => {
                    if v > 0.0 {
                        v
                    } else {
                        0.0
                    }
                }
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Scale(c) => v * c,
                UnaryKind::AddScalar(c) => v + c,
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, op: Op::Unary { kind, x } }))
    }

    pub fn neg(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    // ── Structured ops ──────────────────────────────────────────────

    fn check_axis(&self, op: &'static str, x: TensorId, axis: usize) -> Result<(usize, usize)> {
        let s = &self.nodes[x.0].shape;
        let rank = s.len();
        if axis >= rank {
            return Err(Error::ShapeMismatch { op, lhs: s.clone(), rhs: vec![axis] });
        }
        Ok(as_2d(s))
    }

    /// Numerically stable softmax along `axis` (per-slice max subtracted).
    ///
    /// `-inf` logits are legal and produce exact zeros; a slice that is
    /// entirely `-inf` is a domain error.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.check_axis("softmax", x, axis)?;
        let axis2 = if self.nodes[x.0].shape.len() == 1 { 1 } else { axis };
        let data = softmax_forward(&self.nodes[x.0].data, r, c, axis2, false)?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, op: Op::Softmax { x, axis: axis2 } }))
    }

    /// log(softmax(x)) computed in one stable pass.
    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.check_axis("log_softmax", x, axis)?;
        let axis2 = if self.nodes[x.0].shape.len() == 1 { 1 } else { axis };
        let data = softmax_forward(&self.nodes[x.0].data, r, c, axis2, true)?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, op: Op::LogSoftmax { x, axis: axis2 } }))
    }

    /// Sum along `axis`, keeping the reduced dimension as 1.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (r, c) = self.check_axis("sum_axis", x, axis)?;
        let src = &self.nodes[x.0].data;
        let (shape, data) = if axis == 0 && self.nodes[x.0].shape.len() == 2 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += src[i * c + j];
                }
            }
            (vec![1, c], out)
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    out[i] += src[i * c + j];
                }
            }
            (vec![r, 1], out)
        };
        let axis2 = if self.nodes[x.0].shape.len() == 1 { 1 } else { axis };
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, op: Op::SumAxis { x, axis: axis2 } }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape: vec![1, 1], data: vec![total], requires_grad: rg, op: Op::SumAll { x } }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() || axis > 1 {
            return Err(Error::Usage("concat needs at least one input and axis in {0,1}".into()));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if first.len() != 2 {
            return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: vec![] });
        }
        let off_axis = 1 - axis;
        let mut along = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != 2 || s[off_axis] != first[off_axis] {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: s.clone() });
            }
            along += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = along;
        let (ro, co) = (shape[0], shape[1]);
        let mut data = vec![0.0; ro * co];
        if axis == 0 {
            let mut row = 0;
            for &x in xs {
                let t = &self.nodes[x.0];
                let (r, c) = (t.shape[0], t.shape[1]);
                data[row * c..(row + r) * c].copy_from_slice(&t.data);
                row += r;
            }
        } else {
            let mut col = 0;
            for &x in xs {
                let t = &self.nodes[x.0];
                let (r, c) = (t.shape[0], t.shape[1]);
                for i in 0..r {
                    data[i * co + col..i * co + col + c].copy_from_slice(&t.data[i * c..(i + 1) * c]);
                }
                col += c;
            }
        }
        let rg = self.out_grad_flag(xs);
        Ok(self.push(Tensor { shape, data, requires_grad: rg, op: Op::Concat { xs: xs.to_vec(), axis } }))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: s, rhs: vec![start, len] });
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape: vec![r, len], data, requires_grad: rg, op: Op::SliceCols { x, start } }))
    }

    /// Row lookup with duplicate indices allowed; backward scatter-adds,
    /// so only looked-up rows receive gradient.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "gather_rows", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Data(format!("gather_rows index {bad} out of range for {r} rows")));
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows.len() * c];
        for (k, &i) in rows.iter().enumerate() {
            data[k * c..(k + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor {
            shape: vec![rows.len(), c],
            data,
            requires_grad: rg,
            op: Op::GatherRows { x, rows: rows.to_vec() },
        }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || numel != self.nodes[x.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.out_grad_flag(&[x]);
        Ok(self.push(Tensor { shape: shape.to_vec(), data, requires_grad: rg, op: Op::Reshape { x } }))
    }

    // ── Composites ──────────────────────────────────────────────────

    /// Mean over the rows of `x` where `mask` is 1. Mask entries must be
    /// exactly 0 or 1 and at least one row must be kept.
    pub fn masked_mean_rows(&mut self, x: TensorId, mask: TensorId) -> Result<TensorId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 || self.nodes[mask.0].numel() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "masked_mean_rows",
                lhs: s,
                rhs: self.nodes[mask.0].shape.clone(),
            });
        }
        if self.nodes[mask.0].data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain { op: "masked_mean_rows", msg: "mask entries must be 0 or 1".into() });
        }
        let count = self.nodes[mask.0].data.iter().filter(|&&v| v == 1.0).count();
        if count == 0 {
            return Err(Error::Degenerate("masked_mean_rows over an all-zero mask".into()));
        }
        let mask_col = self.reshape(mask, &[s[0], 1])?;
        let kept = self.mul(x, mask_col)?;
        let summed = self.sum_axis(kept, 0)?;
        self.scale(summed, 1.0 / count as f64)
    }

    /// Normalize each row of `x` to mean 0 / variance 1, then apply the
    /// per-column affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: s, rhs: vec![] });
        }
        let c = s[1];
        if self.nodes[gain.0].numel() != c || self.nodes[bias.0].numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let inv_c = 1.0 / c as f64;
        let row_sum = self.sum_axis(x, 1)?;
        let mean = self.scale(row_sum, inv_c)?;
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.sum_axis(sq, 1)?;
        let var = self.scale(var_sum, inv_c)?;
        let var_eps = self.add_scalar(var, LAYER_NORM_EPS)?;
        let std = self.sqrt(var_eps)?;
        let normed = self.div(centered, std)?;
        let gain_row = self.reshape(gain, &[1, c])?;
        let bias_row = self.reshape(bias, &[1, c])?;
        let scaled = self.mul(normed, gain_row)?;
        self.add(scaled, bias_row)
    }

    /// Cosine similarity of two equal-length vectors as a 1x1 tensor.
    /// Zero-norm inputs are a domain error.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].numel();
        if self.nodes[b.0].numel() != n {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        for (name, id) in [("first", a), ("second", b)] {
            if self.nodes[id.0].data.iter().all(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "cosine_similarity",
                    msg: format!("{name} input has zero norm"),
                });
            }
        }
        let ar = self.reshape(a, &[1, n])?;
        let br = self.reshape(b, &[1, n])?;
        let dot_terms = self.mul(ar, br)?;
        let dot = self.sum_all(dot_terms)?;
        let aa = self.mul(ar, ar)?;
        let bb = self.mul(br, br)?;
        let aa_sum = self.sum_all(aa)?;
        let bb_sum = self.sum_all(bb)?;
        let na = self.sqrt(aa_sum)?;
        let nb = self.sqrt(bb_sum)?;
        let denom = self.mul(na, nb)?;
        self.div(dot, denom)
    }

    // ── Backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contribution: Vec<f64>) {
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar `loss`. Populates gradients for every
    /// `requires_grad` ancestor. A second call on the same tape is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already run on this tape; build a fresh tape".into()));
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = as_2d(&self.nodes[a.0].shape);
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].requires_grad {
                        let da = matmul_nt(&gout, &self.nodes[b.0].data, m, n, k);
                        self.accumulate(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = matmul_tn(&self.nodes[a.0].data, &gout, m, k, n);
                        self.accumulate(b, db);
                    }
                }
                Op::Transpose { x } => {
                    if self.nodes[x.0].requires_grad {
                        let (r, c) = as_2d(&self.nodes[idx].shape);
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[j * r + i] = gout[i * c + j];
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (ra, ca) = as_2d(&self.nodes[a.0].shape);
                    let (rb, cb) = as_2d(&self.nodes[b.0].shape);
                    let (ro, co) = (ra.max(rb), ca.max(cb));
                    let need_a = self.nodes[a.0].requires_grad;
                    let need_b = self.nodes[b.0].requires_grad;
                    let mut da = if need_a { vec![0.0; ra * ca] } else { Vec::new() };
                    let mut db = if need_b { vec![0.0; rb * cb] } else { Vec::new() };
                    {
                        let va = &self.nodes[a.0].data;
                        let vb = &self.nodes[b.0].data;
                        for i in 0..ro {
                            for j in 0..co {
                                let g = gout[i * co + j];
                                let ia = bcast_idx(i, j, ra, ca);
                                let ib = bcast_idx(i, j, rb, cb);
                                match kind {
                                    BinaryKind::Add => {
                                        if need_a {
                                            da[ia] += g;
                                        }
                                        if need_b {
                                            db[ib] += g;
                                        }
                                    }
                                    BinaryKind::Sub => {
                                        if need_a {
                                            da[ia] += g;
                                        }
                                        if need_b {
                                            db[ib] -= g;
                                        }
                                    }
                                    BinaryKind::Mul => {
                                        if need_a {
                                            da[ia] += g * vb[ib];
                                        }
                                        if need_b {
                                            db[ib] += g * va[ia];
                                        }
                                    }
                                    BinaryKind::Div => {
                                        let d = vb[ib];
                                        if need_a {
                                            da[ia] += g / d;
                                        }
                                        if need_b {
                                            db[ib] -= g * va[ia] / (d * d);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_a {
                        self.accumulate(a, da);
                    }
                    if need_b {
                        self.accumulate(b, db);
                    }
                }
                Op::Unary { kind, x } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = &self.nodes[x.0].data;
                        let yv = &self.nodes[idx].data;
                        let dx: Vec<f64> = gout
                            .iter()
                            .enumerate()
                            .map(|(k, &g)| match kind {
                                UnaryKind::Neg => -g,
                                UnaryKind::Sigmoid => g * yv[k] * (1.0 - yv[k]),
                                UnaryKind::Tanh => g * (1.0 - yv[k] * yv[k]),
                                UnaryKind::Relu => {
                                    if xv[k] > 0.0 {
                                        g
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Exp => g * yv[k],
                                UnaryKind::Log => g / xv[k],
                                UnaryKind::Sqrt => g / (2.0 * yv[k]),
                                UnaryKind::Scale(c) => g * c,
                                UnaryKind::AddScalar(_) => g,
                            })
                            .collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.nodes[x.0].requires_grad {
                        let (r, c) = as_2d(&self.nodes[idx].shape);
                        let y = &self.nodes[idx].data;
                        let mut dx = vec![0.0; r * c];
                        for_each_slice(r, c, axis, |slice| {
                            let dot: f64 = slice.iter().map(|&k| y[k] * gout[k]).sum();
                            for &k in slice {
                                dx[k] = y[k] * (gout[k] - dot);
                            }
                        });
                        self.accumulate(x, dx);
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    if self.nodes[x.0].requires_grad {
                        let (r, c) = as_2d(&self.nodes[idx].shape);
                        let y = &self.nodes[idx].data;
                        let mut dx = vec![0.0; r * c];
                        for_each_slice(r, c, axis, |slice| {
                            let gsum: f64 = slice.iter().map(|&k| gout[k]).sum();
                            for &k in slice {
                                dx[k] = gout[k] - y[k].exp() * gsum;
                            }
                        });
                        self.accumulate(x, dx);
                    }
                }
                Op::SumAxis { x, axis } => {
                    if self.nodes[x.0].requires_grad {
                        let (r, c) = as_2d(&self.nodes[x.0].shape);
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = if axis == 0 { gout[j] } else { gout[i] };
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = vec![gout[0]; self.nodes[x.0].numel()];
                        self.accumulate(x, dx);
                    }
                }
                Op::Concat { xs, axis } => {
                    let co = self.nodes[idx].shape[1];
                    let mut offset = 0;
                    for &x in &xs {
                        let (r, c) = as_2d(&self.nodes[x.0].shape);
                        if self.nodes[x.0].requires_grad {
                            let mut dx = vec![0.0; r * c];
                            if axis == 0 {
                                dx.copy_from_slice(&gout[offset * c..(offset + r) * c]);
                            } else {
                                for i in 0..r {
                                    dx[i * c..(i + 1) * c]
                                        .copy_from_slice(&gout[i * co + offset..i * co + offset + c]);
                                }
                            }
                            self.accumulate(x, dx);
                        }
                        offset += if axis == 0 { r } else { c };
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.nodes[x.0].requires_grad {
                        let (r, c) = as_2d(&self.nodes[x.0].shape);
                        let len = self.nodes[idx].shape[1];
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..len {
                                dx[i * c + start + j] = gout[i * len + j];
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::GatherRows { x, rows } => {
                    if self.nodes[x.0].requires_grad {
                        let (r, c) = as_2d(&self.nodes[x.0].shape);
                        let mut dx = vec![0.0; r * c];
                        for (k, &i) in rows.iter().enumerate() {
                            for j in 0..c {
                                dx[i * c + j] += gout[k * c + j];
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::Reshape { x } => {
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(x, gout.clone());
                    }
                }
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

#[inline]
fn bcast_idx(i: usize, j: usize, r: usize, c: usize) -> usize {
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    ii * c + jj
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aik = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += aik * row[j];
            }
        }
    }
    out
}

/// a `[m×n]` times b-transpose where b is `[k×n]`: result `[m×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// a-transpose times b where a is `[m×k]`, b is `[m×n]`: result `[k×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aik = a[i * k + p];
            let row = &b[i * n..(i + 1) * n];
            let dst = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                dst[j] += aik * row[j];
            }
        }
    }
    out
}

fn for_each_slice(r: usize, c: usize, axis: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::new();
    if axis == 1 {
        for i in 0..r {
            idx.clear();
            idx.extend((0..c).map(|j| i * c + j));
            f(&idx);
        }
    } else {
        for j in 0..c {
            idx.clear();
            idx.extend((0..r).map(|i| i * c + j));
            f(&idx);
        }
    }
}

fn softmax_forward(x: &[f64], r: usize, c: usize, axis: usize, log: bool) -> Result<Vec<f64>> {
    let mut out = vec![0.0; r * c];
    let mut err = None;
    for_each_slice(r, c, axis, |slice| {
        let m = slice.iter().map(|&k| x[k]).fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            err = Some(Error::Domain { op: "softmax", msg: "slice is entirely -inf".into() });
            return;
        }
        let total: f64 = slice.iter().map(|&k| (x[k] - m).exp()).sum();
        if log {
            let lt = total.ln();
            for &k in slice {
                out[k] = x[k] - m - lt;
            }
        } else {
            for &k in slice {
                out[k] = (x[k] - m).exp() / total;
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &mut Tape, data: &[f64], shape: &[usize]) -> TensorId {
        tape.tensor(data.to_vec(), shape, true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = t(&mut tape, &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&mut tape, &[1.0, 1.0], &[2, 1]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[0.0; 6], &[2, 3]);
        let b = t(&mut tape, &[0.0; 4], &[2, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[0.0], &[1]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn relu_signs() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[-3.0, 3.0], &[2]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_and_sums() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[0.0, 0.0, 0.0], &[1, 3]);
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_no_overflow_on_huge_logit() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1000.0, 0.0], &[1, 2]);
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        assert!(v[0] > 1.0 - 1e-12 && v[0].is_finite());
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_handles_neg_inf_keys() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, f64::NEG_INFINITY, 0.5], &[1, 3]);
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_slice_is_domain_error() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[f64::NEG_INFINITY, f64::NEG_INFINITY], &[1, 2]);
        assert!(matches!(tape.softmax(x, 1), Err(Error::Domain { .. })));
    }

    #[test]
    fn masked_mean_ignores_masked_rows() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 1.0, 3.0, 3.0, 99.0, 99.0], &[3, 2]);
        let mask = tape.constant(vec![1.0, 1.0, 0.0], &[3]).unwrap();
        let y = tape.masked_mean_rows(x, mask).unwrap();
        assert_eq!(tape.value(y), &[2.0, 2.0]);
    }

    #[test]
    fn masked_mean_constant_rows() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[7.0, -2.0, 7.0, -2.0], &[2, 2]);
        let mask = tape.constant(vec![1.0, 1.0], &[2]).unwrap();
        let y = tape.masked_mean_rows(x, mask).unwrap();
        assert_eq!(tape.value(y), &[7.0, -2.0]);
    }

    #[test]
    fn masked_mean_all_zero_mask_is_degenerate() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[1, 2]);
        let mask = tape.constant(vec![0.0], &[1]).unwrap();
        assert!(matches!(tape.masked_mean_rows(x, mask), Err(Error::Degenerate(_))));
    }

    #[test]
    fn masked_row_perturbation_is_bit_invisible() {
        let run = |poison: f64| {
            let mut tape = Tape::new();
            let x = tape
                .tensor(vec![1.5, -0.25, 3.0, 4.0, poison, poison], &[3, 2], true)
                .unwrap();
            let mask = tape.constant(vec![1.0, 1.0, 0.0], &[3]).unwrap();
            let y = tape.masked_mean_rows(x, mask).unwrap();
            let loss_terms = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(loss_terms).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(y).to_vec(), tape.grad(x).unwrap().to_vec())
        };
        let (y0, g0) = run(0.0);
        let (y1, g1) = run(-1234.5);
        assert_eq!(y0, y1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn cosine_of_self_and_negation() {
        let mut tape = Tape::new();
        let v = t(&mut tape, &[0.3, -1.2, 2.0], &[3]);
        let nv = tape.neg(v).unwrap();
        let c1 = tape.cosine_similarity(v, v).unwrap();
        let c2 = tape.cosine_similarity(v, nv).unwrap();
        assert!((tape.item(c1).unwrap() - 1.0).abs() < 1e-15);
        assert!((tape.item(c2).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_domain_error() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[0.0, 0.0], &[2]);
        let b = t(&mut tape, &[1.0, 0.0], &[2]);
        assert!(matches!(tape.cosine_similarity(a, b), Err(Error::Domain { .. })));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[0.3, -1.7, 2.9, 0.01, 4.0, -2.0, 0.5, 1.5], &[2, 4]);
        let gain = tape.constant(vec![1.0; 4], &[4]).unwrap();
        let bias = tape.constant(vec![0.0; 4], &[4]).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(y);
        for row in 0..2 {
            let mean: f64 = v[row * 4..(row + 1) * 4].iter().sum::<f64>() / 4.0;
            let var: f64 = v[row * 4..(row + 1) * 4].iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, -2.0, 0.5], &[3]);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, -2.0, 0.5], &[3]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0], &[1]);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[2]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn gather_rows_grad_only_touches_looked_up_rows() {
        let mut tape = Tape::new();
        let table = t(&mut tape, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let g = tape.gather_rows(table, &[2, 2]).unwrap();
        let s = tape.sum_all(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_roundtrip_and_grad_split() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[1, 2]);
        let b = t(&mut tape, &[3.0, 4.0, 5.0], &[1, 3]);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = tape.constant(vec![1.0, 1.0, 10.0, 10.0, 10.0], &[1, 5]).unwrap();
        let prod = tape.mul(cat, w).unwrap();
        let s = tape.sum_all(prod).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[10.0, 10.0, 10.0]);
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0], &[1]);
        let b = t(&mut tape, &[0.0], &[1]);
        assert!(matches!(tape.div(a, b), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[-1.0], &[1]);
        assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn outer_broadcast_add() {
        let mut tape = Tape::new();
        let col = t(&mut tape, &[1.0, 2.0], &[2, 1]);
        let row = t(&mut tape, &[10.0, 20.0, 30.0], &[1, 3]);
        let out = tape.add(col, row).unwrap();
        assert_eq!(tape.shape_of(out), &[2, 3]);
        assert_eq!(tape.value(out), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let s = tape.sum_all(out).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(col).unwrap(), &[3.0, 3.0]);
        assert_eq!(tape.grad(row).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
