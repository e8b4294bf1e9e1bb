//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records primitive operations in topological order during a
//! forward pass; [`Tape::backward`] replays them in reverse to accumulate
//! exact adjoints. Nodes are addressed by [`VarId`]. Every reduction sums
//! left to right so repeated runs are bit-identical.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Largest double strictly below 1; sigmoid outputs are clamped into
/// (0, 1) so saturation never reaches the closed endpoints.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid_scalar(x: f64) -> f64 {
    // Stable branch form: never exponentiates a positive argument.
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

// C[m x n] += A[m x k] * B[k x n]
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        // Process four k-steps per pass over the output row so each output
        // load/store amortizes eight flops instead of two.
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                out_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let a_ip = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
            p += 1;
        }
    }
}

// C[m x p] += A[m x k] * B[p x k]^T
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o += dot(a_row, b_row);
        }
    }
}

/// Dot product accumulated in eight independent lanes so the loop vectorizes;
/// a plain sequential fold would pin the reduction to scalar adds.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut chunks_x = x.chunks_exact(8);
    let mut chunks_y = y.chunks_exact(8);
    for (cx, cy) in (&mut chunks_x).zip(&mut chunks_y) {
        for l in 0..8 {
            lanes[l] += cx[l] * cy[l];
        }
    }
    let mut acc = 0.0;
    for (a, b) in chunks_x.remainder().iter().zip(chunks_y.remainder()) {
        acc += a * b;
    }
    acc + ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

// C[k x n] += A[m x k]^T * B[m x n]
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // Four input rows per pass over the output, mirroring matmul_acc.
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let out_row = &mut out[p * n..(p + 1) * n];
            let (c0, c1, c2, c3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                out_row[j] += c0 * b0[j] + c1 * b1[j] + c2 * b2[j] + c3 * b3[j];
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
        i += 1;
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId },
    /// C = A * B^T without materializing the transpose.
    MatmulNt { a: VarId, b: VarId },
    Transpose { x: VarId },
    Add { a: VarId, b: VarId },
    /// Adds a rank-1 bias to every row of a matrix.
    AddBias { x: VarId, bias: VarId },
    Scale { x: VarId, c: f64 },
    /// Row j of the output is `s[j]` times row j of the input.
    ScaleRows { x: VarId, s: VarId },
    Sigmoid { x: VarId },
    Gelu { x: VarId },
    /// Row-wise softmax restricted to `allowed` entries; disallowed
    /// entries get weight exactly 0.
    MaskedRowSoftmax { x: VarId, allowed: Vec<bool> },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, eps: f64 },
    ConcatRows { a: VarId, b: VarId },
    ConcatCols { a: VarId, b: VarId },
    SliceRows { x: VarId, start: usize },
    GatherRows { x: VarId, idx: Vec<usize> },
    GatherCols { x: VarId, idx: Vec<usize> },
    /// Row lookup into an embedding table; adjoints scatter-add back.
    EmbedLookup { table: VarId, ids: Vec<u32> },
    /// Weighted mean negative log-softmax over positions.
    SoftmaxCrossEntropy {
        logits: VarId,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
    Sum { x: VarId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations with saved values; parents of
/// every node precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`]. Entries stay `None`
/// for nodes the loss does not depend on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    /// Saved value of a node.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Registers a tensor as a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    fn matrix(&self, id: VarId, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "{op} expects a rank-2 tensor, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Matrix product `a[m x k] * b[k x p]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, p) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * p];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, p, &mut out);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Matrix product against a transposed right factor:
    /// `a[m x k] * b[p x k]^T -> [m x p]`.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (p, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * p];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, p, &mut out);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(value, Op::MatmulNt { a, b }))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.matrix(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Adds a rank-1 bias of length `d` to every row of `x[n x d]`.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (n, d) = self.matrix(x, "add_bias")?;
        if self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (v, &bv) in data[i * d..(i + 1) * d].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, c })
    }

    /// Scales row j of `x[n x d]` by `s[j]`; `s` must hold exactly n values.
    pub fn scale_rows(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let (n, d) = self.matrix(x, "scale_rows")?;
        if self.value(s).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            let si = sv[i];
            for v in data[i * d..(i + 1) * d].iter_mut() {
                *v *= si;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.push(value, Op::ScaleRows { x, s }))
    }

    /// Elementwise logistic sigmoid; outputs lie strictly in (0, 1).
    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid { x })
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    /// Row-wise softmax over `x[n x m]` restricted to entries where
    /// `allowed` is true; disallowed entries come out exactly 0. Every row
    /// must allow at least one entry.
    pub fn masked_row_softmax(&mut self, x: VarId, allowed: Vec<bool>) -> Result<VarId> {
        let (n, m) = self.matrix(x, "masked_row_softmax")?;
        if allowed.len() != n * m {
            return Err(Error::InvalidShape(format!(
                "mask length {} does not cover a {n}x{m} matrix",
                allowed.len()
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mask = &allowed[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (v, &a) in row.iter().zip(mask) {
                if a && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidShape(format!(
                    "softmax row {i} has no allowed entries"
                )));
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            let mut denom = 0.0;
            for (j, (&v, &a)) in row.iter().zip(mask).enumerate() {
                if a {
                    let e = (v - max).exp();
                    out_row[j] = e;
                    denom += e;
                }
            }
            for v in out_row.iter_mut() {
                *v /= denom;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MaskedRowSoftmax { x, allowed }))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        let (n, d) = self.matrix(x, "layer_norm")?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            let out_row = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Stacks `b` below `a` (row concatenation).
    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ra, ca) = self.matrix(a, "concat_rows")?;
        let (rb, cb) = self.matrix(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ra + rb, ca], data)?;
        Ok(self.push(value, Op::ConcatRows { a, b }))
    }

    /// Places the columns of `b` after the columns of `a`.
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ra, ca) = self.matrix(a, "concat_cols")?;
        let (rb, cb) = self.matrix(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols { a, b }))
    }

    /// Contiguous row slice `x[start..start+len]`.
    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (r, c) = self.matrix(x, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Gathers the listed rows, in the given order (duplicates permitted).
    pub fn gather_rows(&mut self, x: VarId, idx: Vec<usize>) -> Result<VarId> {
        let (r, c) = self.matrix(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::InvalidShape("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange { index: bad, len: r });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows { x, idx }))
    }

    /// Gathers the listed columns, in the given order.
    pub fn gather_cols(&mut self, x: VarId, idx: Vec<usize>) -> Result<VarId> {
        let (r, c) = self.matrix(x, "gather_cols")?;
        if idx.is_empty() {
            return Err(Error::InvalidShape("gather_cols with empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        let src = self.value(x).data();
        let k = idx.len();
        let mut data = Vec::with_capacity(r * k);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            for &j in &idx {
                data.push(row[j]);
            }
        }
        let value = Tensor::new(vec![r, k], data)?;
        Ok(self.push(value, Op::GatherCols { x, idx }))
    }

    /// Looks up embedding rows for `ids` in `table[v x d]`.
    pub fn embed_lookup(&mut self, table: VarId, ids: &[u32]) -> Result<VarId> {
        let (v, d) = self.matrix(table, "embed_lookup")?;
        if ids.is_empty() {
            return Err(Error::InvalidShape("embed_lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| (id as usize) >= v) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: v,
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let i = id as usize;
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Weighted mean negative log-softmax of `targets` under
    /// `logits[n x v]`; positions with weight 0 do not contribute.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<VarId> {
        let (n, v) = self.matrix(logits, "softmax_cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::InvalidShape(format!(
                "softmax_cross_entropy: {n} positions but {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= v) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: v,
            });
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("negative loss mask weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Err(Error::DegenerateObjective);
        }
        let src = self.value(logits).data();
        let mut acc = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut denom = 0.0;
            for &x in row {
                denom += (x - max).exp();
            }
            let nll = denom.ln() - (row[targets[i] as usize] - max);
            acc += weights[i] * nll;
        }
        let value = Tensor::scalar(acc / total);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { x })
    }

    /// Reverse-mode sweep from a scalar `loss` node. Returns one adjoint
    /// per reachable node, each shaped like the node's value.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let root = self.value(loss);
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape().to_vec(), 1.0).expect("scalar"));

        for i in (0..=loss.0).rev() {
            // Topological order guarantees grads[i] is final here.
            let (parents, rest) = grads.split_at_mut(i);
            let Some(gout) = rest[0].as_ref() else { continue };
            let g = gout.data();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let p = self.value(*b).shape()[1];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // dA += dC * B^T
                    acc_with(parents, *a, &[m, k], |buf| {
                        matmul_nt_acc(g, bv, m, p, k, buf);
                    });
                    // dB += A^T * dC
                    acc_with(parents, *b, &[k, p], |buf| {
                        matmul_tn_acc(av, g, m, k, p, buf);
                    });
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let p = self.value(*b).shape()[0];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // C = A B^T: dA += dC * B; dB += dC^T * A
                    acc_with(parents, *a, &[m, k], |buf| {
                        matmul_acc(g, bv, m, p, k, buf);
                    });
                    acc_with(parents, *b, &[p, k], |buf| {
                        matmul_tn_acc(g, av, m, p, k, buf);
                    });
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    acc_with(parents, *x, &[r, c], |buf| {
                        for i2 in 0..c {
                            for j in 0..r {
                                buf[j * c + i2] += g[i2 * r + j];
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    let shape = node.value.shape().to_vec();
                    acc_with(parents, *a, &shape, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                    acc_with(parents, *b, &shape, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                Op::AddBias { x, bias } => {
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    acc_with(parents, *x, &[n, d], |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                    acc_with(parents, *bias, &[d], |buf| {
                        for i2 in 0..n {
                            for (o, &gv) in buf.iter_mut().zip(&g[i2 * d..(i2 + 1) * d]) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let shape = node.value.shape().to_vec();
                    acc_with(parents, *x, &shape, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv * c;
                        }
                    });
                }
                Op::ScaleRows { x, s } => {
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let sv = self.value(*s).data();
                    let xv = self.value(*x).data();
                    acc_with(parents, *x, &[n, d], |buf| {
                        for i2 in 0..n {
                            let si = sv[i2];
                            for (o, &gv) in buf[i2 * d..(i2 + 1) * d].iter_mut().zip(&g[i2 * d..(i2 + 1) * d]) {
                                *o += gv * si;
                            }
                        }
                    });
                    let s_shape = self.value(*s).shape().to_vec();
                    acc_with(parents, *s, &s_shape, |buf| {
                        for i2 in 0..n {
                            let mut acc = 0.0;
                            for (gv, xv2) in g[i2 * d..(i2 + 1) * d].iter().zip(&xv[i2 * d..(i2 + 1) * d]) {
                                acc += gv * xv2;
                            }
                            buf[i2] += acc;
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    let shape = node.value.shape().to_vec();
                    acc_with(parents, *x, &shape, |buf| {
                        for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x).data();
                    let shape = node.value.shape().to_vec();
                    acc_with(parents, *x, &shape, |buf| {
                        for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                            *o += gv * gelu_grad_scalar(v);
                        }
                    });
                }
                Op::MaskedRowSoftmax { x, allowed } => {
                    let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                    let y = node.value.data();
                    acc_with(parents, *x, &[n, m], |buf| {
                        for i2 in 0..n {
                            let y_row = &y[i2 * m..(i2 + 1) * m];
                            let g_row = &g[i2 * m..(i2 + 1) * m];
                            let mask = &allowed[i2 * m..(i2 + 1) * m];
                            let mut dot = 0.0;
                            for (gv, yv) in g_row.iter().zip(y_row) {
                                dot += gv * yv;
                            }
                            let out = &mut buf[i2 * m..(i2 + 1) * m];
                            for j in 0..m {
                                if mask[j] {
                                    out[j] += y_row[j] * (g_row[j] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let xv = self.value(*x).data();
                    let gv_ = self.value(*gain).data();
                    acc_with(parents, *x, &[n, d], |buf| {
                        for i2 in 0..n {
                            let row = &xv[i2 * d..(i2 + 1) * d];
                            let (mean, inv_std) = row_moments(row, *eps);
                            let g_row = &g[i2 * d..(i2 + 1) * d];
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv_std;
                                let dxhat = g_row[j] * gv_[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let inv_d = 1.0 / d as f64;
                            let out = &mut buf[i2 * d..(i2 + 1) * d];
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv_std;
                                let dxhat = g_row[j] * gv_[j];
                                out[j] += inv_std
                                    * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                            }
                        }
                    });
                    acc_with(parents, *gain, &[d], |buf| {
                        for i2 in 0..n {
                            let row = &xv[i2 * d..(i2 + 1) * d];
                            let (mean, inv_std) = row_moments(row, *eps);
                            for j in 0..d {
                                buf[j] += g[i2 * d + j] * (row[j] - mean) * inv_std;
                            }
                        }
                    });
                    acc_with(parents, *bias, &[d], |buf| {
                        for i2 in 0..n {
                            for (o, &gvv) in buf.iter_mut().zip(&g[i2 * d..(i2 + 1) * d]) {
                                *o += gvv;
                            }
                        }
                    });
                }
                Op::ConcatRows { a, b } => {
                    let c = node.value.shape()[1];
                    let ra = self.value(*a).shape()[0];
                    let rb = self.value(*b).shape()[0];
                    acc_with(parents, *a, &[ra, c], |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g[..ra * c]) {
                            *o += gv;
                        }
                    });
                    acc_with(parents, *b, &[rb, c], |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g[ra * c..]) {
                            *o += gv;
                        }
                    });
                }
                Op::ConcatCols { a, b } => {
                    let r = node.value.shape()[0];
                    let ca = self.value(*a).shape()[1];
                    let cb = self.value(*b).shape()[1];
                    let w = ca + cb;
                    acc_with(parents, *a, &[r, ca], |buf| {
                        for i2 in 0..r {
                            for j in 0..ca {
                                buf[i2 * ca + j] += g[i2 * w + j];
                            }
                        }
                    });
                    acc_with(parents, *b, &[r, cb], |buf| {
                        for i2 in 0..r {
                            for j in 0..cb {
                                buf[i2 * cb + j] += g[i2 * w + ca + j];
                            }
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let (len, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let (r, _) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    acc_with(parents, *x, &[r, c], |buf| {
                        for (o, &gv) in buf[start * c..(start + len) * c].iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let c = node.value.shape()[1];
                    let r = self.value(*x).shape()[0];
                    acc_with(parents, *x, &[r, c], |buf| {
                        for (pos, &i2) in idx.iter().enumerate() {
                            for (o, &gv) in
                                buf[i2 * c..(i2 + 1) * c].iter_mut().zip(&g[pos * c..(pos + 1) * c])
                            {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::GatherCols { x, idx } => {
                    let r = node.value.shape()[0];
                    let c = self.value(*x).shape()[1];
                    let k = idx.len();
                    acc_with(parents, *x, &[r, c], |buf| {
                        for i2 in 0..r {
                            for (pos, &j) in idx.iter().enumerate() {
                                buf[i2 * c + j] += g[i2 * k + pos];
                            }
                        }
                    });
                }
                Op::EmbedLookup { table, ids } => {
                    let d = node.value.shape()[1];
                    let v = self.value(*table).shape()[0];
                    acc_with(parents, *table, &[v, d], |buf| {
                        for (pos, &id) in ids.iter().enumerate() {
                            let i2 = id as usize;
                            for (o, &gv) in
                                buf[i2 * d..(i2 + 1) * d].iter_mut().zip(&g[pos * d..(pos + 1) * d])
                            {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let (n, v) = (
                        self.value(*logits).shape()[0],
                        self.value(*logits).shape()[1],
                    );
                    let src = self.value(*logits).data();
                    let total: f64 = weights.iter().sum();
                    let gscale = g[0] / total;
                    acc_with(parents, *logits, &[n, v], |buf| {
                        for i2 in 0..n {
                            if weights[i2] == 0.0 {
                                continue;
                            }
                            let row = &src[i2 * v..(i2 + 1) * v];
                            let max = row.iter().fold(f64::NEG_INFINITY, |m2, &x| m2.max(x));
                            let mut denom = 0.0;
                            for &x in row {
                                denom += (x - max).exp();
                            }
                            let w = weights[i2] * gscale;
                            let out = &mut buf[i2 * v..(i2 + 1) * v];
                            for j in 0..v {
                                let p = (row[j] - max).exp() / denom;
                                out[j] += w * p;
                            }
                            out[targets[i2] as usize] -= w;
                        }
                    });
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    acc_with(parents, *x, &shape, |buf| {
                        for o in buf.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for &v in row {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Runs `f` over the gradient buffer for `id`, allocating zeros on first
/// touch. `f` must add its contribution, never overwrite.
fn acc_with(grads: &mut [Option<Tensor>], id: VarId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()).expect("gradient shape"));
    }
    f(slot.as_mut().expect("just filled").data_mut());
}
