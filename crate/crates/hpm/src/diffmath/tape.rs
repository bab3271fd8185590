//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward ops execute eagerly and record themselves; `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products. Nodes are stored
//! in topological order by construction, so the reverse sweep visits each
//! node exactly once. A tape is confined to one thread.

use crate::diffmath::scalarfn;
use crate::diffmath::tensor::Tensor;
use crate::error::{HpmError, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Slot {
    fn numel(&self) -> usize {
        self.data.len()
    }
    fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }
    fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.data.len()
        }
    }
}

/// One recorded primitive application. Saved fields are whatever the
/// backward rule needs beyond the input/output values.
#[derive(Debug, Clone)]
enum Op {
    MatMul { a: Var, b: Var, out: Var },
    Transpose { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    AddRow { x: Var, row: Var, out: Var },
    Gelu { x: Var, out: Var },
    Logistic { x: Var, out: Var },
    Softplus { x: Var, out: Var },
    Exp { x: Var, out: Var },
    Ln { x: Var, out: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows { x: Var, out: Var },
    L2NormalizeRows { x: Var, eps: f64, out: Var, norms: Vec<f64> },
    GatherRows { x: Var, ids: Vec<usize>, out: Var },
    AssembleRows { kept: Var, fill: Var, ids: Vec<usize>, out: Var },
    SliceCols { x: Var, start: usize, len: usize, out: Var },
    ConcatCols { parts: Vec<Var>, out: Var },
    RowMean { x: Var, out: Var },
    SumAll { x: Var, out: Var },
    Reshape { x: Var, out: Var },
}

/// Recorded computation: slots hold values, ops hold the replay order.
#[derive(Debug, Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    /// Persistent per-leaf gradient accumulators; only leaves with
    /// requires_grad receive entries. Survives across backward calls
    /// (repeated backward without reset accumulates).
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn alloc(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.slots.push(Slot { shape, data, requires_grad });
        self.leaf_grads.push(None);
        Var(self.slots.len() - 1)
    }

    /// Register a tensor as a leaf. Data is copied; requires_grad carries over.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.alloc(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Leaf that never receives gradient (targets, positional tables, masks).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.alloc(shape, data, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.alloc(vec![1], vec![v], false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.slots[v.0].data
    }

    /// Forward value copied out as a standalone tensor (detached).
    pub fn detach(&self, v: Var) -> Tensor {
        Tensor::new(self.slots[v.0].shape.clone(), self.slots[v.0].data.clone()).unwrap()
    }

    /// Accumulated leaf gradient; zeros for leaves no backward pass reached.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match &self.leaf_grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.slots[v.0].numel()],
        }
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.slots[v.0];
        if s.shape.len() == 2 {
            Ok((s.shape[0], s.shape[1]))
        } else {
            Err(HpmError::Shape { op, lhs: s.shape.clone(), rhs: vec![] })
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.slots[a.0].shape != self.slots[b.0].shape {
            return Err(HpmError::Shape {
                op,
                lhs: self.slots[a.0].shape.clone(),
                rhs: self.slots[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    // ---- primitives ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(HpmError::Shape {
                op: "matmul",
                lhs: self.slots[a.0].shape.clone(),
                rhs: self.slots[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.slots[a.0].data, &self.slots[b.0].data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        let o = self.alloc(vec![m, n], out, rg);
        self.ops.push(Op::MatMul { a, b, out: o });
        Ok(o)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_2d("transpose", x)?;
        let src = &self.slots[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        let o = self.alloc(vec![c, r], out, rg);
        self.ops.push(Op::Transpose { x, out: o });
        Ok(o)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.slots[a.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Add { a, b, out: o });
        Ok(o)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.slots[a.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Sub { a, b, out: o });
        Ok(o)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.slots[a.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Mul { a, b, out: o });
        Ok(o)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| c * v).collect();
        let rg = self.rg(x);
        let shape = self.slots[x.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Scale { x, c, out: o });
        o
    }

    /// rows x d plus a broadcast length-d row (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, d) = self.require_2d("add_row", x)?;
        if self.slots[row.0].numel() != d {
            return Err(HpmError::Shape {
                op: "add_row",
                lhs: self.slots[x.0].shape.clone(),
                rhs: self.slots[row.0].shape.clone(),
            });
        }
        let mut data = self.slots[x.0].data.clone();
        let rowv = &self.slots[row.0].data;
        for i in 0..r {
            for j in 0..d {
                data[i * d + j] += rowv[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        let o = self.alloc(vec![r, d], data, rg);
        self.ops.push(Op::AddRow { x, row, out: o });
        Ok(o)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|&v| scalarfn::gelu(v)).collect();
        let rg = self.rg(x);
        let shape = self.slots[x.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Gelu { x, out: o });
        o
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|&v| scalarfn::logistic(v)).collect();
        let rg = self.rg(x);
        let shape = self.slots[x.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Logistic { x, out: o });
        o
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|&v| scalarfn::softplus(v)).collect();
        let rg = self.rg(x);
        let shape = self.slots[x.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Softplus { x, out: o });
        o
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        let shape = self.slots[x.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Exp { x, out: o });
        o
    }

    /// Natural log; the caller guarantees positive inputs.
    pub fn ln(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.slots[x.0].data.iter().map(|v| v.ln()).collect();
        let rg = self.rg(x);
        let shape = self.slots[x.0].shape.clone();
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Ln { x, out: o });
        o
    }

    /// log sigma(x) composed as -softplus(-x); stable down to x = -700.
    pub fn log_logistic(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        let sp = self.softplus(neg);
        self.scale(sp, -1.0)
    }

    /// Row-wise standardization then affine transform by gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.require_2d("layer_norm", x)?;
        if d == 0 {
            return Err(HpmError::Shape { op: "layer_norm", lhs: vec![r, 0], rhs: vec![] });
        }
        if self.slots[gain.0].numel() != d || self.slots[bias.0].numel() != d {
            return Err(HpmError::Shape {
                op: "layer_norm",
                lhs: vec![d],
                rhs: vec![self.slots[gain.0].numel(), self.slots[bias.0].numel()],
            });
        }
        if eps <= 0.0 {
            return Err(HpmError::Contract("layer_norm requires eps > 0".into()));
        }
        let src = &self.slots[x.0].data;
        let g = &self.slots[gain.0].data;
        let b = &self.slots[bias.0].data;
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                out[i * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let o = self.alloc(vec![r, d], out, rg);
        self.ops.push(Op::LayerNorm { x, gain, bias, out: o, xhat, inv_std });
        Ok(o)
    }

    /// Max-subtracted row softmax; each output row sums to 1.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.require_2d("softmax_rows", x)?;
        let src = &self.slots[x.0].data;
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[i * d + j] /= sum;
            }
        }
        let rg = self.rg(x);
        let o = self.alloc(vec![r, d], out, rg);
        self.ops.push(Op::SoftmaxRows { x, out: o });
        Ok(o)
    }

    /// Each row divided by max(||row||, eps); zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(HpmError::Contract("l2_normalize_rows requires eps > 0".into()));
        }
        let (r, d) = self.require_2d("l2_normalize_rows", x)?;
        let src = &self.slots[x.0].data;
        let mut out = vec![0.0; r * d];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            norms[i] = denom;
            for j in 0..d {
                out[i * d + j] = row[j] / denom;
            }
        }
        let rg = self.rg(x);
        let o = self.alloc(vec![r, d], out, rg);
        self.ops.push(Op::L2NormalizeRows { x, eps, out: o, norms });
        Ok(o)
    }

    /// Select rows by id, in the given order. Duplicate ids are legal;
    /// backward scatter-adds into the source.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (r, d) = self.require_2d("gather_rows", x)?;
        for &id in ids {
            if id >= r {
                return Err(HpmError::Index { id, len: r });
            }
        }
        let src = &self.slots[x.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(x);
        let o = self.alloc(vec![ids.len(), d], out, rg);
        self.ops.push(Op::GatherRows { x, ids: ids.to_vec(), out: o });
        Ok(o)
    }

    /// Build an n x d matrix: row `ids[r]` comes from `kept` row r, every
    /// other row is the broadcast `fill` row (the decoder mask token).
    pub fn assemble_rows(&mut self, kept: Var, fill: Var, ids: &[usize], n: usize) -> Result<Var> {
        let (k, d) = self.require_2d("assemble_rows", kept)?;
        if k != ids.len() {
            return Err(HpmError::Contract(format!(
                "assemble_rows: {} kept rows but {} ids",
                k,
                ids.len()
            )));
        }
        if self.slots[fill.0].numel() != d {
            return Err(HpmError::Shape {
                op: "assemble_rows",
                lhs: vec![d],
                rhs: self.slots[fill.0].shape.clone(),
            });
        }
        let mut seen = vec![false; n];
        for &id in ids {
            if id >= n {
                return Err(HpmError::Index { id, len: n });
            }
            if seen[id] {
                return Err(HpmError::Contract(format!("assemble_rows: duplicate id {id}")));
            }
            seen[id] = true;
        }
        let fillv = self.slots[fill.0].data.clone();
        let keptv = &self.slots[kept.0].data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            out[i * d..(i + 1) * d].copy_from_slice(&fillv);
        }
        for (r, &id) in ids.iter().enumerate() {
            out[id * d..(id + 1) * d].copy_from_slice(&keptv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(kept) || self.rg(fill);
        let o = self.alloc(vec![n, d], out, rg);
        self.ops.push(Op::AssembleRows { kept, fill, ids: ids.to_vec(), out: o });
        Ok(o)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.require_2d("slice_cols", x)?;
        if start + len > d || len == 0 {
            return Err(HpmError::Contract(format!(
                "slice_cols: [{start}, {}) out of width {d}",
                start + len
            )));
        }
        let src = &self.slots[x.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        let o = self.alloc(vec![r, len], out, rg);
        self.ops.push(Op::SliceCols { x, start, len, out: o });
        Ok(o)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(HpmError::Contract("concat_cols: empty part list".into()));
        }
        let (r, _) = self.require_2d("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (rp, dp) = self.require_2d("concat_cols", p)?;
            if rp != r {
                return Err(HpmError::Shape {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![rp],
                });
            }
            widths.push(dp);
            total += dp;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.slots[p.0].data;
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let o = self.alloc(vec![r, total], out, rg);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out: o });
        Ok(o)
    }

    /// rows x d -> rows x 1, mean over each row.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.require_2d("row_mean", x)?;
        let src = &self.slots[x.0].data;
        let out: Vec<f64> = (0..r)
            .map(|i| src[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64)
            .collect();
        let rg = self.rg(x);
        let o = self.alloc(vec![r, 1], out, rg);
        self.ops.push(Op::RowMean { x, out: o });
        Ok(o)
    }

    /// Sum of every element, as a scalar (shape [1]).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.slots[x.0].data.iter().sum();
        let rg = self.rg(x);
        let o = self.alloc(vec![1], vec![s], rg);
        self.ops.push(Op::SumAll { x, out: o });
        o
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.slots[x.0].numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Same data, new shape; gradients pass through unchanged.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.slots[x.0].numel() {
            return Err(HpmError::Shape {
                op: "reshape",
                lhs: self.slots[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.slots[x.0].data.clone();
        let rg = self.rg(x);
        let o = self.alloc(shape, data, rg);
        self.ops.push(Op::Reshape { x, out: o });
        Ok(o)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar root. Each call propagates a fresh seed
    /// of 1 and adds the result into the persistent leaf accumulators, so
    /// calling twice without reset doubles every leaf gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.slots[root.0].numel() != 1 {
            return Err(HpmError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.slots[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.slots[i].requires_grad {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        None => self.leaf_grads[i] = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, c) in g.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            None => grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::MatMul { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let m = self.slots[a.0].rows();
                let k = self.slots[a.0].cols();
                let n = self.slots[b.0].cols();
                // grad_a = g . b^T
                let bv = &self.slots[b.0].data;
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[kk * n + j];
                        }
                        da[i * k + kk] = s;
                    }
                }
                Self::accum(grads, *a, &da);
                // grad_b = a^T . g
                let av = &self.slots[a.0].data;
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            drow[j] += aik * grow[j];
                        }
                    }
                }
                Self::accum(grads, *b, &db);
            }
            Op::Transpose { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let c = self.slots[x.0].cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                Self::accum(grads, *x, &dx);
            }
            Op::Add { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                Self::accum(grads, *a, &g);
                Self::accum(grads, *b, &g);
            }
            Op::Sub { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                Self::accum(grads, *a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                Self::accum(grads, *b, &neg);
            }
            Op::Mul { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let da: Vec<f64> =
                    g.iter().zip(&self.slots[b.0].data).map(|(gv, bv)| gv * bv).collect();
                Self::accum(grads, *a, &da);
                let db: Vec<f64> =
                    g.iter().zip(&self.slots[a.0].data).map(|(gv, av)| gv * av).collect();
                Self::accum(grads, *b, &db);
            }
            Op::Scale { x, c, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g.iter().map(|v| c * v).collect();
                Self::accum(grads, *x, &dx);
            }
            Op::AddRow { x, row, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                Self::accum(grads, *x, &g);
                let d = self.slots[row.0].numel();
                let r = self.slots[x.0].rows();
                let mut drow = vec![0.0; d];
                for i in 0..r {
                    for j in 0..d {
                        drow[j] += g[i * d + j];
                    }
                }
                Self::accum(grads, *row, &drow);
            }
            Op::Gelu { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.slots[x.0].data)
                    .map(|(gv, &xv)| gv * scalarfn::gelu_deriv(xv))
                    .collect();
                Self::accum(grads, *x, &dx);
            }
            Op::Logistic { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.slots[out.0].data)
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                Self::accum(grads, *x, &dx);
            }
            Op::Softplus { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.slots[x.0].data)
                    .map(|(gv, &xv)| gv * scalarfn::logistic(xv))
                    .collect();
                Self::accum(grads, *x, &dx);
            }
            Op::Exp { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.slots[out.0].data)
                    .map(|(gv, &ev)| gv * ev)
                    .collect();
                Self::accum(grads, *x, &dx);
            }
            Op::Ln { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.slots[x.0].data)
                    .map(|(gv, &xv)| gv / xv)
                    .collect();
                Self::accum(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, out, xhat, inv_std } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let d = self.slots[x.0].cols();
                let gainv = &self.slots[gain.0].data;
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let grow = &g[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgain[j] += grow[j] * xh[j];
                        dbias[j] += grow[j];
                        let dxh = grow[j] * gainv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gainv[j];
                        dx[i * d + j] = inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                Self::accum(grads, *x, &dx);
                Self::accum(grads, *gain, &dgain);
                Self::accum(grads, *bias, &dbias);
            }
            Op::SoftmaxRows { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let d = self.slots[x.0].cols();
                let y = &self.slots[out.0].data;
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let base = i * d;
                    let dot: f64 = (0..d).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..d {
                        dx[base + j] = y[base + j] * (g[base + j] - dot);
                    }
                }
                Self::accum(grads, *x, &dx);
            }
            Op::L2NormalizeRows { x, eps, out, norms } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let d = self.slots[x.0].cols();
                let y = &self.slots[out.0].data;
                let mut dx = vec![0.0; r * d];
                for (i, &denom) in norms.iter().enumerate().take(r) {
                    let base = i * d;
                    if denom <= *eps {
                        // Guard branch: y = x / eps is linear.
                        for j in 0..d {
                            dx[base + j] = g[base + j] / eps;
                        }
                    } else {
                        let dot: f64 = (0..d).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..d {
                            dx[base + j] = (g[base + j] - y[base + j] * dot) / denom;
                        }
                    }
                }
                Self::accum(grads, *x, &dx);
            }
            Op::GatherRows { x, ids, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let d = self.slots[x.0].cols();
                let mut dx = vec![0.0; r * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dx[id * d + j] += g[row * d + j];
                    }
                }
                Self::accum(grads, *x, &dx);
            }
            Op::AssembleRows { kept, fill, ids, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let n = self.slots[out.0].rows();
                let d = self.slots[out.0].cols();
                let mut dkept = vec![0.0; ids.len() * d];
                for (r, &id) in ids.iter().enumerate() {
                    dkept[r * d..(r + 1) * d].copy_from_slice(&g[id * d..(id + 1) * d]);
                }
                Self::accum(grads, *kept, &dkept);
                let mut placed = vec![false; n];
                for &id in ids {
                    placed[id] = true;
                }
                let mut dfill = vec![0.0; d];
                for i in 0..n {
                    if !placed[i] {
                        for j in 0..d {
                            dfill[j] += g[i * d + j];
                        }
                    }
                }
                Self::accum(grads, *fill, &dfill);
            }
            Op::SliceCols { x, start, len, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let d = self.slots[x.0].cols();
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    for j in 0..*len {
                        dx[i * d + start + j] = g[i * len + j];
                    }
                }
                Self::accum(grads, *x, &dx);
            }
            Op::ConcatCols { parts, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[out.0].rows();
                let total = self.slots[out.0].cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.slots[p.0].cols();
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    Self::accum(grads, p, &dp);
                    offset += w;
                }
            }
            Op::RowMean { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let r = self.slots[x.0].rows();
                let d = self.slots[x.0].cols();
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let gv = g[i] / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = gv;
                    }
                }
                Self::accum(grads, *x, &dx);
            }
            Op::SumAll { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx = vec![g[0]; self.slots[x.0].numel()];
                Self::accum(grads, *x, &dx);
            }
            Op::Reshape { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                Self::accum(grads, *x, &g);
            }
        }
    }
}

/// out += a . b with a: m x k, b: k x n, all row-major. The k-inner loop
/// order keeps b accesses contiguous so the compiler can vectorize.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}
