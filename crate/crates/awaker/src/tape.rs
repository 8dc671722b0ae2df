//! Wengert tape: reverse-mode AD over flat f64 buffers.
//!
//! Operations execute eagerly and are recorded in forward order; `backward`
//! replays them in reverse, visiting every recorded node exactly once.
//! Gradients accumulate additively when a buffer feeds several ops. A buffer
//! only receives a gradient if it is a trainable leaf or lies on a path to
//! one, so frozen weights cost nothing extra in the backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a buffer in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op {
    /// out[m×n] = a[m×k] · b[k×n]
    Matmul {
        a: BufId,
        b: BufId,
        out: BufId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out[m×n] = a[m×k] · b[n×k]^T
    MatmulNT {
        a: BufId,
        b: BufId,
        out: BufId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out[n] = w[n×d] · x[d]
    MatVec {
        w: BufId,
        x: BufId,
        out: BufId,
        n: usize,
        d: usize,
    },
    Add {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Mul {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    /// out = mul·x + add, elementwise; only the slope matters in backward
    Affine {
        x: BufId,
        out: BufId,
        mul: f64,
    },
    /// out = s[0] · x with a scalar buffer s
    ScaleBy {
        x: BufId,
        s: BufId,
        out: BufId,
    },
    Silu {
        x: BufId,
        out: BufId,
    },
    RmsNorm {
        x: BufId,
        w: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
        /// 1/rms per row, saved by the forward pass.
        inv_rms: Vec<f64>,
    },
    RowSoftmax {
        x: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
    },
    /// Row-wise softmax over the causal prefix j ≤ i of a t×t score matrix;
    /// entries above the diagonal are zero.
    CausalRowSoftmax {
        x: BufId,
        out: BufId,
        t: usize,
    },
    /// Rotary position encoding applied row-wise (row index = position).
    Rope {
        x: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
        base: f64,
    },
    Embedding {
        table: BufId,
        out: BufId,
        ids: Vec<usize>,
        dim: usize,
    },
    SliceCols {
        x: BufId,
        out: BufId,
        rows: usize,
        cols_in: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(BufId, usize)>,
        out: BufId,
        rows: usize,
    },
    GatherScalar {
        x: BufId,
        out: BufId,
        idx: usize,
    },
    Sum {
        x: BufId,
        out: BufId,
    },
    /// Mean negative log-likelihood over masked positions.
    CrossEntropyMasked {
        logits: BufId,
        out: BufId,
        rows: usize,
        vocab: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
}

/// Gradient tape. One per forward/backward cycle; drop it afterwards.
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> BufId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = BufId(self.bufs.len());
        self.bufs.push(Buf {
            data,
            shape,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> BufId {
        self.push(data, shape, false)
    }

    /// Leaf registered from a tensor; copies the data in. The buffer takes
    /// part in gradient flow iff the tensor is marked trainable.
    pub fn param(&mut self, t: &Tensor) -> BufId {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id.0].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id.0].shape
    }

    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn take_grad(&mut self, id: BufId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn needs(&self, id: BufId) -> bool {
        self.bufs[id.0].needs_grad
    }

    fn dims2(&self, id: BufId, op: &'static str) -> Result<(usize, usize)> {
        match *self.bufs[id.0].shape {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.bufs[id.0].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm(self.value(a), m, k, self.value(b), n);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(data, vec![m, n], needs);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    /// `a · b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm_nt(self.value(a), m, k, self.value(b), n);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(data, vec![m, n], needs);
        self.ops.push(Op::MatmulNT { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn matvec(&mut self, w: BufId, x: BufId) -> Result<BufId> {
        let (n, d) = self.dims2(w, "matvec")?;
        if self.shape(x) != [d] {
            return Err(Error::Shape {
                op: "matvec",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut data = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += wv[i * d + j] * xv[j];
            }
            data[i] = acc;
        }
        let needs = self.needs(w) || self.needs(x);
        let out = self.push(data, vec![n], needs);
        self.ops.push(Op::MatVec { w, x, out, n, d });
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(data, shape, needs);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(data, shape, needs);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn affine(&mut self, x: BufId, mul: f64, add: f64) -> BufId {
        let data: Vec<f64> = self.value(x).iter().map(|v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        let out = self.push(data, shape, needs);
        self.ops.push(Op::Affine { x, out, mul });
        out
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> BufId {
        self.affine(x, c, 0.0)
    }

    pub fn scale_by(&mut self, x: BufId, s: BufId) -> Result<BufId> {
        if self.bufs[s.0].data.len() != 1 {
            return Err(Error::Rank(format!(
                "scale_by expects a scalar, got shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s)[0];
        let data: Vec<f64> = self.value(x).iter().map(|v| sv * v).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(s);
        let out = self.push(data, shape, needs);
        self.ops.push(Op::ScaleBy { x, s, out });
        Ok(out)
    }

    pub fn silu(&mut self, x: BufId) -> BufId {
        let data: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| v * (1.0 / (1.0 + (-v).exp())))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        let out = self.push(data, shape, needs);
        self.ops.push(Op::Silu { x, out });
        out
    }

    pub fn rms_norm(&mut self, x: BufId, w: BufId, eps: f64) -> Result<BufId> {
        let (rows, cols) = self.dims2(x, "rms_norm")?;
        if self.shape(w) != [cols] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let xv = self.value(x);
        let wv = self.value(w).to_vec();
        let mut data = vec![0.0; rows * cols];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for c in 0..cols {
                data[r * cols + c] = wv[c] * row[c] * inv;
            }
        }
        let needs = self.needs(x) || self.needs(w);
        let out = self.push(data, vec![rows, cols], needs);
        self.ops.push(Op::RmsNorm {
            x,
            w,
            out,
            rows,
            cols,
            inv_rms,
        });
        Ok(out)
    }

    pub fn row_softmax(&mut self, x: BufId) -> Result<BufId> {
        let (rows, cols) = self.dims2(x, "row_softmax")?;
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("row_softmax: NaN in input".into()));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let needs = self.needs(x);
        let out = self.push(data, vec![rows, cols], needs);
        self.ops.push(Op::RowSoftmax { x, out, rows, cols });
        Ok(out)
    }

    pub fn causal_row_softmax(&mut self, x: BufId) -> Result<BufId> {
        let (t, t2) = self.dims2(x, "causal_row_softmax")?;
        if t != t2 {
            return Err(Error::Shape {
                op: "causal_row_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![t, t],
            });
        }
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("causal_row_softmax: NaN in input".into()));
        }
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            let row = &xv[i * t..i * t + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                data[i * t + j] = e;
                sum += e;
            }
            for j in 0..=i {
                data[i * t + j] /= sum;
            }
        }
        let needs = self.needs(x);
        let out = self.push(data, vec![t, t], needs);
        self.ops.push(Op::CausalRowSoftmax { x, out, t });
        Ok(out)
    }

    pub fn rope(&mut self, x: BufId, base: f64) -> Result<BufId> {
        let (rows, cols) = self.dims2(x, "rope")?;
        if cols % 2 != 0 {
            return Err(Error::Shape {
                op: "rope",
                lhs: self.shape(x).to_vec(),
                rhs: vec![rows, cols + 1],
            });
        }
        let xv = self.value(x);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            rope_row(&xv[r * cols..(r + 1) * cols], r, cols, base, false, &mut data[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(x);
        let out = self.push(data, vec![rows, cols], needs);
        self.ops.push(Op::Rope {
            x,
            out,
            rows,
            cols,
            base,
        });
        Ok(out)
    }

    pub fn embedding(&mut self, table: BufId, ids: &[usize]) -> Result<BufId> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Input("embedding: empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Input(format!(
                "embedding: token id {bad} out of range (vocab {vocab})"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        let out = self.push(data, vec![ids.len(), dim], needs);
        self.ops.push(Op::Embedding {
            table,
            out,
            ids: ids.to_vec(),
            dim,
        });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> Result<BufId> {
        let (rows, cols_in) = self.dims2(x, "slice_cols")?;
        if start + len > cols_in || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols_in + start..r * cols_in + start + len]);
        }
        let needs = self.needs(x);
        let out = self.push(data, vec![rows, len], needs);
        self.ops.push(Op::SliceCols {
            x,
            out,
            rows,
            cols_in,
            start,
            len,
        });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols: no parts".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                data.extend_from_slice(&pv[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = self.push(data, vec![rows, total], needs);
        self.ops.push(Op::ConcatCols {
            parts: parts.iter().copied().zip(widths).collect(),
            out,
            rows,
        });
        Ok(out)
    }

    pub fn gather_scalar(&mut self, x: BufId, idx: usize) -> Result<BufId> {
        let n = self.bufs[x.0].data.len();
        if idx >= n {
            return Err(Error::Input(format!(
                "gather_scalar: index {idx} out of range {n}"
            )));
        }
        let v = self.value(x)[idx];
        let needs = self.needs(x);
        let out = self.push(vec![v], vec![1], needs);
        self.ops.push(Op::GatherScalar { x, out, idx });
        Ok(out)
    }

    pub fn sum(&mut self, x: BufId) -> BufId {
        let v: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        let out = self.push(vec![v], vec![1], needs);
        self.ops.push(Op::Sum { x, out });
        out
    }

    /// Mean negative log-likelihood of `targets` over positions where `mask`
    /// is true. Loss is computed on those positions only.
    pub fn cross_entropy_masked(
        &mut self,
        logits: BufId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<BufId> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy_masked")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy_masked",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Input(
                "cross_entropy_masked: mask selects no positions (empty loss)".into(),
            ));
        }
        for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
            if m && tgt >= vocab {
                return Err(Error::Input(format!(
                    "cross_entropy_masked: target {tgt} at position {t} out of range (vocab {vocab})"
                )));
            }
        }
        let lv = self.value(logits);
        let mut loss = 0.0;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let row = &lv[t * vocab..(t + 1) * vocab];
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("cross_entropy_masked: NaN logits".into()));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += log_sum - row[targets[t]];
        }
        loss /= count as f64;
        let needs = self.needs(logits);
        let out = self.push(vec![loss], vec![1], needs);
        self.ops.push(Op::CrossEntropyMasked {
            logits,
            out,
            rows,
            vocab,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        });
        Ok(out)
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accum(&mut self, id: BufId, delta: &[f64]) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// trainable leaf reachable from it.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.bufs[loss.0].data.len() != 1 {
            return Err(Error::Rank(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.grads[loss.0].is_none() {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn backward_op(&mut self, op_idx: usize) {
        // Ops whose output got no gradient contribute nothing.
        macro_rules! d_out {
            ($out:expr) => {
                match self.grads[$out.0].clone() {
                    Some(g) => g,
                    None => return,
                }
            };
        }

        // The op list is replayed by index so ops can be matched immutably
        // while gradients accumulate mutably.
        let op = &self.ops[op_idx];
        match op {
            &Op::Matmul { a, b, out, m, k, n } => {
                let d = d_out!(out);
                if self.needs(a) {
                    let da = mm_nt(&d, m, n, self.value(b), k);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db = mm_tn(self.value(a), m, k, &d, n);
                    self.accum(b, &db);
                }
            }
            &Op::MatmulNT { a, b, out, m, k, n } => {
                let d = d_out!(out);
                if self.needs(a) {
                    let da = mm(&d, m, n, self.value(b), k);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db = mm_tn(&d, m, n, self.value(a), k);
                    self.accum(b, &db);
                }
            }
            &Op::MatVec { w, x, out, n, d } => {
                let dout = d_out!(out);
                if self.needs(w) {
                    let xv = self.value(x);
                    let mut dw = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dw[i * d + j] = dout[i] * xv[j];
                        }
                    }
                    self.accum(w, &dw);
                }
                if self.needs(x) {
                    let wv = self.value(w);
                    let mut dx = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dx[j] += wv[i * d + j] * dout[i];
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::Add { a, b, out } => {
                let d = d_out!(out);
                if self.needs(a) {
                    self.accum(a, &d);
                }
                if self.needs(b) {
                    self.accum(b, &d);
                }
            }
            &Op::Mul { a, b, out } => {
                let d = d_out!(out);
                if self.needs(a) {
                    let da: Vec<f64> = d.iter().zip(self.value(b)).map(|(g, v)| g * v).collect();
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = d.iter().zip(self.value(a)).map(|(g, v)| g * v).collect();
                    self.accum(b, &db);
                }
            }
            &Op::Affine { x, out, mul } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let dx: Vec<f64> = d.iter().map(|g| mul * g).collect();
                    self.accum(x, &dx);
                }
            }
            &Op::ScaleBy { x, s, out } => {
                let d = d_out!(out);
                let sv = self.value(s)[0];
                if self.needs(x) {
                    let dx: Vec<f64> = d.iter().map(|g| sv * g).collect();
                    self.accum(x, &dx);
                }
                if self.needs(s) {
                    let ds: f64 = d.iter().zip(self.value(x)).map(|(g, v)| g * v).sum();
                    self.accum(s, &[ds]);
                }
            }
            &Op::Silu { x, out } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.value(x))
                        .map(|(g, &v)| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    self.accum(x, &dx);
                }
            }
            Op::RmsNorm {
                x,
                w,
                out,
                rows,
                cols,
                inv_rms,
            } => {
                let (x, w, out, rows, cols) = (*x, *w, *out, *rows, *cols);
                let inv_rms = inv_rms.clone();
                let d = d_out!(out);
                let xv = self.value(x).to_vec();
                let wv = self.value(w).to_vec();
                if self.needs(x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let base = r * cols;
                        // y_c = w_c·x_c·inv; d_x = w∘d·inv − x·(Σ d∘w∘x)·inv³/cols
                        let dot: f64 = (0..cols)
                            .map(|c| d[base + c] * wv[c] * xv[base + c])
                            .sum();
                        let coef = dot * inv * inv * inv / cols as f64;
                        for c in 0..cols {
                            dx[base + c] = wv[c] * d[base + c] * inv - xv[base + c] * coef;
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; cols];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for c in 0..cols {
                            dw[c] += d[r * cols + c] * xv[r * cols + c] * inv;
                        }
                    }
                    self.accum(w, &dw);
                }
            }
            &Op::RowSoftmax { x, out, rows, cols } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let p = self.value(out).to_vec();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| d[base + c] * p[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = p[base + c] * (d[base + c] - dot);
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::CausalRowSoftmax { x, out, t } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let p = self.value(out).to_vec();
                    let mut dx = vec![0.0; t * t];
                    for i in 0..t {
                        let base = i * t;
                        let dot: f64 = (0..=i).map(|j| d[base + j] * p[base + j]).sum();
                        for j in 0..=i {
                            dx[base + j] = p[base + j] * (d[base + j] - dot);
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            &Op::Rope {
                x,
                out,
                rows,
                cols,
                base,
            } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        rope_row(
                            &d[r * cols..(r + 1) * cols],
                            r,
                            cols,
                            base,
                            true,
                            &mut dx[r * cols..(r + 1) * cols],
                        );
                    }
                    self.accum(x, &dx);
                }
            }
            Op::Embedding {
                table,
                out,
                ids,
                dim,
            } => {
                let (table, out, dim) = (*table, *out, *dim);
                let ids = ids.clone();
                let d = d_out!(out);
                if self.needs(table) {
                    let vocab = self.shape(table)[0];
                    let mut dt = vec![0.0; vocab * dim];
                    for (t, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            dt[id * dim + c] += d[t * dim + c];
                        }
                    }
                    self.accum(table, &dt);
                }
            }
            &Op::SliceCols {
                x,
                out,
                rows,
                cols_in,
                start,
                len,
            } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let mut dx = vec![0.0; rows * cols_in];
                    for r in 0..rows {
                        dx[r * cols_in + start..r * cols_in + start + len]
                            .copy_from_slice(&d[r * len..(r + 1) * len]);
                    }
                    self.accum(x, &dx);
                }
            }
            Op::ConcatCols { parts, out, rows } => {
                let (out, rows) = (*out, *rows);
                let parts = parts.clone();
                let d = d_out!(out);
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for (p, w) in parts {
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&d[r * total + offset..r * total + offset + w]);
                        }
                        self.accum(p, &dp);
                    }
                    offset += w;
                }
            }
            &Op::GatherScalar { x, out, idx } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let mut dx = vec![0.0; self.bufs[x.0].data.len()];
                    dx[idx] = d[0];
                    self.accum(x, &dx);
                }
            }
            &Op::Sum { x, out } => {
                let d = d_out!(out);
                if self.needs(x) {
                    let dx = vec![d[0]; self.bufs[x.0].data.len()];
                    self.accum(x, &dx);
                }
            }
            Op::CrossEntropyMasked {
                logits,
                out,
                rows,
                vocab,
                targets,
                mask,
                count,
            } => {
                let (logits, out, rows, vocab, count) = (*logits, *out, *rows, *vocab, *count);
                let (targets, mask) = (targets.clone(), mask.clone());
                let d = d_out!(out);
                if self.needs(logits) {
                    let lv = self.value(logits).to_vec();
                    let scale = d[0] / count as f64;
                    let mut dl = vec![0.0; rows * vocab];
                    for t in 0..rows {
                        if !mask[t] {
                            continue;
                        }
                        let row = &lv[t * vocab..(t + 1) * vocab];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in 0..vocab {
                            let e = (row[v] - max).exp();
                            dl[t * vocab + v] = e;
                            sum += e;
                        }
                        for v in 0..vocab {
                            dl[t * vocab + v] = dl[t * vocab + v] / sum * scale;
                        }
                        dl[t * vocab + targets[t]] -= scale;
                    }
                    self.accum(logits, &dl);
                }
            }
        }
    }
}

fn rope_row(src: &[f64], pos: usize, cols: usize, base: f64, invert: bool, dst: &mut [f64]) {
    let half = cols / 2;
    for i in 0..half {
        let freq = base.powf(-2.0 * i as f64 / cols as f64);
        let theta = pos as f64 * freq;
        let (sin, cos) = if invert {
            ((-theta).sin(), (-theta).cos())
        } else {
            (theta.sin(), theta.cos())
        };
        let a = src[2 * i];
        let b = src[2 * i + 1];
        dst[2 * i] = a * cos - b * sin;
        dst[2 * i + 1] = a * sin + b * cos;
    }
}

// ── Matmul kernels ───────────────────────────────────────────────────

/// out[m×n] = a[m×k] · b[k×n]
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// out[m×n] = a[m×k] · b[n×k]^T
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// out[k×n] = a[m×k]^T · b[m×n]
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let mut t = Tensor::new(shape, data).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.input(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let m = tape.input(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] · [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.input(vec![1.0, 2.0], vec![1, 2]);
        let b = tape.input(vec![3.0, 4.0], vec![2, 1]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[11.0]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let a_data: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let a = tape.input(a_data, vec![2, 3]);
        let z = tape.input(vec![0.0; 12], vec![3, 4]);
        let out = tape.matmul(a, z).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(vec![0.0; 6], vec![2, 3]);
        let b = tape.input(vec![0.0; 8], vec![4, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tensor(vec![3], vec![1.0, -2.0, 0.5]);
        let xid = tape.param(&x);
        let loss = tape.sum(xid);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tensor(vec![2], vec![1.0, 2.0]);
        let xid = tape.param(&x);
        let y = tape.affine(xid, 2.0, 0.0);
        assert!(matches!(tape.backward(y), Err(Error::Rank(_))));
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // loss = sum(2x) + sum(3x) → d_x = 5 per element
        let mut tape = Tape::new();
        let x = tensor(vec![2], vec![1.0, 1.0]);
        let xid = tape.param(&x);
        let a = tape.affine(xid, 2.0, 0.0);
        let b = tape.affine(xid, 3.0, 0.0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let frozen = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let fid = tape.param(&frozen);
        let loss = tape.sum(fid);
        tape.backward(loss).unwrap();
        assert!(tape.grad(fid).is_none());
    }

    #[test]
    fn quadratic_form_matches_finite_differences() {
        // loss = x^T W x with x, W trainable; FD step 1e-5, 64-bit
        let mut rng = Rng::new(11);
        let n = 4;
        let w = tensor(vec![n, n], (0..n * n).map(|_| rng.normal()).collect());
        let x = tensor(vec![n, 1], (0..n).map(|_| rng.normal()).collect());

        let loss_of = |wt: &Tensor, xt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let wid = tape.param(wt);
            let xid = tape.param(xt);
            let wx = tape.matmul(wid, xid).unwrap();
            let xs = tape.slice_cols(xid, 0, 1).unwrap(); // x as [n×1] already
            let prod = tape.mul(xs, wx).unwrap();
            let loss = tape.sum(prod);
            tape.value(loss)[0]
        };

        let mut tape = Tape::new();
        let wid = tape.param(&w);
        let xid = tape.param(&x);
        let wx = tape.matmul(wid, xid).unwrap();
        let xs = tape.slice_cols(xid, 0, 1).unwrap();
        let prod = tape.mul(xs, wx).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();

        let h = 1e-5;
        let wg = tape.grad(wid).unwrap().to_vec();
        for i in 0..n * n {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss_of(&wp, &x) - loss_of(&wm, &x)) / (2.0 * h);
            let rel = (wg[i] - fd).abs() / fd.abs().max(wg[i].abs()).max(1.0);
            assert!(rel < 1e-6, "dW[{i}]: analytic {} vs fd {fd}", wg[i]);
        }
        let xg = tape.grad(xid).unwrap().to_vec();
        for i in 0..n {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss_of(&w, &xp) - loss_of(&w, &xm)) / (2.0 * h);
            let rel = (xg[i] - fd).abs() / fd.abs().max(xg[i].abs()).max(1.0);
            assert!(rel < 1e-6, "dx[{i}]: analytic {} vs fd {fd}", xg[i]);
        }
    }

    /// Generic FD check: loss built from a single trainable tensor.
    fn fd_check<F>(shape: Vec<usize>, seed: u64, build: F)
    where
        F: Fn(&mut Tape, BufId) -> BufId,
    {
        let mut rng = Rng::new(seed);
        let numel: usize = shape.iter().product();
        let t = tensor(shape.clone(), (0..numel).map(|_| rng.normal() * 0.7).collect());

        let mut tape = Tape::new();
        let id = tape.param(&t);
        let loss = build(&mut tape, id);
        assert_eq!(tape.value(loss).len(), 1);
        tape.backward(loss).unwrap();
        let g = tape.grad(id).unwrap().to_vec();

        let h = 1e-5;
        for i in 0..numel {
            let eval = |delta: f64| -> f64 {
                let mut tp = t.clone();
                tp.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let id = tape.param(&tp);
                let loss = build(&mut tape, id);
                tape.value(loss)[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1.0);
            assert!(rel < 1e-5, "grad[{i}]: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn fd_silu() {
        fd_check(vec![2, 3], 5, |tape, x| {
            let y = tape.silu(x);
            tape.sum(y)
        });
    }

    #[test]
    fn fd_row_softmax() {
        fd_check(vec![2, 4], 6, |tape, x| {
            let p = tape.row_softmax(x).unwrap();
            // weight the entries so the gradient is nontrivial
            let w = tape.input((0..8).map(|i| i as f64 * 0.3 - 1.0).collect(), vec![2, 4]);
            let prod = tape.mul(p, w).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_causal_row_softmax() {
        fd_check(vec![3, 3], 7, |tape, x| {
            let p = tape.causal_row_softmax(x).unwrap();
            let w = tape.input((0..9).map(|i| (i as f64).sin()).collect(), vec![3, 3]);
            let prod = tape.mul(p, w).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_rms_norm() {
        fd_check(vec![2, 4], 8, |tape, x| {
            let w = tape.input(vec![0.9, 1.1, -0.5, 0.3], vec![4]);
            let y = tape.rms_norm(x, w, 1e-6).unwrap();
            let c = tape.input((0..8).map(|i| (i as f64) * 0.1 + 0.2).collect(), vec![2, 4]);
            let prod = tape.mul(y, c).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_rms_norm_weight() {
        // check the dw path too
        fd_check(vec![4], 9, |tape, w| {
            let x = tape.input(vec![0.4, -1.2, 0.7, 2.0, -0.3, 0.9, 1.5, -0.8], vec![2, 4]);
            let y = tape.rms_norm(x, w, 1e-6).unwrap();
            tape.sum(y)
        });
    }

    #[test]
    fn fd_rope() {
        fd_check(vec![3, 4], 10, |tape, x| {
            let y = tape.rope(x, 10_000.0).unwrap();
            let c = tape.input((0..12).map(|i| (i as f64 * 0.7).cos()).collect(), vec![3, 4]);
            let prod = tape.mul(y, c).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_matmul_nt() {
        fd_check(vec![3, 2], 12, |tape, a| {
            let b = tape.input(vec![0.5, -0.2, 1.0, 0.3, -0.7, 0.9, 0.1, 0.4], vec![4, 2]);
            let y = tape.matmul_nt(a, b).unwrap();
            let w = tape.input((0..12).map(|i| i as f64 * 0.25 - 1.0).collect(), vec![3, 4]);
            let prod = tape.mul(y, w).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_matvec() {
        fd_check(vec![3, 4], 13, |tape, w| {
            let x = tape.input(vec![0.2, -0.5, 0.9, 0.1], vec![4]);
            let y = tape.matvec(w, x).unwrap();
            let c = tape.input(vec![1.0, -2.0, 0.5], vec![3]);
            let prod = tape.mul(y, c).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_embedding() {
        fd_check(vec![5, 3], 14, |tape, table| {
            let out = tape.embedding(table, &[0, 2, 2, 4]).unwrap();
            let c = tape.input((0..12).map(|i| (i as f64 * 0.4).sin()).collect(), vec![4, 3]);
            let prod = tape.mul(out, c).unwrap();
            tape.sum(prod)
        });
    }

    #[test]
    fn fd_scale_by_and_gather() {
        fd_check(vec![1, 4], 15, |tape, x| {
            let p = tape.row_softmax(x).unwrap();
            let s = tape.gather_scalar(p, 2).unwrap();
            let m = tape.input(vec![0.5, -1.0, 2.0, 0.25], vec![1, 4]);
            let scaled = tape.scale_by(m, s).unwrap();
            tape.sum(scaled)
        });
    }

    #[test]
    fn fd_cross_entropy_masked() {
        fd_check(vec![3, 8], 16, |tape, logits| {
            let targets = [1usize, 5, 3];
            let mask = [true, false, true];
            tape.cross_entropy_masked(logits, &targets, &mask).unwrap()
        });
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.input(vec![0.0; 32], vec![1, 32]);
        let loss = tape
            .cross_entropy_masked(logits, &[7], &[true])
            .unwrap();
        assert!((tape.value(loss)[0] - 32.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot_limit() {
        // a huge margin on the correct class drives the loss to ~0
        let mut tape = Tape::new();
        let mut data = vec![0.0; 16];
        data[3] = 1000.0;
        let logits = tape.input(data, vec![1, 16]);
        let loss = tape.cross_entropy_masked(logits, &[3], &[true]).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_scalar_recomputation() {
        // independent scalar oracle on a random 3×8 case
        let mut rng = Rng::new(21);
        let data: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let targets = [2usize, 0, 7];
        let mask = [true, true, true];

        let mut expected = 0.0;
        for t in 0..3 {
            let row = &data[t * 8..(t + 1) * 8];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            expected += -(((row[targets[t]] - max).exp()) / z).ln();
        }
        expected /= 3.0;

        let mut tape = Tape::new();
        let logits = tape.input(data, vec![3, 8]);
        let loss = tape.cross_entropy_masked(logits, &targets, &mask).unwrap();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_false_mask_is_error() {
        let mut tape = Tape::new();
        let logits = tape.input(vec![0.0; 8], vec![1, 8]);
        let err = tape
            .cross_entropy_masked(logits, &[0], &[false])
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn masked_positions_receive_zero_gradient() {
        let mut tape = Tape::new();
        let t = tensor(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let logits = tape.param(&t);
        let loss = tape
            .cross_entropy_masked(logits, &[1, 2], &[false, true])
            .unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g[0..4].iter().all(|&v| v == 0.0));
        assert!(g[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_over_prefix() {
        let mut rng = Rng::new(33);
        let mut tape = Tape::new();
        let x = tape.input((0..16).map(|_| rng.normal()).collect(), vec![4, 4]);
        let p = tape.causal_row_softmax(x).unwrap();
        let pv = tape.value(p);
        for i in 0..4 {
            let row_sum: f64 = pv[i * 4..(i + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in (i + 1)..4 {
                assert_eq!(pv[i * 4 + j], 0.0);
            }
        }
    }
}
