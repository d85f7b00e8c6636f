//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward operations append nodes (value plus enough saved context for the
//! backward rule) in execution order; `backward` replays the tape in reverse,
//! which visits every node after all of its consumers, i.e. in reverse
//! topological order exactly once. Parameter leaves snapshot the store value
//! and the freeze flag at bind time; frozen leaves never emit a gradient
//! entry, although gradients still flow *through* them to their inputs.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{sigmoid, silu, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param { id: ParamId, frozen: bool },
    /// a (m×k) · b (k×n)
    MatMul { a: NodeId, b: NodeId },
    /// a (m×k) · bᵀ with b (n×k)
    MatMulTb { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x + captured constant tensor (mask etc.); constant needs no gradient
    AddConst { x: NodeId },
    /// x ⊙ captured constant tensor (dropout mask)
    MulConst { x: NodeId, c: Tensor },
    /// a·x + b with scalar constants; only `a` matters for the backward rule
    Affine { x: NodeId, a: f64 },
    /// matrix + row vector broadcast over rows
    AddRowBias { x: NodeId, bias: NodeId },
    Silu { x: NodeId },
    Sigmoid { x: NodeId },
    /// softmax over the last axis of a 2-D tensor
    RowSoftmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// row lookup: out[t] = table[ids[t]]
    Embed { table: NodeId, ids: Vec<usize> },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    /// out[i] = x[idx[i]]; duplicate indices allowed
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// out[t][j] = x[t][idx[t][j]]; indices distinct within a row
    GatherPerRow { x: NodeId, idx: Vec<Vec<usize>> },
    /// out[t][idx[t][j]] = x[t][j], zero elsewhere
    ScatterPerRow { x: NodeId, idx: Vec<Vec<usize>>, width: usize },
    /// out[i][j] = m[i][j] * v[i]
    ColBroadcastMul { m: NodeId, v: NodeId },
    /// tensor × scalar node
    MulScalar { x: NodeId, s: NodeId },
    /// column means: [n×m] -> [m]
    MeanRows { x: NodeId },
    /// dot with a constant weight vector -> scalar
    WeightedSumConst { x: NodeId, w: Tensor },
    /// mean over rows of -log softmax(row)[target]
    CrossEntropyMean { logits: NodeId, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The gradient tape. One per forward/backward pass, confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// One leaf per parameter per tape; rebinding returns the cached node so
    /// batched sequences share leaves (and gradient accumulation points).
    param_leaves: std::collections::HashMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Bind a parameter leaf. Value and freeze flag are snapshotted on the
    /// first bind; later binds of the same parameter reuse the leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&leaf) = self.param_leaves.get(&id) {
            return leaf;
        }
        let entry = store.get(id);
        let leaf = self.push(
            entry.value.clone(),
            Op::Param { id, frozen: entry.frozen },
        );
        self.param_leaves.insert(id, leaf);
        leaf
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul { a, b }))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_tb(self.value(b))?;
        Ok(self.push(v, Op::MatMulTb { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let v = self.value(x).add(c)?;
        Ok(self.push(v, Op::AddConst { x }))
    }

    pub fn mul_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let v = self.value(x).mul_elem(c)?;
        Ok(self.push(v, Op::MulConst { x, c: c.clone() }))
    }

    /// a·x + b elementwise with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = self.value(x).map(|t| a * t + b);
        self.push(v, Op::Affine { x, a })
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let cols = xv.cols();
        if bv.numel() != cols {
            return Err(Error::Dimension(format!(
                "add_row_bias: bias of {} elements for width {cols}",
                bv.numel()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias { x, bias }))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid { x })
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let axis = xv.shape().len() - 1;
        let v = xv.softmax(axis)?;
        Ok(self.push(v, Op::RowSoftmax { x }))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = self
            .value(x)
            .layer_norm(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Data(format!(
                    "token id {id} at position {pos} out of range for vocabulary {vocab}"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(v, Op::Embed { table, ids: ids.to_vec() }))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of no tensors".into()));
        }
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows: widths {} and {cols} differ",
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols of no tensors".into()));
        }
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        for &x in xs {
            if self.value(x).rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {} and {rows} differ",
                    self.value(x).rows()
                )));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                let v = self.value(x);
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(v, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start + len > cols {
            return Err(Error::Dimension(format!(
                "slice_cols: {start}..{} out of width {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let v = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        for &i in idx {
            if i >= rows {
                return Err(Error::Dimension(format!(
                    "gather_rows: row {i} out of {rows}"
                )));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(v, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn gather_per_row(&mut self, x: NodeId, idx: &[Vec<usize>]) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if idx.len() != rows {
            return Err(Error::Dimension(format!(
                "gather_per_row: {} index rows for {rows} data rows",
                idx.len()
            )));
        }
        let k = idx.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows * k);
        for (r, cols_r) in idx.iter().enumerate() {
            if cols_r.len() != k {
                return Err(Error::Dimension("gather_per_row: ragged index rows".into()));
            }
            for &c in cols_r {
                if c >= cols {
                    return Err(Error::Dimension(format!(
                        "gather_per_row: column {c} out of {cols}"
                    )));
                }
                data.push(xv.data()[r * cols + c]);
            }
        }
        let v = Tensor::new(vec![rows, k], data)?;
        Ok(self.push(v, Op::GatherPerRow { x, idx: idx.to_vec() }))
    }

    pub fn scatter_per_row(
        &mut self,
        x: NodeId,
        idx: &[Vec<usize>],
        width: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, k) = (xv.rows(), xv.cols());
        if idx.len() != rows {
            return Err(Error::Dimension(format!(
                "scatter_per_row: {} index rows for {rows} data rows",
                idx.len()
            )));
        }
        let mut data = vec![0.0; rows * width];
        for (r, cols_r) in idx.iter().enumerate() {
            if cols_r.len() != k {
                return Err(Error::Dimension("scatter_per_row: ragged index rows".into()));
            }
            for (j, &c) in cols_r.iter().enumerate() {
                if c >= width {
                    return Err(Error::Dimension(format!(
                        "scatter_per_row: column {c} out of {width}"
                    )));
                }
                data[r * width + c] = xv.data()[r * k + j];
            }
        }
        let v = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(v, Op::ScatterPerRow { x, idx: idx.to_vec(), width }))
    }

    pub fn col_broadcast_mul(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let mv = self.value(m);
        let vv = self.value(v);
        let (rows, cols) = (mv.rows(), mv.cols());
        if vv.numel() != rows {
            return Err(Error::Dimension(format!(
                "col_broadcast_mul: {} scale values for {rows} rows",
                vv.numel()
            )));
        }
        let mut data = mv.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let s = vv.data()[r];
            for val in row {
                *val *= s;
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ColBroadcastMul { m, v }))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::Contract(format!(
                "mul_scalar: scale has shape {:?}, expected scalar",
                sv.shape()
            )));
        }
        let v = self.value(x).scale(sv.scalar_value());
        Ok(self.push(v, Op::MulScalar { x, s }))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xv.data()[r * cols + j];
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let v = Tensor::new(vec![cols], out)?;
        Ok(self.push(v, Op::MeanRows { x }))
    }

    pub fn weighted_sum_const(&mut self, x: NodeId, w: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.numel() != w.numel() {
            return Err(Error::Dimension(format!(
                "weighted_sum_const: {} values vs {} weights",
                xv.numel(),
                w.numel()
            )));
        }
        let s: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSumConst { x, w: w.clone() }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let ones = Tensor::full(self.value(x).shape().to_vec(), 1.0);
        self.weighted_sum_const(x, &ones)
    }

    /// Mean over rows of the negative log softmax probability assigned to
    /// each row's target token.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy_mean: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if rows == 0 {
            return Err(Error::Contract("cross_entropy_mean over zero rows".into()));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Data(format!(
                    "target id {t} at position {r} out of vocabulary {vocab}"
                )));
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / rows as f64);
        Ok(self.push(v, Op::CrossEntropyMean { logits, targets: targets.to_vec() }))
    }

    /// Reverse sweep from a scalar loss. Returns the gradient for every
    /// non-frozen parameter leaf reachable from `loss`; frozen parameters
    /// get no entry at all.
    pub fn backward(&mut self, loss: NodeId, n_params: usize) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss has shape {:?}, expected scalar",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(n_params);

        for i in (0..=loss.0).rev() {
            // All contributions to node i arrive before the sweep reaches
            // it, so the accumulated gradient can be moved out.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param { id, frozen } => {
                    if !*frozen {
                        out.accumulate(*id, &g)?;
                    }
                }
                Op::MatMul { a, b } => {
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    let da = g.matmul_tb(self.value(*b))?;
                    let db = self.value(*a).transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulTb { a, b } => {
                    // out = A · Bᵀ: dA = G · B ; dB = Gᵀ · A
                    let da = g.matmul(self.value(*b))?;
                    let db = g.transpose()?.matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddConst { x } => accumulate(&mut grads, *x, g)?,
                Op::MulConst { x, c } => {
                    accumulate(&mut grads, *x, g.mul_elem(c)?)?;
                }
                Op::Affine { x, a } => accumulate(&mut grads, *x, g.scale(*a))?,
                Op::AddRowBias { x, bias } => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (j, v) in row.iter().enumerate() {
                            db[j] += v;
                        }
                    }
                    accumulate(&mut grads, *x, g)?;
                    accumulate(&mut grads, *bias, reshape_like(db, self.value(*bias)))?;
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let mut d = g.clone();
                    for (dv, &xi) in d.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(xi);
                        *dv *= s + xi * s * (1.0 - s);
                    }
                    accumulate(&mut grads, *x, d)?;
                }
                Op::Sigmoid { x } => {
                    let yv = &self.nodes[i].value;
                    let mut d = g.clone();
                    for (dv, &y) in d.data_mut().iter_mut().zip(yv.data()) {
                        *dv *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, d)?;
                }
                Op::RowSoftmax { x } => {
                    let p = &self.nodes[i].value;
                    let cols = p.cols();
                    let mut d = vec![0.0; p.numel()];
                    for (r, (p_row, g_row)) in
                        p.data().chunks(cols).zip(g.data().chunks(cols)).enumerate()
                    {
                        let dot: f64 =
                            p_row.iter().zip(g_row).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..cols {
                            d[r * cols + j] = p_row[j] * (g_row[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, reshape_like(d, p))?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dg, db) =
                        layer_norm_vjp(self.value(*x), self.value(*gamma), *eps, &g);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, reshape_like(dg, self.value(*gamma)))?;
                    accumulate(&mut grads, *beta, reshape_like(db, self.value(*beta)))?;
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let (vocab, d) = (tv.rows(), tv.cols());
                    let mut dt = vec![0.0; vocab * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g.data()[t * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::new(vec![vocab, d], dt)?)?;
                }
                Op::ConcatRows { xs } => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &x in xs.clone().iter() {
                        let r = self.value(x).rows();
                        let part =
                            g.data()[offset * cols..(offset + r) * cols].to_vec();
                        accumulate(&mut grads, x, Tensor::new(vec![r, cols], part)?)?;
                        offset += r;
                    }
                }
                Op::ConcatCols { xs } => {
                    let xs = xs.clone();
                    let rows = g.rows();
                    let total = g.cols();
                    let mut start = 0;
                    for &x in &xs {
                        let w = self.value(x).cols();
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(
                                &g.data()[r * total + start..r * total + start + w],
                            );
                        }
                        accumulate(&mut grads, x, Tensor::new(vec![rows, w], part)?)?;
                        start += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..*len {
                            d[r * cols + start + j] = g.data()[r * len + j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![rows, cols], d)?)?;
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut d = vec![0.0; rows * cols];
                    for (t, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] += g.data()[t * cols + j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![rows, cols], d)?)?;
                }
                Op::GatherPerRow { x, idx } => {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let k = g.cols();
                    let mut d = vec![0.0; rows * cols];
                    for (r, cols_r) in idx.iter().enumerate() {
                        for (j, &c) in cols_r.iter().enumerate() {
                            d[r * cols + c] += g.data()[r * k + j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![rows, cols], d)?)?;
                }
                Op::ScatterPerRow { x, idx, width } => {
                    let xv = self.value(*x);
                    let (rows, k) = (xv.rows(), xv.cols());
                    let mut d = vec![0.0; rows * k];
                    for (r, cols_r) in idx.iter().enumerate() {
                        for (j, &c) in cols_r.iter().enumerate() {
                            d[r * k + j] = g.data()[r * width + c];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![rows, k], d)?)?;
                }
                Op::ColBroadcastMul { m, v } => {
                    let mv = self.value(*m);
                    let vv = self.value(*v);
                    let (rows, cols) = (mv.rows(), mv.cols());
                    let mut dm = g.data().to_vec();
                    let mut dv = vec![0.0; rows];
                    for r in 0..rows {
                        let s = vv.data()[r];
                        for j in 0..cols {
                            dv[r] += g.data()[r * cols + j] * mv.data()[r * cols + j];
                            dm[r * cols + j] *= s;
                        }
                    }
                    accumulate(&mut grads, *m, Tensor::new(vec![rows, cols], dm)?)?;
                    accumulate(&mut grads, *v, reshape_like(dv, vv))?;
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s).scalar_value();
                    let xv = self.value(*x);
                    let ds: f64 =
                        g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads, *x, g.scale(sv))?;
                    accumulate(&mut grads, *s, Tensor::scalar(ds))?;
                }
                Op::MeanRows { x } => {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            d[r * cols + j] = g.data()[j] / rows as f64;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![rows, cols], d)?)?;
                }
                Op::WeightedSumConst { x, w } => {
                    let d = w.scale(g.scalar_value());
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, reshape_like(d.data().to_vec(), xv))?;
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let lv = self.value(*logits);
                    let (rows, vocab) = (lv.rows(), lv.cols());
                    let scale = g.scalar_value() / rows as f64;
                    let probs = lv.softmax(lv.shape().len() - 1)?;
                    let mut d = probs.data().to_vec();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * vocab + t] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![rows, vocab], d)?)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => *existing = existing.add(&g)?,
        slot => *slot = Some(g),
    }
    Ok(())
}

/// Wrap a raw buffer in the shape of a reference tensor.
fn reshape_like(data: Vec<f64>, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("vjp buffer matches reference shape")
}

fn layer_norm_vjp(x: &Tensor, gamma: &Tensor, eps: f64, g: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = d as f64;
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (row_idx, (x_row, g_row)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
        let mean = x_row.iter().sum::<f64>() / n;
        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = x_row.iter().map(|v| (v - mean) * inv).collect();
        let gg: Vec<f64> = g_row
            .iter()
            .zip(gamma.data())
            .map(|(gv, gam)| gv * gam)
            .collect();
        let mean_gg = gg.iter().sum::<f64>() / n;
        let mean_gg_xhat = gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..d {
            dx[row_idx * d + j] = inv * (gg[j] - mean_gg - xhat[j] * mean_gg_xhat);
            dgamma[j] += g_row[j] * xhat[j];
            dbeta[j] += g_row[j];
        }
    }
    (reshape_like(dx, x), dgamma, dbeta)
}
