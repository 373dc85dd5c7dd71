//! Minimal reverse-mode tape over the fixed operation set the surrogate
//! needs: matmul, bias/residual adds, layer norm, gelu, row gather/scatter,
//! the fused regional-attention kernel and the causal-prefix global-tensor
//! update, plus the RMSE loss head.
//!
//! Values are computed eagerly as nodes are appended; `backward` walks the
//! tape in reverse. Parameters are leaf nodes tagged with their index in the
//! owning parameter store; their gradients are collected afterwards with
//! [`Graph::param_grads`]. The attention kernels save nothing heavy and
//! recompute scores in the backward pass.

use crate::error::{Error, Result};
use crate::tensor::{
    axpy, dot, gelu, gelu_grad, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Scalar, Tensor,
};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Multiply-accumulate counter for the n-dependent part of local attention
/// (score and value contractions). Reset/read it around a forward pass to
/// measure attention complexity.
pub static ATTN_MACS: AtomicU64 = AtomicU64::new(0);

pub fn reset_attn_macs() {
    ATTN_MACS.store(0, Ordering::Relaxed);
}

pub fn attn_macs() -> u64 {
    ATTN_MACS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Geometry of one regional-attention call.
#[derive(Clone, Debug)]
pub struct AttendMeta {
    pub regions: usize,
    /// Tokens per region.
    pub n: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Per-slot local coordinates inside the region (t, x, y, z).
    pub local_coords: Vec<[usize; 4]>,
    /// Local time offset of each slot (column 0 of `local_coords`).
    pub local_times: Vec<usize>,
    /// Region shape used to size the relative-offset tables.
    pub region_shape: [usize; 4],
    /// Global time of slot s in region r = region_time_offset[r] +
    /// local_coords[s][0].
    pub region_time_offset: Vec<usize>,
    /// Apply the causal mask (token j visible to i iff t_j <= t_i).
    pub causal: bool,
    /// Rows of the global tensor read by every token (0 = no global read).
    pub g_rows: usize,
    /// Time slices in the global tensor value (1 = static, shared).
    pub g_slices: usize,
}

impl AttendMeta {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Geometry of one causal-prefix global update.
#[derive(Clone, Debug)]
pub struct PrefixMeta {
    /// Tokens per frame; tokens are frame-major so time(j) = j / frame_tokens.
    pub frame_tokens: usize,
    /// Output slices; 1 reproduces the unmasked full-grid update.
    pub t_slices: usize,
    pub g_rows: usize,
    pub d_model: usize,
}

enum Op<T: Scalar> {
    Leaf { param: Option<usize> },
    MatMul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x + fixed offset tensor (positional encodings, targets).
    Offset { x: NodeId },
    Scale { x: NodeId, c: T },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<T>, rstd: Vec<T> },
    Gelu { x: NodeId },
    GatherRows { x: NodeId, index: Arc<Vec<u32>> },
    ScatterRows { x: NodeId, index: Arc<Vec<u32>> },
    RegionalAttend {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        global: Option<(NodeId, NodeId)>,
        /// One table per axis with extent > 1, shaped [heads, 2*extent-1].
        bias_tables: Vec<(usize, NodeId)>,
        meta: Arc<AttendMeta>,
    },
    CausalPrefixAttend {
        gq: NodeId,
        xk: NodeId,
        xv: NodeId,
        meta: Arc<PrefixMeta>,
        /// Saved per (g-row, slice): running max and normalizer.
        saved_max: Vec<T>,
        saved_norm: Vec<T>,
    },
    Rmse { pred: NodeId, target: Arc<Tensor<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, value: Tensor<T>, index: usize) -> NodeId {
        self.push(value, Op::Leaf { param: Some(index) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::invalid(format!(
                "matmul: inner dims {ka} vs {kb}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, ka, n);
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let cols = *self.value(x).shape.last().ok_or_else(|| Error::invalid("add_bias rank"))?;
        if self.value(b).len() != cols {
            return Err(Error::invalid("add_bias: bias length mismatch"));
        }
        let xv = self.value(x);
        let bv = self.value(b);
        let mut out = xv.clone();
        for row in out.data.chunks_exact_mut(cols) {
            for (j, r) in row.iter_mut().enumerate() {
                *r += bv.data[j];
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::invalid("add: shape mismatch"));
        }
        let mut out = self.value(a).clone();
        for (o, &x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o += x;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// x + constant tensor (no gradient into the constant).
    pub fn offset(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        if self.value(x).shape != c.shape {
            return Err(Error::invalid("offset: shape mismatch"));
        }
        let mut out = self.value(x).clone();
        for (o, &v) in out.data.iter_mut().zip(&c.data) {
            *o += v;
        }
        Ok(self.push(out, Op::Offset { x }))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Pre-norm layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = *self.value(x).shape.last().ok_or_else(|| Error::invalid("ln rank"))?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::invalid("layer_norm: parameter length mismatch"));
        }
        let rows = self.value(x).len() / cols;
        let eps = T::from_f64(1e-5);
        let mut out = Tensor::zeros(&self.value(x).shape.clone());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gain.0].value;
            let bv = &self.nodes[bias.0].value;
            for r in 0..rows {
                let xin = &xv.data[r * cols..(r + 1) * cols];
                let mean = xin.iter().copied().sum::<T>() / T::from_f64(cols as f64);
                let var = xin
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    / T::from_f64(cols as f64);
                let rstd = T::one() / (var + eps).sqrt();
                means.push(mean);
                rstds.push(rstd);
                let orow = &mut out.data[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    orow[j] = (xin[j] - mean) * rstd * gv.data[j] + bv.data[j];
                }
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu { x })
    }

    /// out[i] = x[index[i]] by rows.
    pub fn gather_rows(&mut self, x: NodeId, index: Arc<Vec<u32>>) -> Result<NodeId> {
        let cols = *self.value(x).shape.last().ok_or_else(|| Error::invalid("gather rank"))?;
        let rows = self.value(x).len() / cols;
        let mut out = Tensor::zeros(&[index.len(), cols]);
        for (i, &src) in index.iter().enumerate() {
            if src as usize >= rows {
                return Err(Error::invalid("gather_rows: index out of range"));
            }
            out.data[i * cols..(i + 1) * cols]
                .copy_from_slice(self.value(x).row(src as usize));
        }
        Ok(self.push(out, Op::GatherRows { x, index }))
    }

    /// out has `out_rows` rows, out[index[i]] += x[i].
    pub fn scatter_rows(
        &mut self,
        x: NodeId,
        index: Arc<Vec<u32>>,
        out_rows: usize,
    ) -> Result<NodeId> {
        let cols = *self.value(x).shape.last().ok_or_else(|| Error::invalid("scatter rank"))?;
        let rows = self.value(x).len() / cols;
        if index.len() != rows {
            return Err(Error::invalid("scatter_rows: index length mismatch"));
        }
        let mut out = Tensor::zeros(&[out_rows, cols]);
        for (i, &dst) in index.iter().enumerate() {
            if dst as usize >= out_rows {
                return Err(Error::invalid("scatter_rows: index out of range"));
            }
            let src = self.value(x).row(i).to_vec();
            axpy(T::one(), &src, &mut out.data[dst as usize * cols..(dst as usize + 1) * cols]);
        }
        Ok(self.push(out, Op::ScatterRows { x, index }))
    }

    /// Shared-weight local self-attention over regions, with optional global
    /// rows and per-axis relative position bias. `q`, `k`, `v` are
    /// [R*n, d_model] (already projected); `global` carries projected keys
    /// and values of the global tensor, [g_slices * g_rows, d_model].
    pub fn regional_attend(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        global: Option<(NodeId, NodeId)>,
        bias_tables: Vec<(usize, NodeId)>,
        meta: Arc<AttendMeta>,
    ) -> Result<NodeId> {
        let rows = meta.regions * meta.n;
        for id in [q, k, v] {
            let (r, d) = self.value(id).dims2()?;
            if r != rows || d != meta.d_model {
                return Err(Error::invalid("regional_attend: projection shape mismatch"));
            }
        }
        if meta.d_model % meta.heads != 0 {
            return Err(Error::invalid("regional_attend: d_model not divisible by heads"));
        }
        if let Some((gk, gv)) = global {
            let expect = meta.g_slices * meta.g_rows;
            for id in [gk, gv] {
                let (r, d) = self.value(id).dims2()?;
                if r != expect || d != meta.d_model {
                    return Err(Error::invalid("regional_attend: global shape mismatch"));
                }
            }
        } else if meta.g_rows != 0 {
            return Err(Error::invalid("regional_attend: meta expects global rows"));
        }
        for (axis, table) in &bias_tables {
            let extent = meta.region_shape[*axis];
            let (h, w) = self.value(*table).dims2()?;
            if h != meta.heads || w != 2 * extent - 1 {
                return Err(Error::invalid("regional_attend: bias table shape mismatch"));
            }
        }

        let out = {
            let get = |id: NodeId| &self.nodes[id.0].value;
            let tables: Vec<(usize, &Tensor<T>)> =
                bias_tables.iter().map(|&(a, t)| (a, get(t))).collect();
            regional_attend_forward(
                get(q),
                get(k),
                get(v),
                global.map(|(gk, gv)| (get(gk), get(gv))),
                &tables,
                &meta,
            )
        };
        Ok(self.push(out, Op::RegionalAttend { q, k, v, global, bias_tables, meta }))
    }

    /// Global-tensor update: fixed query rows attend the (causal prefix of
    /// the) full token set; slice t of the output depends only on frames
    /// <= t. With `t_slices == 1` the full-grid unmasked variant is produced.
    pub fn causal_prefix_attend(
        &mut self,
        gq: NodeId,
        xk: NodeId,
        xv: NodeId,
        meta: Arc<PrefixMeta>,
    ) -> Result<NodeId> {
        let (g, dq) = self.value(gq).dims2()?;
        let (nk, dk) = self.value(xk).dims2()?;
        let (nv, dv) = self.value(xv).dims2()?;
        if g != meta.g_rows || dq != meta.d_model || dk != meta.d_model || dv != meta.d_model {
            return Err(Error::invalid("prefix attend: shape mismatch"));
        }
        if nk != nv {
            return Err(Error::invalid("prefix attend: key/value row mismatch"));
        }
        let (out, saved_max, saved_norm) = causal_prefix_forward(
            &self.nodes[gq.0].value,
            &self.nodes[xk.0].value,
            &self.nodes[xv.0].value,
            &meta,
        );
        Ok(self.push(out, Op::CausalPrefixAttend { gq, xk, xv, meta, saved_max, saved_norm }))
    }

    /// sqrt(mean((pred - target)^2) + 1e-12); the epsilon keeps the
    /// derivative finite at zero residual.
    pub fn rmse(&mut self, pred: NodeId, target: Arc<Tensor<T>>) -> Result<NodeId> {
        if self.value(pred).shape != target.shape {
            return Err(Error::invalid("rmse: shape mismatch"));
        }
        let n = T::from_f64(target.len() as f64);
        let mut acc = T::zero();
        for (p, t) in self.value(pred).data.iter().zip(&target.data) {
            let r = *p - *t;
            acc += r * r;
        }
        let val = (acc / n + T::from_f64(1e-12)).sqrt();
        Ok(self.push(Tensor::scalar(val), Op::Rmse { pred, target }))
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor<T> {
        if self.nodes[id.0].grad.is_none() {
            let shape = self.nodes[id.0].value.shape.clone();
            self.nodes[id.0].grad = Some(Tensor::zeros(&shape));
        }
        self.nodes[id.0].grad.as_mut().unwrap()
    }

    fn take_two(&mut self, main: NodeId, other: NodeId) -> (&Node<T>, &mut Tensor<T>) {
        // split borrow: read node `main`, mutate grad of `other`
        assert_ne!(main.0, other.0);
        if self.nodes[other.0].grad.is_none() {
            let shape = self.nodes[other.0].value.shape.clone();
            self.nodes[other.0].grad = Some(Tensor::zeros(&shape));
        }
        let (lo, hi) = if main.0 < other.0 {
            let (a, b) = self.nodes.split_at_mut(other.0);
            (&a[main.0], b[0].grad.as_mut().unwrap())
        } else {
            let (a, b) = self.nodes.split_at_mut(main.0);
            (&b[0], a[other.0].grad.as_mut().unwrap())
        };
        (lo, hi)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward: loss must be scalar"));
        }
        self.grad_buf(loss).data[0] = T::one();

        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let id = NodeId(idx);
            // move op out temporarily to appease the borrow checker
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf { param: None });
            self.backward_op(id, &op)?;
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, id: NodeId, op: &Op<T>) -> Result<()> {
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let n = self.nodes[b.0].value.shape[1];
                let dout = self.nodes[id.0].grad.clone().unwrap();
                {
                    let bt = self.nodes[b.0].value.data.clone();
                    let da = self.grad_buf(*a);
                    matmul_a_bt_acc(&dout.data, &bt, &mut da.data, m, n, k);
                }
                {
                    let av = self.nodes[a.0].value.data.clone();
                    let db = self.grad_buf(*b);
                    matmul_at_b_acc(&av, &dout.data, &mut db.data, m, k, n);
                }
            }
            Op::AddBias { x, b } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let cols = self.nodes[b.0].value.len();
                {
                    let dx = self.grad_buf(*x);
                    axpy(T::one(), &dout.data, &mut dx.data);
                }
                {
                    let db = self.grad_buf(*b);
                    for row in dout.data.chunks_exact(cols) {
                        for (j, &v) in row.iter().enumerate() {
                            db.data[j] += v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                axpy(T::one(), &dout.data, &mut self.grad_buf(*a).data);
                axpy(T::one(), &dout.data, &mut self.grad_buf(*b).data);
            }
            Op::Offset { x } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                axpy(T::one(), &dout.data, &mut self.grad_buf(*x).data);
            }
            Op::Scale { x, c } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                axpy(*c, &dout.data, &mut self.grad_buf(*x).data);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let cols = self.nodes[gain.0].value.len();
                let rows = dout.len() / cols;
                let xv = self.nodes[x.0].value.data.clone();
                let gv = self.nodes[gain.0].value.data.clone();
                let inv_n = T::one() / T::from_f64(cols as f64);
                {
                    let dgain = self.grad_buf(*gain);
                    for r in 0..rows {
                        for j in 0..cols {
                            let xhat = (xv[r * cols + j] - mean[r]) * rstd[r];
                            dgain.data[j] += dout.data[r * cols + j] * xhat;
                        }
                    }
                }
                {
                    let dbias = self.grad_buf(*bias);
                    for r in 0..rows {
                        for j in 0..cols {
                            dbias.data[j] += dout.data[r * cols + j];
                        }
                    }
                }
                {
                    let dx = self.grad_buf(*x);
                    for r in 0..rows {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for j in 0..cols {
                            let dy = dout.data[r * cols + j] * gv[j];
                            let xhat = (xv[r * cols + j] - mean[r]) * rstd[r];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        for j in 0..cols {
                            let dy = dout.data[r * cols + j] * gv[j];
                            let xhat = (xv[r * cols + j] - mean[r]) * rstd[r];
                            dx.data[r * cols + j] +=
                                rstd[r] * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let xv = self.nodes[x.0].value.data.clone();
                let dx = self.grad_buf(*x);
                for i in 0..xv.len() {
                    dx.data[i] += dout.data[i] * gelu_grad(xv[i]);
                }
            }
            Op::GatherRows { x, index } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let cols = *self.nodes[x.0].value.shape.last().unwrap();
                let dx = self.grad_buf(*x);
                for (i, &src) in index.iter().enumerate() {
                    let s = src as usize;
                    axpy(
                        T::one(),
                        &dout.data[i * cols..(i + 1) * cols],
                        &mut dx.data[s * cols..(s + 1) * cols],
                    );
                }
            }
            Op::ScatterRows { x, index } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let cols = *self.nodes[x.0].value.shape.last().unwrap();
                let dx = self.grad_buf(*x);
                for (i, &dst) in index.iter().enumerate() {
                    let d = dst as usize;
                    axpy(
                        T::one(),
                        &dout.data[d * cols..(d + 1) * cols],
                        &mut dx.data[i * cols..(i + 1) * cols],
                    );
                }
            }
            Op::RegionalAttend { q, k, v, global, bias_tables, meta } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let gvals = global.map(|(gk, gv)| {
                    (self.nodes[gk.0].value.clone(), self.nodes[gv.0].value.clone())
                });
                let tables: Vec<(usize, Tensor<T>)> = bias_tables
                    .iter()
                    .map(|&(a, t)| (a, self.nodes[t.0].value.clone()))
                    .collect();
                let grads = regional_attend_backward(
                    &dout,
                    &qv,
                    &kv,
                    &vv,
                    gvals.as_ref().map(|(a, b)| (a, b)),
                    &tables,
                    meta,
                );
                axpy(T::one(), &grads.dq.data, &mut self.grad_buf(*q).data);
                axpy(T::one(), &grads.dk.data, &mut self.grad_buf(*k).data);
                axpy(T::one(), &grads.dv.data, &mut self.grad_buf(*v).data);
                if let (Some((gk, gv)), Some(dgk), Some(dgv)) =
                    (global, grads.dgk, grads.dgv)
                {
                    axpy(T::one(), &dgk.data, &mut self.grad_buf(*gk).data);
                    axpy(T::one(), &dgv.data, &mut self.grad_buf(*gv).data);
                }
                for ((_, table_id), dtab) in bias_tables.iter().zip(grads.dtables) {
                    axpy(T::one(), &dtab.data, &mut self.grad_buf(*table_id).data);
                }
            }
            Op::CausalPrefixAttend { gq, xk, xv, meta, saved_max, saved_norm } => {
                let dout = self.nodes[id.0].grad.clone().unwrap();
                let gqv = self.nodes[gq.0].value.clone();
                let xkv = self.nodes[xk.0].value.clone();
                let xvv = self.nodes[xv.0].value.clone();
                let outv = self.nodes[id.0].value.clone();
                let (dgq, dxk, dxv) = causal_prefix_backward(
                    &dout, &outv, &gqv, &xkv, &xvv, meta, saved_max, saved_norm,
                );
                axpy(T::one(), &dgq.data, &mut self.grad_buf(*gq).data);
                axpy(T::one(), &dxk.data, &mut self.grad_buf(*xk).data);
                axpy(T::one(), &dxv.data, &mut self.grad_buf(*xv).data);
            }
            Op::Rmse { pred, target } => {
                let dval = self.nodes[id.0].grad.as_ref().unwrap().data[0];
                let val = self.nodes[id.0].value.data[0];
                let n = T::from_f64(target.len() as f64);
                let scale = dval / (n * val);
                let pv = self.nodes[pred.0].value.data.clone();
                let dp = self.grad_buf(*pred);
                for i in 0..pv.len() {
                    dp.data[i] += scale * (pv[i] - target.data[i]);
                }
            }
        }
        Ok(())
    }

    /// Collect gradients of parameter leaves, indexed by parameter slot.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for node in &self.nodes {
            if let Op::Leaf { param: Some(idx) } = node.op {
                if let Some(g) = &node.grad {
                    match &mut out[idx] {
                        slot @ None => *slot = Some(g.clone()),
                        Some(acc) => axpy(T::one(), &g.data, &mut acc.data),
                    }
                }
            }
        }
        out
    }
}

fn bias_at<T: Scalar>(
    tables: &[(usize, &Tensor<T>)],
    meta: &AttendMeta,
    head: usize,
    i: usize,
    j: usize,
) -> T {
    let mut acc = T::zero();
    for (axis, table) in tables {
        let extent = meta.region_shape[*axis];
        let off = meta.local_coords[j][*axis] + extent - 1 - meta.local_coords[i][*axis];
        acc += table.data[head * (2 * extent - 1) + off];
    }
    acc
}

struct AttendGrads<T> {
    dq: Tensor<T>,
    dk: Tensor<T>,
    dv: Tensor<T>,
    dgk: Option<Tensor<T>>,
    dgv: Option<Tensor<T>>,
    dtables: Vec<Tensor<T>>,
}

fn regional_attend_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    global: Option<(&Tensor<T>, &Tensor<T>)>,
    tables: &[(usize, &Tensor<T>)],
    meta: &AttendMeta,
) -> Tensor<T> {
    let d = meta.d_model;
    let dh = meta.d_head();
    let n = meta.n;
    let g = meta.g_rows;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Tensor::zeros(&[meta.regions * n, d]);
    let mut macs: u64 = 0;

    let mut scores = vec![T::zero(); g + n];
    for r in 0..meta.regions {
        for h in 0..meta.heads {
            let hcol = h * dh;
            for i in 0..n {
                let qi = &q.data[(r * n + i) * d + hcol..(r * n + i) * d + hcol + dh];
                let ti = meta.local_times[i];
                let tau = meta.region_time_offset[r] + ti;
                let g_base = if meta.g_slices == 1 { 0 } else { tau * g };
                let mut max_s = T::neg_infinity();
                for c in 0..g {
                    let (gk, _) = global.unwrap();
                    let row = &gk.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh];
                    let s = dot(qi, row) * inv_sqrt;
                    scores[c] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                for j in 0..n {
                    if meta.causal && meta.local_times[j] > ti {
                        scores[g + j] = T::neg_infinity();
                        continue;
                    }
                    let kj = &k.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh];
                    let s = dot(qi, kj) * inv_sqrt + bias_at(tables, meta, h, i, j);
                    scores[g + j] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                macs += ((n + g) * dh) as u64;
                let mut denom = T::zero();
                for s in scores[..g + n].iter_mut() {
                    if *s == T::neg_infinity() {
                        *s = T::zero();
                    } else {
                        *s = (*s - max_s).exp();
                        denom += *s;
                    }
                }
                let inv_denom = T::one() / denom;
                let orow = &mut out.data[(r * n + i) * d + hcol..(r * n + i) * d + hcol + dh];
                for c in 0..g {
                    let a = scores[c] * inv_denom;
                    if a == T::zero() {
                        continue;
                    }
                    let (_, gvv) = global.unwrap();
                    let row = &gvv.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh];
                    axpy(a, row, orow);
                }
                for j in 0..n {
                    let a = scores[g + j] * inv_denom;
                    if a == T::zero() {
                        continue;
                    }
                    let vj = &v.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh];
                    axpy(a, vj, orow);
                }
                macs += ((n + g) * dh) as u64;
            }
        }
    }
    ATTN_MACS.fetch_add(macs, Ordering::Relaxed);
    out
}

fn regional_attend_backward<T: Scalar>(
    dout: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    global: Option<(&Tensor<T>, &Tensor<T>)>,
    tables: &[(usize, Tensor<T>)],
    meta: &AttendMeta,
) -> AttendGrads<T> {
    let d = meta.d_model;
    let dh = meta.d_head();
    let n = meta.n;
    let g = meta.g_rows;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let tables_ref: Vec<(usize, &Tensor<T>)> = tables.iter().map(|(a, t)| (*a, t)).collect();

    let mut dq = Tensor::zeros(&q.shape);
    let mut dk = Tensor::zeros(&k.shape);
    let mut dv = Tensor::zeros(&v.shape);
    let mut dgk = global.map(|(gk, _)| Tensor::zeros(&gk.shape));
    let mut dgv = global.map(|(_, gv)| Tensor::zeros(&gv.shape));
    let mut dtables: Vec<Tensor<T>> =
        tables.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();

    let mut probs = vec![T::zero(); g + n];
    let mut da = vec![T::zero(); g + n];
    for r in 0..meta.regions {
        for h in 0..meta.heads {
            let hcol = h * dh;
            for i in 0..n {
                let row_i = (r * n + i) * d + hcol;
                let qi = &q.data[row_i..row_i + dh];
                let ti = meta.local_times[i];
                let tau = meta.region_time_offset[r] + ti;
                let g_base = if meta.g_slices == 1 { 0 } else { tau * g };

                // recompute the softmax row
                let mut max_s = T::neg_infinity();
                for c in 0..g {
                    let (gk, _) = global.unwrap();
                    let row = &gk.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh];
                    let s = dot(qi, row) * inv_sqrt;
                    probs[c] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                for j in 0..n {
                    if meta.causal && meta.local_times[j] > ti {
                        probs[g + j] = T::neg_infinity();
                        continue;
                    }
                    let kj = &k.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh];
                    let s = dot(qi, kj) * inv_sqrt + bias_at(&tables_ref, meta, h, i, j);
                    probs[g + j] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = T::zero();
                for s in probs[..g + n].iter_mut() {
                    if *s == T::neg_infinity() {
                        *s = T::zero();
                    } else {
                        *s = (*s - max_s).exp();
                        denom += *s;
                    }
                }
                let inv_denom = T::one() / denom;
                for p in probs[..g + n].iter_mut() {
                    *p = *p * inv_denom;
                }

                let dorow = &dout.data[row_i..row_i + dh];
                // da_col = dout . value_col; dv_col += a * dout
                let mut dot_sum = T::zero();
                for c in 0..g {
                    let (_, gvv) = global.unwrap();
                    let vrow = &gvv.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh];
                    da[c] = dot(dorow, vrow);
                    dot_sum += da[c] * probs[c];
                    if probs[c] != T::zero() {
                        let dgv_buf = dgv.as_mut().unwrap();
                        axpy(
                            probs[c],
                            dorow,
                            &mut dgv_buf.data
                                [(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh],
                        );
                    }
                }
                for j in 0..n {
                    if probs[g + j] == T::zero() {
                        da[g + j] = T::zero();
                        continue;
                    }
                    let vrow = &v.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh];
                    da[g + j] = dot(dorow, vrow);
                    dot_sum += da[g + j] * probs[g + j];
                    axpy(
                        probs[g + j],
                        dorow,
                        &mut dv.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh],
                    );
                }

                // ds = a * (da - sum(da * a)); then into q, k, bias
                for c in 0..g {
                    let ds = probs[c] * (da[c] - dot_sum);
                    if ds == T::zero() {
                        continue;
                    }
                    let (gk, _) = global.unwrap();
                    let krow = &gk.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh];
                    let scaled = ds * inv_sqrt;
                    axpy(scaled, krow, &mut dq.data[row_i..row_i + dh]);
                    let dgk_buf = dgk.as_mut().unwrap();
                    axpy(
                        scaled,
                        qi,
                        &mut dgk_buf.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh],
                    );
                }
                for j in 0..n {
                    if probs[g + j] == T::zero() {
                        continue;
                    }
                    let ds = probs[g + j] * (da[g + j] - dot_sum);
                    let scaled = ds * inv_sqrt;
                    let krow = &k.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh];
                    axpy(scaled, krow, &mut dq.data[row_i..row_i + dh]);
                    axpy(
                        scaled,
                        qi,
                        &mut dk.data[(r * n + j) * d + hcol..(r * n + j) * d + hcol + dh],
                    );
                    for (slot, (axis, _)) in tables_ref.iter().enumerate() {
                        let extent = meta.region_shape[*axis];
                        let off =
                            meta.local_coords[j][*axis] + extent - 1 - meta.local_coords[i][*axis];
                        dtables[slot].data[h * (2 * extent - 1) + off] += ds;
                    }
                }
            }
        }
    }
    AttendGrads { dq, dk, dv, dgk, dgv, dtables }
}

fn causal_prefix_forward<T: Scalar>(
    gq: &Tensor<T>,
    xk: &Tensor<T>,
    xv: &Tensor<T>,
    meta: &PrefixMeta,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = meta.d_model;
    let g = meta.g_rows;
    let t_slices = meta.t_slices;
    let n_tokens = xk.shape[0];
    let block = if t_slices == 1 { n_tokens } else { meta.frame_tokens };
    let inv_sqrt = T::from_f64(1.0 / (d as f64).sqrt());

    let mut out = Tensor::zeros(&[t_slices * g, d]);
    let mut saved_max = vec![T::zero(); g * t_slices];
    let mut saved_norm = vec![T::zero(); g * t_slices];

    for c in 0..g {
        let qrow = gq.row(c);
        let mut m = T::neg_infinity();
        let mut denom = T::zero();
        let mut num = vec![T::zero(); d];
        let mut j = 0usize;
        for t in 0..t_slices {
            let end = ((t + 1) * block).min(n_tokens);
            while j < end {
                let s = dot(qrow, xk.row(j)) * inv_sqrt;
                if s > m {
                    if m != T::neg_infinity() {
                        let rescale = (m - s).exp();
                        denom *= rescale;
                        for x in num.iter_mut() {
                            *x *= rescale;
                        }
                    }
                    m = s;
                }
                let w = (s - m).exp();
                denom += w;
                axpy(w, xv.row(j), &mut num);
                j += 1;
            }
            let orow = &mut out.data[(t * g + c) * d..(t * g + c) * d + d];
            if denom > T::zero() {
                for (o, &x) in orow.iter_mut().zip(&num) {
                    *o = x / denom;
                }
            } else {
                // empty prefix: pass the query row through unchanged
                orow.copy_from_slice(qrow);
            }
            saved_max[c * t_slices + t] = m;
            saved_norm[c * t_slices + t] = denom;
        }
    }
    (out, saved_max, saved_norm)
}

#[allow(clippy::too_many_arguments)]
fn causal_prefix_backward<T: Scalar>(
    dout: &Tensor<T>,
    out: &Tensor<T>,
    gq: &Tensor<T>,
    xk: &Tensor<T>,
    xv: &Tensor<T>,
    meta: &PrefixMeta,
    saved_max: &[T],
    saved_norm: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = meta.d_model;
    let g = meta.g_rows;
    let t_slices = meta.t_slices;
    let n_tokens = xk.shape[0];
    let block = if t_slices == 1 { n_tokens } else { meta.frame_tokens };
    let inv_sqrt = T::from_f64(1.0 / (d as f64).sqrt());

    let mut dgq = Tensor::zeros(&gq.shape);
    let mut dxk = Tensor::zeros(&xk.shape);
    let mut dxv = Tensor::zeros(&xv.shape);

    for c in 0..g {
        let qrow = gq.row(c);
        // suffix accumulators over slices, in running-max normalization:
        // acc_t = dout_t / W_t + exp(m_t - m_{t+1}) acc_{t+1}
        let mut acc = vec![vec![T::zero(); d]; t_slices];
        let mut qacc = vec![T::zero(); t_slices];
        for t in (0..t_slices).rev() {
            let w_t = saved_norm[c * t_slices + t];
            let orow = out.row(t * g + c);
            let dorow = dout.row(t * g + c);
            let (mut a, mut qa) = if t + 1 < t_slices {
                let rescale =
                    (saved_max[c * t_slices + t] - saved_max[c * t_slices + t + 1]).exp();
                let mut a = acc[t + 1].clone();
                for x in a.iter_mut() {
                    *x *= rescale;
                }
                (a, qacc[t + 1] * rescale)
            } else {
                (vec![T::zero(); d], T::zero())
            };
            if w_t > T::zero() {
                let inv_w = T::one() / w_t;
                for i in 0..d {
                    a[i] += dorow[i] * inv_w;
                }
                qa += dot(orow, dorow) * inv_w;
            }
            acc[t] = a;
            qacc[t] = qa;
        }

        let mut j = 0usize;
        for t in 0..t_slices {
            let end = ((t + 1) * block).min(n_tokens);
            while j < end {
                let krow = xk.row(j);
                let s = dot(qrow, krow) * inv_sqrt;
                let e = (s - saved_max[c * t_slices + t]).exp();
                // dL/dv_j = e * acc_t (value gradient)
                axpy(e, &acc[t], &mut dxv.data[j * d..(j + 1) * d]);
                // dL/ds_j = e * (v_j . acc_t - qacc_t)
                let ds = e * (dot(xv.row(j), &acc[t]) - qacc[t]);
                if ds != T::zero() {
                    let scaled = ds * inv_sqrt;
                    axpy(scaled, krow, &mut dgq.data[c * d..(c + 1) * d]);
                    axpy(scaled, qrow, &mut dxk.data[j * d..(j + 1) * d]);
                }
                j += 1;
            }
        }
    }
    (dgq, dxk, dxv)
}

/// Attention probabilities of one region/head for diagnostics and tests.
#[allow(clippy::too_many_arguments)]
pub fn attend_probabilities<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    global_k: Option<&Tensor<T>>,
    tables: &[(usize, &Tensor<T>)],
    meta: &AttendMeta,
    region: usize,
    head: usize,
    slot: usize,
) -> Vec<T> {
    let d = meta.d_model;
    let dh = meta.d_head();
    let n = meta.n;
    let g = meta.g_rows;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let hcol = head * dh;
    let i = slot;
    let qi = &q.data[(region * n + i) * d + hcol..(region * n + i) * d + hcol + dh];
    let ti = meta.local_times[i];
    let tau = meta.region_time_offset[region] + ti;
    let g_base = if meta.g_slices == 1 { 0 } else { tau * g };
    let mut scores = vec![T::neg_infinity(); g + n];
    for c in 0..g {
        let gk = global_k.unwrap();
        let row = &gk.data[(g_base + c) * d + hcol..(g_base + c) * d + hcol + dh];
        scores[c] = dot(qi, row) * inv_sqrt;
    }
    for j in 0..n {
        if meta.causal && meta.local_times[j] > ti {
            continue;
        }
        let kj = &k.data[(region * n + j) * d + hcol..(region * n + j) * d + hcol + dh];
        scores[g + j] = dot(qi, kj) * inv_sqrt + bias_at(tables, meta, head, i, j);
    }
    let max_s = scores.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for s in scores.iter_mut() {
        if *s == T::neg_infinity() {
            *s = T::zero();
        } else {
            *s = (*s - max_s).exp();
            denom += *s;
        }
    }
    for s in scores.iter_mut() {
        *s = *s / denom;
    }
    scores
}
