//! Operation tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and enough
//! saved state to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so a reverse sweep is a valid topological order.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, Csr};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SegmentSoftmax { x: Var, seg: Arc<[usize]> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, seg: Arc<[usize]>, counts: Vec<usize> },
    SegmentSum { x: Var, seg: Arc<[usize]> },
    GatherRows { x: Var, idx: Arc<[usize]> },
    BlockSum { x: Var, block: usize },
    BlockScale { x: Var, w: Var, block: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    NeighborAttention {
        q: Var,
        k: Var,
        v: Var,
        csr: Arc<Csr>,
        heads: usize,
        head_dim: usize,
        alpha: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records differentiable computation for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(rows, cols)` view of a 1-D or 2-D shape; 1-D shapes are a column.
fn row_view(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((*n, 1)),
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[])),
    }
}

fn check_segments(op: &'static str, rows: usize, seg: &[usize], nseg: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::shape(op, &[rows], &[seg.len()]));
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= nseg) {
        return Err(Error::shape(op, &[bad], &[nseg]));
    }
    Ok(())
}

fn segment_shape(input: &[usize], nseg: usize) -> Vec<usize> {
    if input.len() == 1 {
        vec![nseg]
    } else {
        vec![nseg, input[1]]
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Clears every stored gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Records `t` as a leaf. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Leaf copy of a parameter that will receive gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.zero_grad();
        t.set_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Leaf copy that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.zero_grad();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        let t = Tensor::new(shape, data)
            .expect("primitive produced inconsistent shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.data(a), self.data(b), 0.0, &mut out);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (m, k, n) = match (sx, sw) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("affine", sx, sw)),
        };
        if sb != [n] {
            return Err(Error::shape("affine", sw, sb));
        }
        let bias = self.data(b);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        kernels::gemm_nn(m, k, n, self.data(x), self.data(w), 1.0, &mut out);
        Ok(self.derived(vec![m, n], out, &[x, w, b], Op::Affine(x, w, b)))
    }

    /// Elementwise add; `b` may be broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = if db.is_empty() {
            da.to_vec()
        } else {
            da.iter()
                .zip(db.iter().cycle())
                .map(|(x, y)| x + y)
                .collect()
        };
        let shape = sa.to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("sub", sa, sb));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = sa.to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Exp(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.derived(shape, out, &[a], Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = t.shape().to_vec();
        self.derived(shape, out, &[a], Op::LogSoftmax(a))
    }

    /// Softmax across the rows that share a segment id, independently per
    /// column. Rows of segment `s` are those with `seg[row] == s`.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, nseg: usize) -> Result<Var> {
        let (rows, cols) = row_view("segment_softmax", self.shape(x))?;
        check_segments("segment_softmax", rows, &seg, nseg)?;
        let d = self.data(x);
        let mut max = vec![f64::NEG_INFINITY; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(d[r * cols + c]);
            }
        }
        let mut out = vec![0.0; rows * cols];
        let mut total = vec![0.0; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let e = (d[r * cols + c] - max[s * cols + c]).exp();
                out[r * cols + c] = e;
                total[s * cols + c] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out[r * cols + c] /= total[s * cols + c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x], Op::SegmentSoftmax { x, seg }))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.derived(shape, out, parts, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x);
        let (rows, cols) = match shape {
            [r, c] if start < end && end <= *c => (*r, *c),
            _ => return Err(Error::shape("slice_cols", shape, &[start, end])),
        };
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + end]);
        }
        Ok(self.derived(vec![rows, end - start], out, &[x], Op::SliceCols { x, start }))
    }

    /// Per-segment, per-column maximum over rows. Empty segments yield 0.
    pub fn segment_max(&mut self, x: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        let (rows, cols) = row_view("segment_max", self.shape(x))?;
        check_segments("segment_max", rows, seg, nseg)?;
        let d = self.data(x);
        let mut argmax = vec![usize::MAX; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let slot = &mut argmax[s * cols + c];
                if *slot == usize::MAX || d[r * cols + c] > d[*slot * cols + c] {
                    *slot = r;
                }
            }
        }
        let out = argmax
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                if r == usize::MAX {
                    0.0
                } else {
                    d[r * cols + i % cols]
                }
            })
            .collect();
        let shape = segment_shape(self.shape(x), nseg);
        Ok(self.derived(shape, out, &[x], Op::SegmentMax { x, argmax }))
    }

    /// Per-segment mean over rows. Empty segments yield 0.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<[usize]>, nseg: usize) -> Result<Var> {
        let (rows, cols) = row_view("segment_mean", self.shape(x))?;
        check_segments("segment_mean", rows, &seg, nseg)?;
        let d = self.data(x);
        let mut counts = vec![0usize; nseg];
        let mut out = vec![0.0; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for c in 0..cols {
                out[s * cols + c] += d[r * cols + c];
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[s * cols..(s + 1) * cols]
                    .iter_mut()
                    .for_each(|v| *v /= n as f64);
            }
        }
        let shape = segment_shape(self.shape(x), nseg);
        Ok(self.derived(shape, out, &[x], Op::SegmentMean { x, seg, counts }))
    }

    /// Per-segment sum over rows.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, nseg: usize) -> Result<Var> {
        let (rows, cols) = row_view("segment_sum", self.shape(x))?;
        check_segments("segment_sum", rows, &seg, nseg)?;
        let d = self.data(x);
        let mut out = vec![0.0; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out[s * cols + c] += d[r * cols + c];
            }
        }
        let shape = segment_shape(self.shape(x), nseg);
        Ok(self.derived(shape, out, &[x], Op::SegmentSum { x, seg }))
    }

    /// Row gather: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (rows, cols) = row_view("gather_rows", self.shape(x))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let shape = if self.shape(x).len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), cols]
        };
        Ok(self.derived(shape, out, &[x], Op::GatherRows { x, idx }))
    }

    /// Sums each row over consecutive column blocks: `[r, m·b] → [r, m]`.
    pub fn block_sum(&mut self, x: Var, block: usize) -> Result<Var> {
        let (rows, cols) = row_view("block_sum", self.shape(x))?;
        if block == 0 || cols % block != 0 {
            return Err(Error::shape("block_sum", self.shape(x), &[block]));
        }
        let m = cols / block;
        let out = self
            .data(x)
            .chunks(block)
            .map(|c| c.iter().sum())
            .collect();
        Ok(self.derived(vec![rows, m], out, &[x], Op::BlockSum { x, block }))
    }

    /// Scales column block `j` of row `r` by `w[r, j]`: `[r, m·b] × [r, m] → [r, m·b]`.
    pub fn block_scale(&mut self, x: Var, w: Var, block: usize) -> Result<Var> {
        let (rows, cols) = row_view("block_scale", self.shape(x))?;
        let (wr, wc) = row_view("block_scale", self.shape(w))?;
        if block == 0 || wr != rows || wc * block != cols {
            return Err(Error::shape("block_scale", self.shape(x), self.shape(w)));
        }
        let (dx, dw) = (self.data(x), self.data(w));
        let out = dx
            .chunks(block)
            .zip(dw)
            .flat_map(|(c, &s)| c.iter().map(move |v| v * s))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x, w], Op::BlockScale { x, w, block }))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x], Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.derived(Vec::new(), vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.derived(Vec::new(), vec![s], &[a], Op::Mean(a))
    }

    /// Fused multi-head neighbourhood attention (see
    /// [`kernels::neighbor_attention`]). Equivalent to composing
    /// `gather_rows`, `mul`, `block_sum`, `scale`, `segment_softmax`,
    /// `block_scale` and `segment_sum`, without materialising per-edge
    /// tensors.
    pub fn neighbor_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        csr: Arc<Csr>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let width = heads * head_dim;
        let sq = self.shape(q);
        if sq != [csr.rows(), width] {
            return Err(Error::shape("neighbor_attention", sq, &[csr.rows(), width]));
        }
        for other in [k, v] {
            if self.shape(other) != sq {
                return Err(Error::shape("neighbor_attention", sq, self.shape(other)));
            }
        }
        if csr.cols.iter().any(|&c| c >= csr.rows()) {
            return Err(Error::contract("attention neighbour index out of range"));
        }
        let (out, alpha) = kernels::neighbor_attention(
            &csr,
            heads,
            head_dim,
            self.data(q),
            self.data(k),
            self.data(v),
        );
        let shape = sq.to_vec();
        Ok(self.derived(
            shape,
            out,
            &[q, k, v],
            Op::NeighborAttention {
                q,
                k,
                v,
                csr,
                heads,
                head_dim,
                alpha,
            },
        ))
    }

    /// Attention weights saved by a [`Tape::neighbor_attention`] node, laid
    /// out as `nnz × heads`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::NeighborAttention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Back-propagates from a scalar `loss`, adding gradients into every
    /// reachable node that requires them. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad_owned(g);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        let t = &self.nodes[v.0].value;
        if !t.requires_grad() {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; t.numel()]))
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(adj, *a) {
                    kernels::gemm_nt(m, n, k, g, self.data(*b), 1.0, da);
                }
                if let Some(db) = self.slot(adj, *b) {
                    kernels::gemm_tn(k, m, n, self.data(*a), g, 1.0, db);
                }
            }
            Op::Affine(x, w, b) => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if let Some(dx) = self.slot(adj, *x) {
                    kernels::gemm_nt(m, n, k, g, self.data(*w), 1.0, dx);
                }
                if let Some(dw) = self.slot(adj, *w) {
                    kernels::gemm_tn(k, m, n, self.data(*x), g, 1.0, dw);
                }
                if let Some(db) = self.slot(adj, *b) {
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(adj, *b) {
                    let n = db.len();
                    if n > 0 {
                        for chunk in g.chunks(n) {
                            db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(adj, *b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    let bd = self.data(*b);
                    da.iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
                if let Some(db) = self.slot(adj, *b) {
                    let ad = self.data(*a);
                    db.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::Relu(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(d, (x, y))| {
                            if *y > 0.0 {
                                *d += x
                            }
                        });
                }
            }
            Op::Log(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    let ad = self.data(*a);
                    da.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(d, (x, y))| *d += x / y);
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut()
                        .zip(g.iter().zip(out))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols().max(1);
                if let Some(da) = self.slot(adj, *a) {
                    for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let s: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (x - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols().max(1);
                if let Some(da) = self.slot(adj, *a) {
                    for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, x), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += x - y.exp() * s;
                        }
                    }
                }
            }
            Op::SegmentSoftmax { x, seg } => {
                let cols = node.value.cols().max(1);
                let cols = if node.value.shape().len() == 1 { 1 } else { cols };
                if let Some(dx) = self.slot(adj, *x) {
                    let nseg = seg.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg * cols];
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..cols {
                            dot[s * cols + c] += g[r * cols + c] * out[r * cols + c];
                        }
                    }
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..cols {
                            let j = r * cols + c;
                            dx[j] += out[j] * (g[j] - dot[s * cols + c]);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(adj, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let cols = self.value(*x).cols();
                if let Some(dx) = self.slot(adj, *x) {
                    for (r, src) in g.chunks(w).enumerate() {
                        dx[r * cols + start..r * cols + start + w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let cols = if self.shape(*x).len() == 1 { 1 } else { self.value(*x).cols() };
                if let Some(dx) = self.slot(adj, *x) {
                    for (i, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            dx[r * cols + i % cols] += g[i];
                        }
                    }
                }
            }
            Op::SegmentMean { x, seg, counts } => {
                let cols = if self.shape(*x).len() == 1 { 1 } else { self.value(*x).cols() };
                if let Some(dx) = self.slot(adj, *x) {
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for c in 0..cols {
                            dx[r * cols + c] += g[s * cols + c] * inv;
                        }
                    }
                }
            }
            Op::SegmentSum { x, seg } => {
                let cols = if self.shape(*x).len() == 1 { 1 } else { self.value(*x).cols() };
                if let Some(dx) = self.slot(adj, *x) {
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..cols {
                            dx[r * cols + c] += g[s * cols + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = if self.shape(*x).len() == 1 { 1 } else { self.value(*x).cols() };
                if let Some(dx) = self.slot(adj, *x) {
                    for (o, &r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[r * cols + c] += g[o * cols + c];
                        }
                    }
                }
            }
            Op::BlockSum { x, block } => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (chunk, gv) in dx.chunks_mut(*block).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::BlockScale { x, w, block } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let wd = self.data(*w);
                    for ((chunk, gc), s) in dx.chunks_mut(*block).zip(g.chunks(*block)).zip(wd) {
                        chunk.iter_mut().zip(gc).for_each(|(d, gv)| *d += gv * s);
                    }
                }
                if let Some(dw) = self.slot(adj, *w) {
                    let xd = self.data(*x);
                    for ((d, gc), xc) in dw.iter_mut().zip(g.chunks(*block)).zip(xd.chunks(*block)) {
                        *d += kernels::dot(gc, xc);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.slot(adj, *x) {
                    dx.iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(d, (gv, m))| *d += gv * m);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.slot(adj, *a) {
                    let s = g[0] / da.len().max(1) as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::NeighborAttention {
                q,
                k,
                v,
                csr,
                heads,
                head_dim,
                alpha,
            } => {
                // Buffers are taken out of `adj` so all three can be borrowed at once.
                let mut take = |var: Var| -> Option<Vec<f64>> {
                    self.slot(adj, var)?;
                    adj[var.0].take()
                };
                let mut dq = take(*q);
                let mut dk = take(*k);
                let mut dv = take(*v);
                kernels::neighbor_attention_backward(
                    csr,
                    *heads,
                    *head_dim,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    alpha,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(b) = buf {
                        match &mut adj[var.0] {
                            Some(existing) => existing.iter_mut().zip(&b).for_each(|(a, x)| *a += x),
                            slot @ None => *slot = Some(b),
                        }
                    }
                }
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
