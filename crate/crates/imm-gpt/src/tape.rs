//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every tensor lives in one flat arena owned by the [`Tape`]. Parameters are
//! registered first and survive for the life of the tape; activation nodes are
//! appended during a forward pass and discarded by [`Tape::reset`] before the
//! next one. Because nodes are appended in dependency order, the reverse
//! index sweep in [`Tape::backward`] is already a topological order.
//!
//! Kernels are deterministic for a fixed thread setting: parallel paths
//! partition their output into disjoint blocks whose boundaries depend only
//! on shapes and the configured thread count.

use std::fmt;
use std::mem;

use rayon::prelude::*;

use crate::element::{c, Element};
use crate::threads::kernel_threads;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Errors raised by graph construction or backward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Two shapes that an op requires to agree do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An integer index (token id, class target) is outside its bound.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// Backward was asked to start from a tensor that is not a scalar.
    NotScalar { shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Recorded operation, holding input ids plus whatever forward context the
/// backward kernel needs (saved statistics, probabilities, masks).
enum Op<E: Element> {
    Leaf,
    /// y = x @ w (+ b). x: [rows, d_in], w: [d_in, d_out].
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    /// y = x @ w^T. w: [d_out, d_in]. Used for the tied output head.
    LinearT {
        x: TensorId,
        w: TensorId,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    /// Row gather: y[r] = table[ids[r]].
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
        dim: usize,
    },
    /// y[r] = x[r] + table[r % period]; x has reps * period rows.
    AddRows {
        x: TensorId,
        table: TensorId,
        period: usize,
        cols: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: E,
    },
    Gelu {
        x: TensorId,
    },
    /// Inverted dropout; kept units are scaled by 1/(1-p). p = 0 never
    /// records a node (the builder returns its input unchanged).
    Dropout {
        x: TensorId,
        keep: Vec<bool>,
        scale: E,
    },
    /// Row-wise softmax over the last axis; node data holds the
    /// probabilities, which is all backward needs.
    Softmax {
        x: TensorId,
        cols: usize,
    },
    /// Softmax over keys j <= i for each query row i of every [t, t] block.
    /// Masked positions are exactly zero; no sentinel values are ever stored.
    CausalSoftmax {
        x: TensorId,
        t: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        cols: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    /// Mean negative log-likelihood over rows; saves the softmax of the
    /// logits for backward.
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        vocab: usize,
        probs: Vec<E>,
    },
    /// [b*t, heads*hd] -> [b*heads, t, hd].
    SplitHeads {
        x: TensorId,
        b: usize,
        t: usize,
        heads: usize,
        hd: usize,
    },
    /// [b*heads, t, hd] -> [b*t, heads*hd].
    MergeHeads {
        x: TensorId,
        b: usize,
        t: usize,
        heads: usize,
        hd: usize,
    },
    /// Column slice: y[r] = x[r][start .. start+cols_out].
    SliceCols {
        x: TensorId,
        cols_in: usize,
        start: usize,
        cols_out: usize,
    },
    /// c[i] = alpha * a[i] @ b[i]^T per batch. a: [batch, m, k], b: [batch, n, k].
    BmmNT {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
        alpha: E,
    },
    /// c[i] = a[i] @ b[i] per batch. a: [batch, m, k], b: [batch, k, n].
    Bmm {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Slot-memory read; see [`Tape::mem_read`]. Saves the attention weights
    /// alpha: [b, t, slots].
    MemRead {
        summaries: TensorId,
        queries: TensorId,
        /// Summaries of the previous bank user; stale slots read from here
        /// (shared-bank scope). None means stale slots are zero.
        prev: Option<TensorId>,
        b: usize,
        t: usize,
        dim: usize,
        slots: usize,
        causal: bool,
        /// Score multiplier: 1 (paper semantics) or 1/sqrt(dim).
        kscale: E,
        alpha: Vec<E>,
    },
    /// Scalar sum of all entries.
    SumAll {
        x: TensorId,
    },
}

struct Node<E: Element> {
    data: Vec<E>,
    grad: Vec<E>,
    shape: Vec<usize>,
    op: Op<E>,
}

/// Arena of tensors plus the recorded ops that produced them.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    param_boundary: usize,
    frozen: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_boundary: 0,
            frozen: false,
        }
    }

    /// Registers a trainable parameter. Must precede [`Tape::freeze_params`].
    pub fn param(&mut self, data: Vec<E>, shape: &[usize]) -> TensorId {
        assert!(!self.frozen, "parameters must be registered before freezing");
        assert_eq!(data.len(), numel(shape), "data length must match shape");
        self.push(data, shape.to_vec(), Op::Leaf)
    }

    /// Marks the end of parameter registration. Everything appended after
    /// this point is an activation and is discarded by [`Tape::reset`].
    pub fn freeze_params(&mut self) {
        self.frozen = true;
        self.param_boundary = self.nodes.len();
    }

    /// Drops all activation nodes, keeping parameters (and their gradients)
    /// intact. Call between training steps.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.param_boundary);
    }

    /// Non-trainable input tensor (an activation leaf).
    pub fn constant(&mut self, data: Vec<E>, shape: &[usize]) -> TensorId {
        assert_eq!(data.len(), numel(shape), "data length must match shape");
        self.push(data, shape.to_vec(), Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn data_mut(&mut self, id: TensorId) -> &mut [E] {
        &mut self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].grad
    }

    pub fn grad_mut(&mut self, id: TensorId) -> &mut [E] {
        &mut self.nodes[id.0].grad
    }

    /// Simultaneous value and gradient access to one tensor, for in-place
    /// optimizer updates.
    pub fn data_and_grad_mut(&mut self, id: TensorId) -> (&mut [E], &mut [E]) {
        let node = &mut self.nodes[id.0];
        (&mut node.data, &mut node.grad)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar readout; panics if the tensor is not a single element.
    pub fn value(&self, id: TensorId) -> E {
        assert_eq!(self.nodes[id.0].data.len(), 1, "value() needs a scalar");
        self.nodes[id.0].data[0]
    }

    /// Ids of all registered parameters, in registration order.
    pub fn param_ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.param_boundary).map(TensorId)
    }

    pub fn num_params(&self) -> usize {
        self.nodes[..self.param_boundary]
            .iter()
            .map(|n| n.data.len())
            .sum()
    }

    /// Zeroes parameter gradients. Activation gradients are zeroed by
    /// [`Tape::backward`] itself.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes[..self.param_boundary] {
            node.grad.fill(E::zero());
        }
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op<E>) -> TensorId {
        let grad = vec![E::zero(); data.len()];
        self.nodes.push(Node {
            data,
            grad,
            shape,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    // ---- op builders -----------------------------------------------------

    /// y = x @ w + b. x: [..., d_in], w: [d_in, d_out], b: [d_out].
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        let rows = numel(&xs) / d_in;
        if let Some(bid) = b {
            let bs = self.shape(bid).to_vec();
            if numel(&bs) != d_out {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: bs,
                    rhs: vec![d_out],
                });
            }
        }
        let mut out = vec![E::zero(); rows * d_out];
        unsafe {
            gemm_rows(
                rows,
                d_in,
                d_out,
                E::one(),
                self.nodes[x.0].data.as_ptr(),
                d_in as isize,
                1,
                self.nodes[w.0].data.as_ptr(),
                d_out as isize,
                1,
                E::zero(),
                out.as_mut_ptr(),
                d_out as isize,
                1,
            );
        }
        if let Some(bid) = b {
            let bias = &self.nodes[bid.0].data;
            for row in out.chunks_mut(d_out) {
                for (y, &bv) in row.iter_mut().zip(bias.iter()) {
                    *y = *y + bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        Ok(self.push(
            out,
            shape,
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            },
        ))
    }

    /// y = x @ w^T with w: [d_out, d_in]. Shares storage conventions with the
    /// embedding table so the output head can reuse it.
    pub fn linear_t(&mut self, x: TensorId, w: TensorId) -> Result<TensorId, TensorError> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(TensorError::ShapeMismatch {
                op: "linear_t",
                lhs: xs,
                rhs: ws,
            });
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        let rows = numel(&xs) / d_in;
        let mut out = vec![E::zero(); rows * d_out];
        unsafe {
            // w^T is the [d_in, d_out] view of w with swapped strides.
            gemm_rows(
                rows,
                d_in,
                d_out,
                E::one(),
                self.nodes[x.0].data.as_ptr(),
                d_in as isize,
                1,
                self.nodes[w.0].data.as_ptr(),
                1,
                d_in as isize,
                E::zero(),
                out.as_mut_ptr(),
                d_out as isize,
                1,
            );
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        Ok(self.push(
            out,
            shape,
            Op::LinearT {
                x,
                w,
                rows,
                d_in,
                d_out,
            },
        ))
    }

    /// Gathers rows of `table` by id: y: [ids.len(), dim].
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: ts,
                rhs: vec![0, 0],
            });
        }
        let (n, dim) = (ts[0], ts[1]);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: n,
                });
            }
        }
        let tdata = &self.nodes[table.0].data;
        let mut out = vec![E::zero(); ids.len() * dim];
        for (row, &id) in out.chunks_mut(dim).zip(ids.iter()) {
            row.copy_from_slice(&tdata[id * dim..(id + 1) * dim]);
        }
        let rows = ids.len();
        Ok(self.push(
            out,
            vec![rows, dim],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
        ))
    }

    /// y[r] = x[r] + table[r % period]. Broadcasts a [period, cols] table
    /// (e.g. positional embeddings for the first `period` positions) across
    /// batch-major rows.
    pub fn add_rows(
        &mut self,
        x: TensorId,
        table: TensorId,
        period: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ts = self.shape(table).to_vec();
        let cols = *xs.last().unwrap_or(&0);
        let rows = numel(&xs) / cols.max(1);
        let ok = ts.len() == 2 && ts[1] == cols && period <= ts[0] && rows.is_multiple_of(period);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                lhs: xs,
                rhs: ts,
            });
        }
        let mut out = self.nodes[x.0].data.clone();
        let tdata = &self.nodes[table.0].data;
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let src = &tdata[(r % period) * cols..(r % period + 1) * cols];
            for (y, &v) in row.iter_mut().zip(src.iter()) {
                *y = *y + v;
            }
        }
        Ok(self.push(out, xs, Op::AddRows {
            x,
            table,
            period,
            cols,
        }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, factor: E) -> TensorId {
        let out: Vec<E> = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Scale { x, factor })
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let k: E = c(0.7978845608028654); // sqrt(2/pi)
        let a: E = c(0.044715);
        let half: E = c(0.5);
        let mut out = vec![E::zero(); self.nodes[x.0].data.len()];
        out.par_chunks_mut(4096)
            .zip(self.nodes[x.0].data.par_chunks(4096))
            .for_each(|(ys, xs)| {
                for (y, &v) in ys.iter_mut().zip(xs.iter()) {
                    let u = k * (v + a * v * v * v);
                    *y = half * v * (E::one() + u.tanh());
                }
            });
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Gelu { x })
    }

    /// Inverted dropout. At p = 0 this is the identity and records nothing.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut dyn rand::RngCore) -> TensorId {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let n = self.nodes[x.0].data.len();
        let keep: Vec<bool> = (0..n)
            .map(|_| (rng.next_u32() as f64 / 4294967296.0) >= p)
            .collect();
        let scale: E = c(1.0 / (1.0 - p));
        let out: Vec<E> = self.nodes[x.0]
            .data
            .iter()
            .zip(keep.iter())
            .map(|(&v, &k)| if k { v * scale } else { E::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Dropout { x, keep, scale })
    }

    /// Row-wise softmax over the last axis. Numerically stabilized by a
    /// per-row max shift, so any finite input yields finite probabilities.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "softmax",
            lhs: xs.clone(),
            rhs: vec![],
        })?;
        let mut out = self.nodes[x.0].data.clone();
        out.par_chunks_mut(cols).for_each(softmax_row);
        Ok(self.push(out, xs, Op::Softmax { x, cols }))
    }

    /// Softmax over keys j <= i within each [t, t] block of x: [..., t, t].
    /// Future positions get probability exactly zero.
    pub fn causal_softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let n = xs.len();
        if n < 2 || xs[n - 1] != xs[n - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                lhs: xs.clone(),
                rhs: xs,
            });
        }
        let t = xs[n - 1];
        let mut out = self.nodes[x.0].data.clone();
        out.par_chunks_mut(t * t).for_each(|block| {
            for i in 0..t {
                let row = &mut block[i * t..(i + 1) * t];
                softmax_row(&mut row[..i + 1]);
                row[i + 1..].fill(E::zero());
            }
        });
        Ok(self.push(out, xs, Op::CausalSoftmax { x, t }))
    }

    /// Row-wise layer normalization with learned gain and bias over the last
    /// axis. `eps` is added to the (population) variance.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().unwrap_or(&0);
        if numel(self.shape(gain)) != cols || numel(self.shape(bias)) != cols || cols == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = numel(&xs) / cols;
        let mut out = vec![E::zero(); rows * cols];
        let mut mean = vec![E::zero(); rows];
        let mut rstd = vec![E::zero(); rows];
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let bdat = &self.nodes[bias.0].data;
        let epse: E = c(eps);
        let inv_cols: E = c(1.0 / cols as f64);
        out.par_chunks_mut(cols)
            .zip(xd.par_chunks(cols))
            .zip(mean.par_iter_mut().zip(rstd.par_iter_mut()))
            .for_each(|((yrow, xrow), (m, r))| {
                let mut s = E::zero();
                for &v in xrow {
                    s = s + v;
                }
                let mu = s * inv_cols;
                let mut var = E::zero();
                for &v in xrow {
                    let d = v - mu;
                    var = var + d * d;
                }
                var = var * inv_cols;
                let rs = (var + epse).sqrt().recip();
                *m = mu;
                *r = rs;
                for ((y, &v), (&gv, &bv)) in
                    yrow.iter_mut().zip(xrow.iter()).zip(g.iter().zip(bdat.iter()))
                {
                    *y = (v - mu) * rs * gv + bv;
                }
            });
        Ok(self.push(
            out,
            xs,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                mean,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under softmax(logits).
    /// logits: [rows, vocab]; output is a scalar. Stable log-sum-exp.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let ls = self.shape(logits).to_vec();
        let vocab = *ls.last().unwrap_or(&0);
        let rows = numel(&ls) / vocab.max(1);
        if rows != targets.len() || vocab == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
        }
        let mut probs = self.nodes[logits.0].data.clone();
        let losses: Vec<E> = probs
            .par_chunks_mut(vocab)
            .zip(targets.par_iter())
            .map(|(row, &t)| {
                let mut mx = row[0];
                for &v in row.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = E::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    denom = denom + *v;
                }
                let inv = denom.recip();
                for v in row.iter_mut() {
                    *v = *v * inv;
                }
                // -ln p[t] = ln(denom) - (x[t] - mx), but p is already formed;
                // use the saved probability directly for clarity.
                -row[t].ln()
            })
            .collect();
        let mut total = E::zero();
        for &l in &losses {
            total = total + l;
        }
        let loss = total * c(1.0 / rows as f64);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                vocab,
                probs,
            },
        ))
    }

    /// [b*t, heads*hd] -> [b*heads, t, hd].
    pub fn split_heads(
        &mut self,
        x: TensorId,
        b: usize,
        t: usize,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if numel(&xs) != b * t * d || !d.is_multiple_of(heads) || d == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                lhs: xs,
                rhs: vec![b * t, heads],
            });
        }
        let hd = d / heads;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * d + h * hd;
                    let dst = ((bi * heads + h) * t + ti) * hd;
                    out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        Ok(self.push(
            out,
            vec![b * heads, t, hd],
            Op::SplitHeads { x, b, t, heads, hd },
        ))
    }

    /// [b*heads, t, hd] -> [b*t, heads*hd]. Inverse of [`Tape::split_heads`].
    pub fn merge_heads(
        &mut self,
        x: TensorId,
        b: usize,
        t: usize,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != b * heads || xs[1] != t {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                lhs: xs,
                rhs: vec![b * heads, t, 0],
            });
        }
        let hd = xs[2];
        let d = heads * hd;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * hd;
                    let dst = (bi * t + ti) * d + h * hd;
                    out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        Ok(self.push(out, vec![b * t, d], Op::MergeHeads { x, b, t, heads, hd }))
    }

    /// Column slice over the last axis.
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        cols_out: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let cols_in = *xs.last().unwrap_or(&0);
        if start + cols_out > cols_in {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: xs,
                rhs: vec![start, cols_out],
            });
        }
        let rows = numel(&xs) / cols_in;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); rows * cols_out];
        for (r, row) in out.chunks_mut(cols_out).enumerate() {
            row.copy_from_slice(&xd[r * cols_in + start..r * cols_in + start + cols_out]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cols_out;
        Ok(self.push(
            out,
            shape,
            Op::SliceCols {
                x,
                cols_in,
                start,
                cols_out,
            },
        ))
    }

    /// Batched c[i] = alpha * a[i] @ b[i]^T. a: [batch, m, k], b: [batch, n, k].
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId, alpha: E) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![E::zero(); batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, cb)| unsafe {
            E::gemm(
                m,
                k,
                n,
                alpha,
                ad[i * m * k..].as_ptr(),
                k as isize,
                1,
                bd[i * n * k..].as_ptr(),
                1,
                k as isize,
                E::zero(),
                cb.as_mut_ptr(),
                n as isize,
                1,
            );
        });
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::BmmNT {
                a,
                b,
                batch,
                m,
                n,
                k,
                alpha,
            },
        ))
    }

    /// Batched c[i] = a[i] @ b[i]. a: [batch, m, k], b: [batch, k, n].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![E::zero(); batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, cb)| unsafe {
            E::gemm(
                m,
                k,
                n,
                E::one(),
                ad[i * m * k..].as_ptr(),
                k as isize,
                1,
                bd[i * k * n..].as_ptr(),
                n as isize,
                1,
                E::zero(),
                cb.as_mut_ptr(),
                n as isize,
                1,
            );
        });
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Differentiable slot-memory read over per-position summaries.
    ///
    /// `summaries` and `queries` are [b*t, dim] rows. Conceptually each
    /// sequence owns a bank of `slots` vectors; position p writes its
    /// summary to slot p % slots, and every position t reads the bank with
    /// softmax attention over dot products between its query and each slot
    /// (multiplied by 1/sqrt(dim) when `scaled`, otherwise raw).
    ///
    /// `causal` selects which writes a reader sees: with it, position t sees
    /// the bank as of its own write (slot i holds the summary from the
    /// latest p <= t with p % slots == i); without it, every position reads
    /// the bank left by the full pass over all t positions, which lets
    /// information flow backward from later positions.
    ///
    /// `prev` supplies the bank's starting contents as the final state of an
    /// earlier full pass (shared-bank scope, where the bank survives from
    /// one block to the next): a slot this pass has not yet overwritten
    /// reads from `prev` instead of being zero. With `prev` = None such
    /// slots are zero vectors (score zero, zero contribution), the
    /// fresh-bank case.
    #[allow(clippy::too_many_arguments)]
    pub fn mem_read(
        &mut self,
        summaries: TensorId,
        queries: TensorId,
        prev: Option<TensorId>,
        b: usize,
        t: usize,
        slots: usize,
        causal: bool,
        scaled: bool,
    ) -> Result<TensorId, TensorError> {
        let ss = self.shape(summaries).to_vec();
        let qs = self.shape(queries).to_vec();
        if ss != qs || ss.is_empty() || slots == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mem_read",
                lhs: ss,
                rhs: qs,
            });
        }
        if let Some(p) = prev {
            if self.shape(p) != ss {
                return Err(TensorError::ShapeMismatch {
                    op: "mem_read",
                    lhs: self.shape(p).to_vec(),
                    rhs: ss,
                });
            }
        }
        let dim = *ss.last().unwrap();
        if numel(&ss) != b * t * dim {
            return Err(TensorError::ShapeMismatch {
                op: "mem_read",
                lhs: ss,
                rhs: vec![b * t, dim],
            });
        }
        let kscale: E = if scaled {
            c(1.0 / (dim as f64).sqrt())
        } else {
            E::one()
        };
        let sd = &self.nodes[summaries.0].data;
        let qd = &self.nodes[queries.0].data;
        let pd = prev.map(|p| self.nodes[p.0].data.as_slice());
        let mut out = vec![E::zero(); b * t * dim];
        let mut alpha = vec![E::zero(); b * t * slots];
        out.par_chunks_mut(t * dim)
            .zip(alpha.par_chunks_mut(t * slots))
            .enumerate()
            .for_each(|(bi, (outb, alphab))| {
                let sb = &sd[bi * t * dim..(bi + 1) * t * dim];
                let pb = pd.map(|p| &p[bi * t * dim..(bi + 1) * t * dim]);
                let slot_row = |content: SlotContent| -> Option<&[E]> {
                    match content {
                        SlotContent::Own(p) => Some(&sb[p * dim..(p + 1) * dim]),
                        SlotContent::Prev(p) => pb.map(|pp| &pp[p * dim..(p + 1) * dim]),
                        SlotContent::Zero => None,
                    }
                };
                let qb = &qd[bi * t * dim..(bi + 1) * t * dim];
                for ti in 0..t {
                    let q = &qb[ti * dim..(ti + 1) * dim];
                    let arow = &mut alphab[ti * slots..(ti + 1) * slots];
                    for (i, a) in arow.iter_mut().enumerate() {
                        let content = slot_content(ti, i, t, slots, causal, pb.is_some());
                        *a = match slot_row(content) {
                            Some(row) => kscale * dot(row, q),
                            None => E::zero(),
                        };
                    }
                    softmax_row(arow);
                    let r = &mut outb[ti * dim..(ti + 1) * dim];
                    for (i, &a) in arow.iter().enumerate() {
                        let content = slot_content(ti, i, t, slots, causal, pb.is_some());
                        if let Some(row) = slot_row(content) {
                            for (rv, &sv) in r.iter_mut().zip(row.iter()) {
                                *rv = *rv + a * sv;
                            }
                        }
                    }
                }
            });
        Ok(self.push(
            out,
            ss,
            Op::MemRead {
                summaries,
                queries,
                prev,
                b,
                t,
                dim,
                slots,
                causal,
                kscale,
                alpha,
            },
        ))
    }

    /// Scalar sum of every entry.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = E::zero();
        for &v in &self.nodes[x.0].data {
            s = s + v;
        }
        self.push(vec![s], vec![1], Op::SumAll { x })
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Parameter gradients accumulate
    /// across calls (zero them with [`Tape::zero_grads`]); activation
    /// gradients are reset here, so repeating backward on the same graph
    /// exactly doubles parameter gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes[self.param_boundary..] {
            node.grad.fill(E::zero());
        }
        let s = self.nodes[loss.0].grad[0];
        self.nodes[loss.0].grad[0] = s + E::one();
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = mem::take(&mut self.nodes[i].grad);
            self.op_backward(i, &op, &g);
            self.nodes[i].grad = g;
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn take_grad(&mut self, id: TensorId) -> Vec<E> {
        mem::take(&mut self.nodes[id.0].grad)
    }

    fn put_grad(&mut self, id: TensorId, g: Vec<E>) {
        self.nodes[id.0].grad = g;
    }

    /// dst.grad += src (elementwise).
    fn accum(&mut self, id: TensorId, src: &[E]) {
        for (gv, &sv) in self.nodes[id.0].grad.iter_mut().zip(src.iter()) {
            *gv = *gv + sv;
        }
    }

    fn op_backward(&mut self, node: usize, op: &Op<E>, g: &[E]) {
        match *op {
            Op::Leaf => {}
            Op::Linear {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            } => {
                let mut xg = self.take_grad(x);
                unsafe {
                    // dx += dy @ w^T
                    gemm_rows(
                        rows,
                        d_out,
                        d_in,
                        E::one(),
                        g.as_ptr(),
                        d_out as isize,
                        1,
                        self.nodes[w.0].data.as_ptr(),
                        1,
                        d_out as isize,
                        E::one(),
                        xg.as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                self.put_grad(x, xg);
                let mut wg = self.take_grad(w);
                unsafe {
                    // dw += x^T @ dy
                    gemm_rows(
                        d_in,
                        rows,
                        d_out,
                        E::one(),
                        self.nodes[x.0].data.as_ptr(),
                        1,
                        d_in as isize,
                        g.as_ptr(),
                        d_out as isize,
                        1,
                        E::one(),
                        wg.as_mut_ptr(),
                        d_out as isize,
                        1,
                    );
                }
                self.put_grad(w, wg);
                if let Some(bid) = b {
                    let bg = &mut self.nodes[bid.0].grad;
                    for row in g.chunks(d_out) {
                        for (s, &v) in bg.iter_mut().zip(row.iter()) {
                            *s = *s + v;
                        }
                    }
                }
            }
            Op::LinearT {
                x,
                w,
                rows,
                d_in,
                d_out,
            } => {
                let mut xg = self.take_grad(x);
                unsafe {
                    // dx += dy @ w
                    gemm_rows(
                        rows,
                        d_out,
                        d_in,
                        E::one(),
                        g.as_ptr(),
                        d_out as isize,
                        1,
                        self.nodes[w.0].data.as_ptr(),
                        d_in as isize,
                        1,
                        E::one(),
                        xg.as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                self.put_grad(x, xg);
                let mut wg = self.take_grad(w);
                unsafe {
                    // dw += dy^T @ x
                    gemm_rows(
                        d_out,
                        rows,
                        d_in,
                        E::one(),
                        g.as_ptr(),
                        1,
                        d_out as isize,
                        self.nodes[x.0].data.as_ptr(),
                        d_in as isize,
                        1,
                        E::one(),
                        wg.as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                self.put_grad(w, wg);
            }
            Op::Embedding {
                table,
                ref ids,
                dim,
            } => {
                // Sequential scatter: duplicate ids accumulate in row order.
                let tg = &mut self.nodes[table.0].grad;
                for (row, &id) in g.chunks(dim).zip(ids.iter()) {
                    for (s, &v) in tg[id * dim..(id + 1) * dim].iter_mut().zip(row.iter()) {
                        *s = *s + v;
                    }
                }
            }
            Op::AddRows {
                x,
                table,
                period,
                cols,
            } => {
                self.accum(x, g);
                let tg = &mut self.nodes[table.0].grad;
                for (r, row) in g.chunks(cols).enumerate() {
                    let dst = &mut tg[(r % period) * cols..(r % period + 1) * cols];
                    for (s, &v) in dst.iter_mut().zip(row.iter()) {
                        *s = *s + v;
                    }
                }
            }
            Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Scale { x, factor } => {
                let xg = &mut self.nodes[x.0].grad;
                for (s, &v) in xg.iter_mut().zip(g.iter()) {
                    *s = *s + factor * v;
                }
            }
            Op::Gelu { x } => {
                let k: E = c(0.7978845608028654);
                let a: E = c(0.044715);
                let half: E = c(0.5);
                let three: E = c(3.0);
                let mut xg = self.take_grad(x);
                xg.par_chunks_mut(4096)
                    .zip(self.nodes[x.0].data.par_chunks(4096))
                    .zip(g.par_chunks(4096))
                    .for_each(|((gs, xs), gys)| {
                        for ((s, &v), &gy) in gs.iter_mut().zip(xs.iter()).zip(gys.iter()) {
                            let u = k * (v + a * v * v * v);
                            let th = u.tanh();
                            let du = k * (E::one() + three * a * v * v);
                            let d = half * (E::one() + th) + half * v * (E::one() - th * th) * du;
                            *s = *s + gy * d;
                        }
                    });
                self.put_grad(x, xg);
            }
            Op::Dropout {
                x,
                ref keep,
                scale,
            } => {
                let xg = &mut self.nodes[x.0].grad;
                for ((s, &gy), &k) in xg.iter_mut().zip(g.iter()).zip(keep.iter()) {
                    if k {
                        *s = *s + gy * scale;
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let mut xg = self.take_grad(x);
                let probs = &self.nodes[node].data;
                xg.par_chunks_mut(cols)
                    .zip(probs.par_chunks(cols))
                    .zip(g.par_chunks(cols))
                    .for_each(|((xrow, prow), grow)| {
                        let mut s = E::zero();
                        for (&p, &gy) in prow.iter().zip(grow.iter()) {
                            s = s + p * gy;
                        }
                        for ((xv, &p), &gy) in xrow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
                            *xv = *xv + p * (gy - s);
                        }
                    });
                self.put_grad(x, xg);
            }
            Op::CausalSoftmax { x, t } => {
                let mut xg = self.take_grad(x);
                let probs = &self.nodes[node].data;
                xg.par_chunks_mut(t * t)
                    .zip(probs.par_chunks(t * t))
                    .zip(g.par_chunks(t * t))
                    .for_each(|((xb, pb), gb)| {
                        for i in 0..t {
                            let n = i + 1;
                            let prow = &pb[i * t..i * t + n];
                            let grow = &gb[i * t..i * t + n];
                            let mut s = E::zero();
                            for (&p, &gy) in prow.iter().zip(grow.iter()) {
                                s = s + p * gy;
                            }
                            let xrow = &mut xb[i * t..i * t + n];
                            for ((xv, &p), &gy) in
                                xrow.iter_mut().zip(prow.iter()).zip(grow.iter())
                            {
                                *xv = *xv + p * (gy - s);
                            }
                        }
                    });
                self.put_grad(x, xg);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                ref mean,
                ref rstd,
            } => {
                let rows = mean.len();
                let inv_cols: E = c(1.0 / cols as f64);
                // Gain and bias gradients: reductions over rows, done
                // sequentially for a fixed accumulation order.
                {
                    let mut gg = self.take_grad(gain);
                    let xd = &self.nodes[x.0].data;
                    for r in 0..rows {
                        let xrow = &xd[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        for ((s, &xv), &gy) in gg.iter_mut().zip(xrow.iter()).zip(grow.iter()) {
                            *s = *s + gy * (xv - mean[r]) * rstd[r];
                        }
                    }
                    self.put_grad(gain, gg);
                }
                {
                    let bg = &mut self.nodes[bias.0].grad;
                    for row in g.chunks(cols) {
                        for (s, &gy) in bg.iter_mut().zip(row.iter()) {
                            *s = *s + gy;
                        }
                    }
                }
                let mut xg = self.take_grad(x);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gain.0].data;
                xg.par_chunks_mut(cols)
                    .zip(xd.par_chunks(cols))
                    .zip(g.par_chunks(cols))
                    .enumerate()
                    .for_each(|(r, ((xgrow, xrow), grow))| {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for ((&gy, &gv), &xv) in grow.iter().zip(gd.iter()).zip(xrow.iter()) {
                            let a = gy * gv;
                            m1 = m1 + a;
                            m2 = m2 + a * (xv - mu) * rs;
                        }
                        m1 = m1 * inv_cols;
                        m2 = m2 * inv_cols;
                        for ((s, (&gy, &gv)), &xv) in xgrow
                            .iter_mut()
                            .zip(grow.iter().zip(gd.iter()))
                            .zip(xrow.iter())
                        {
                            let a = gy * gv;
                            let xhat = (xv - mu) * rs;
                            *s = *s + rs * (a - m1 - xhat * m2);
                        }
                    });
                self.put_grad(x, xg);
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                vocab,
                ref probs,
            } => {
                let rows = targets.len();
                let gy = g[0] * c(1.0 / rows as f64);
                let mut lg = self.take_grad(logits);
                lg.par_chunks_mut(vocab)
                    .zip(probs.par_chunks(vocab))
                    .zip(targets.par_iter())
                    .for_each(|((lrow, prow), &t)| {
                        for (j, (s, &p)) in lrow.iter_mut().zip(prow.iter()).enumerate() {
                            let ind = if j == t { E::one() } else { E::zero() };
                            *s = *s + gy * (p - ind);
                        }
                    });
                self.put_grad(logits, lg);
            }
            Op::SplitHeads { x, b, t, heads, hd } => {
                let d = heads * hd;
                let xg = &mut self.nodes[x.0].grad;
                for bi in 0..b {
                    for h in 0..heads {
                        for ti in 0..t {
                            let dst = (bi * t + ti) * d + h * hd;
                            let src = ((bi * heads + h) * t + ti) * hd;
                            for (s, &v) in
                                xg[dst..dst + hd].iter_mut().zip(g[src..src + hd].iter())
                            {
                                *s = *s + v;
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, b, t, heads, hd } => {
                let d = heads * hd;
                let xg = &mut self.nodes[x.0].grad;
                for bi in 0..b {
                    for h in 0..heads {
                        for ti in 0..t {
                            let dst = ((bi * heads + h) * t + ti) * hd;
                            let src = (bi * t + ti) * d + h * hd;
                            for (s, &v) in
                                xg[dst..dst + hd].iter_mut().zip(g[src..src + hd].iter())
                            {
                                *s = *s + v;
                            }
                        }
                    }
                }
            }
            Op::SliceCols {
                x,
                cols_in,
                start,
                cols_out,
            } => {
                let xg = &mut self.nodes[x.0].grad;
                for (r, row) in g.chunks(cols_out).enumerate() {
                    let dst = &mut xg[r * cols_in + start..r * cols_in + start + cols_out];
                    for (s, &v) in dst.iter_mut().zip(row.iter()) {
                        *s = *s + v;
                    }
                }
            }
            Op::BmmNT {
                a,
                b,
                batch,
                m,
                n,
                k,
                alpha,
            } => {
                let mut ag = self.take_grad(a);
                {
                    let bd = &self.nodes[b.0].data;
                    // da[i] += alpha * dc[i] @ b[i]
                    ag.par_chunks_mut(m * k).enumerate().for_each(|(i, agb)| unsafe {
                        E::gemm(
                            m,
                            n,
                            k,
                            alpha,
                            g[i * m * n..].as_ptr(),
                            n as isize,
                            1,
                            bd[i * n * k..].as_ptr(),
                            k as isize,
                            1,
                            E::one(),
                            agb.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    });
                }
                self.put_grad(a, ag);
                let mut bg = self.take_grad(b);
                {
                    let ad = &self.nodes[a.0].data;
                    // db[i] += alpha * dc[i]^T @ a[i]
                    bg.par_chunks_mut(n * k).enumerate().for_each(|(i, bgb)| unsafe {
                        E::gemm(
                            n,
                            m,
                            k,
                            alpha,
                            g[i * m * n..].as_ptr(),
                            1,
                            n as isize,
                            ad[i * m * k..].as_ptr(),
                            k as isize,
                            1,
                            E::one(),
                            bgb.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    });
                }
                self.put_grad(b, bg);
                let _ = batch;
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let mut ag = self.take_grad(a);
                {
                    let bd = &self.nodes[b.0].data;
                    // da[i] += dc[i] @ b[i]^T
                    ag.par_chunks_mut(m * k).enumerate().for_each(|(i, agb)| unsafe {
                        E::gemm(
                            m,
                            n,
                            k,
                            E::one(),
                            g[i * m * n..].as_ptr(),
                            n as isize,
                            1,
                            bd[i * k * n..].as_ptr(),
                            1,
                            n as isize,
                            E::one(),
                            agb.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    });
                }
                self.put_grad(a, ag);
                let mut bg = self.take_grad(b);
                {
                    let ad = &self.nodes[a.0].data;
                    // db[i] += a[i]^T @ dc[i]
                    bg.par_chunks_mut(k * n).enumerate().for_each(|(i, bgb)| unsafe {
                        E::gemm(
                            k,
                            m,
                            n,
                            E::one(),
                            ad[i * m * k..].as_ptr(),
                            1,
                            k as isize,
                            g[i * m * n..].as_ptr(),
                            n as isize,
                            1,
                            E::one(),
                            bgb.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    });
                }
                self.put_grad(b, bg);
                let _ = batch;
            }
            Op::MemRead {
                summaries,
                queries,
                prev,
                b,
                t,
                dim,
                slots,
                causal,
                kscale,
                ref alpha,
            } => {
                let sd = &self.nodes[summaries.0].data;
                let qd = &self.nodes[queries.0].data;
                let pd = prev.map(|p| self.nodes[p.0].data.as_slice());
                let mut ds = vec![E::zero(); b * t * dim];
                let mut dq = vec![E::zero(); b * t * dim];
                // Allocated even without prev so the three buffers zip; it
                // stays zero and is dropped in that case.
                let mut dp = vec![E::zero(); b * t * dim];
                ds.par_chunks_mut(t * dim)
                    .zip(dq.par_chunks_mut(t * dim))
                    .zip(dp.par_chunks_mut(t * dim))
                    .enumerate()
                    .for_each(|(bi, ((dsb, dqb), dpb))| {
                        let sb = &sd[bi * t * dim..(bi + 1) * t * dim];
                        let pb = pd.map(|p| &p[bi * t * dim..(bi + 1) * t * dim]);
                        let qb = &qd[bi * t * dim..(bi + 1) * t * dim];
                        let gb = &g[bi * t * dim..(bi + 1) * t * dim];
                        let ab = &alpha[bi * t * slots..(bi + 1) * t * slots];
                        let mut dalpha = vec![E::zero(); slots];
                        for ti in 0..t {
                            let gr = &gb[ti * dim..(ti + 1) * dim];
                            let q = &qb[ti * dim..(ti + 1) * dim];
                            let arow = &ab[ti * slots..(ti + 1) * slots];
                            // d alpha_i = dR . m_i (zero for still-zero slots)
                            let mut asum = E::zero();
                            for (i, da) in dalpha.iter_mut().enumerate() {
                                let content = slot_content(ti, i, t, slots, causal, pb.is_some());
                                *da = match content {
                                    SlotContent::Own(p) => dot(gr, &sb[p * dim..(p + 1) * dim]),
                                    SlotContent::Prev(p) => {
                                        dot(gr, &pb.unwrap()[p * dim..(p + 1) * dim])
                                    }
                                    SlotContent::Zero => E::zero(),
                                };
                                asum = asum + arow[i] * *da;
                            }
                            // Softmax jacobian, then the score's own scale.
                            for i in 0..slots {
                                let ddot = kscale * arow[i] * (dalpha[i] - asum);
                                let content = slot_content(ti, i, t, slots, causal, pb.is_some());
                                let srow = match content {
                                    SlotContent::Own(p) => &sb[p * dim..(p + 1) * dim],
                                    SlotContent::Prev(p) => {
                                        &pb.unwrap()[p * dim..(p + 1) * dim]
                                    }
                                    SlotContent::Zero => continue,
                                };
                                let dqrow = &mut dqb[ti * dim..(ti + 1) * dim];
                                for (dv, &sv) in dqrow.iter_mut().zip(srow.iter()) {
                                    *dv = *dv + ddot * sv;
                                }
                                let target = match content {
                                    SlotContent::Own(p) => &mut dsb[p * dim..(p + 1) * dim],
                                    SlotContent::Prev(p) => &mut dpb[p * dim..(p + 1) * dim],
                                    SlotContent::Zero => unreachable!(),
                                };
                                for ((dv, &gv), &qv) in
                                    target.iter_mut().zip(gr.iter()).zip(q.iter())
                                {
                                    *dv = *dv + arow[i] * gv + ddot * qv;
                                }
                            }
                        }
                    });
                self.accum(summaries, &ds);
                self.accum(queries, &dq);
                if let Some(p) = prev {
                    self.accum(p, &dp);
                }
            }
            Op::SumAll { x } => {
                let gy = g[0];
                let xg = &mut self.nodes[x.0].grad;
                for s in xg.iter_mut() {
                    *s = *s + gy;
                }
            }
        }
    }
}

/// Stable in-place softmax of one row.
fn softmax_row<E: Element>(row: &mut [E]) {
    if row.is_empty() {
        return;
    }
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut denom = E::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        denom = denom + *v;
    }
    let inv = denom.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut s = E::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        s = s + x * y;
    }
    s
}

/// What slot `i` holds when position `ti` reads a bank of `slots` entries
/// over a length-`t` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SlotContent {
    /// This pass's own write from the given position.
    Own(usize),
    /// Not yet overwritten this pass; holds the previous pass's final write
    /// from the given position (shared-bank scope only).
    Prev(usize),
    /// Never written by anyone: exactly zero.
    Zero,
}

/// Closed form of the round-robin write schedule. This pass has written
/// positions 0..=ti (causal) or all of 0..t (full pass); a previous full
/// pass, when present, wrote all of 0..t. The latest write wins.
pub(crate) fn slot_content(
    ti: usize,
    i: usize,
    t: usize,
    slots: usize,
    causal: bool,
    has_prev: bool,
) -> SlotContent {
    let last = if causal { ti } else { t - 1 };
    if i <= last {
        SlotContent::Own(last - (last - i) % slots)
    } else if has_prev && i < t {
        SlotContent::Prev((t - 1) - (t - 1 - i) % slots)
    } else {
        SlotContent::Zero
    }
}

/// Fresh-bank view of [`slot_content`]: which position's summary slot `i`
/// holds, or `None` if the slot is still zero.
pub(crate) fn slot_source(
    ti: usize,
    i: usize,
    t: usize,
    slots: usize,
    causal: bool,
) -> Option<usize> {
    match slot_content(ti, i, t, slots, causal, false) {
        SlotContent::Own(p) => Some(p),
        _ => None,
    }
}

struct ConstPtr<E>(*const E);
unsafe impl<E> Send for ConstPtr<E> {}
unsafe impl<E> Sync for ConstPtr<E> {}
struct MutPtr<E>(*mut E);
unsafe impl<E> Send for MutPtr<E> {}
unsafe impl<E> Sync for MutPtr<E> {}

/// GEMM with the output rows split across the configured kernel threads.
/// Requires `rsc` = n and `csc` = 1 (contiguous row-major C), which every
/// call site in this module satisfies; block boundaries depend only on `m`
/// and the thread count, so results are reproducible for a fixed setting.
///
/// # Safety
/// Same contract as [`Element::gemm`]: the pointers must cover the strided
/// m*k, k*n and m*n regions, and C must not alias A or B.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_rows<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: *const E,
    rsa: isize,
    csa: isize,
    b: *const E,
    rsb: isize,
    csb: isize,
    beta: E,
    c: *mut E,
    rsc: isize,
    csc: isize,
) {
    let threads = kernel_threads();
    let blocks = threads.min(m.max(1));
    if blocks <= 1 || m * k * n < (1 << 18) {
        E::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        return;
    }
    let per = m.div_ceil(blocks);
    let ap = ConstPtr(a);
    let bp = ConstPtr(b);
    let cp = MutPtr(c);
    rayon::scope(|s| {
        let mut i0 = 0usize;
        while i0 < m {
            let rows = per.min(m - i0);
            let (ap, bp, cp) = (&ap, &bp, &cp);
            s.spawn(move |_| unsafe {
                E::gemm(
                    rows,
                    k,
                    n,
                    alpha,
                    ap.0.offset(i0 as isize * rsa),
                    rsa,
                    csa,
                    bp.0,
                    rsb,
                    csb,
                    beta,
                    cp.0.offset(i0 as isize * rsc),
                    rsc,
                    csc,
                );
            });
            i0 += rows;
        }
    });
}
