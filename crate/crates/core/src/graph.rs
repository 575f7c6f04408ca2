//! Dense-tensor reverse-mode autodiff tape.
//!
//! A [`Graph`] owns every tensor produced during one forward/backward pass.
//! Nodes are appended in topological order, so the backward sweep is a single
//! reverse walk. Graphs are single-threaded by design; independent graphs
//! (different runs or seeds) can execute in parallel with no shared state.
//!
//! Tensors are row-major. Most operations treat the shape as `[rows, cols]`;
//! sequence data is laid out with row index `b * seq + t`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Geometry of a multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_size: usize,
}

impl AttnDims {
    fn model_dim(&self) -> usize {
        self.heads * self.head_size
    }
}

enum Op<S> {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, S),
    Gelu(TensorId),
    Matmul(TensorId, TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        table: TensorId,
        ids: Vec<u32>,
    },
    CausalSoftmax {
        scores: TensorId,
        seq: usize,
    },
    AttnScores {
        q: TensorId,
        k: TensorId,
        dims: AttnDims,
        scale: S,
    },
    AttnMix {
        probs: TensorId,
        v: TensorId,
        dims: AttnDims,
    },
    SoftmaxXent {
        logits: TensorId,
        targets: Vec<u32>,
        probs: Vec<S>,
    },
    CausalAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        dims: AttnDims,
        scale: S,
    },
    Sum(TensorId),
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Computation tape. All ops allocate their output inside the graph.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

/// [B*T, H*hs] row-major -> per-(batch, head) contiguous T x hs blocks.
fn pack_heads<S: Scalar>(x: &[S], dims: AttnDims) -> Vec<S> {
    let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
    let d = h * hs;
    let mut out = vec![S::ZERO; bsz * t * d];
    for b in 0..bsz {
        for head in 0..h {
            let dst_base = ((b * h + head) * t) * hs;
            for i in 0..t {
                let src = (b * t + i) * d + head * hs;
                out[dst_base + i * hs..dst_base + (i + 1) * hs]
                    .copy_from_slice(&x[src..src + hs]);
            }
        }
    }
    out
}

/// Inverse of [`pack_heads`].
fn unpack_heads<S: Scalar>(packed: &[S], dims: AttnDims) -> Vec<S> {
    let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
    let d = h * hs;
    let mut out = vec![S::ZERO; bsz * t * d];
    for b in 0..bsz {
        for head in 0..h {
            let src_base = ((b * h + head) * t) * hs;
            for i in 0..t {
                let dst = (b * t + i) * d + head * hs;
                out[dst..dst + hs]
                    .copy_from_slice(&packed[src_base + i * hs..src_base + (i + 1) * hs]);
            }
        }
    }
    out
}

/// Scores plus causal softmax for one head block, written into `tile`
/// (T x T). Masked entries end up exactly zero so follow-up contractions can
/// run dense.
fn attn_tile_forward<S: Scalar>(qb: &[S], kb: &[S], scale: S, t: usize, hs: usize, tile: &mut [S]) {
    unsafe {
        S::gemm(
            t,
            hs,
            t,
            scale,
            qb.as_ptr(),
            hs as isize,
            1,
            kb.as_ptr(),
            1,
            hs as isize,
            S::ZERO,
            tile.as_mut_ptr(),
            t as isize,
            1,
        );
    }
    for i in 0..t {
        let row = &mut tile[i * t..i * t + i + 1];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max(v);
        }
        for v in row.iter_mut() {
            *v = (*v - m).exp_fast();
        }
        let mut sum = S::ZERO;
        for &v in row.iter() {
            sum += v;
        }
        let inv = S::ONE / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
        for v in tile[i * t + i + 1..(i + 1) * t].iter_mut() {
            *v = S::ZERO;
        }
    }
}

/// Accumulate a packed head-block buffer into a [B*T, H*hs] gradient.
fn unpack_heads_add<S: Scalar>(packed: &[S], dims: AttnDims, dst: &mut [S]) {
    let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
    let d = h * hs;
    for b in 0..bsz {
        for head in 0..h {
            let src_base = ((b * h + head) * t) * hs;
            for i in 0..t {
                let off = (b * t + i) * d + head * hs;
                let src = &packed[src_base + i * hs..src_base + (i + 1) * hs];
                for (o, &s) in dst[off..off + hs].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        let want: usize = shape.iter().product();
        if want != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn leaf_f64(&mut self, shape: Vec<usize>, data: &[f64], requires_grad: bool) -> Result<TensorId> {
        let cast: Vec<S> = data.iter().map(|&x| S::from_f64(x)).collect();
        self.leaf(shape, cast, requires_grad)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0].to_f64()
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (s[0] * s[1], s[2]),
        }
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = S::from_f64(c);
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| c * x).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let c0 = S::from_f64(GELU_C0);
        let c1 = S::from_f64(GELU_C1);
        let half = S::from_f64(0.5);
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (S::ONE + u.tanh_fast())
            })
            .collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner extents {ka} vs {kb} (shapes {:?} x {:?})",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let mut out = vec![S::ZERO; m * n];
        unsafe {
            S::gemm(
                m,
                ka,
                n,
                S::ONE,
                self.nodes[a.0].data.as_ptr(),
                ka as isize,
                1,
                self.nodes[b.0].data.as_ptr(),
                n as isize,
                1,
                S::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let (rows, d) = self.rows_cols(x);
        if self.nodes[gain.0].data.len() != d || self.nodes[bias.0].data.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm: feature dim {d} vs gain {} / bias {}",
                self.nodes[gain.0].data.len(),
                self.nodes[bias.0].data.len()
            )));
        }
        let eps = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::ZERO; rows * d];
        let mut means = vec![S::ZERO; rows];
        let mut rstds = vec![S::ZERO; rows];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mean = S::ZERO;
                for &v in row {
                    mean += v;
                }
                mean = mean * inv_d;
                let mut var = S::ZERO;
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * inv_d;
                let rstd = S::ONE / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let o = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    o[j] = g[j] * ((row[j] - mean) * rstd) + b[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Rows of `table` selected by token id; backward scatter-adds.
    pub fn embedding_gather(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (vocab, d) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!(
                "embedding_gather: id {bad} out of range for table with {vocab} rows"
            )));
        }
        let mut out = vec![S::ZERO; ids.len() * d];
        let t = &self.nodes[table.0].data;
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&t[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row softmax over positions `0..=i` where `i = row % seq`; entries
    /// above the diagonal are exactly zero.
    pub fn causal_masked_softmax(&mut self, scores: TensorId, seq: usize) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(scores);
        if cols != seq || rows % seq != 0 {
            return Err(Error::Shape(format!(
                "causal_masked_softmax: shape {rows}x{cols} not compatible with seq {seq}"
            )));
        }
        let mut out = vec![S::ZERO; rows * cols];
        let sd = &self.nodes[scores.0].data;
        for r in 0..rows {
            let active = (r % seq) + 1;
            let row = &sd[r * cols..r * cols + active];
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let o = &mut out[r * cols..r * cols + active];
            // split map and reduction so the exp loop vectorizes
            for (oj, &rj) in o.iter_mut().zip(row) {
                *oj = (rj - m).exp_fast();
            }
            let mut sum = S::ZERO;
            for &v in o.iter() {
                sum += v;
            }
            let inv = S::ONE / sum;
            for v in o {
                *v = *v * inv;
            }
        }
        let rg = self.requires(scores);
        Ok(self.push(vec![rows, cols], out, rg, Op::CausalSoftmax { scores, seq }))
    }

    /// Per-head scaled dot products: `s[(b·H+h)·T+i, j] = scale · <q_i, k_j>`.
    ///
    /// Heads are repacked into contiguous `T x hs` blocks so each head is one
    /// dense gemm; the per-element strided path is far slower.
    pub fn attn_scores(&mut self, q: TensorId, k: TensorId, dims: AttnDims, scale: f64) -> Result<TensorId> {
        let d = dims.model_dim();
        let rows = dims.batch * dims.seq;
        for (name, id) in [("q", q), ("k", k)] {
            let (r, c) = self.rows_cols(id);
            if r != rows || c != d {
                return Err(Error::Shape(format!(
                    "attn_scores: {name} is {r}x{c}, want {rows}x{d}"
                )));
            }
        }
        let scale = S::from_f64(scale);
        let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
        let mut out = vec![S::ZERO; bsz * h * t * t];
        {
            let qp = pack_heads(&self.nodes[q.0].data, dims);
            let kp = pack_heads(&self.nodes[k.0].data, dims);
            for blk in 0..bsz * h {
                let qb = &qp[blk * t * hs..];
                let kb = &kp[blk * t * hs..];
                unsafe {
                    // q block (T x hs) times k blockᵀ (hs x T)
                    S::gemm(
                        t,
                        hs,
                        t,
                        scale,
                        qb.as_ptr(),
                        hs as isize,
                        1,
                        kb.as_ptr(),
                        1,
                        hs as isize,
                        S::ZERO,
                        out[blk * t * t..].as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.requires(q) || self.requires(k);
        Ok(self.push(
            vec![bsz * h * t, t],
            out,
            rg,
            Op::AttnScores { q, k, dims, scale },
        ))
    }

    /// Attention-weighted value mix: `o[b·T+i, h·hs+c] = Σ_j p[..] · v[..]`.
    pub fn attn_mix(&mut self, probs: TensorId, v: TensorId, dims: AttnDims) -> Result<TensorId> {
        let d = dims.model_dim();
        let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
        let (pr, pc) = self.rows_cols(probs);
        if pr != bsz * h * t || pc != t {
            return Err(Error::Shape(format!(
                "attn_mix: probs is {pr}x{pc}, want {}x{t}",
                bsz * h * t
            )));
        }
        let (vr, vc) = self.rows_cols(v);
        if vr != bsz * t || vc != d {
            return Err(Error::Shape(format!(
                "attn_mix: v is {vr}x{vc}, want {}x{d}",
                bsz * t
            )));
        }
        let mut packed = vec![S::ZERO; bsz * t * d];
        {
            let pd = &self.nodes[probs.0].data;
            let vp = pack_heads(&self.nodes[v.0].data, dims);
            for blk in 0..bsz * h {
                unsafe {
                    // p block (T x T) times v block (T x hs)
                    S::gemm(
                        t,
                        t,
                        hs,
                        S::ONE,
                        pd[blk * t * t..].as_ptr(),
                        t as isize,
                        1,
                        vp[blk * t * hs..].as_ptr(),
                        hs as isize,
                        1,
                        S::ZERO,
                        packed[blk * t * hs..].as_mut_ptr(),
                        hs as isize,
                        1,
                    );
                }
            }
        }
        let out = unpack_heads(&packed, dims);
        let rg = self.requires(probs) || self.requires(v);
        Ok(self.push(vec![bsz * t, d], out, rg, Op::AttnMix { probs, v, dims }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let (rows, vocab) = self.rows_cols(logits);
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {rows} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!(
                "softmax_cross_entropy: target {bad} out of range [0, {vocab})"
            )));
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = vec![S::ZERO; rows * vocab];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &ld[r * vocab..(r + 1) * vocab];
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, &rj) in p.iter_mut().zip(row) {
                *pj = (rj - m).exp_fast();
            }
            let mut sum = S::ZERO;
            for &v in p.iter() {
                sum += v;
            }
            let inv = S::ONE / sum;
            for v in p.iter_mut() {
                *v = *v * inv;
            }
            let t = targets[r] as usize;
            total += sum.ln().to_f64() - (row[t] - m).to_f64();
        }
        let loss = total / rows as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![S::from_f64(loss)],
            rg,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Fused causal self-attention: softmax(scale·q·kᵀ + causal mask)·v per
    /// head, equivalent to attn_scores -> causal_masked_softmax -> attn_mix.
    ///
    /// Scores and probabilities live in a per-head scratch tile that stays
    /// cache-resident and is recomputed in backward, so the B·H·T² tensors
    /// are never materialized. At training shapes that removes most of the
    /// step's memory traffic.
    pub fn causal_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        dims: AttnDims,
        scale: f64,
    ) -> Result<TensorId> {
        let d = dims.model_dim();
        let rows = dims.batch * dims.seq;
        for (name, id) in [("q", q), ("k", k), ("v", v)] {
            let (r, c) = self.rows_cols(id);
            if r != rows || c != d {
                return Err(Error::Shape(format!(
                    "causal_attention: {name} is {r}x{c}, want {rows}x{d}"
                )));
            }
        }
        let scale = S::from_f64(scale);
        let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
        let qp = pack_heads(&self.nodes[q.0].data, dims);
        let kp = pack_heads(&self.nodes[k.0].data, dims);
        let vp = pack_heads(&self.nodes[v.0].data, dims);
        let mut packed_out = vec![S::ZERO; bsz * t * d];
        let mut tile = vec![S::ZERO; t * t];
        for blk in 0..bsz * h {
            let qb = &qp[blk * t * hs..(blk + 1) * t * hs];
            let kb = &kp[blk * t * hs..(blk + 1) * t * hs];
            let vb = &vp[blk * t * hs..(blk + 1) * t * hs];
            attn_tile_forward(qb, kb, scale, t, hs, &mut tile);
            unsafe {
                S::gemm(
                    t,
                    t,
                    hs,
                    S::ONE,
                    tile.as_ptr(),
                    t as isize,
                    1,
                    vb.as_ptr(),
                    hs as isize,
                    1,
                    S::ZERO,
                    packed_out[blk * t * hs..].as_mut_ptr(),
                    hs as isize,
                    1,
                );
            }
        }
        let out = unpack_heads(&packed_out, dims);
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                dims,
                scale,
            },
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut total = S::ZERO;
        for &v in &self.nodes[a.0].data {
            total += v;
        }
        let rg = self.requires(a);
        self.push(vec![1], vec![total], rg, Op::Sum(a))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients accumulate on every node
    /// with `requires_grad` on its path.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward needs a scalar");
        self.grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.backstep(i);
        }
    }

    fn ensure_grad(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: TensorId) {
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![S::ZERO; nodes[id.0].data.len()]);
        }
    }

    fn backstep(&mut self, i: usize) {
        // Inputs always precede node i on the tape, so split off the upstream
        // gradient and hand out mutable access to the earlier region.
        let (lo_grads, hi_grads) = self.grads.split_at_mut(i);
        let dy: &[S] = hi_grads[0].as_deref().expect("grad present");
        let nodes = &self.nodes;
        let grad_of = |grads: &mut [Option<Vec<S>>], id: TensorId| -> bool {
            if nodes[id.0].requires_grad {
                Self::ensure_grad(grads, nodes, id);
                true
            } else {
                false
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if grad_of(lo_grads, id) {
                        let g = lo_grads[id.0].as_mut().unwrap();
                        for (gi, &d) in g.iter_mut().zip(dy) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if grad_of(lo_grads, a) {
                    let bd = &nodes[b.0].data;
                    let g = lo_grads[a.0].as_mut().unwrap();
                    for ((gi, &d), &bv) in g.iter_mut().zip(dy).zip(bd) {
                        *gi += d * bv;
                    }
                }
                if grad_of(lo_grads, b) {
                    let ad = &nodes[a.0].data;
                    let g = lo_grads[b.0].as_mut().unwrap();
                    for ((gi, &d), &av) in g.iter_mut().zip(dy).zip(ad) {
                        *gi += d * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if grad_of(lo_grads, a) {
                    let g = lo_grads[a.0].as_mut().unwrap();
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += c * d;
                    }
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                if grad_of(lo_grads, a) {
                    let c0 = S::from_f64(GELU_C0);
                    let c1 = S::from_f64(GELU_C1);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let ad = &nodes[a.0].data;
                    let g = lo_grads[a.0].as_mut().unwrap();
                    for ((gi, &d), &x) in g.iter_mut().zip(dy).zip(ad) {
                        let u = c0 * (x + c1 * x * x * x);
                        let t = u.tanh_fast();
                        let du = c0 * (S::ONE + three * c1 * x * x);
                        let deriv = half * (S::ONE + t) + half * x * (S::ONE - t * t) * du;
                        *gi += d * deriv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if grad_of(lo_grads, a) {
                    // dA += dC · Bᵀ
                    let bd = nodes[b.0].data.as_ptr();
                    let g = lo_grads[a.0].as_mut().unwrap();
                    unsafe {
                        S::gemm(
                            m,
                            n,
                            k,
                            S::ONE,
                            dy.as_ptr(),
                            n as isize,
                            1,
                            bd,
                            1,
                            n as isize,
                            S::ONE,
                            g.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if grad_of(lo_grads, b) {
                    // dB += Aᵀ · dC
                    let ad = nodes[a.0].data.as_ptr();
                    let g = lo_grads[b.0].as_mut().unwrap();
                    unsafe {
                        S::gemm(
                            k,
                            m,
                            n,
                            S::ONE,
                            ad,
                            1,
                            k as isize,
                            dy.as_ptr(),
                            n as isize,
                            1,
                            S::ONE,
                            g.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (rows, d) = (nodes[i].shape[0], nodes[i].shape[1]);
                let inv_d = S::from_f64(1.0 / d as f64);
                let xd = &nodes[x.0].data;
                let gd = &nodes[gain.0].data;
                let want_x = grad_of(lo_grads, x);
                let want_g = grad_of(lo_grads, gain);
                let want_b = grad_of(lo_grads, bias);
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    if want_x {
                        let mut sum_dxhat = S::ZERO;
                        let mut sum_dxhat_xhat = S::ZERO;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = dyr[j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat * inv_d;
                        let m2 = sum_dxhat_xhat * inv_d;
                        let gx = lo_grads[x.0].as_mut().unwrap();
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = dyr[j] * gd[j];
                            gxr[j] += rs * (dxhat - m1 - xhat * m2);
                        }
                    }
                    if want_g {
                        let gg = lo_grads[gain.0].as_mut().unwrap();
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            gg[j] += dyr[j] * xhat;
                        }
                    }
                    if want_b {
                        let gb = lo_grads[bias.0].as_mut().unwrap();
                        for j in 0..d {
                            gb[j] += dyr[j];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if grad_of(lo_grads, table) {
                    let d = nodes[i].shape[1];
                    let g = lo_grads[table.0].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        let src = &dy[r * d..(r + 1) * d];
                        for (di, &s) in dst.iter_mut().zip(src) {
                            *di += s;
                        }
                    }
                }
            }
            Op::CausalSoftmax { scores, seq } => {
                let (scores, seq) = (*scores, *seq);
                if grad_of(lo_grads, scores) {
                    let rows = nodes[i].shape[0];
                    let cols = nodes[i].shape[1];
                    let pd = &nodes[i].data;
                    let g = lo_grads[scores.0].as_mut().unwrap();
                    for r in 0..rows {
                        let active = (r % seq) + 1;
                        let p = &pd[r * cols..r * cols + active];
                        let dyr = &dy[r * cols..r * cols + active];
                        let mut dot = S::ZERO;
                        for j in 0..active {
                            dot += p[j] * dyr[j];
                        }
                        let gr = &mut g[r * cols..r * cols + active];
                        for j in 0..active {
                            gr[j] += p[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::AttnScores { q, k, dims, scale } => {
                let (q, k, dims, scale) = (*q, *k, *dims, *scale);
                let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
                let want_q = grad_of(lo_grads, q);
                let want_k = grad_of(lo_grads, k);
                let qp = pack_heads(&nodes[q.0].data, dims);
                let kp = pack_heads(&nodes[k.0].data, dims);
                let mut acc = vec![S::ZERO; bsz * t * h * hs];
                if want_q {
                    // dq_block += scale · ds(T x T) · k_block(T x hs)
                    for blk in 0..bsz * h {
                        unsafe {
                            S::gemm(
                                t,
                                t,
                                hs,
                                scale,
                                dy[blk * t * t..].as_ptr(),
                                t as isize,
                                1,
                                kp[blk * t * hs..].as_ptr(),
                                hs as isize,
                                1,
                                S::ZERO,
                                acc[blk * t * hs..].as_mut_ptr(),
                                hs as isize,
                                1,
                            );
                        }
                    }
                    unpack_heads_add(&acc, dims, lo_grads[q.0].as_mut().unwrap());
                }
                if want_k {
                    // dk_block += scale · dsᵀ(T x T) · q_block(T x hs)
                    for blk in 0..bsz * h {
                        unsafe {
                            S::gemm(
                                t,
                                t,
                                hs,
                                scale,
                                dy[blk * t * t..].as_ptr(),
                                1,
                                t as isize,
                                qp[blk * t * hs..].as_ptr(),
                                hs as isize,
                                1,
                                S::ZERO,
                                acc[blk * t * hs..].as_mut_ptr(),
                                hs as isize,
                                1,
                            );
                        }
                    }
                    unpack_heads_add(&acc, dims, lo_grads[k.0].as_mut().unwrap());
                }
            }
            Op::AttnMix { probs, v, dims } => {
                let (probs, v, dims) = (*probs, *v, *dims);
                let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
                let want_p = grad_of(lo_grads, probs);
                let want_v = grad_of(lo_grads, v);
                let dop = pack_heads(dy, dims);
                if want_p {
                    // dp_block += do_block(T x hs) · v_blockᵀ(hs x T)
                    let vp = pack_heads(&nodes[v.0].data, dims);
                    let g = lo_grads[probs.0].as_mut().unwrap();
                    for blk in 0..bsz * h {
                        unsafe {
                            S::gemm(
                                t,
                                hs,
                                t,
                                S::ONE,
                                dop[blk * t * hs..].as_ptr(),
                                hs as isize,
                                1,
                                vp[blk * t * hs..].as_ptr(),
                                1,
                                hs as isize,
                                S::ONE,
                                g[blk * t * t..].as_mut_ptr(),
                                t as isize,
                                1,
                            );
                        }
                    }
                }
                if want_v {
                    // dv_block += p_blockᵀ(T x T) · do_block(T x hs)
                    let pp = &nodes[probs.0].data;
                    let mut acc = vec![S::ZERO; bsz * t * h * hs];
                    for blk in 0..bsz * h {
                        unsafe {
                            S::gemm(
                                t,
                                t,
                                hs,
                                S::ONE,
                                pp[blk * t * t..].as_ptr(),
                                1,
                                t as isize,
                                dop[blk * t * hs..].as_ptr(),
                                hs as isize,
                                1,
                                S::ZERO,
                                acc[blk * t * hs..].as_mut_ptr(),
                                hs as isize,
                                1,
                            );
                        }
                    }
                    unpack_heads_add(&acc, dims, lo_grads[v.0].as_mut().unwrap());
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                dims,
                scale,
            } => {
                let (q, k, v, dims, scale) = (*q, *k, *v, *dims, *scale);
                let (bsz, t, h, hs) = (dims.batch, dims.seq, dims.heads, dims.head_size);
                let d = dims.model_dim();
                let want_q = grad_of(lo_grads, q);
                let want_k = grad_of(lo_grads, k);
                let want_v = grad_of(lo_grads, v);
                let qp = pack_heads(&nodes[q.0].data, dims);
                let kp = pack_heads(&nodes[k.0].data, dims);
                let vp = pack_heads(&nodes[v.0].data, dims);
                let dop = pack_heads(dy, dims);
                let mut dqp = vec![S::ZERO; if want_q { bsz * t * d } else { 0 }];
                let mut dkp = vec![S::ZERO; if want_k { bsz * t * d } else { 0 }];
                let mut dvp = vec![S::ZERO; if want_v { bsz * t * d } else { 0 }];
                let mut tile = vec![S::ZERO; t * t];
                let mut dtile = vec![S::ZERO; t * t];
                for blk in 0..bsz * h {
                    let span = blk * t * hs..(blk + 1) * t * hs;
                    let qb = &qp[span.clone()];
                    let kb = &kp[span.clone()];
                    let vb = &vp[span.clone()];
                    let dob = &dop[span.clone()];
                    // recompute the probability tile
                    attn_tile_forward(qb, kb, scale, t, hs, &mut tile);
                    unsafe {
                        // dP = do_block(T x hs) · v_blockᵀ(hs x T)
                        S::gemm(
                            t,
                            hs,
                            t,
                            S::ONE,
                            dob.as_ptr(),
                            hs as isize,
                            1,
                            vb.as_ptr(),
                            1,
                            hs as isize,
                            S::ZERO,
                            dtile.as_mut_ptr(),
                            t as isize,
                            1,
                        );
                    }
                    if want_v {
                        unsafe {
                            // dv_block = Pᵀ(T x T) · do_block(T x hs)
                            S::gemm(
                                t,
                                t,
                                hs,
                                S::ONE,
                                tile.as_ptr(),
                                1,
                                t as isize,
                                dob.as_ptr(),
                                hs as isize,
                                1,
                                S::ZERO,
                                dvp[span.clone()].as_mut_ptr(),
                                hs as isize,
                                1,
                            );
                        }
                    }
                    // dS = P ∘ (dP - rowwise <P, dP>), masked region zeroed
                    for i in 0..t {
                        let p = &tile[i * t..i * t + i + 1];
                        let dpr = &mut dtile[i * t..i * t + i + 1];
                        let mut dot = S::ZERO;
                        for (&pj, &dj) in p.iter().zip(dpr.iter()) {
                            dot += pj * dj;
                        }
                        for (dj, &pj) in dpr.iter_mut().zip(p) {
                            *dj = pj * (*dj - dot);
                        }
                        for x in dtile[i * t + i + 1..(i + 1) * t].iter_mut() {
                            *x = S::ZERO;
                        }
                    }
                    if want_q {
                        unsafe {
                            // dq_block = scale · dS(T x T) · k_block(T x hs)
                            S::gemm(
                                t,
                                t,
                                hs,
                                scale,
                                dtile.as_ptr(),
                                t as isize,
                                1,
                                kb.as_ptr(),
                                hs as isize,
                                1,
                                S::ZERO,
                                dqp[span.clone()].as_mut_ptr(),
                                hs as isize,
                                1,
                            );
                        }
                    }
                    if want_k {
                        unsafe {
                            // dk_block = scale · dSᵀ(T x T) · q_block(T x hs)
                            S::gemm(
                                t,
                                t,
                                hs,
                                scale,
                                dtile.as_ptr(),
                                1,
                                t as isize,
                                qb.as_ptr(),
                                hs as isize,
                                1,
                                S::ZERO,
                                dkp[span.clone()].as_mut_ptr(),
                                hs as isize,
                                1,
                            );
                        }
                    }
                }
                if want_q {
                    unpack_heads_add(&dqp, dims, lo_grads[q.0].as_mut().unwrap());
                }
                if want_k {
                    unpack_heads_add(&dkp, dims, lo_grads[k.0].as_mut().unwrap());
                }
                if want_v {
                    unpack_heads_add(&dvp, dims, lo_grads[v.0].as_mut().unwrap());
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if grad_of(lo_grads, a) {
                    let d = dy[0];
                    let g = lo_grads[a.0].as_mut().unwrap();
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if grad_of(lo_grads, logits) {
                    let rows = targets.len();
                    let vocab = nodes[logits.0].shape[1];
                    let upstream = dy[0];
                    let inv_rows = S::from_f64(1.0 / rows as f64);
                    let g = lo_grads[logits.0].as_mut().unwrap();
                    for r in 0..rows {
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let gr = &mut g[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            gr[j] += upstream * inv_rows * p[j];
                        }
                        gr[targets[r] as usize] += -(upstream * inv_rows);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn matmul_identity() {
        let mut g = g64();
        let i = g.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let b = g.leaf(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0], false).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut g = g64();
        let a = g.leaf(vec![1, 2], vec![1.0, 2.0], false).unwrap();
        let b = g.leaf(vec![2, 1], vec![3.0, 4.0], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = g64();
        let a = g.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = g.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = g64();
        let x = g.leaf(vec![1, 2], vec![1.0, -1.0], false).unwrap();
        let gain = g.leaf(vec![2], vec![1.0, 1.0], false).unwrap();
        let bias = g.leaf(vec![2], vec![0.0, 0.0], false).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-5);
        assert!((g.data(y)[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let mut g = g64();
        let x = g.leaf(vec![1, 2], vec![3.7, 3.7], false).unwrap();
        let gain = g.leaf(vec![2], vec![1.0, 1.0], false).unwrap();
        let bias = g.leaf(vec![2], vec![0.25, -0.5], false).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!((g.data(y)[0] - 0.25).abs() < 1e-9);
        assert!((g.data(y)[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_dim_mismatch_errors() {
        let mut g = g64();
        let x = g.leaf(vec![1, 4], vec![0.0; 4], false).unwrap();
        let gain = g.leaf(vec![2], vec![1.0; 2], false).unwrap();
        let bias = g.leaf(vec![4], vec![0.0; 4], false).unwrap();
        assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
    }

    #[test]
    fn xent_uniform_logits_is_ln_vocab() {
        let mut g = g64();
        let logits = g.leaf(vec![2, 256], vec![0.3; 512], false).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[5, 200]).unwrap();
        assert!((g.scalar_value(loss) - 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn xent_saturated_margin_is_near_zero() {
        let mut g = g64();
        let mut row = vec![0.0f64; 16];
        row[3] = 50.0;
        let logits = g.leaf(vec![1, 16], row, false).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[3]).unwrap();
        assert!(g.scalar_value(loss) < 1e-9);
        assert!(g.scalar_value(loss) >= 0.0);
    }

    #[test]
    fn xent_target_out_of_range_errors() {
        let mut g = g64();
        let logits = g.leaf(vec![1, 4], vec![0.0; 4], false).unwrap();
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[4]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_is_exact() {
        let mut rng = crate::rng::Rng::new(3, 0);
        let seq = 5;
        let data: Vec<f64> = (0..2 * seq * seq).map(|_| rng.normal()).collect();
        let mut g = g64();
        let s = g.leaf(vec![2 * seq, seq], data, false).unwrap();
        let p = g.causal_masked_softmax(s, seq).unwrap();
        let pd = g.data(p);
        for r in 0..2 * seq {
            let active = (r % seq) + 1;
            let sum: f64 = pd[r * seq..r * seq + active].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            for j in active..seq {
                assert_eq!(pd[r * seq + j], 0.0);
            }
        }
    }

    #[test]
    fn zero_gradient_for_untouched_leaves() {
        let mut g = g64();
        let a = g.leaf(vec![1, 2], vec![1.0, 2.0], true).unwrap();
        let b = g.leaf(vec![2, 1], vec![3.0, 4.0], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        let loss = g.softmax_cross_entropy(c, &[0]).unwrap();
        g.backward(loss);
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || -> Vec<f32> {
            let mut g: Graph<f32> = Graph::new();
            let mut rng = crate::rng::Rng::new(11, 0);
            let data: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
            let a = g.leaf(vec![8, 8], data.clone(), false).unwrap();
            let b = g.leaf(vec![8, 8], data, false).unwrap();
            let c = g.matmul(a, b).unwrap();
            let d = g.gelu(c);
            g.data(d).to_vec()
        };
        let x = run();
        let y = run();
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
