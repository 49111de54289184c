//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! A [`Graph`] is an append-only tape: each op validates shapes, computes its
//! forward value eagerly, records what the backward rule needs, and returns a
//! [`NodeId`] handle. [`Graph::backward`] walks the tape once in reverse
//! creation order, accumulating gradients additively into every node that
//! (transitively) depends on a gradient-carrying leaf.
//!
//! Conventions:
//! * feature maps are `[N, H, W, C]` (channels last);
//! * convolution is cross-correlation (no kernel flip), zero padding;
//! * convolution weights are `[kh, kw, Cin/groups, Cout]`;
//! * reductions and loops use a fixed order, so results are bit-identical
//!   across runs.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// One recorded op: its output value plus what backward needs.
struct TapeNode<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Sum(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    /// Batched matmul `a @ b`, or `a @ b^T` when `transpose_b`.
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape(NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatLast(Vec<NodeId>),
    /// Channel interleave: out[.., i·heads + j] = in[.., j·(C/heads) + i].
    ShuffleChannels {
        x: NodeId,
        perm: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per row: mean, reciprocal std (2 entries per row).
        saved: Vec<S>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-channel mean and reciprocal std used for normalization
        /// (batch statistics in training, running statistics in eval).
        mean: Vec<S>,
        rstd: Vec<S>,
        /// Whether the statistics were computed from this batch (gradients
        /// then flow through them) or supplied as constants.
        batch_stats: bool,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    GlobalAvgPool(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: f64,
        /// Saved softmax probabilities, row-major [B, K].
        probs: Vec<S>,
    },
    /// Per-sample scaling along the first axis (stochastic depth).
    ScaleRows {
        x: NodeId,
        factors: Vec<S>,
    },
}

/// Append-only autodiff tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<TapeNode<S>>,
    grads: Vec<Option<Tensor<S>>>,
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

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a gradient-carrying leaf (a parameter or an input being
    /// differentiated).
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a constant leaf; no gradient will be produced for it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`, if one
    /// was produced.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Move the gradient for `id` out of the graph.
    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(TapeNode {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn any_wants(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.wants(id))
    }

    // ----------------------------------------------------------------
    // Elementwise and reduction ops
    // ----------------------------------------------------------------

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.any_wants(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.any_wants(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let needs = self.wants(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Sum of all elements, producing a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let value = Tensor::from_vec(&[1], vec![acc]).expect("scalar");
        let needs = self.wants(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Per-sample scaling along the first axis; `factors.len()` must equal
    /// the first extent. Used for stochastic depth.
    pub fn scale_rows(&mut self, x: NodeId, factors: Vec<S>) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if factors.len() != shape[0] {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for first extent {}", factors.len(), shape[0]),
            ));
        }
        let row = self.value(x).numel() / shape[0];
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(row).enumerate() {
            let f = factors[i];
            for v in chunk {
                *v *= f;
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::ScaleRows { x, factors }, needs))
    }

    // ----------------------------------------------------------------
    // Shape plumbing
    // ----------------------------------------------------------------

    /// View the node under a new shape with identical element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if perm.len() != shape.len() {
            return Err(Error::shape(
                "permute",
                format!("perm {:?} rank {} vs tensor rank {}", perm, perm.len(), shape.len()),
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::shape("permute", format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let value = permute_tensor(self.value(x), perm);
        let needs = self.wants(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_last",
                format!("slice [{start}, {}) of last extent {c}", start + len),
            ));
        }
        let rows = self.value(x).numel() / c;
        let mut data = Vec::with_capacity(rows * len);
        let src = self.value(x).data();
        for r in 0..rows {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::SliceLast { x, start, len }, needs))
    }

    /// Concatenate along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_last", "no inputs".to_string()));
        }
        let lead = self.value(xs[0]).shape()[..self.value(xs[0]).shape().len() - 1].to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("leading extents differ: {:?} vs {:?}", &s[..s.len() - 1], lead),
                ));
            }
            total += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let t = self.value(x);
                let c = *t.shape().last().unwrap();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let value = Tensor::from_vec(&out_shape, data)?;
        let needs = self.any_wants(xs);
        Ok(self.push(value, Op::ConcatLast(xs.to_vec()), needs))
    }

    /// Cross-head channel interleave: with `heads` = N and M = C/N, output
    /// channel i·N + j is input channel j·M + i. Group i of the output then
    /// holds channel i of every head. Applying the op again with `heads` = M
    /// inverts it.
    pub fn shuffle_channels(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(
                "shuffle_channels",
                format!("channels {c} not divisible by heads {heads}"),
            ));
        }
        let perm = shuffle_permutation(c, heads);
        let rows = self.value(x).numel() / c;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            data.extend(perm.iter().map(|&p| row[p]));
        }
        let value = Tensor::from_vec(&shape, data)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::ShuffleChannels { x, perm }, needs))
    }

    // ----------------------------------------------------------------
    // Linear algebra
    // ----------------------------------------------------------------

    /// Affine map over the last axis: `y[..., n] = Σ_k x[..., k]·w[k, n] (+ b[n])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {ws:?}")));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if *xs.last().unwrap() != cin {
            return Err(Error::shape(
                "linear",
                format!("input last extent {} != weight rows {}", xs.last().unwrap(), cin),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} != [{cout}]", self.value(b).shape()),
                ));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![S::ZERO; rows * cout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            if let Some(b) = b {
                let bd = self.value(b).data();
                for r in 0..rows {
                    out[r * cout..(r + 1) * cout].copy_from_slice(bd);
                }
            }
            for r in 0..rows {
                let xrow = &xd[r * cin..(r + 1) * cin];
                let orow = &mut out[r * cout..(r + 1) * cout];
                for (k, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[k * cout..(k + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = cout;
        let value = Tensor::from_vec(&out_shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let needs = self.any_wants(&parents);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// 2-D convolution (cross-correlation) over `[N, H, W, Cin]` with weight
    /// `[k, k, Cin/groups, Cout]`, zero padding, square stride.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::validate(
            self.value(x).shape(),
            self.value(w).shape(),
            b.map(|b| self.value(b).shape().to_vec()),
            stride,
            padding,
            groups,
        )?;
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data().to_vec()),
            &geom,
        );
        let value = Tensor::from_vec(&[geom.n, geom.oh, geom.ow, geom.cout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let needs = self.any_wants(&parents);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
            needs,
        ))
    }

    /// Batched matrix multiply. `a` is `[..., M, K]`; `b` is `[..., K, N]`
    /// (or `[..., N, K]` with `transpose_b`); leading extents must match.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        if ashape.len() < 2 || bshape.len() != ashape.len() {
            return Err(Error::shape(
                "bmm",
                format!("rank mismatch: {ashape:?} vs {bshape:?}"),
            ));
        }
        let r = ashape.len();
        if ashape[..r - 2] != bshape[..r - 2] {
            return Err(Error::shape(
                "bmm",
                format!("batch extents differ: {ashape:?} vs {bshape:?}"),
            ));
        }
        let (m, k) = (ashape[r - 2], ashape[r - 1]);
        let (bk, n) = if transpose_b {
            (bshape[r - 1], bshape[r - 2])
        } else {
            (bshape[r - 2], bshape[r - 1])
        };
        if k != bk {
            return Err(Error::shape(
                "bmm",
                format!("inner extents differ: {k} vs {bk}"),
            ));
        }
        let batch: usize = ashape[..r - 2].iter().product();
        let mut out = vec![S::ZERO; batch * m * n];
        bmm_kernel(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            batch,
            m,
            k,
            n,
            transpose_b,
        );
        let mut out_shape = ashape[..r - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::from_vec(&out_shape, out)?;
        let needs = self.any_wants(&[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, transpose_b }, needs))
    }

    // ----------------------------------------------------------------
    // Normalization and activations
    // ----------------------------------------------------------------

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        self.check_affine_params("layer_norm", gamma, beta, c)?;
        let rows = self.value(x).numel() / c;
        let mut out = vec![S::ZERO; rows * c];
        let mut saved = Vec::with_capacity(2 * rows);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let epss = S::from_f64(eps);
            let inv_c = S::from_f64(1.0 / c as f64);
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mut mean = S::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = S::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_c;
                let rstd = S::ONE / (var + epss).sqrt();
                saved.push(mean);
                saved.push(rstd);
                let orow = &mut out[r * c..(r + 1) * c];
                for i in 0..c {
                    let xhat = (row[i] - mean) * rstd;
                    orow[i] = gd[i] * xhat + bd[i];
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.any_wants(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            needs,
        ))
    }

    /// Batch normalization of `[N, H, W, C]` over the batch and spatial axes,
    /// using statistics computed from this batch. Returns the node plus the
    /// per-channel biased batch mean and variance so the caller can maintain
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<S>, Vec<S>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [N,H,W,C], got {shape:?}"),
            ));
        }
        let c = shape[3];
        self.check_affine_params("batch_norm", gamma, beta, c)?;
        let rows = self.value(x).numel() / c;
        let mut mean = vec![S::ZERO; c];
        let mut var = vec![S::ZERO; c];
        {
            let xd = self.value(x).data();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                for i in 0..c {
                    mean[i] += row[i];
                }
            }
            let inv = S::from_f64(1.0 / rows as f64);
            for m in mean.iter_mut() {
                *m *= inv;
            }
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                for i in 0..c {
                    let d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v *= inv;
            }
        }
        let rstd: Vec<S> = var
            .iter()
            .map(|&v| S::ONE / (v + S::from_f64(eps)).sqrt())
            .collect();
        let id = self.push_batch_norm(x, gamma, beta, mean.clone(), rstd, true)?;
        Ok((id, mean, var))
    }

    /// Batch normalization using fixed (running) statistics; gradients treat
    /// the statistics as constants.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [N,H,W,C], got {shape:?}"),
            ));
        }
        let c = shape[3];
        self.check_affine_params("batch_norm", gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "running stats length {}/{} != channels {c}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let rstd: Vec<S> = running_var
            .iter()
            .map(|&v| S::ONE / (v + S::from_f64(eps)).sqrt())
            .collect();
        self.push_batch_norm(x, gamma, beta, running_mean.to_vec(), rstd, false)
    }

    fn push_batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        rstd: Vec<S>,
        batch_stats: bool,
    ) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let c = shape[3];
        let rows = self.value(x).numel() / c;
        let mut out = vec![S::ZERO; rows * c];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let orow = &mut out[r * c..(r + 1) * c];
                for i in 0..c {
                    orow[i] = gd[i] * ((row[i] - mean[i]) * rstd[i]) + bd[i];
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let needs = self.any_wants(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            },
            needs,
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_scalar);
        let needs = self.wants(x);
        self.push(value, Op::Gelu(x), needs)
    }

    /// Softmax over the last axis (numerically stabilized).
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).numel() / c;
        let mut out = vec![S::ZERO; rows * c];
        {
            let xd = self.value(x).data();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let orow = &mut out[r * c..(r + 1) * c];
                softmax_row(row, orow);
            }
        }
        let value = Tensor::from_vec(&shape, out).expect("softmax shape");
        let needs = self.wants(x);
        self.push(value, Op::Softmax(x), needs)
    }

    /// Spatial mean of `[N, H, W, C]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected [N,H,W,C], got {shape:?}"),
            ));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = vec![S::ZERO; n * c];
        {
            let xd = self.value(x).data();
            for b in 0..n {
                let orow = &mut out[b * c..(b + 1) * c];
                for p in 0..h * w {
                    let row = &xd[(b * h * w + p) * c..(b * h * w + p + 1) * c];
                    for i in 0..c {
                        orow[i] += row[i];
                    }
                }
                let inv = S::from_f64(1.0 / (h * w) as f64);
                for v in orow {
                    *v *= inv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        let needs = self.wants(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), needs))
    }

    /// Mean label-smoothed cross-entropy of logits `[B, K]` against integer
    /// targets; produces a `[1]` scalar. With smoothing `s`, the target
    /// distribution mixes 1−s on the true class with s/K uniform mass.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected [B,K] logits, got {shape:?}"),
            ));
        }
        let (bsz, k) = (shape[0], shape[1]);
        if targets.len() != bsz {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for batch {}", targets.len(), bsz),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Usage(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![S::ZERO; bsz * k];
        let mut loss = 0.0f64;
        {
            let xd = self.value(logits).data();
            for b in 0..bsz {
                let row = &xd[b * k..(b + 1) * k];
                let prow = &mut probs[b * k..(b + 1) * k];
                let lse = softmax_row(row, prow);
                let mut row_sum = 0.0;
                for &v in row {
                    row_sum += v.to_f64();
                }
                // loss_row = lse − (1−s)·x_target − (s/K)·Σ_k x_k
                loss += lse - (1.0 - smoothing) * row[targets[b]].to_f64()
                    - smoothing / k as f64 * row_sum;
            }
        }
        loss /= bsz as f64;
        let value = Tensor::from_vec(&[1], vec![S::from_f64(loss)])?;
        let needs = self.wants(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            needs,
        ))
    }

    // ----------------------------------------------------------------
    // Backward
    // ----------------------------------------------------------------

    /// Reverse-mode sweep from a scalar output. After this call,
    /// [`Graph::grad`] yields ∂out/∂node for every gradient-carrying node on
    /// the path. Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(&[1], S::ONE));
        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(NodeId(id), &gout, &mut grads);
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || gout.clone());
                self.accum(grads, *b, || gout.clone());
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || {
                    elementwise(gout, self.value(*b), |g, v| g * v)
                });
                self.accum(grads, *b, || {
                    elementwise(gout, self.value(*a), |g, v| g * v)
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, || gout.map(|g| g * c));
            }
            Op::Sum(x) => {
                let g = gout.data()[0];
                let shape = self.value(*x).shape();
                self.accum(grads, *x, || Tensor::full(shape, g));
            }
            Op::ScaleRows { x, factors } => {
                self.accum(grads, *x, || {
                    let shape = self.value(*x).shape();
                    let row = self.value(*x).numel() / shape[0];
                    let mut data = gout.data().to_vec();
                    for (i, chunk) in data.chunks_mut(row).enumerate() {
                        let f = factors[i];
                        for v in chunk {
                            *v *= f;
                        }
                    }
                    Tensor::from_vec(shape, data).expect("scale_rows grad")
                });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                self.accum(grads, *x, || {
                    gout.reshaped(shape).expect("reshape grad")
                });
            }
            Op::Permute { x, perm } => {
                self.accum(grads, *x, || {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    permute_tensor(gout, &inv)
                });
            }
            Op::SliceLast { x, start, len } => {
                self.accum(grads, *x, || {
                    let shape = self.value(*x).shape();
                    let c = *shape.last().unwrap();
                    let rows = self.value(*x).numel() / c;
                    let mut data = vec![S::ZERO; rows * c];
                    let gd = gout.data();
                    for r in 0..rows {
                        for i in 0..*len {
                            data[r * c + start + i] = gd[r * len + i];
                        }
                    }
                    Tensor::from_vec(shape, data).expect("slice grad")
                });
            }
            Op::ConcatLast(xs) => {
                let lead: usize = {
                    let s = gout.shape();
                    s[..s.len() - 1].iter().product()
                };
                let total = *gout.shape().last().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let c = *self.value(x).shape().last().unwrap();
                    let off = offset;
                    self.accum(grads, x, || {
                        let mut data = Vec::with_capacity(lead * c);
                        let gd = gout.data();
                        for r in 0..lead {
                            data.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                        }
                        Tensor::from_vec(self.value(x).shape(), data).expect("concat grad")
                    });
                    offset += c;
                }
            }
            Op::ShuffleChannels { x, perm } => {
                self.accum(grads, *x, || {
                    let shape = self.value(*x).shape();
                    let c = perm.len();
                    let rows = gout.numel() / c;
                    let mut data = vec![S::ZERO; gout.numel()];
                    let gd = gout.data();
                    for r in 0..rows {
                        for (i, &p) in perm.iter().enumerate() {
                            data[r * c + p] = gd[r * c + i];
                        }
                    }
                    Tensor::from_vec(shape, data).expect("shuffle grad")
                });
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, gout, grads),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            } => self.backprop_conv(*x, *w, *b, *stride, *padding, *groups, gout, grads),
            Op::Bmm { a, b, transpose_b } => self.backprop_bmm(*a, *b, *transpose_b, gout, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => self.backprop_layer_norm(*x, *gamma, *beta, saved, gout, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            } => self.backprop_batch_norm(*x, *gamma, *beta, mean, rstd, *batch_stats, gout, grads),
            Op::Gelu(x) => {
                self.accum(grads, *x, || {
                    elementwise(gout, self.value(*x), |g, v| g * gelu_grad_scalar(v))
                });
            }
            Op::Softmax(x) => {
                self.accum(grads, *x, || {
                    let y = &self.nodes[id.0].value;
                    let c = *y.shape().last().unwrap();
                    let rows = y.numel() / c;
                    let mut data = vec![S::ZERO; y.numel()];
                    let yd = y.data();
                    let gd = gout.data();
                    for r in 0..rows {
                        let yrow = &yd[r * c..(r + 1) * c];
                        let grow = &gd[r * c..(r + 1) * c];
                        let mut dot = S::ZERO;
                        for i in 0..c {
                            dot += yrow[i] * grow[i];
                        }
                        let drow = &mut data[r * c..(r + 1) * c];
                        for i in 0..c {
                            drow[i] = yrow[i] * (grow[i] - dot);
                        }
                    }
                    Tensor::from_vec(self.value(*x).shape(), data).expect("softmax grad")
                });
            }
            Op::GlobalAvgPool(x) => {
                self.accum(grads, *x, || {
                    let shape = self.value(*x).shape();
                    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                    let inv = S::from_f64(1.0 / (h * w) as f64);
                    let mut data = vec![S::ZERO; n * h * w * c];
                    let gd = gout.data();
                    for b in 0..n {
                        let grow = &gd[b * c..(b + 1) * c];
                        for p in 0..h * w {
                            let drow = &mut data[(b * h * w + p) * c..(b * h * w + p + 1) * c];
                            for i in 0..c {
                                drow[i] = grow[i] * inv;
                            }
                        }
                    }
                    Tensor::from_vec(shape, data).expect("gap grad")
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                self.accum(grads, *logits, || {
                    let shape = self.value(*logits).shape();
                    let (bsz, k) = (shape[0], shape[1]);
                    let g = gout.data()[0].to_f64() / bsz as f64;
                    let uniform = smoothing / k as f64;
                    let mut data = vec![S::ZERO; bsz * k];
                    for b in 0..bsz {
                        for i in 0..k {
                            let mut t = uniform;
                            if i == targets[b] {
                                t += 1.0 - smoothing;
                            }
                            data[b * k + i] =
                                S::from_f64(g * (probs[b * k + i].to_f64() - t));
                        }
                    }
                    Tensor::from_vec(shape, data).expect("ce grad")
                });
            }
        }
    }

    fn backprop_linear(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let ws = self.value(w).shape();
        let (cin, cout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / cin;
        let gd = gout.data();
        if self.wants(x) {
            let wd = self.value(w).data();
            let mut dx = vec![S::ZERO; rows * cin];
            for r in 0..rows {
                let grow = &gd[r * cout..(r + 1) * cout];
                let drow = &mut dx[r * cin..(r + 1) * cin];
                for k in 0..cin {
                    let wrow = &wd[k * cout..(k + 1) * cout];
                    let mut acc = S::ZERO;
                    for i in 0..cout {
                        acc += grow[i] * wrow[i];
                    }
                    drow[k] = acc;
                }
            }
            let t = Tensor::from_vec(self.value(x).shape(), dx).expect("linear dx");
            self.accum_owned(grads, x, t);
        }
        if self.wants(w) {
            let xd = self.value(x).data();
            let mut dw = vec![S::ZERO; cin * cout];
            for r in 0..rows {
                let xrow = &xd[r * cin..(r + 1) * cin];
                let grow = &gd[r * cout..(r + 1) * cout];
                for (k, &xv) in xrow.iter().enumerate() {
                    let wrow = &mut dw[k * cout..(k + 1) * cout];
                    for i in 0..cout {
                        wrow[i] += xv * grow[i];
                    }
                }
            }
            let t = Tensor::from_vec(&[cin, cout], dw).expect("linear dw");
            self.accum_owned(grads, w, t);
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![S::ZERO; cout];
                for r in 0..rows {
                    let grow = &gd[r * cout..(r + 1) * cout];
                    for i in 0..cout {
                        db[i] += grow[i];
                    }
                }
                let t = Tensor::from_vec(&[cout], db).expect("linear db");
                self.accum_owned(grads, b, t);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let geom = ConvGeom::validate(
            self.value(x).shape(),
            self.value(w).shape(),
            b.map(|b| self.value(b).shape().to_vec()),
            stride,
            padding,
            groups,
        )
        .expect("conv geometry re-validation");
        let (dx, dw, db) = conv2d_backward(
            self.value(x).data(),
            self.value(w).data(),
            gout.data(),
            &geom,
            self.wants(x),
            self.wants(w),
            b.map_or(false, |b| self.wants(b)),
        );
        if let Some(dx) = dx {
            let t = Tensor::from_vec(self.value(x).shape(), dx).expect("conv dx");
            self.accum_owned(grads, x, t);
        }
        if let Some(dw) = dw {
            let t = Tensor::from_vec(self.value(w).shape(), dw).expect("conv dw");
            self.accum_owned(grads, w, t);
        }
        if let (Some(b), Some(db)) = (b, db) {
            let t = Tensor::from_vec(&[geom.cout], db).expect("conv db");
            self.accum_owned(grads, b, t);
        }
    }

    fn backprop_bmm(
        &self,
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let ashape = self.value(a).shape();
        let r = ashape.len();
        let (m, k) = (ashape[r - 2], ashape[r - 1]);
        let n = *gout.shape().last().unwrap();
        let batch: usize = ashape[..r - 2].iter().product();
        if self.wants(a) {
            // dA = dY @ B      (B as [K,N]) → bmm_nt against B when !transpose_b
            // dA = dY @ B      (B stored [N,K]) → plain bmm when transpose_b
            let mut da = vec![S::ZERO; batch * m * k];
            bmm_kernel(
                gout.data(),
                self.value(b).data(),
                &mut da,
                batch,
                m,
                n,
                k,
                !transpose_b,
            );
            let t = Tensor::from_vec(ashape, da).expect("bmm da");
            self.accum_owned(grads, a, t);
        }
        if self.wants(b) {
            let bd_shape = self.value(b).shape();
            let ad = self.value(a).data();
            let gd = gout.data();
            let mut db = vec![S::ZERO; self.value(b).numel()];
            for t in 0..batch {
                let abase = t * m * k;
                let gbase = t * m * n;
                if transpose_b {
                    // B stored [N, K]; dB[n,k] = Σ_m dY[m,n]·A[m,k]
                    let bbase = t * n * k;
                    for mm in 0..m {
                        let arow = &ad[abase + mm * k..abase + (mm + 1) * k];
                        let grow = &gd[gbase + mm * n..gbase + (mm + 1) * n];
                        for nn in 0..n {
                            let gv = grow[nn];
                            let brow = &mut db[bbase + nn * k..bbase + (nn + 1) * k];
                            for kk in 0..k {
                                brow[kk] += gv * arow[kk];
                            }
                        }
                    }
                } else {
                    // B stored [K, N]; dB[k,n] = Σ_m A[m,k]·dY[m,n]
                    let bbase = t * k * n;
                    for mm in 0..m {
                        let arow = &ad[abase + mm * k..abase + (mm + 1) * k];
                        let grow = &gd[gbase + mm * n..gbase + (mm + 1) * n];
                        for kk in 0..k {
                            let av = arow[kk];
                            let brow = &mut db[bbase + kk * n..bbase + (kk + 1) * n];
                            for nn in 0..n {
                                brow[nn] += av * grow[nn];
                            }
                        }
                    }
                }
            }
            let t = Tensor::from_vec(bd_shape, db).expect("bmm db");
            self.accum_owned(grads, b, t);
        }
    }

    fn backprop_layer_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: &[S],
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let shape = self.value(x).shape();
        let c = *shape.last().unwrap();
        let rows = self.value(x).numel() / c;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let god = gout.data();
        let inv_c = S::from_f64(1.0 / c as f64);
        let mut dx = vec![S::ZERO; rows * c];
        let mut dgamma = vec![S::ZERO; c];
        let mut dbeta = vec![S::ZERO; c];
        for r in 0..rows {
            let mean = saved[2 * r];
            let rstd = saved[2 * r + 1];
            let xrow = &xd[r * c..(r + 1) * c];
            let grow = &god[r * c..(r + 1) * c];
            let mut m1 = S::ZERO;
            let mut m2 = S::ZERO;
            for i in 0..c {
                let xhat = (xrow[i] - mean) * rstd;
                let dxhat = grow[i] * gd[i];
                m1 += dxhat;
                m2 += dxhat * xhat;
                dgamma[i] += grow[i] * xhat;
                dbeta[i] += grow[i];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            let drow = &mut dx[r * c..(r + 1) * c];
            for i in 0..c {
                let xhat = (xrow[i] - mean) * rstd;
                let dxhat = grow[i] * gd[i];
                drow[i] = rstd * (dxhat - m1 - xhat * m2);
            }
        }
        if self.wants(x) {
            let t = Tensor::from_vec(shape, dx).expect("ln dx");
            self.accum_owned(grads, x, t);
        }
        if self.wants(gamma) {
            let t = Tensor::from_vec(&[c], dgamma).expect("ln dgamma");
            self.accum_owned(grads, gamma, t);
        }
        if self.wants(beta) {
            let t = Tensor::from_vec(&[c], dbeta).expect("ln dbeta");
            self.accum_owned(grads, beta, t);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batch_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[S],
        rstd: &[S],
        batch_stats: bool,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let shape = self.value(x).shape();
        let c = *shape.last().unwrap();
        let rows = self.value(x).numel() / c;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let god = gout.data();
        let mut dgamma = vec![S::ZERO; c];
        let mut dbeta = vec![S::ZERO; c];
        let mut m1 = vec![S::ZERO; c];
        let mut m2 = vec![S::ZERO; c];
        for r in 0..rows {
            let xrow = &xd[r * c..(r + 1) * c];
            let grow = &god[r * c..(r + 1) * c];
            for i in 0..c {
                let xhat = (xrow[i] - mean[i]) * rstd[i];
                let dxhat = grow[i] * gd[i];
                m1[i] += dxhat;
                m2[i] += dxhat * xhat;
                dgamma[i] += grow[i] * xhat;
                dbeta[i] += grow[i];
            }
        }
        if self.wants(x) {
            let inv_r = S::from_f64(1.0 / rows as f64);
            let mut dx = vec![S::ZERO; rows * c];
            for r in 0..rows {
                let xrow = &xd[r * c..(r + 1) * c];
                let grow = &god[r * c..(r + 1) * c];
                let drow = &mut dx[r * c..(r + 1) * c];
                for i in 0..c {
                    let dxhat = grow[i] * gd[i];
                    drow[i] = if batch_stats {
                        let xhat = (xrow[i] - mean[i]) * rstd[i];
                        rstd[i] * (dxhat - m1[i] * inv_r - xhat * (m2[i] * inv_r))
                    } else {
                        rstd[i] * dxhat
                    };
                }
            }
            let t = Tensor::from_vec(shape, dx).expect("bn dx");
            self.accum_owned(grads, x, t);
        }
        if self.wants(gamma) {
            let t = Tensor::from_vec(&[c], dgamma).expect("bn dgamma");
            self.accum_owned(grads, gamma, t);
        }
        if self.wants(beta) {
            let t = Tensor::from_vec(&[c], dbeta).expect("bn dbeta");
            self.accum_owned(grads, beta, t);
        }
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor<S>>],
        id: NodeId,
        delta: impl FnOnce() -> Tensor<S>,
    ) {
        if !self.wants(id) {
            return;
        }
        let d = delta();
        self.accum_owned(grads, id, d);
    }

    fn accum_owned(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, d: Tensor<S>) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), d.shape());
                for (a, &b) in g.data_mut().iter_mut().zip(d.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn check_affine_params(
        &self,
        op: &'static str,
        gamma: NodeId,
        beta: NodeId,
        c: usize,
    ) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(
                    op,
                    format!("{name} shape {:?} != [{c}]", self.value(id).shape()),
                ));
            }
        }
        Ok(())
    }
}

// --------------------------------------------------------------------
// Numeric kernels
// --------------------------------------------------------------------

/// The channel permutation of `shuffle_channels`: entry `o` is the input
/// channel feeding output channel `o`.
pub fn shuffle_permutation(c: usize, heads: usize) -> Vec<usize> {
    let m = c / heads;
    let mut perm = Vec::with_capacity(c);
    for i in 0..m {
        for j in 0..heads {
            perm.push(j * m + i);
        }
    }
    perm
}

fn gelu_scalar<S: Scalar>(x: S) -> S {
    // 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::ONE + three * a * x * x);
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
}

/// Stable softmax of one row into `out`; returns the log-sum-exp in f64
/// (used by cross-entropy).
fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) -> f64 {
    let mut max = row[0];
    for &v in &row[1..] {
        max = max.maximum(v);
    }
    let mut denom = S::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    let inv = S::ONE / denom;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max.to_f64() + denom.to_f64().ln()
}

fn elementwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("elementwise shape")
}

fn permute_tensor<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // Row-major strides of the input, viewed through the output axis order.
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    let mut offset = 0usize;
    let xd = x.data();
    for _ in 0..n {
        out.push(xd[offset]);
        // Odometer increment over output coordinates.
        for axis in (0..rank).rev() {
            coord[axis] += 1;
            offset += strides[axis];
            if coord[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            coord[axis] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out).expect("permute shape")
}

/// Validated convolution geometry shared by forward and backward.
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvGeom {
    fn validate(
        xshape: &[usize],
        wshape: &[usize],
        bshape: Option<Vec<usize>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if xshape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [N,H,W,Cin], got {xshape:?}"),
            ));
        }
        if wshape.len() != 4 || wshape[0] != wshape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [k,k,Cin/groups,Cout], got {wshape:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
        }
        let (n, h, w, cin) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (k, cin_g_w, cout) = (wshape[0], wshape[2], wshape[3]);
        if groups == 0 || cin % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {groups} does not divide input channels {cin}"),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {groups} does not divide output channels {cout}"),
            ));
        }
        let cin_g = cin / groups;
        if cin_g_w != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight per-group input channels {cin_g_w} != Cin/groups = {cin_g}"
                ),
            ));
        }
        if let Some(bs) = bshape {
            if bs != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {bs:?} != [{cout}]"),
                ));
            }
        }
        let padded_h = h + 2 * padding;
        let padded_w = w + 2 * padding;
        if padded_h < k || padded_w < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} exceeds padded input {padded_h}x{padded_w}"),
            ));
        }
        let oh = (padded_h - k) / stride + 1;
        let ow = (padded_w - k) / stride + 1;
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            k,
            cout,
            oh,
            ow,
            stride,
            padding,
            groups,
            cin_g,
            cout_g: cout / groups,
        })
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }
}

fn conv2d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<Vec<S>>,
    g: &ConvGeom,
) -> Vec<S> {
    let mut out = vec![S::ZERO; g.n * g.oh * g.ow * g.cout];
    if let Some(b) = &bias {
        for chunk in out.chunks_mut(g.cout) {
            chunk.copy_from_slice(b);
        }
    }
    if g.is_depthwise() {
        // One filter per channel: vectorize over channels.
        for bn in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let obase = ((bn * g.oh + oy) * g.ow + ox) * g.cout;
                    for ky in 0..g.k {
                        let iy = oy * g.stride + ky;
                        if iy < g.padding || iy >= g.h + g.padding {
                            continue;
                        }
                        let iy = iy - g.padding;
                        for kx in 0..g.k {
                            let ix = ox * g.stride + kx;
                            if ix < g.padding || ix >= g.w + g.padding {
                                continue;
                            }
                            let ix = ix - g.padding;
                            let xbase = ((bn * g.h + iy) * g.w + ix) * g.cin;
                            let wbase = (ky * g.k + kx) * g.cout;
                            let (orow, xrow, wrow) = (
                                &mut out[obase..obase + g.cout],
                                &x[xbase..xbase + g.cin],
                                &w[wbase..wbase + g.cout],
                            );
                            for c in 0..g.cout {
                                orow[c] += xrow[c] * wrow[c];
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
    for bn in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((bn * g.oh + oy) * g.ow + ox) * g.cout;
                for ky in 0..g.k {
                    let iy = oy * g.stride + ky;
                    if iy < g.padding || iy >= g.h + g.padding {
                        continue;
                    }
                    let iy = iy - g.padding;
                    for kx in 0..g.k {
                        let ix = ox * g.stride + kx;
                        if ix < g.padding || ix >= g.w + g.padding {
                            continue;
                        }
                        let ix = ix - g.padding;
                        let xbase = ((bn * g.h + iy) * g.w + ix) * g.cin;
                        let wbase = (ky * g.k + kx) * g.cin_g * g.cout;
                        for grp in 0..g.groups {
                            let ostart = obase + grp * g.cout_g;
                            for ci in 0..g.cin_g {
                                let xv = x[xbase + grp * g.cin_g + ci];
                                let wstart = wbase + ci * g.cout + grp * g.cout_g;
                                let orow = &mut out[ostart..ostart + g.cout_g];
                                let wrow = &w[wstart..wstart + g.cout_g];
                                for co in 0..g.cout_g {
                                    orow[co] += xv * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let mut dx = want_dx.then(|| vec![S::ZERO; g.n * g.h * g.w * g.cin]);
    let mut dw = want_dw.then(|| vec![S::ZERO; g.k * g.k * g.cin_g * g.cout]);
    let mut db = want_db.then(|| vec![S::ZERO; g.cout]);
    if let Some(db) = &mut db {
        for chunk in gout.chunks(g.cout) {
            for (d, &gv) in db.iter_mut().zip(chunk) {
                *d += gv;
            }
        }
    }
    if !(want_dx || want_dw) {
        return (dx, dw, db);
    }
    let depthwise = g.is_depthwise();
    for bn in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((bn * g.oh + oy) * g.ow + ox) * g.cout;
                let grow = &gout[obase..obase + g.cout];
                for ky in 0..g.k {
                    let iy = oy * g.stride + ky;
                    if iy < g.padding || iy >= g.h + g.padding {
                        continue;
                    }
                    let iy = iy - g.padding;
                    for kx in 0..g.k {
                        let ix = ox * g.stride + kx;
                        if ix < g.padding || ix >= g.w + g.padding {
                            continue;
                        }
                        let ix = ix - g.padding;
                        let xbase = ((bn * g.h + iy) * g.w + ix) * g.cin;
                        if depthwise {
                            let wbase = (ky * g.k + kx) * g.cout;
                            if let Some(dw) = &mut dw {
                                let drow = &mut dw[wbase..wbase + g.cout];
                                let xrow = &x[xbase..xbase + g.cin];
                                for c in 0..g.cout {
                                    drow[c] += xrow[c] * grow[c];
                                }
                            }
                            if let Some(dx) = &mut dx {
                                let drow = &mut dx[xbase..xbase + g.cin];
                                let wrow = &w[wbase..wbase + g.cout];
                                for c in 0..g.cout {
                                    drow[c] += wrow[c] * grow[c];
                                }
                            }
                        } else {
                            let wbase = (ky * g.k + kx) * g.cin_g * g.cout;
                            for grp in 0..g.groups {
                                for ci in 0..g.cin_g {
                                    let xi = xbase + grp * g.cin_g + ci;
                                    let wstart = wbase + ci * g.cout + grp * g.cout_g;
                                    let gslice = &grow[grp * g.cout_g..(grp + 1) * g.cout_g];
                                    if let Some(dw) = &mut dw {
                                        let xv = x[xi];
                                        let drow = &mut dw[wstart..wstart + g.cout_g];
                                        for co in 0..g.cout_g {
                                            drow[co] += xv * gslice[co];
                                        }
                                    }
                                    if let Some(dx) = &mut dx {
                                        let wrow = &w[wstart..wstart + g.cout_g];
                                        let mut acc = S::ZERO;
                                        for co in 0..g.cout_g {
                                            acc += wrow[co] * gslice[co];
                                        }
                                        dx[xi] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn bmm_kernel<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) {
    for t in 0..batch {
        let abase = t * m * k;
        let obase = t * m * n;
        if transpose_b {
            let bbase = t * n * k;
            for mm in 0..m {
                let arow = &a[abase + mm * k..abase + (mm + 1) * k];
                let orow = &mut out[obase + mm * n..obase + (mm + 1) * n];
                for nn in 0..n {
                    let brow = &b[bbase + nn * k..bbase + (nn + 1) * k];
                    let mut acc = S::ZERO;
                    for kk in 0..k {
                        acc += arow[kk] * brow[kk];
                    }
                    orow[nn] += acc;
                }
            }
        } else {
            let bbase = t * k * n;
            for mm in 0..m {
                let arow = &a[abase + mm * k..abase + (mm + 1) * k];
                let orow = &mut out[obase + mm * n..obase + (mm + 1) * n];
                for kk in 0..k {
                    let av = arow[kk];
                    let brow = &b[bbase + kk * n..bbase + (kk + 1) * n];
                    for nn in 0..n {
                        orow[nn] += av * brow[nn];
                    }
                }
            }
        }
    }
}
