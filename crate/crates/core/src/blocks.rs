//! Network layers.
//!
//! Layer structs own [`ParamId`] handles into a [`ParamStore`] and know how
//! to run themselves on a [`Graph`] through a [`Fwd`] context, which carries
//! the graph, the store, the execution [`Mode`], the RNG for stochastic
//! depth, and capture hooks for inspecting intermediate activations.
//!
//! The mixer family:
//! * [`SamLayer`] — scale-aware modulation: a multi-head multi-kernel
//!   depthwise conv ([`MhmcLayer`]) feeds a scale-aware aggregation
//!   ([`SaaLayer`]) whose output multiplicatively gates a value branch.
//! * [`MsaLayer`] — standard global multi-head self-attention.
//!
//! Both sit in pre-norm residual blocks ([`BlockLayer`]) with a
//! conv-augmented feed-forward ([`FfnLayer`]).

use crate::config::{Aggregation, BlockKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Epsilon inside layer-norm denominators.
pub const LN_EPS: f64 = 1e-6;
/// Epsilon inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;
/// EMA coefficient for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Execution mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Training: stochastic depth active; batch-norm may use batch
    /// statistics (and then updates running ones) or fall back to running
    /// statistics for tiny batches.
    Train { bn_batch_stats: bool },
    /// Inference: no stochastic depth, running statistics, no gradients.
    Eval,
    /// Finite-difference verification: deterministic (no stochastic
    /// depth), batch statistics without updating running buffers.
    GradCheck,
}

impl Mode {
    pub fn drop_path_active(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn batch_stats(self) -> bool {
        match self {
            Mode::Train { bn_batch_stats } => bn_batch_stats,
            Mode::Eval => false,
            Mode::GradCheck => true,
        }
    }

    pub fn updates_running(self) -> bool {
        matches!(self, Mode::Train { bn_batch_stats: true })
    }

    /// Whether parameters should enter the graph as differentiable leaves.
    pub fn wants_grad(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Which intermediate activations to record during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureSpec {
    /// Record modulation-path tensors of SAM blocks (per-head conv maps,
    /// modulator, value branch, gated product).
    pub modulation: bool,
    /// Record post-softmax attention tensors of MSA blocks.
    pub attention: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        CaptureSpec::default()
    }

    pub fn all() -> Self {
        CaptureSpec {
            modulation: true,
            attention: true,
        }
    }
}

/// What a capture entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureKind {
    /// Multi-kernel conv output before aggregation, heads side by side in
    /// channels, shape `[B, H, W, C]`.
    HeadMaps,
    /// Aggregated modulator `[B, H, W, C]`.
    Modulator,
    /// Value branch `[B, H, W, C]`.
    Value,
    /// Elementwise product of modulator and value `[B, H, W, C]`.
    Modulated,
    /// Post-softmax attention `[B*heads, T, T]`.
    Attention,
}

/// One recorded activation with its location in the network.
#[derive(Debug, Clone, Copy)]
pub struct Capture {
    pub stage: usize,
    pub block: usize,
    pub kind: CaptureKind,
    pub node: NodeId,
}

/// Deferred running-statistics update recorded during a training forward
/// pass and applied to the store afterwards.
#[derive(Debug, Clone)]
pub struct BnUpdate<S: Scalar> {
    pub mean_buf: ParamId,
    pub var_buf: ParamId,
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    /// Number of rows the batch statistics were computed over (for the
    /// unbiased-variance correction of the running estimate).
    pub rows: usize,
}

/// Forward-pass context threaded through every layer.
pub struct Fwd<'a, S: Scalar> {
    pub g: &'a mut Graph<S>,
    params: &'a ParamStore<S>,
    node_of: Vec<Option<NodeId>>,
    pub mode: Mode,
    pub rng: Option<&'a mut Rng>,
    pub capture: CaptureSpec,
    pub captures: Vec<Capture>,
    pub bn_updates: Vec<BnUpdate<S>>,
    /// (stage, block) of the layer currently running, for capture labels.
    pub loc: (usize, usize),
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(
        g: &'a mut Graph<S>,
        params: &'a ParamStore<S>,
        mode: Mode,
        rng: Option<&'a mut Rng>,
        capture: CaptureSpec,
    ) -> Self {
        Fwd {
            g,
            params,
            node_of: vec![None; params.len()],
            mode,
            rng,
            capture,
            captures: Vec::new(),
            bn_updates: Vec::new(),
            loc: (0, 0),
        }
    }

    /// Graph node for a parameter, inserting it on first use. Trainable
    /// parameters become differentiable leaves except in `Eval` mode.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.node_of[id.index()] {
            return n;
        }
        let e = self.params.entry(id);
        let n = if e.trainable && self.mode.wants_grad() {
            self.g.leaf(e.tensor.clone())
        } else {
            self.g.constant(e.tensor.clone())
        };
        self.node_of[id.index()] = Some(n);
        n
    }

    /// Node a parameter was inserted as, if it was used this pass.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.node_of[id.index()]
    }

    fn push_capture(&mut self, kind: CaptureKind, node: NodeId) {
        self.captures.push(Capture {
            stage: self.loc.0,
            block: self.loc.1,
            kind,
            node,
        });
    }

    /// Dismantle the context after the pass: captures, deferred batch-norm
    /// updates, and the node each parameter entered the graph as (indexed
    /// by `ParamId`).
    pub fn into_parts(self) -> (Vec<Capture>, Vec<BnUpdate<S>>, Vec<Option<NodeId>>) {
        (self.captures, self.bn_updates, self.node_of)
    }

    /// Stochastic depth: per-sample, drop the branch with probability
    /// `rate` and rescale survivors by `1/(1-rate)`. Identity outside
    /// training or at rate 0.
    pub fn drop_path(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !self.mode.drop_path_active() || rate <= 0.0 {
            return Ok(x);
        }
        let n = self.g.value(x).shape()[0];
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Usage("training forward pass requires an RNG".into()))?;
        let keep = 1.0 - rate;
        let factors: Vec<S> = (0..n)
            .map(|_| {
                if rng.bernoulli(keep) {
                    S::from_f64(1.0 / keep)
                } else {
                    S::ZERO
                }
            })
            .collect();
        self.g.scale_rows(x, factors)
    }
}

/// Fold a deferred batch-statistics update into the running buffers:
/// exponential moving average with [`BN_MOMENTUM`], using the unbiased
/// variance estimate for the running variance.
pub fn apply_momentum<S: Scalar>(params: &mut ParamStore<S>, u: BnUpdate<S>) {
    let m = BN_MOMENTUM;
    let unbias = if u.rows > 1 {
        u.rows as f64 / (u.rows as f64 - 1.0)
    } else {
        1.0
    };
    for (r, b) in params
        .get_mut(u.mean_buf)
        .data_mut()
        .iter_mut()
        .zip(&u.batch_mean)
    {
        *r = S::from_f64((1.0 - m) * r.to_f64() + m * b.to_f64());
    }
    for (r, b) in params
        .get_mut(u.var_buf)
        .data_mut()
        .iter_mut()
        .zip(&u.batch_var)
    {
        *r = S::from_f64((1.0 - m) * r.to_f64() + m * unbias * b.to_f64());
    }
}

// --------------------------------------------------------------------
// Elementary parameter bundles
// --------------------------------------------------------------------

/// Dense projection over the channel axis (equivalent to a 1x1 conv).
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl LinearParams {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let w = pb.weight(format!("{prefix}.w"), &[cin, cout])?;
        let b = pb.zeros(format!("{prefix}.b"), &[cout])?;
        Ok(LinearParams { w, b, cin, cout })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let w = fc.p(self.w);
        let b = fc.p(self.b);
        fc.g.linear(x, w, Some(b))
    }
}

/// Layer-norm scale and shift.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn build<S: Scalar>(pb: &mut ParamBuilder<S>, prefix: &str, c: usize) -> Result<Self> {
        let gamma = pb.ones(format!("{prefix}.gamma"), &[c])?;
        let beta = pb.zeros(format!("{prefix}.beta"), &[c])?;
        Ok(NormParams { gamma, beta })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let g = fc.p(self.gamma);
        let b = fc.p(self.beta);
        fc.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Batch-norm affine parameters plus running statistics buffers.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    pub fn build<S: Scalar>(pb: &mut ParamBuilder<S>, prefix: &str, c: usize) -> Result<Self> {
        let gamma = pb.ones(format!("{prefix}.gamma"), &[c])?;
        let beta = pb.zeros(format!("{prefix}.beta"), &[c])?;
        let running_mean = pb.buffer_zeros(format!("{prefix}.running_mean"), &[c])?;
        let running_var = pb.buffer_ones(format!("{prefix}.running_var"), &[c])?;
        Ok(BnParams {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let g = fc.p(self.gamma);
        let b = fc.p(self.beta);
        if fc.mode.batch_stats() {
            let rows = {
                let shape = fc.g.value(x).shape();
                shape.iter().product::<usize>() / shape[shape.len() - 1]
            };
            let (y, batch_mean, batch_var) = fc.g.batch_norm_train(x, g, b, BN_EPS)?;
            if fc.mode.updates_running() {
                fc.bn_updates.push(BnUpdate {
                    mean_buf: self.running_mean,
                    var_buf: self.running_var,
                    batch_mean,
                    batch_var,
                    rows,
                });
            }
            Ok(y)
        } else {
            let rm = fc.params.get(self.running_mean).data().to_vec();
            let rv = fc.params.get(self.running_var).data().to_vec();
            fc.g.batch_norm_eval(x, g, b, &rm, &rv, BN_EPS)
        }
    }
}

// --------------------------------------------------------------------
// Modulation path
// --------------------------------------------------------------------

/// Multi-head multi-kernel depthwise convolution: the channel axis is cut
/// into `heads` equal slices and slice `i` is filtered depthwise with an
/// odd kernel of size `3 + 2i`, so different channel groups see different
/// receptive-field scales. Padding keeps the resolution.
#[derive(Debug, Clone)]
pub struct MhmcLayer {
    pub heads: usize,
    pub channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl MhmcLayer {
    /// Kernel size used by head `i`.
    pub fn kernel_for_head(i: usize) -> usize {
        3 + 2 * i
    }

    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(
                prefix,
                format!("channels {channels} not divisible by {heads} heads"),
            ));
        }
        let per_head = channels / heads;
        let mut kernel_sizes = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        let mut biases = Vec::with_capacity(heads);
        for i in 0..heads {
            let k = Self::kernel_for_head(i);
            kernel_sizes.push(k);
            weights.push(pb.weight(format!("{prefix}.h{i}.w"), &[k, k, 1, per_head])?);
            biases.push(pb.zeros(format!("{prefix}.h{i}.b"), &[per_head])?);
        }
        Ok(MhmcLayer {
            heads,
            channels,
            kernel_sizes,
            weights,
            biases,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let per_head = self.channels / self.heads;
        let mut parts = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let slice = fc.g.slice_last(x, i * per_head, per_head)?;
            let w = fc.p(self.weights[i]);
            let b = fc.p(self.biases[i]);
            let k = self.kernel_sizes[i];
            parts.push(fc.g.conv2d(slice, w, Some(b), 1, k / 2, per_head)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            fc.g.concat_last(&parts)
        }
    }
}

/// Scale-aware aggregation: a channel shuffle interleaves the heads'
/// outputs so each group of `heads` adjacent channels holds one channel
/// slot at every kernel scale, a grouped 1x1 conv expands each such group
/// by `expansion`, and a full dense layer fuses the expanded features back
/// to `channels`.
#[derive(Debug, Clone)]
pub struct SaaLayer {
    pub heads: usize,
    pub channels: usize,
    pub expansion: usize,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub fuse: LinearParams,
}

impl SaaLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        channels: usize,
        heads: usize,
        expansion: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(
                prefix,
                format!("channels {channels} not divisible by {heads} heads"),
            ));
        }
        let expanded = expansion * channels;
        let expand_w = pb.weight(format!("{prefix}.expand.w"), &[1, 1, heads, expanded])?;
        let expand_b = pb.zeros(format!("{prefix}.expand.b"), &[expanded])?;
        let fuse = LinearParams::build(pb, &format!("{prefix}.fuse"), expanded, channels)?;
        Ok(SaaLayer {
            heads,
            channels,
            expansion,
            expand_w,
            expand_b,
            fuse,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let shuffled = fc.g.shuffle_channels(x, self.heads)?;
        let w = fc.p(self.expand_w);
        let b = fc.p(self.expand_b);
        let groups = self.channels / self.heads;
        let expanded = fc.g.conv2d(shuffled, w, Some(b), 1, 0, groups)?;
        let act = fc.g.gelu(expanded);
        self.fuse.forward(fc, act)
    }
}

/// Modulator-producing aggregation over the multi-kernel conv output.
/// `Saa` is the full design; the rest are reduced variants for studies.
#[derive(Debug, Clone)]
pub enum AggLayer {
    None,
    SingleLinear(LinearParams),
    TwoLinears(LinearParams, LinearParams),
    Ibn(LinearParams, LinearParams),
    Saa(SaaLayer),
}

impl AggLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        kind: Aggregation,
        channels: usize,
        heads: usize,
        expansion: usize,
    ) -> Result<Self> {
        Ok(match kind {
            Aggregation::None => AggLayer::None,
            Aggregation::SingleLinear => AggLayer::SingleLinear(LinearParams::build(
                pb,
                &format!("{prefix}.lin"),
                channels,
                channels,
            )?),
            Aggregation::TwoLinears => AggLayer::TwoLinears(
                LinearParams::build(pb, &format!("{prefix}.lin1"), channels, channels)?,
                LinearParams::build(pb, &format!("{prefix}.lin2"), channels, channels)?,
            ),
            Aggregation::Ibn => AggLayer::Ibn(
                LinearParams::build(pb, &format!("{prefix}.expand"), channels, 2 * channels)?,
                LinearParams::build(pb, &format!("{prefix}.reduce"), 2 * channels, channels)?,
            ),
            Aggregation::Saa => AggLayer::Saa(SaaLayer::build(
                pb,
                &format!("{prefix}.saa"),
                channels,
                heads,
                expansion,
            )?),
        })
    }

    pub fn kind(&self) -> Aggregation {
        match self {
            AggLayer::None => Aggregation::None,
            AggLayer::SingleLinear(..) => Aggregation::SingleLinear,
            AggLayer::TwoLinears(..) => Aggregation::TwoLinears,
            AggLayer::Ibn(..) => Aggregation::Ibn,
            AggLayer::Saa(..) => Aggregation::Saa,
        }
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        match self {
            AggLayer::None => Ok(x),
            AggLayer::SingleLinear(lin) => lin.forward(fc, x),
            AggLayer::TwoLinears(lin1, lin2) => {
                let h = lin1.forward(fc, x)?;
                let a = fc.g.gelu(h);
                lin2.forward(fc, a)
            }
            AggLayer::Ibn(expand, reduce) => {
                let h = expand.forward(fc, x)?;
                let a = fc.g.gelu(h);
                reduce.forward(fc, a)
            }
            AggLayer::Saa(saa) => saa.forward(fc, x),
        }
    }
}

/// Scale-aware modulation mixer. Two linear branches leave the input: the
/// scale branch runs through the multi-kernel conv and the aggregation to
/// become a modulator, which elementwise-multiplies the value branch; a
/// final projection maps the gated features back out.
#[derive(Debug, Clone)]
pub struct SamLayer {
    pub scale_proj: LinearParams,
    pub value_proj: LinearParams,
    pub mhmc: MhmcLayer,
    pub agg: AggLayer,
    pub out_proj: LinearParams,
}

impl SamLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        channels: usize,
        heads: usize,
        expansion: usize,
        aggregation: Aggregation,
    ) -> Result<Self> {
        Ok(SamLayer {
            scale_proj: LinearParams::build(pb, &format!("{prefix}.scale_proj"), channels, channels)?,
            value_proj: LinearParams::build(pb, &format!("{prefix}.value_proj"), channels, channels)?,
            mhmc: MhmcLayer::build(pb, &format!("{prefix}.mhmc"), channels, heads)?,
            agg: AggLayer::build(
                pb,
                &format!("{prefix}.agg"),
                aggregation,
                channels,
                heads,
                expansion,
            )?,
            out_proj: LinearParams::build(pb, &format!("{prefix}.out_proj"), channels, channels)?,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let s = self.scale_proj.forward(fc, x)?;
        let v = self.value_proj.forward(fc, x)?;
        let heads_out = self.mhmc.forward(fc, s)?;
        let modulator = self.agg.forward(fc, heads_out)?;
        if fc.capture.modulation {
            fc.push_capture(CaptureKind::HeadMaps, heads_out);
            fc.push_capture(CaptureKind::Modulator, modulator);
            fc.push_capture(CaptureKind::Value, v);
        }
        let gated = fc.g.mul(modulator, v)?;
        if fc.capture.modulation {
            fc.push_capture(CaptureKind::Modulated, gated);
        }
        self.out_proj.forward(fc, gated)
    }
}

// --------------------------------------------------------------------
// Attention
// --------------------------------------------------------------------

/// Global multi-head self-attention over the flattened spatial grid.
#[derive(Debug, Clone)]
pub struct MsaLayer {
    pub heads: usize,
    pub channels: usize,
    pub qkv: LinearParams,
    pub proj: LinearParams,
}

impl MsaLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(
                prefix,
                format!("channels {channels} not divisible by {heads} heads"),
            ));
        }
        Ok(MsaLayer {
            heads,
            channels,
            qkv: LinearParams::build(pb, &format!("{prefix}.qkv"), channels, 3 * channels)?,
            proj: LinearParams::build(pb, &format!("{prefix}.proj"), channels, channels)?,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let shape = fc.g.value(x).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let t = h * w;
        let hd = self.heads;
        let d = c / hd;

        let flat = fc.g.reshape(x, &[n, t, c])?;
        let qkv = self.qkv.forward(fc, flat)?;
        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let part = fc.g.slice_last(qkv, i * c, c)?;
            let heads4 = fc.g.reshape(part, &[n, t, hd, d])?;
            let swapped = fc.g.permute(heads4, &[0, 2, 1, 3])?;
            split.push(fc.g.reshape(swapped, &[n * hd, t, d])?);
        }
        let (q, k, v) = (split[0], split[1], split[2]);

        let scores = fc.g.bmm(q, k, true)?;
        let scaled = fc.g.scale(scores, S::from_f64(1.0 / (d as f64).sqrt()));
        let attn = fc.g.softmax(scaled);
        if fc.capture.attention {
            fc.push_capture(CaptureKind::Attention, attn);
        }
        let ctx = fc.g.bmm(attn, v, false)?;

        let back = fc.g.reshape(ctx, &[n, hd, t, d])?;
        let swapped = fc.g.permute(back, &[0, 2, 1, 3])?;
        let merged = fc.g.reshape(swapped, &[n, t, c])?;
        let out = self.proj.forward(fc, merged)?;
        fc.g.reshape(out, &[n, h, w, c])
    }
}

// --------------------------------------------------------------------
// Feed-forward and block assembly
// --------------------------------------------------------------------

/// Feed-forward with a parallel depthwise 3x3 branch: expand, GELU, then
/// the sum of the activation and its depthwise conv is reduced back.
#[derive(Debug, Clone)]
pub struct FfnLayer {
    pub ratio: usize,
    pub expand: LinearParams,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub reduce: LinearParams,
}

impl FfnLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        let hidden = ratio * channels;
        let expand = LinearParams::build(pb, &format!("{prefix}.expand"), channels, hidden)?;
        let dw_w = pb.weight(format!("{prefix}.dw.w"), &[3, 3, 1, hidden])?;
        let dw_b = pb.zeros(format!("{prefix}.dw.b"), &[hidden])?;
        let reduce = LinearParams::build(pb, &format!("{prefix}.reduce"), hidden, channels)?;
        Ok(FfnLayer {
            ratio,
            expand,
            dw_w,
            dw_b,
            reduce,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let e = self.expand.forward(fc, x)?;
        let a = fc.g.gelu(e);
        let w = fc.p(self.dw_w);
        let b = fc.p(self.dw_b);
        let groups = fc.g.value(a).shape()[3];
        let d = fc.g.conv2d(a, w, Some(b), 1, 1, groups)?;
        let s = fc.g.add(d, a)?;
        self.reduce.forward(fc, s)
    }
}

/// The mixer inside one block.
#[derive(Debug, Clone)]
pub enum MixerLayer {
    Sam(SamLayer),
    Msa(MsaLayer),
}

impl MixerLayer {
    pub fn kind(&self) -> BlockKind {
        match self {
            MixerLayer::Sam(..) => BlockKind::Sam,
            MixerLayer::Msa(..) => BlockKind::Msa,
        }
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        match self {
            MixerLayer::Sam(sam) => sam.forward(fc, x),
            MixerLayer::Msa(msa) => msa.forward(fc, x),
        }
    }
}

/// Pre-norm residual block: `x + drop(mixer(ln(x)))` then
/// `x + drop(ffn(ln(x)))`, with independent stochastic-depth draws for
/// the two branches.
#[derive(Debug, Clone)]
pub struct BlockLayer {
    pub norm1: NormParams,
    pub mixer: MixerLayer,
    pub norm2: NormParams,
    pub ffn: FfnLayer,
    pub drop_path: f64,
}

#[allow(clippy::too_many_arguments)]
impl BlockLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        kind: BlockKind,
        channels: usize,
        sam_heads: usize,
        sam_expansion: usize,
        msa_heads: usize,
        aggregation: Aggregation,
        ffn_ratio: usize,
        drop_path: f64,
    ) -> Result<Self> {
        let norm1 = NormParams::build(pb, &format!("{prefix}.norm1"), channels)?;
        let mixer = match kind {
            BlockKind::Sam => MixerLayer::Sam(SamLayer::build(
                pb,
                &format!("{prefix}.sam"),
                channels,
                sam_heads,
                sam_expansion,
                aggregation,
            )?),
            BlockKind::Msa => MixerLayer::Msa(MsaLayer::build(
                pb,
                &format!("{prefix}.attn"),
                channels,
                msa_heads,
            )?),
        };
        let norm2 = NormParams::build(pb, &format!("{prefix}.norm2"), channels)?;
        let ffn = FfnLayer::build(pb, &format!("{prefix}.ffn"), channels, ffn_ratio)?;
        Ok(BlockLayer {
            norm1,
            mixer,
            norm2,
            ffn,
            drop_path,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let h = self.norm1.forward(fc, x)?;
        let m = self.mixer.forward(fc, h)?;
        let m = fc.drop_path(m, self.drop_path)?;
        let x1 = fc.g.add(x, m)?;
        let h2 = self.norm2.forward(fc, x1)?;
        let f = self.ffn.forward(fc, h2)?;
        let f = fc.drop_path(f, self.drop_path)?;
        fc.g.add(x1, f)
    }
}

// --------------------------------------------------------------------
// Stem, downsampling, head
// --------------------------------------------------------------------

/// Input stem: stride-2 conv (odd kernel, same-padded), batch-norm, GELU,
/// then a stride-2 2x2 conv and a layer-norm. Total downsampling x4.
#[derive(Debug, Clone)]
pub struct StemLayer {
    pub kernel: usize,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub bn: BnParams,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub norm: NormParams,
}

impl StemLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let conv1_w = pb.weight(
            format!("{prefix}.conv1.w"),
            &[kernel, kernel, in_channels, out_channels],
        )?;
        let conv1_b = pb.zeros(format!("{prefix}.conv1.b"), &[out_channels])?;
        let bn = BnParams::build(pb, &format!("{prefix}.bn"), out_channels)?;
        let conv2_w = pb.weight(format!("{prefix}.conv2.w"), &[2, 2, out_channels, out_channels])?;
        let conv2_b = pb.zeros(format!("{prefix}.conv2.b"), &[out_channels])?;
        let norm = NormParams::build(pb, &format!("{prefix}.norm"), out_channels)?;
        Ok(StemLayer {
            kernel,
            conv1_w,
            conv1_b,
            bn,
            conv2_w,
            conv2_b,
            norm,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let w1 = fc.p(self.conv1_w);
        let b1 = fc.p(self.conv1_b);
        let c1 = fc.g.conv2d(x, w1, Some(b1), 2, self.kernel / 2, 1)?;
        let n = self.bn.forward(fc, c1)?;
        let a = fc.g.gelu(n);
        let w2 = fc.p(self.conv2_w);
        let b2 = fc.p(self.conv2_b);
        let c2 = fc.g.conv2d(a, w2, Some(b2), 2, 0, 1)?;
        self.norm.forward(fc, c2)
    }
}

/// Between-stage downsampling: stride-2 3x3 conv widening the channels,
/// then layer-norm. Halves the resolution.
#[derive(Debug, Clone)]
pub struct DownsampleLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: NormParams,
}

impl DownsampleLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let w = pb.weight(format!("{prefix}.conv.w"), &[3, 3, cin, cout])?;
        let b = pb.zeros(format!("{prefix}.conv.b"), &[cout])?;
        let norm = NormParams::build(pb, &format!("{prefix}.norm"), cout)?;
        Ok(DownsampleLayer { w, b, norm })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let w = fc.p(self.w);
        let b = fc.p(self.b);
        let c = fc.g.conv2d(x, w, Some(b), 2, 1, 1)?;
        self.norm.forward(fc, c)
    }
}

/// Classifier head: global average pool, layer-norm, dense to logits.
#[derive(Debug, Clone)]
pub struct HeadLayer {
    pub norm: NormParams,
    pub fc: LinearParams,
}

impl HeadLayer {
    pub fn build<S: Scalar>(
        pb: &mut ParamBuilder<S>,
        prefix: &str,
        channels: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(HeadLayer {
            norm: NormParams::build(pb, &format!("{prefix}.norm"), channels)?,
            fc: LinearParams::build(pb, &format!("{prefix}.fc"), channels, classes)?,
        })
    }

    pub fn forward<S: Scalar>(&self, fc: &mut Fwd<S>, x: NodeId) -> Result<NodeId> {
        let pooled = fc.g.global_avg_pool(x)?;
        let normed = self.norm.forward(fc, pooled)?;
        self.fc.forward(fc, normed)
    }
}
