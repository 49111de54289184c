//! Whole-network assembly and execution.
//!
//! [`Model`] instantiates every layer described by a resolved
//! [`ModelConfig`] into one [`ParamStore`] (deterministically from a seed)
//! and runs forward passes on a caller-supplied [`Graph`], returning the
//! logits node plus any requested activation captures.

use crate::blocks::{
    apply_momentum, BlockLayer, Capture, CaptureSpec, DownsampleLayer, Fwd, HeadLayer, Mode,
    StemLayer,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Number of input image channels.
pub const INPUT_CHANNELS: usize = 3;

/// A fully materialized network: config, parameters, and layer structure.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    stem: StemLayer,
    stages: Vec<Vec<BlockLayer>>,
    downs: Vec<DownsampleLayer>,
    head: HeadLayer,
}

/// Result of one forward pass.
pub struct ForwardPass {
    /// `[B, num_classes]` logits node.
    pub logits: NodeId,
    /// Recorded intermediate activations, in network order.
    pub captures: Vec<Capture>,
    param_nodes: Vec<Option<NodeId>>,
}

impl ForwardPass {
    /// Graph node a parameter entered the pass as (if it was used).
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes[id.index()]
    }
}

impl<S: Scalar> Model<S> {
    /// Instantiate all parameters for `config` with truncated-normal
    /// weights drawn deterministically from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
        let config = config.resolved()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::from_seed(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);

        let stem = StemLayer::build(
            &mut pb,
            "stem",
            config.stem_kernel,
            INPUT_CHANNELS,
            config.stages[0].dim,
        )?;

        let mut stages = Vec::with_capacity(4);
        let mut downs = Vec::with_capacity(3);
        let mut global_index = 0;
        for (s, stage) in config.stages.iter().enumerate() {
            let plan = config.plan(s).to_vec();
            let ratio = config.ffn_ratio_of(s);
            let mut blocks = Vec::with_capacity(stage.depth);
            for (i, &kind) in plan.iter().enumerate() {
                blocks.push(BlockLayer::build(
                    &mut pb,
                    &format!("stages.{s}.blocks.{i}"),
                    kind,
                    stage.dim,
                    stage.sam_heads,
                    stage.sam_expansion,
                    stage.msa_heads,
                    stage.aggregation,
                    ratio,
                    config.drop_path_rate(global_index),
                )?);
                global_index += 1;
            }
            stages.push(blocks);
            if s < 3 {
                downs.push(DownsampleLayer::build(
                    &mut pb,
                    &format!("stages.{s}.down"),
                    stage.dim,
                    config.stages[s + 1].dim,
                )?);
            }
        }

        let head = HeadLayer::build(
            &mut pb,
            "head",
            config.stages[3].dim,
            config.num_classes,
        )?;

        Ok(Model {
            config,
            params,
            stem,
            stages,
            downs,
            head,
        })
    }

    /// Run the network on an input node of shape `[B, H, W, 3]` with both
    /// spatial extents multiples of the total downsampling factor.
    ///
    /// In training mode with batch statistics enabled, batch-norm running
    /// buffers are updated in place after the graph is built.
    pub fn forward(
        &mut self,
        g: &mut Graph<S>,
        x: NodeId,
        mode: Mode,
        rng: Option<&mut Rng>,
        capture: CaptureSpec,
    ) -> Result<ForwardPass> {
        {
            let shape = g.value(x).shape();
            if shape.len() != 4 || shape[3] != INPUT_CHANNELS {
                return Err(Error::Data(format!(
                    "input must be [B, H, W, {INPUT_CHANNELS}], got {shape:?}"
                )));
            }
            for &hw in &shape[1..3] {
                if hw == 0 || hw % crate::config::DOWNSAMPLE_TOTAL != 0 {
                    return Err(Error::Data(format!(
                        "spatial extent {hw} must be a positive multiple of {}",
                        crate::config::DOWNSAMPLE_TOTAL
                    )));
                }
            }
        }

        let mut fc = Fwd::new(g, &self.params, mode, rng, capture);
        let mut h = self.stem.forward(&mut fc, x)?;
        for s in 0..4 {
            for (i, block) in self.stages[s].iter().enumerate() {
                fc.loc = (s, i);
                h = block.forward(&mut fc, h)?;
            }
            if s < 3 {
                h = self.downs[s].forward(&mut fc, h)?;
            }
        }
        let logits = self.head.forward(&mut fc, h)?;

        let (captures, bn_updates, node_of) = fc.into_parts();
        for u in bn_updates {
            apply_momentum(&mut self.params, u);
        }
        Ok(ForwardPass {
            logits,
            captures,
            param_nodes: node_of,
        })
    }

    /// Forward plus smoothed cross-entropy against integer labels.
    pub fn loss(
        &mut self,
        g: &mut Graph<S>,
        images: &Tensor<S>,
        labels: &[usize],
        mode: Mode,
        rng: Option<&mut Rng>,
        smoothing: f64,
    ) -> Result<(NodeId, ForwardPass)> {
        let x = g.constant(images.clone());
        let fp = self.forward(g, x, mode, rng, CaptureSpec::none())?;
        let loss = g.cross_entropy(fp.logits, labels, smoothing)?;
        Ok((loss, fp))
    }

    /// Same structure and values under another element type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast::<T>(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            downs: self.downs.clone(),
            head: self.head.clone(),
        }
    }

    /// Blocks of one stage.
    pub fn stage_blocks(&self, stage: usize) -> &[BlockLayer] {
        &self.stages[stage]
    }
}
