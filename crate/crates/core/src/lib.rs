//! A self-contained workbench for a hierarchical vision backbone built from
//! scale-aware modulation (SAM) blocks and standard multi-head self-attention
//! (MSA) blocks.
//!
//! The crate provides, from the ground up:
//!
//! * a dense-tensor engine with reverse-mode automatic differentiation
//!   ([`graph::Graph`]), generic over `f32`/`f64`;
//! * the backbone's operators — multi-head mixed convolution (MHMC),
//!   scale-aware aggregation (SAA), the SAM mixer, MSA, and a
//!   detail-enhanced feed-forward block ([`blocks`]);
//! * declarative model configuration with presets and a JSON schema
//!   ([`config`]), and model construction ([`model`]);
//! * a static parameter/FLOP analyzer plus attention-distance and
//!   modulation-map extraction ([`analyzer`]);
//! * a desk-scale training harness: AdamW, cosine schedule, gradient
//!   clipping, PPM datasets, a synthetic scale-discrimination task, and
//!   bit-exact checkpointing ([`train`], [`optim`], [`data`],
//!   [`checkpoint`]).
//!
//! Everything is deterministic: given a seed, builds, forward passes, and
//! whole training runs are bit-identical across invocations.

pub mod analyzer;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use model::Model;
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
