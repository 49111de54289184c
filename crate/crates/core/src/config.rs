//! Declarative architecture descriptions.
//!
//! A [`ModelConfig`] fully determines a network: four stages of
//! mixer blocks (SAM and/or MSA) over a strided conv stem, with a
//! global-average-pool classifier head. Configs come from named presets
//! ([`preset`]) or JSON ([`parse_config`]); either way they are validated
//! and their per-stage block plans materialized before use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of mixer inside one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockKind {
    Sam,
    Msa,
}

/// How the multi-kernel conv output is aggregated into the modulator.
/// `Saa` is the full scale-aware aggregation; the others are reduced
/// variants kept for cost-comparison studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    None,
    SingleLinear,
    TwoLinears,
    Ibn,
    Saa,
}

impl Aggregation {
    pub fn label(self) -> &'static str {
        match self {
            Aggregation::None => "none",
            Aggregation::SingleLinear => "single_linear",
            Aggregation::TwoLinears => "two_linears",
            Aggregation::Ibn => "ibn",
            Aggregation::Saa => "saa",
        }
    }
}

/// How blocks are allocated across the last two stages. The first two
/// stages are always all-SAM (unless an explicit per-stage plan overrides
/// them): local modulation early, attention late.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stacking {
    /// Stage 3 alternates SAM, MSA, SAM, MSA…; stage 4 is all MSA.
    Interleave,
    /// Stage 3 is the first half SAM, second half MSA; stage 4 is all MSA.
    Split,
    /// Stages 3 and 4 are all SAM (attention-free).
    AllSam,
    /// Stages 3 and 4 are all MSA.
    AllMsa,
}

impl Stacking {
    pub fn label(self) -> &'static str {
        match self {
            Stacking::Interleave => "interleave",
            Stacking::Split => "split",
            Stacking::AllSam => "all_sam",
            Stacking::AllMsa => "all_msa",
        }
    }
}

/// One stage of the four-stage pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Channel width of every block in the stage.
    pub dim: usize,
    /// Number of blocks.
    pub depth: usize,
    /// Head count of the multi-kernel conv inside SAM blocks.
    pub sam_heads: usize,
    /// Expansion ratio of the aggregation's grouped bottleneck.
    pub sam_expansion: usize,
    /// Attention head count of MSA blocks.
    pub msa_heads: usize,
    /// Aggregation variant used by SAM blocks in this stage.
    pub aggregation: Aggregation,
    /// Explicit block sequence. Absent in hand-written configs to request
    /// derivation from the stacking strategy; always materialized after
    /// validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_plan: Option<Vec<BlockKind>>,
    /// Per-stage feed-forward expansion override; falls back to the
    /// model-level `ffn_ratio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_ratio: Option<usize>,
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Kernel size of the stem's first (stride-2) convolution.
    pub stem_kernel: usize,
    pub num_classes: usize,
    /// Default feed-forward expansion ratio for all stages.
    pub ffn_ratio: usize,
    /// Stochastic-depth rate of the final block; earlier blocks scale
    /// linearly from 0.
    pub drop_path_max: f64,
    pub stacking_strategy: Stacking,
    /// Exactly four stages, finest to coarsest.
    pub stages: Vec<StageConfig>,
}

/// Spatial shrink factor from input to last stage; inputs must divide it.
pub const DOWNSAMPLE_TOTAL: usize = 32;

/// Block sequence for one stage under a stacking strategy.
///
/// Hybrid strategies require an even depth so SAM and MSA counts match;
/// odd-depth hybrids must supply an explicit `block_plan` instead.
pub fn stacking_plan(depth: usize, strategy: Stacking) -> Result<Vec<BlockKind>> {
    if depth == 0 {
        return Err(Error::config("stacking_plan", "depth must be >= 1"));
    }
    match strategy {
        Stacking::AllSam => Ok(vec![BlockKind::Sam; depth]),
        Stacking::AllMsa => Ok(vec![BlockKind::Msa; depth]),
        Stacking::Interleave | Stacking::Split => {
            if depth % 2 != 0 {
                return Err(Error::config(
                    "stacking_plan",
                    format!(
                        "{} needs an even depth, got {depth}; set an explicit block_plan to override",
                        strategy.label()
                    ),
                ));
            }
            let half = depth / 2;
            let plan = match strategy {
                Stacking::Interleave => {
                    let mut p = Vec::with_capacity(depth);
                    for _ in 0..half {
                        p.push(BlockKind::Sam);
                        p.push(BlockKind::Msa);
                    }
                    p
                }
                _ => {
                    let mut p = vec![BlockKind::Sam; half];
                    p.extend(vec![BlockKind::Msa; half]);
                    p
                }
            };
            Ok(plan)
        }
    }
}

impl ModelConfig {
    /// Validate all invariants and materialize every stage's block plan.
    /// All other code consumes resolved configs.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        if cfg.stages.len() != 4 {
            return Err(Error::config(
                "$.stages",
                format!("exactly 4 stages required, got {}", cfg.stages.len()),
            ));
        }
        if cfg.stem_kernel < 2 {
            return Err(Error::config("$.stem_kernel", "stem kernel must be >= 2"));
        }
        if cfg.num_classes < 2 {
            return Err(Error::config("$.num_classes", "need at least 2 classes"));
        }
        if cfg.ffn_ratio == 0 {
            return Err(Error::config("$.ffn_ratio", "ffn ratio must be >= 1"));
        }
        if !(0.0..1.0).contains(&cfg.drop_path_max) {
            return Err(Error::config(
                "$.drop_path_max",
                format!("must be in [0, 1), got {}", cfg.drop_path_max),
            ));
        }
        let strategy = cfg.stacking_strategy;
        for (i, stage) in cfg.stages.iter_mut().enumerate() {
            let path = format!("$.stages[{i}]");
            if stage.dim == 0 {
                return Err(Error::config(format!("{path}.dim"), "dim must be >= 1"));
            }
            if stage.depth == 0 {
                return Err(Error::config(format!("{path}.depth"), "depth must be >= 1"));
            }
            if stage.ffn_ratio == Some(0) {
                return Err(Error::config(
                    format!("{path}.ffn_ratio"),
                    "ffn ratio must be >= 1",
                ));
            }
            let plan = match &stage.block_plan {
                Some(plan) => {
                    if plan.len() != stage.depth {
                        return Err(Error::config(
                            format!("{path}.block_plan"),
                            format!("plan length {} != depth {}", plan.len(), stage.depth),
                        ));
                    }
                    plan.clone()
                }
                None => derive_plan(i, stage.depth, strategy)
                    .map_err(|e| match e {
                        Error::Config { detail, .. } => {
                            Error::config(format!("{path}.depth"), detail)
                        }
                        other => other,
                    })?,
            };
            let has_sam = plan.contains(&BlockKind::Sam);
            let has_msa = plan.contains(&BlockKind::Msa);
            if has_sam {
                if stage.sam_heads == 0 || stage.dim % stage.sam_heads != 0 {
                    return Err(Error::config(
                        format!("{path}.dim"),
                        format!(
                            "dim {} not divisible by sam_heads {}",
                            stage.dim, stage.sam_heads
                        ),
                    ));
                }
                if stage.sam_expansion == 0 {
                    return Err(Error::config(
                        format!("{path}.sam_expansion"),
                        "expansion must be >= 1",
                    ));
                }
            }
            if has_msa && (stage.msa_heads == 0 || stage.dim % stage.msa_heads != 0) {
                return Err(Error::config(
                    format!("{path}.dim"),
                    format!(
                        "dim {} not divisible by msa_heads {}",
                        stage.dim, stage.msa_heads
                    ),
                ));
            }
            stage.block_plan = Some(plan);
        }
        Ok(cfg)
    }

    /// The materialized block plan of a stage (resolved configs only).
    pub fn plan(&self, stage: usize) -> &[BlockKind] {
        self.stages[stage]
            .block_plan
            .as_ref()
            .expect("config not resolved")
    }

    /// Feed-forward expansion ratio effective in a stage.
    pub fn ffn_ratio_of(&self, stage: usize) -> usize {
        self.stages[stage].ffn_ratio.unwrap_or(self.ffn_ratio)
    }

    /// Total number of blocks across all stages.
    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Stochastic-depth rate for the block at `global_index` (0-based over
    /// the whole network): linear from 0 to `drop_path_max`.
    pub fn drop_path_rate(&self, global_index: usize) -> f64 {
        let total = self.total_blocks();
        if total <= 1 {
            return self.drop_path_max;
        }
        self.drop_path_max * global_index as f64 / (total - 1) as f64
    }

    /// Per-stage feature resolutions for a square input, verifying stride
    /// divisibility.
    pub fn stage_resolutions(&self, input: usize) -> Result<[usize; 4]> {
        if input == 0 || input % DOWNSAMPLE_TOTAL != 0 {
            return Err(Error::Data(format!(
                "input size {input} must be a positive multiple of {DOWNSAMPLE_TOTAL}"
            )));
        }
        Ok([input / 4, input / 8, input / 16, input / 32])
    }
}

/// Default plan of a stage when no explicit `block_plan` is given: the
/// first two stages are all SAM; the stacking strategy governs stages 3–4.
fn derive_plan(stage: usize, depth: usize, strategy: Stacking) -> Result<Vec<BlockKind>> {
    match stage {
        0 | 1 => stacking_plan(depth, Stacking::AllSam),
        2 => stacking_plan(depth, strategy),
        _ => match strategy {
            Stacking::AllSam => stacking_plan(depth, Stacking::AllSam),
            _ => stacking_plan(depth, Stacking::AllMsa),
        },
    }
}

// --------------------------------------------------------------------
// Presets
// --------------------------------------------------------------------

/// The named size variants.
pub const PRESET_NAMES: [&str; 6] = ["smt-m", "smt-t", "smt-s", "smt-b", "smt-l", "smt-micro"];

fn base_config(
    name: &str,
    dims: [usize; 4],
    depths: [usize; 4],
    stem_kernel: usize,
    ffn_ratio: usize,
    stage4_ffn: Option<usize>,
    drop_path_max: f64,
) -> ModelConfig {
    let stages = (0..4)
        .map(|i| StageConfig {
            dim: dims[i],
            depth: depths[i],
            sam_heads: 4,
            sam_expansion: 2,
            msa_heads: if i == 3 { 16 } else { 8 },
            aggregation: Aggregation::Saa,
            block_plan: None,
            ffn_ratio: if i == 3 { stage4_ffn } else { None },
        })
        .collect();
    ModelConfig {
        name: name.to_string(),
        stem_kernel,
        num_classes: 1000,
        ffn_ratio,
        drop_path_max,
        stacking_strategy: Stacking::Interleave,
        stages,
    }
}

/// Look up a configuration by name: the size variants of `PRESET_NAMES`
/// plus study variants derived from `smt-t` —
/// `smt-t-heads-{1,2,4,6,8}`, `smt-t-agg-{none,single_linear,two_linears,ibn,saa}`,
/// `smt-t-stack-{interleave,split,all_sam,all_msa}`, and
/// `smt-t-comp-{baseline,mhmc,saa,ehn}`.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "smt-m" => base_config("smt-m", [64, 128, 256, 512], [1, 1, 4, 1], 3, 2, None, 0.1),
        "smt-t" => base_config("smt-t", [64, 128, 256, 512], [2, 2, 8, 1], 3, 4, Some(2), 0.1),
        "smt-s" => base_config("smt-s", [64, 128, 256, 512], [3, 4, 18, 1], 7, 4, Some(2), 0.2),
        "smt-b" => base_config("smt-b", [64, 128, 256, 512], [4, 6, 28, 2], 7, 4, Some(2), 0.3),
        "smt-l" => base_config("smt-l", [96, 192, 384, 768], [4, 6, 28, 3], 7, 4, None, 0.5),
        // Desk-scale preset for tests and examples: tiny dims/depths and a
        // binary head sized for the synthetic discrimination task.
        "smt-micro" => {
            let mut cfg = base_config("smt-micro", [16, 32, 64, 128], [1, 1, 2, 1], 3, 2, None, 0.1);
            cfg.num_classes = 2;
            cfg
        }
        other => {
            return variant_preset(other).ok_or_else(|| {
                Error::config(
                    "preset",
                    format!(
                        "unknown preset '{other}'; valid presets: {} \
                         (plus variants smt-t-heads-N, smt-t-agg-KIND, \
                         smt-t-stack-STRATEGY, smt-t-comp-STEP)",
                        PRESET_NAMES.join(", ")
                    ),
                )
            })?;
        }
    };
    cfg.resolved()
}

/// Study variants built as deltas on `smt-t`. Returns `None` for
/// unrecognized names; divisibility problems (e.g. 6 heads over 64
/// channels) surface when the caller resolves the config.
fn variant_preset(name: &str) -> Option<Result<ModelConfig>> {
    let rest = name.strip_prefix("smt-t-")?;
    let mut cfg = base_config("smt-t", [64, 128, 256, 512], [2, 2, 8, 1], 3, 4, Some(2), 0.1);
    cfg.name = name.to_string();
    if let Some(h) = rest.strip_prefix("heads-") {
        let heads: usize = h.parse().ok()?;
        if ![1, 2, 4, 6, 8].contains(&heads) {
            return None;
        }
        for s in &mut cfg.stages {
            s.sam_heads = heads;
        }
    } else if let Some(kind) = rest.strip_prefix("agg-") {
        let agg = match kind {
            "none" => Aggregation::None,
            "single_linear" => Aggregation::SingleLinear,
            "two_linears" => Aggregation::TwoLinears,
            "ibn" => Aggregation::Ibn,
            "saa" => Aggregation::Saa,
            _ => return None,
        };
        for s in &mut cfg.stages {
            s.aggregation = agg;
        }
    } else if let Some(strat) = rest.strip_prefix("stack-") {
        cfg.stacking_strategy = match strat {
            "interleave" => Stacking::Interleave,
            "split" => Stacking::Split,
            "all_sam" => Stacking::AllSam,
            "all_msa" => Stacking::AllMsa,
            _ => return None,
        };
    } else if let Some(step) = rest.strip_prefix("comp-") {
        // Component build-up: attention-free single-head baseline, then
        // multi-kernel heads, then the aggregation, then hybrid stacking.
        match step {
            "baseline" => {
                cfg.stacking_strategy = Stacking::AllSam;
                for s in &mut cfg.stages {
                    s.sam_heads = 1;
                    s.aggregation = Aggregation::None;
                }
            }
            "mhmc" => {
                cfg.stacking_strategy = Stacking::AllSam;
                for s in &mut cfg.stages {
                    s.aggregation = Aggregation::None;
                }
            }
            "saa" => {
                cfg.stacking_strategy = Stacking::AllSam;
            }
            "ehn" => {}
            _ => return None,
        }
    } else {
        return None;
    }
    Some(cfg.resolved())
}

/// A named family of study variants for cost tables. Entries whose
/// configuration is structurally impossible carry the error instead
/// (e.g. 6 heads cannot divide 64 channels).
pub fn ablation_family(family: &str) -> Result<Vec<(String, Result<ModelConfig>)>> {
    let ids: Vec<String> = match family {
        "heads" => [1usize, 2, 4, 6, 8]
            .iter()
            .map(|h| format!("smt-t-heads-{h}"))
            .collect(),
        "aggregation" => ["none", "single_linear", "two_linears", "saa", "ibn"]
            .iter()
            .map(|k| format!("smt-t-agg-{k}"))
            .collect(),
        "stacking" => ["all_sam", "all_msa", "interleave", "split"]
            .iter()
            .map(|s| format!("smt-t-stack-{s}"))
            .collect(),
        "components" => ["baseline", "mhmc", "saa", "ehn"]
            .iter()
            .map(|s| format!("smt-t-comp-{s}"))
            .collect(),
        other => {
            return Err(Error::config(
                "ablation",
                format!(
                    "unknown family '{other}'; valid: heads, aggregation, stacking, components"
                ),
            ))
        }
    };
    Ok(ids.iter().map(|id| (id.clone(), preset(id))).collect())
}

// --------------------------------------------------------------------
// JSON
// --------------------------------------------------------------------

/// Parse a config document, validate it, and materialize block plans.
/// Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_str(text)?;
    cfg.resolved()
}

/// Serialize a config as pretty JSON. `parse_config` of the output yields
/// an equal config.
pub fn serialize_config(cfg: &ModelConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serialization");
    s.push('\n');
    s
}
