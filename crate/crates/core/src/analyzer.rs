//! Static and dynamic model analysis.
//!
//! * [`count_params`] / [`count_flops`] / [`analyze`] — per-layer parameter
//!   and FLOP accounting. Parameters are counted exactly from the built
//!   model's store (grouped by layer prefix); FLOPs come from closed-form
//!   shape arithmetic at a given input size.
//! * [`mean_attention_distance`] — how far attention reaches, in input
//!   pixels, per attention layer and head.
//! * [`extract_modulation_maps`] — 2-D spatial maps of the modulation path
//!   (per-head conv outputs, pre- and post-aggregation) for inspection.
//! * [`summarize`] — per-stage text or CSV table.
//!
//! Counting convention: one multiply-accumulate is one FLOP; biases and
//! residual/elementwise merges cost 1 per element, normalization 4 per
//! element, GELU 8 per element, attention softmax 5 per logit and its
//! scaling 1 per logit. Stochastic depth is free. FLOPs are per image
//! (batch 1). Each row folds in the cost of its own residual merge.

use crate::blocks::{CaptureKind, CaptureSpec, Mode};
use crate::config::{Aggregation, BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

/// Human-readable statement of the FLOP convention, recorded in reports.
pub const CONVENTION: &str =
    "1 MAC = 1 FLOP; bias/add/mul 1 per element; norm 4 per element; GELU 8 per element; softmax 5 per logit";

/// What a cost row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Stem,
    Norm,
    Sam,
    Attention,
    /// The token-by-token score and context matmuls plus softmax — the
    /// part of attention that scales quadratically with token count.
    AttentionMatmul,
    Ffn,
    Downsample,
    Head,
}

/// One layer's costs.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub name: String,
    pub kind: RowKind,
    /// Stage index for in-stage layers, `None` for stem/head.
    pub stage: Option<usize>,
    pub params: u64,
    pub flops: u64,
}

/// Attention reach of one attention layer.
#[derive(Debug, Clone)]
pub struct LayerDistances {
    pub stage: usize,
    pub block: usize,
    /// Mean attention distance per head, input-pixel units.
    pub per_head: Vec<f64>,
    /// Mean of `per_head`.
    pub mean: f64,
    /// Population standard deviation across heads.
    pub std: f64,
}

/// Full analysis result.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub model_name: String,
    /// Square input size the FLOP column assumes; `None` for a
    /// parameters-only report (FLOPs are zero then).
    pub input: Option<usize>,
    pub convention: &'static str,
    pub rows: Vec<CostRow>,
    pub attention_distances: Option<Vec<LayerDistances>>,
    /// Set when a requested dynamic analysis had nothing to measure.
    pub warning: Option<String>,
}

impl AnalysisReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// (params, flops) summed over rows of one stage (blocks plus the
    /// stage's trailing downsample).
    pub fn stage_totals(&self, stage: usize) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.stage == Some(stage))
            .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }

    pub fn find_row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

// ====================================================================
// FLOP arithmetic
// ====================================================================

fn conv_flops(oh: usize, ow: usize, cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    let macs = (oh * ow * cout) as u64 * (k * k * cin / groups) as u64;
    macs + (oh * ow * cout) as u64 // bias
}

fn linear_flops(t: usize, cin: usize, cout: usize) -> u64 {
    (t * cout) as u64 * cin as u64 + (t * cout) as u64 // MACs + bias
}

fn norm_flops(t: usize, c: usize) -> u64 {
    4 * (t * c) as u64
}

fn gelu_flops(elems: usize) -> u64 {
    8 * elems as u64
}

fn sam_mixer_flops(r: usize, c: usize, heads: usize, expansion: usize, agg: Aggregation) -> u64 {
    let t = r * r;
    let per_head = c / heads;
    let mut f = 2 * linear_flops(t, c, c); // scale & value projections
    for i in 0..heads {
        let k = 3 + 2 * i;
        f += conv_flops(r, r, per_head, per_head, k, per_head);
    }
    f += match agg {
        Aggregation::None => 0,
        Aggregation::SingleLinear => linear_flops(t, c, c),
        Aggregation::TwoLinears => 2 * linear_flops(t, c, c) + gelu_flops(t * c),
        Aggregation::Ibn => {
            linear_flops(t, c, 2 * c) + gelu_flops(t * 2 * c) + linear_flops(t, 2 * c, c)
        }
        Aggregation::Saa => {
            let groups = c / heads;
            conv_flops(1, t, c, expansion * c, 1, groups)
                + gelu_flops(t * expansion * c)
                + linear_flops(t, expansion * c, c)
        }
    };
    f += (t * c) as u64; // modulation product
    f += linear_flops(t, c, c); // output projection
    f += (t * c) as u64; // residual merge
    f
}

fn ffn_flops(r: usize, c: usize, ratio: usize) -> u64 {
    let t = r * r;
    let hidden = ratio * c;
    linear_flops(t, c, hidden)
        + gelu_flops(t * hidden)
        + conv_flops(r, r, hidden, hidden, 3, hidden)
        + (t * hidden) as u64 // detail-branch merge
        + linear_flops(t, hidden, c)
        + (t * c) as u64 // residual merge
}

/// Rows for the whole network. FLOPs are filled when `input` is given.
fn cost_rows(cfg: &ModelConfig, input: Option<usize>) -> Result<Vec<CostRow>> {
    let res: [usize; 4] = match input {
        Some(size) => cfg.stage_resolutions(size)?,
        None => [0; 4],
    };
    let have_flops = input.is_some();
    let mut rows = Vec::new();

    let c0 = cfg.stages[0].dim;
    let stem_flops = if have_flops {
        let h2 = input.unwrap() / 2;
        let h4 = input.unwrap() / 4;
        conv_flops(h2, h2, 3, c0, cfg.stem_kernel, 1)
            + norm_flops(h2 * h2, c0)
            + gelu_flops(h2 * h2 * c0)
            + conv_flops(h4, h4, c0, c0, 2, 1)
            + norm_flops(h4 * h4, c0)
    } else {
        0
    };
    rows.push(CostRow {
        name: "stem".into(),
        kind: RowKind::Stem,
        stage: None,
        params: 0,
        flops: stem_flops,
    });

    for (s, stage) in cfg.stages.iter().enumerate() {
        let r = res[s];
        let t = r * r;
        let c = stage.dim;
        let ratio = cfg.ffn_ratio_of(s);
        for (i, &kind) in cfg.plan(s).iter().enumerate() {
            let prefix = format!("stages.{s}.blocks.{i}");
            let nf = if have_flops { norm_flops(t, c) } else { 0 };
            rows.push(CostRow {
                name: format!("{prefix}.norm1"),
                kind: RowKind::Norm,
                stage: Some(s),
                params: 0,
                flops: nf,
            });
            match kind {
                BlockKind::Sam => rows.push(CostRow {
                    name: format!("{prefix}.sam"),
                    kind: RowKind::Sam,
                    stage: Some(s),
                    params: 0,
                    flops: if have_flops {
                        sam_mixer_flops(r, c, stage.sam_heads, stage.sam_expansion, stage.aggregation)
                    } else {
                        0
                    },
                }),
                BlockKind::Msa => {
                    let heads = stage.msa_heads;
                    rows.push(CostRow {
                        name: format!("{prefix}.attn.qkv"),
                        kind: RowKind::Attention,
                        stage: Some(s),
                        params: 0,
                        flops: if have_flops { linear_flops(t, c, 3 * c) } else { 0 },
                    });
                    rows.push(CostRow {
                        name: format!("{prefix}.attn.matmul"),
                        kind: RowKind::AttentionMatmul,
                        stage: Some(s),
                        params: 0,
                        flops: if have_flops {
                            let tt = (t * t) as u64;
                            tt * c as u64          // scores q·k
                                + tt * heads as u64    // scale
                                + 5 * tt * heads as u64 // softmax
                                + tt * c as u64        // context attn·v
                        } else {
                            0
                        },
                    });
                    rows.push(CostRow {
                        name: format!("{prefix}.attn.proj"),
                        kind: RowKind::Attention,
                        stage: Some(s),
                        params: 0,
                        flops: if have_flops {
                            linear_flops(t, c, c) + (t * c) as u64 // + residual
                        } else {
                            0
                        },
                    });
                }
            }
            rows.push(CostRow {
                name: format!("{prefix}.norm2"),
                kind: RowKind::Norm,
                stage: Some(s),
                params: 0,
                flops: nf,
            });
            rows.push(CostRow {
                name: format!("{prefix}.ffn"),
                kind: RowKind::Ffn,
                stage: Some(s),
                params: 0,
                flops: if have_flops { ffn_flops(r, c, ratio) } else { 0 },
            });
        }
        if s < 3 {
            let r2 = res[s + 1];
            let c2 = cfg.stages[s + 1].dim;
            rows.push(CostRow {
                name: format!("stages.{s}.down"),
                kind: RowKind::Downsample,
                stage: Some(s),
                params: 0,
                flops: if have_flops {
                    conv_flops(r2, r2, c, c2, 3, 1) + norm_flops(r2 * r2, c2)
                } else {
                    0
                },
            });
        }
    }

    let c3 = cfg.stages[3].dim;
    rows.push(CostRow {
        name: "head".into(),
        kind: RowKind::Head,
        stage: None,
        params: 0,
        flops: if have_flops {
            (res[3] * res[3] * c3) as u64       // global average pool
                + norm_flops(1, c3)
                + linear_flops(1, c3, cfg.num_classes)
        } else {
            0
        },
    });
    Ok(rows)
}

/// Fill each row's parameter count from the model's store by hierarchical
/// name prefix; every trainable entry must land in exactly one row.
fn assign_params<S: Scalar>(model: &Model<S>, rows: &mut [CostRow]) -> Result<()> {
    use std::collections::HashMap;
    let index: HashMap<String, usize> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.name.clone(), i))
        .collect();
    for e in model.params.entries() {
        if !e.trainable {
            continue;
        }
        let segments: Vec<&str> = e.name.split('.').collect();
        let mut claimed = false;
        for take in (1..segments.len()).rev() {
            let candidate = segments[..take].join(".");
            if let Some(&i) = index.get(candidate.as_str()) {
                rows[i].params += e.tensor.numel() as u64;
                claimed = true;
                break;
            }
        }
        if !claimed {
            return Err(Error::Usage(format!(
                "parameter '{}' does not belong to any analysis row",
                e.name
            )));
        }
    }
    Ok(())
}

/// Per-layer parameters and (optionally) FLOPs at a square input size.
pub fn analyze<S: Scalar>(model: &Model<S>, input: Option<usize>) -> Result<AnalysisReport> {
    let mut rows = cost_rows(&model.config, input)?;
    assign_params(model, &mut rows)?;
    Ok(AnalysisReport {
        model_name: model.config.name.clone(),
        input,
        convention: CONVENTION,
        rows,
        attention_distances: None,
        warning: None,
    })
}

/// Exact per-layer parameter counts of a built model.
pub fn count_params<S: Scalar>(model: &Model<S>) -> Result<AnalysisReport> {
    analyze(model, None)
}

/// Per-layer FLOPs (and parameters) at a square input size.
pub fn count_flops<S: Scalar>(model: &Model<S>, input: usize) -> Result<AnalysisReport> {
    analyze(model, Some(input))
}

// ====================================================================
// Attention distance
// ====================================================================

/// Mean attention distance per attention layer and head: the
/// attention-weighted average Euclidean distance between query and key
/// token centers, in input-pixel units (token pitch = the stage's total
/// downsampling rate). Runs the model in inference mode on `images`.
pub fn mean_attention_distance<S: Scalar>(
    model: &mut Model<S>,
    images: &Tensor<S>,
) -> Result<AnalysisReport> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Data(format!(
            "expected [B,H,W,3] images, got {shape:?}"
        )));
    }
    let (batch, ih, iw) = (shape[0], shape[1], shape[2]);

    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let fp = model.forward(
        &mut g,
        x,
        Mode::Eval,
        None,
        CaptureSpec {
            modulation: false,
            attention: true,
        },
    )?;

    let mut layers = Vec::new();
    for cap in &fp.captures {
        if cap.kind != CaptureKind::Attention {
            continue;
        }
        let stage = cap.stage;
        let rate = 4 << stage; // total downsampling entering the stage
        let (hs, ws) = (ih / rate, iw / rate);
        let t = hs * ws;
        let attn = g.value(cap.node);
        let heads = attn.shape()[0] / batch;
        debug_assert_eq!(attn.shape()[1], t);

        let data = attn.data();
        let mut per_head = vec![0.0f64; heads];
        let mut matrix = vec![0.0f64; t * t];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * t * t;
                for (m, v) in matrix.iter_mut().zip(&data[base..base + t * t]) {
                    *m = v.to_f64();
                }
                per_head[h] += matrix_mean_distance(&matrix, hs, ws, rate as f64);
            }
        }
        for v in per_head.iter_mut() {
            *v /= batch as f64;
        }
        let mean = per_head.iter().sum::<f64>() / heads as f64;
        let var = per_head.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / heads as f64;
        layers.push(LayerDistances {
            stage,
            block: cap.block,
            per_head,
            mean,
            std: var.sqrt(),
        });
    }

    let warning = if layers.is_empty() {
        Some("model has no attention blocks; distance table is empty".to_string())
    } else {
        None
    };
    let input = if ih == iw { Some(ih) } else { None };
    let mut report = analyze(model, input)?;
    report.attention_distances = Some(layers);
    report.warning = warning;
    Ok(report)
}

/// Mean attention distance of a single `t x t` row-major attention matrix
/// over an `hs x ws` token grid whose centers are `pitch` pixels apart:
/// averaged over queries, the attention-weighted Euclidean distance from
/// each query's token center to every key's.
pub fn matrix_mean_distance(attn: &[f64], hs: usize, ws: usize, pitch: f64) -> f64 {
    let t = hs * ws;
    assert_eq!(attn.len(), t * t, "attention matrix must be t*t for t tokens");
    let mut dist = vec![0.0f64; t * t];
    for q in 0..t {
        let (qy, qx) = ((q / ws) as f64, (q % ws) as f64);
        for j in 0..t {
            let (jy, jx) = ((j / ws) as f64, (j % ws) as f64);
            let dy = (qy - jy) * pitch;
            let dx = (qx - jx) * pitch;
            dist[q * t + j] = (dy * dy + dx * dx).sqrt();
        }
    }
    let mut acc = 0.0;
    for (a, d) in attn.iter().zip(&dist) {
        acc += a * d;
    }
    acc / t as f64
}

// ====================================================================
// Modulation maps
// ====================================================================

/// How to collapse the channel axis of a captured map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapReduce {
    ChannelMean,
    /// A single channel, indexed within the exported tensor's own channel
    /// range (a head map indexes within that head's slice).
    SingleChannel(usize),
}

impl MapReduce {
    pub fn label(self) -> String {
        match self {
            MapReduce::ChannelMean => "channel_mean".into(),
            MapReduce::SingleChannel(c) => format!("single_channel:{c}"),
        }
    }
}

/// Spatial upsampling applied to exported maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    None,
    Nearest,
    Bilinear,
}

impl Upsample {
    pub fn label(self) -> &'static str {
        match self {
            Upsample::None => "none",
            Upsample::Nearest => "nearest",
            Upsample::Bilinear => "bilinear",
        }
    }
}

/// One exported 2-D grid.
#[derive(Debug, Clone)]
pub struct ModulationMap {
    /// `stages.{s}.blocks.{b}.{kind}`
    pub name: String,
    pub stage: usize,
    pub block: usize,
    /// `modulator` (post-aggregation), `pre_agg` (multi-kernel conv
    /// output), or `head{i}` (one head's slice of it).
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub reduction: String,
    pub upsampling: String,
}

/// Result of a map extraction.
#[derive(Debug, Clone)]
pub struct MapExtraction {
    pub maps: Vec<ModulationMap>,
    pub warning: Option<String>,
}

/// Export modulation-path activations of SAM blocks as 2-D grids for one
/// image (`[1,H,W,3]`): the aggregated modulator, the pre-aggregation
/// conv output, and optionally each conv head's own map.
pub fn extract_modulation_maps<S: Scalar>(
    model: &mut Model<S>,
    image: &Tensor<S>,
    stage_filter: Option<usize>,
    reduce: MapReduce,
    upsample: Upsample,
    include_heads: bool,
) -> Result<MapExtraction> {
    let shape = image.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Data(format!(
            "map extraction takes a single [1,H,W,3] image, got {shape:?}"
        )));
    }
    if let Some(s) = stage_filter {
        if s >= 4 {
            return Err(Error::Usage(format!("stage filter {s} out of range 0..4")));
        }
    }
    let (ih, iw) = (shape[1], shape[2]);

    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let fp = model.forward(
        &mut g,
        x,
        Mode::Eval,
        None,
        CaptureSpec {
            modulation: true,
            attention: false,
        },
    )?;

    let mut maps = Vec::new();
    for cap in &fp.captures {
        if let Some(s) = stage_filter {
            if cap.stage != s {
                continue;
            }
        }
        let value = g.value(cap.node);
        match cap.kind {
            CaptureKind::Modulator => {
                maps.push(make_map(
                    value, cap.stage, cap.block, "modulator", 0, None, reduce, upsample, ih, iw,
                )?);
            }
            CaptureKind::HeadMaps => {
                maps.push(make_map(
                    value, cap.stage, cap.block, "pre_agg", 0, None, reduce, upsample, ih, iw,
                )?);
                if include_heads {
                    let c = *value.shape().last().unwrap();
                    let heads = model.config.stages[cap.stage].sam_heads;
                    let per = c / heads;
                    for h in 0..heads {
                        maps.push(make_map(
                            value,
                            cap.stage,
                            cap.block,
                            &format!("head{h}"),
                            h * per,
                            Some(per),
                            reduce,
                            upsample,
                            ih,
                            iw,
                        )?);
                    }
                }
            }
            _ => {}
        }
    }

    let warning = if maps.is_empty() {
        Some(match stage_filter {
            Some(s) => format!("stage {s} has no modulation blocks; nothing to export"),
            None => "model has no modulation blocks; nothing to export".to_string(),
        })
    } else {
        None
    };
    Ok(MapExtraction { maps, warning })
}

#[allow(clippy::too_many_arguments)]
fn make_map<S: Scalar>(
    value: &Tensor<S>,
    stage: usize,
    block: usize,
    kind: &str,
    chan_start: usize,
    chan_len: Option<usize>,
    reduce: MapReduce,
    upsample: Upsample,
    ih: usize,
    iw: usize,
) -> Result<ModulationMap> {
    let (h, w, c) = (value.shape()[1], value.shape()[2], value.shape()[3]);
    let len = chan_len.unwrap_or(c);
    let mut grid = vec![0.0f32; h * w];
    match reduce {
        MapReduce::ChannelMean => {
            for (i, cell) in grid.iter_mut().enumerate() {
                let row = &value.data()[i * c + chan_start..i * c + chan_start + len];
                let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
                *cell = (sum / len as f64) as f32;
            }
        }
        MapReduce::SingleChannel(ci) => {
            if ci >= len {
                return Err(Error::Usage(format!(
                    "channel {ci} out of range for a map with {len} channels"
                )));
            }
            for (i, cell) in grid.iter_mut().enumerate() {
                *cell = value.data()[i * c + chan_start + ci].to_f64() as f32;
            }
        }
    }
    let (grid, oh, ow) = match upsample {
        Upsample::None => (grid, h, w),
        Upsample::Nearest => (resize_nearest(&grid, h, w, ih, iw), ih, iw),
        Upsample::Bilinear => (resize_bilinear(&grid, h, w, ih, iw), ih, iw),
    };
    Ok(ModulationMap {
        name: format!("stages.{stage}.blocks.{block}.{kind}"),
        stage,
        block,
        kind: kind.to_string(),
        height: oh,
        width: ow,
        data: grid,
        reduction: reduce.label(),
        upsampling: upsample.label().to_string(),
    })
}

/// Nearest-neighbor resize of a row-major grid.
pub fn resize_nearest(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        let sy = (y * h / oh).min(h - 1);
        for x in 0..ow {
            let sx = (x * w / ow).min(w - 1);
            out[y * ow + x] = src[sy * w + sx];
        }
    }
    out
}

/// Bilinear resize of a row-major grid (half-pixel centers, clamped).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let a = src[y0 * w + x0] as f64;
            let b = src[y0 * w + x1] as f64;
            let c = src[y1 * w + x0] as f64;
            let d = src[y1 * w + x1] as f64;
            let top = a + (b - a) * tx;
            let bot = c + (d - c) * tx;
            out[y * ow + x] = (top + (bot - top) * ty) as f32;
        }
    }
    out
}

// ====================================================================
// Summaries
// ====================================================================

fn quote_csv(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn human_flops(f: u64) -> String {
    if f >= 1_000_000_000 {
        format!("{:.3}G", f as f64 / 1e9)
    } else if f >= 1_000_000 {
        format!("{:.2}M", f as f64 / 1e6)
    } else {
        format!("{f}")
    }
}

fn plan_string(cfg: &ModelConfig, stage: usize) -> String {
    cfg.plan(stage)
        .iter()
        .map(|k| match k {
            BlockKind::Sam => 'S',
            BlockKind::Msa => 'M',
        })
        .collect()
}

/// Per-stage summary of a report. CSV mode emits a header line and one
/// comma-separated row per section; text mode a padded table.
pub fn summarize(cfg: &ModelConfig, report: &AnalysisReport, csv: bool) -> String {
    struct Line {
        section: String,
        res: String,
        dim: String,
        depth: String,
        plan: String,
        params: u64,
        flops: u64,
    }
    let res = report
        .input
        .and_then(|i| cfg.stage_resolutions(i).ok());
    let mut lines = Vec::new();
    let stem_row = report.find_row("stem").expect("stem row");
    lines.push(Line {
        section: "stem".into(),
        res: report
            .input
            .map(|i| format!("{}", i / 4))
            .unwrap_or_else(|| "-".into()),
        dim: cfg.stages[0].dim.to_string(),
        depth: "-".into(),
        plan: "-".into(),
        params: stem_row.params,
        flops: stem_row.flops,
    });
    for s in 0..4 {
        let (p, f) = report.stage_totals(s);
        lines.push(Line {
            section: format!("stage{}", s + 1),
            res: res
                .map(|r| r[s].to_string())
                .unwrap_or_else(|| "-".into()),
            dim: cfg.stages[s].dim.to_string(),
            depth: cfg.stages[s].depth.to_string(),
            plan: plan_string(cfg, s),
            params: p,
            flops: f,
        });
    }
    let head_row = report.find_row("head").expect("head row");
    lines.push(Line {
        section: "head".into(),
        res: "1".into(),
        dim: cfg.stages[3].dim.to_string(),
        depth: "-".into(),
        plan: "-".into(),
        params: head_row.params,
        flops: head_row.flops,
    });

    let mut out = String::new();
    if csv {
        out.push_str("section,resolution,dim,depth,plan,params,flops\n");
        for l in &lines {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                quote_csv(&l.section),
                quote_csv(&l.res),
                l.dim,
                l.depth,
                quote_csv(&l.plan),
                l.params,
                l.flops
            ));
        }
        out.push_str(&format!(
            "total,,,,,{},{}\n",
            report.total_params(),
            report.total_flops()
        ));
    } else {
        out.push_str(&format!(
            "model {}   input {}   params {}   flops {}\n",
            report.model_name,
            report
                .input
                .map(|i| format!("{i}x{i}"))
                .unwrap_or_else(|| "-".into()),
            report.total_params(),
            human_flops(report.total_flops()),
        ));
        out.push_str(&format!(
            "{:<8} {:>5} {:>5} {:>5}  {:<10} {:>12} {:>10}\n",
            "section", "res", "dim", "depth", "plan", "params", "flops"
        ));
        for l in &lines {
            out.push_str(&format!(
                "{:<8} {:>5} {:>5} {:>5}  {:<10} {:>12} {:>10}\n",
                l.section,
                l.res,
                l.dim,
                l.depth,
                l.plan,
                l.params,
                human_flops(l.flops)
            ));
        }
    }
    out
}
