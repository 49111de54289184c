//! Shared helpers for the integration suites: brute-force reference
//! implementations (plain nested loops, f64 accumulation) that the graph
//! engine's fused kernels are compared against, plus random-tensor
//! utilities.

#![allow(dead_code)]

use smt_core::{Rng, Scalar, Tensor};

// ====================================================================
// Random tensors
// ====================================================================

pub fn rand_tensor<S: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.uniform(lo, hi))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Elementwise |a-b| <= tol * (1 + max(|a|,|b|)) over whole tensors.
pub fn assert_tensors_close<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let (x, y) = (x.to_f64(), y.to_f64());
        let bound = tol * (1.0 + x.abs().max(y.abs()));
        assert!(
            (x - y).abs() <= bound,
            "{what}: index {i}: {x} vs {y} (|diff|={}, bound={bound})",
            (x - y).abs()
        );
    }
}

// ====================================================================
// Reference kernels (brute force)
// ====================================================================

/// y = x @ w + b over the last axis; x is [rows.., cin], w is [cin, cout].
pub fn ref_linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Tensor<S> {
    let cin = w.shape()[0];
    let cout = w.shape()[1];
    let rows = x.numel() / cin;
    let mut out = vec![S::ZERO; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b.map(|b| b.data()[o].to_f64()).unwrap_or(0.0);
            for k in 0..cin {
                acc += x.data()[r * cin + k].to_f64() * w.data()[k * cout + o].to_f64();
            }
            out[r * cout + o] = S::from_f64(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_vec(&shape, out).unwrap()
}

/// Grouped 2-D cross-correlation; x [N,H,W,Cin], w [k,k,Cin/g,Cout],
/// zero padding, square stride.
pub fn ref_conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<S> {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cin_g, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin_g, cin / groups);
    let cout_g = cout / groups;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![S::ZERO; n * oh * ow * cout];
    let xat = |ni: usize, yi: isize, xi: isize, ci: usize| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= wd as isize {
            0.0
        } else {
            x.data()[((ni * h + yi as usize) * wd + xi as usize) * cin + ci].to_f64()
        }
    };
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for g in 0..groups {
                    for oc in 0..cout_g {
                        let co = g * cout_g + oc;
                        let mut acc = b.map(|b| b.data()[co].to_f64()).unwrap_or(0.0);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = (oy * stride + ky) as isize - padding as isize;
                                let xi = (ox * stride + kx) as isize - padding as isize;
                                for ic in 0..cin_g {
                                    let wv = w.data()
                                        [((ky * kw + kx) * cin_g + ic) * cout + co]
                                        .to_f64();
                                    acc += xat(ni, yi, xi, g * cin_g + ic) * wv;
                                }
                            }
                        }
                        out[((ni * oh + oy) * ow + ox) * cout + co] = S::from_f64(acc);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, cout], out).unwrap()
}

/// Tanh-form GELU in f64.
pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Numerically stable softmax of one row.
pub fn ref_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Per-row layer norm with biased variance.
pub fn ref_layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Tensor<S> {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let mut out = vec![S::ZERO; x.numel()];
    for r in 0..rows {
        let row: Vec<f64> = x.data()[r * c..(r + 1) * c]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            let norm = (row[i] - mean) * rstd;
            out[r * c + i] =
                S::from_f64(norm * gamma.data()[i].to_f64() + beta.data()[i].to_f64());
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

/// The channel-interleave permutation: output channel i*heads+j reads
/// input channel j*(c/heads)+i (gather form).
pub fn ref_shuffle_gather(c: usize, heads: usize) -> Vec<usize> {
    let m = c / heads;
    let mut gather = Vec::with_capacity(c);
    for i in 0..m {
        for j in 0..heads {
            gather.push(j * m + i);
        }
    }
    gather
}

/// Multi-head multi-kernel depthwise conv: slice channels into `heads`
/// equal parts, depthwise-filter slice i with an odd kernel 3+2i
/// (same-padded), concatenate.
pub fn ref_mhmc<S: Scalar>(
    x: &Tensor<S>,
    weights: &[Tensor<S>],
    biases: &[Tensor<S>],
) -> Tensor<S> {
    let heads = weights.len();
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let per = c / heads;
    let mut out = vec![S::ZERO; x.numel()];
    for head in 0..heads {
        // Extract the channel slice.
        let mut slice = vec![S::ZERO; n * h * w * per];
        for r in 0..n * h * w {
            for ci in 0..per {
                slice[r * per + ci] = x.data()[r * c + head * per + ci];
            }
        }
        let slice_t = Tensor::from_vec(&[n, h, w, per], slice).unwrap();
        let k = weights[head].shape()[0];
        let conv = ref_conv2d(&slice_t, &weights[head], Some(&biases[head]), 1, k / 2, per);
        for r in 0..n * h * w {
            for ci in 0..per {
                out[r * c + head * per + ci] = conv.data()[r * per + ci];
            }
        }
    }
    Tensor::from_vec(&[n, h, w, c], out).unwrap()
}

/// Scale-aware aggregation: channel shuffle, grouped 1x1 expand (groups =
/// c/heads, each group heads -> e*heads channels), GELU, then a dense
/// fuse back to c channels.
pub fn ref_saa<S: Scalar>(
    x: &Tensor<S>,
    heads: usize,
    expand_w: &Tensor<S>, // [1,1,heads, e*c]
    expand_b: &Tensor<S>,
    fuse_w: &Tensor<S>, // [e*c, c]
    fuse_b: &Tensor<S>,
) -> Tensor<S> {
    let c = *x.shape().last().unwrap();
    let m = c / heads;
    let ec = expand_w.shape()[3];
    let e_per_group = ec / m;
    let rows = x.numel() / c;
    let gather = ref_shuffle_gather(c, heads);
    let mut out = vec![S::ZERO; rows * c];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let shuffled: Vec<f64> = gather.iter().map(|&i| row[i].to_f64()).collect();
        // Grouped pointwise expand + GELU.
        let mut hidden = vec![0.0f64; ec];
        for g in 0..m {
            for oc in 0..e_per_group {
                let co = g * e_per_group + oc;
                let mut acc = expand_b.data()[co].to_f64();
                for ic in 0..heads {
                    acc += shuffled[g * heads + ic] * expand_w.data()[ic * ec + co].to_f64();
                }
                hidden[co] = ref_gelu(acc);
            }
        }
        // Dense fuse.
        for o in 0..c {
            let mut acc = fuse_b.data()[o].to_f64();
            for k in 0..ec {
                acc += hidden[k] * fuse_w.data()[k * c + o].to_f64();
            }
            out[r * c + o] = S::from_f64(acc);
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

/// Whole multi-head self-attention over a flattened [N,H,W,C] input with
/// qkv and output projections, all in plain loops.
pub fn ref_msa<S: Scalar>(
    x: &Tensor<S>,
    heads: usize,
    qkv_w: &Tensor<S>, // [c, 3c]
    qkv_b: &Tensor<S>,
    proj_w: &Tensor<S>, // [c, c]
    proj_b: &Tensor<S>,
) -> Tensor<S> {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let t = h * w;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![S::ZERO; x.numel()];
    for ni in 0..n {
        // qkv per token.
        let mut q = vec![0.0f64; t * c];
        let mut k = vec![0.0f64; t * c];
        let mut v = vec![0.0f64; t * c];
        for ti in 0..t {
            let row: Vec<f64> = (0..c)
                .map(|ci| x.data()[(ni * t + ti) * c + ci].to_f64())
                .collect();
            for o in 0..3 * c {
                let mut acc = qkv_b.data()[o].to_f64();
                for ci in 0..c {
                    acc += row[ci] * qkv_w.data()[ci * 3 * c + o].to_f64();
                }
                match o / c {
                    0 => q[ti * c + o % c] = acc,
                    1 => k[ti * c + o % c] = acc,
                    _ => v[ti * c + o % c] = acc,
                }
            }
        }
        // Attention per head, then merge and project.
        let mut merged = vec![0.0f64; t * c];
        for head in 0..heads {
            for ti in 0..t {
                let mut scores = vec![0.0f64; t];
                for tj in 0..t {
                    let mut acc = 0.0;
                    for di in 0..d {
                        acc += q[ti * c + head * d + di] * k[tj * c + head * d + di];
                    }
                    scores[tj] = acc * scale;
                }
                let weights = ref_softmax_row(&scores);
                for di in 0..d {
                    let mut acc = 0.0;
                    for tj in 0..t {
                        acc += weights[tj] * v[tj * c + head * d + di];
                    }
                    merged[ti * c + head * d + di] = acc;
                }
            }
        }
        for ti in 0..t {
            for o in 0..c {
                let mut acc = proj_b.data()[o].to_f64();
                for ci in 0..c {
                    acc += merged[ti * c + ci] * proj_w.data()[ci * c + o].to_f64();
                }
                out[(ni * t + ti) * c + o] = S::from_f64(acc);
            }
        }
    }
    Tensor::from_vec(&[n, h, w, c], out).unwrap()
}
