//! Finite-difference verification of reverse-mode gradients, op by op and
//! through a small end-to-end model.

mod common;

use common::rand_tensor;
use smt_core::config::{ModelConfig, StageConfig, Stacking};
use smt_core::gradcheck::{check_fn, check_model, GradCheck};
use smt_core::graph::{Graph, NodeId};
use smt_core::{Model, Rng, Tensor};

fn opts() -> GradCheck {
    GradCheck {
        step: 1e-5,
        tolerance: 1e-6,
        coords_per_tensor: 20,
        seed: 0xfeed,
    }
}

/// Reduce an arbitrary node to a scalar with a fixed pseudo-random probe
/// so every output coordinate influences the result.
fn scalarize(g: &mut Graph<f64>, node: NodeId, seed: u64) -> NodeId {
    let shape = g.value(node).shape().to_vec();
    let mut rng = Rng::from_seed(seed);
    let probe: Tensor<f64> = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let p = g.constant(probe);
    let prod = g.mul(node, p).unwrap();
    g.sum(prod)
}

fn assert_pass(report: smt_core::gradcheck::GradReport) {
    assert!(
        report.pass(),
        "gradient check failed (max_rel_err={:.3e}):\n{}",
        report.max_rel_err(),
        report.summary()
    );
}

// ====================================================================
// Elementary ops
// ====================================================================

#[test]
fn grad_add_mul_scale_sum() {
    let mut rng = Rng::from_seed(1);
    let a: Tensor<f64> = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b: Tensor<f64> = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let report = check_fn(&[("a", a), ("b", b)], &opts(), |g, ids| {
        let s = g.add(ids[0], ids[1])?;
        let m = g.mul(s, ids[0])?;
        let sc = g.scale(m, 1.7);
        Ok(g.sum(sc))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_fan_out_accumulates() {
    // The same node used three times: y = sum(x*x + x).
    let mut rng = Rng::from_seed(2);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    let report = check_fn(&[("x", x)], &opts(), |g, ids| {
        let sq = g.mul(ids[0], ids[0])?;
        let s = g.add(sq, ids[0])?;
        Ok(g.sum(s))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_linear() {
    let mut rng = Rng::from_seed(3);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w: Tensor<f64> = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let b: Tensor<f64> = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    let report = check_fn(&[("x", x), ("w", w), ("b", b)], &opts(), |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
        Ok(scalarize(g, y, 30))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_conv2d_geometries() {
    let mut rng = Rng::from_seed(4);
    // (cin, cout, k, stride, padding, groups, h)
    let cases = [
        (3usize, 4usize, 3usize, 1usize, 1usize, 1usize, 5usize),
        (4, 4, 3, 1, 1, 4, 5), // depthwise
        (4, 8, 1, 1, 0, 2, 4), // grouped pointwise
        (3, 2, 3, 2, 1, 1, 7), // strided
        (2, 2, 5, 1, 2, 2, 6), // large kernel, depthwise-ish groups
    ];
    for (i, &(cin, cout, k, stride, padding, groups, h)) in cases.iter().enumerate() {
        let x: Tensor<f64> = rand_tensor(&mut rng, &[2, h, h, cin], -1.0, 1.0);
        let w: Tensor<f64> = rand_tensor(&mut rng, &[k, k, cin / groups, cout], -1.0, 1.0);
        let b: Tensor<f64> = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        let report = check_fn(&[("x", x), ("w", w), ("b", b)], &opts(), |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding, groups)?;
            Ok(scalarize(g, y, 40 + i as u64))
        })
        .unwrap();
        assert!(
            report.pass(),
            "conv case {i} failed:\n{}",
            report.summary()
        );
    }
}

#[test]
fn grad_bmm_both_layouts() {
    let mut rng = Rng::from_seed(5);
    for &transpose_b in &[false, true] {
        let a: Tensor<f64> = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let bshape = if transpose_b { [2, 5, 4] } else { [2, 4, 5] };
        let b: Tensor<f64> = rand_tensor(&mut rng, &bshape, -1.0, 1.0);
        let report = check_fn(&[("a", a), ("b", b)], &opts(), |g, ids| {
            let y = g.bmm(ids[0], ids[1], transpose_b)?;
            Ok(scalarize(g, y, 50))
        })
        .unwrap();
        assert_pass(report);
    }
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::from_seed(6);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
    let gamma: Tensor<f64> = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let beta: Tensor<f64> = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    let report = check_fn(&[("x", x), ("g", gamma), ("b", beta)], &opts(), |g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
        Ok(scalarize(g, y, 60))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_batch_norm_training_statistics() {
    // Gradients must flow through the batch mean and variance.
    let mut rng = Rng::from_seed(7);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 3, 3, 4], -2.0, 2.0);
    let gamma: Tensor<f64> = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let beta: Tensor<f64> = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let report = check_fn(&[("x", x), ("g", gamma), ("b", beta)], &opts(), |g, ids| {
        let (y, _, _) = g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
        Ok(scalarize(g, y, 70))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_batch_norm_eval_treats_stats_as_constant() {
    let mut rng = Rng::from_seed(8);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 2, 2, 3], -2.0, 2.0);
    let gamma: Tensor<f64> = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta: Tensor<f64> = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let mean = [0.3, -0.2, 0.1];
    let var = [1.5, 0.7, 2.0];
    let report = check_fn(&[("x", x), ("g", gamma), ("b", beta)], &opts(), |g, ids| {
        let y = g.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)?;
        Ok(scalarize(g, y, 80))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_gelu_softmax() {
    let mut rng = Rng::from_seed(9);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[4, 5], -3.0, 3.0);
    let report = check_fn(&[("x", x)], &opts(), |g, ids| {
        let a = g.gelu(ids[0]);
        let s = g.softmax(a);
        Ok(scalarize(g, s, 90))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_cross_entropy() {
    let mut rng = Rng::from_seed(10);
    let logits: Tensor<f64> = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    for &smoothing in &[0.0, 0.1] {
        let report = check_fn(&[("logits", logits.clone())], &opts(), |g, ids| {
            g.cross_entropy(ids[0], &[1, 4, 0], smoothing)
        })
        .unwrap();
        assert_pass(report);
    }
}

#[test]
fn grad_shape_plumbing_chain() {
    // reshape -> permute -> slice -> concat -> shuffle, all in one chain.
    let mut rng = Rng::from_seed(11);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 3, 4, 8], -1.0, 1.0);
    let report = check_fn(&[("x", x)], &opts(), |g, ids| {
        let p = g.permute(ids[0], &[0, 2, 1, 3])?;
        let r = g.reshape(p, &[2, 12, 8])?;
        let a = g.slice_last(r, 0, 2)?;
        let b = g.slice_last(r, 2, 6)?;
        let cat = g.concat_last(&[b, a])?;
        let sh = g.shuffle_channels(cat, 4)?;
        Ok(scalarize(g, sh, 100))
    })
    .unwrap();
    assert_pass(report);
}

#[test]
fn grad_scale_rows_and_pool() {
    let mut rng = Rng::from_seed(12);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[3, 2, 2, 4], -1.0, 1.0);
    let report = check_fn(&[("x", x)], &opts(), |g, ids| {
        let sr = g.scale_rows(ids[0], vec![2.0, 0.0, 0.5])?;
        let p = g.global_avg_pool(sr)?;
        Ok(scalarize(g, p, 110))
    })
    .unwrap();
    assert_pass(report);
}

// ====================================================================
// Guard rails
// ====================================================================

#[test]
fn backward_requires_scalar_target() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]));
    assert!(g.backward(x).is_err());
    let s = g.sum(x);
    assert!(g.backward(s).is_ok());
}

#[test]
fn constants_accumulate_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[3], 2.0));
    let c = g.constant(Tensor::full(&[3], 5.0));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    let gx = g.grad(x).unwrap();
    assert!(gx.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
}

#[test]
fn negative_control_detached_value_is_flagged() {
    // y = sum(x + detach(x)): numerically dy/dx = 2 per coordinate, but
    // the analytic gradient only sees the live branch (1). The checker
    // must catch the mismatch.
    let x = Tensor::full(&[4], 0.75);
    let report = check_fn(&[("x", x)], &opts(), |g, ids| {
        let frozen = g.constant(g.value(ids[0]).clone());
        let s = g.add(ids[0], frozen)?;
        Ok(g.sum(s))
    })
    .unwrap();
    assert!(
        !report.pass(),
        "checker failed to flag a detached gradient path"
    );
    assert!(report.max_rel_err() > 0.4);
}

// ====================================================================
// End-to-end model
// ====================================================================

fn tiny_config() -> ModelConfig {
    let dims = [8usize, 8, 16, 16];
    let msa = [4usize, 4, 8, 16];
    ModelConfig {
        name: "fd-tiny".into(),
        stem_kernel: 3,
        num_classes: 3,
        ffn_ratio: 2,
        drop_path_max: 0.1,
        stacking_strategy: Stacking::Interleave,
        stages: (0..4)
            .map(|i| StageConfig {
                dim: dims[i],
                depth: if i == 2 { 2 } else { 1 },
                sam_heads: 4,
                sam_expansion: 2,
                msa_heads: msa[i],
                aggregation: smt_core::config::Aggregation::Saa,
                block_plan: None,
                ffn_ratio: None,
            })
            .collect(),
    }
}

#[test]
fn grad_whole_tiny_model() {
    let mut model: Model<f64> = Model::build(&tiny_config(), 505).unwrap();
    let mut rng = Rng::from_seed(506);
    let images: Tensor<f64> = rand_tensor(&mut rng, &[2, 64, 64, 3], -1.0, 1.0);
    let labels = [0usize, 2];
    let o = GradCheck {
        step: 1e-5,
        tolerance: 1e-5,
        coords_per_tensor: 6,
        seed: 0xabcd,
    };
    let report = check_model(&mut model, &images, &labels, 0.1, &o).unwrap();
    // Every trainable tensor of every layer type must appear and pass.
    assert!(report.entries.len() > 100, "got {}", report.entries.len());
    assert!(
        report.pass(),
        "model gradient check failed (max_rel_err={:.3e}):\n{}",
        report.max_rel_err(),
        report.summary()
    );
}
