//! Forward-value verification of every graph operation against
//! hand-computed cases and brute-force reference kernels.

mod common;

use common::*;
use smt_core::graph::shuffle_permutation;
use smt_core::{Graph, Rng, Tensor};

// ====================================================================
// Tensor basics
// ====================================================================

#[test]
fn from_vec_validates_element_count() {
    assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn reshape_preserves_row_major_data() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap());
    let y = g.reshape(x, &[3, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 2]);
    assert_eq!(g.value(y).data(), g.value(x).data());
    assert!(g.reshape(x, &[4, 2]).is_err());
}

#[test]
fn permute_moves_axes_correctly() {
    let mut g = Graph::<f32>::new();
    let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
    let x = g.leaf(Tensor::from_vec(&[2, 3, 4], data).unwrap());
    let y = g.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(g.value(y).shape(), &[4, 2, 3]);
    // y[c, a, b] == x[a, b, c]
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                let xi = (a * 3 + b) * 4 + c;
                let yi = (c * 2 + a) * 3 + b;
                assert_eq!(g.value(y).data()[yi], g.value(x).data()[xi]);
            }
        }
    }
    assert!(g.permute(x, &[0, 0, 1]).is_err());
    assert!(g.permute(x, &[0, 1]).is_err());
}

#[test]
fn permute_then_inverse_is_identity() {
    let mut rng = Rng::from_seed(42);
    let t: Tensor<f32> = rand_tensor(&mut rng, &[3, 4, 5, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(t.clone());
    let y = g.permute(x, &[3, 1, 0, 2]).unwrap();
    // Inverse of [3,1,0,2] is [2,1,3,0].
    let z = g.permute(y, &[2, 1, 3, 0]).unwrap();
    assert_eq!(g.value(z).shape(), t.shape());
    assert_eq!(g.value(z).data(), t.data());
}

#[test]
fn slice_and_concat_round_trip() {
    let mut rng = Rng::from_seed(7);
    let t: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(t.clone());
    let a = g.slice_last(x, 0, 3).unwrap();
    let b = g.slice_last(x, 3, 5).unwrap();
    assert_eq!(g.value(a).shape(), &[2, 3, 3]);
    let back = g.concat_last(&[a, b]).unwrap();
    assert_eq!(g.value(back).data(), t.data());
    assert!(g.slice_last(x, 6, 3).is_err());
}

// ====================================================================
// Linear and batched matmul
// ====================================================================

#[test]
fn linear_matches_reference_on_random_shapes() {
    let mut rng = Rng::from_seed(11);
    for _ in 0..30 {
        let rows = 1 + rng.next_below(6);
        let cin = 1 + rng.next_below(10);
        let cout = 1 + rng.next_below(10);
        let x: Tensor<f32> = rand_tensor(&mut rng, &[rows, cin], -2.0, 2.0);
        let w: Tensor<f32> = rand_tensor(&mut rng, &[cin, cout], -1.0, 1.0);
        let b: Tensor<f32> = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let y = g.linear(xn, wn, Some(bn)).unwrap();
        assert_tensors_close(g.value(y), &ref_linear(&x, &w, Some(&b)), 1e-6, "linear");
    }
}

#[test]
fn linear_broadcasts_over_leading_axes() {
    let mut rng = Rng::from_seed(12);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    let w: Tensor<f32> = rand_tensor(&mut rng, &[5, 7], -1.0, 1.0);
    let mut g = Graph::new();
    let (xn, wn) = (g.leaf(x.clone()), g.leaf(w.clone()));
    let y = g.linear(xn, wn, None).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 4, 7]);
    assert_tensors_close(g.value(y), &ref_linear(&x, &w, None), 1e-6, "linear4d");
}

#[test]
fn bmm_matches_loop_reference() {
    let mut rng = Rng::from_seed(13);
    for &transpose_b in &[false, true] {
        let (bsz, m, kdim, n) = (3, 4, 5, 6);
        let a: Tensor<f32> = rand_tensor(&mut rng, &[bsz, m, kdim], -1.0, 1.0);
        let bshape = if transpose_b { [bsz, n, kdim] } else { [bsz, kdim, n] };
        let b: Tensor<f32> = rand_tensor(&mut rng, &bshape, -1.0, 1.0);
        let mut g = Graph::new();
        let (an, bn) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let y = g.bmm(an, bn, transpose_b).unwrap();
        let mut expect = vec![0.0f32; bsz * m * n];
        for bi in 0..bsz {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for k in 0..kdim {
                        let av = a.data()[(bi * m + i) * kdim + k] as f64;
                        let bv = if transpose_b {
                            b.data()[(bi * n + j) * kdim + k] as f64
                        } else {
                            b.data()[(bi * kdim + k) * n + j] as f64
                        };
                        acc += av * bv;
                    }
                    expect[(bi * m + i) * n + j] = acc as f32;
                }
            }
        }
        let expect = Tensor::from_vec(&[bsz, m, n], expect).unwrap();
        assert_tensors_close(g.value(y), &expect, 1e-6, "bmm");
    }
}

// ====================================================================
// Convolution
// ====================================================================

#[test]
fn conv_identity_kernel_preserves_input() {
    let mut rng = Rng::from_seed(21);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[2, 5, 5, 3], -1.0, 1.0);
    // Depthwise 3x3 delta kernel: 1 at the center.
    let mut w = vec![0.0f32; 3 * 3 * 1 * 3];
    for c in 0..3 {
        w[(4 * 1) * 3 + c] = 1.0; // ky=1, kx=1 -> (1*3+1)=4
    }
    let w = Tensor::from_vec(&[3, 3, 1, 3], w).unwrap();
    let mut g = Graph::new();
    let (xn, wn) = (g.leaf(x.clone()), g.leaf(w));
    let y = g.conv2d(xn, wn, None, 1, 1, 3).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_matches_reference_over_random_geometries() {
    let mut rng = Rng::from_seed(22);
    for trial in 0..40 {
        let groups = [1, 2, 4][rng.next_below(3)];
        let cin = groups * (1 + rng.next_below(3));
        let cout = groups * (1 + rng.next_below(3));
        let k = [1, 2, 3, 5][rng.next_below(4)];
        let stride = 1 + rng.next_below(2);
        let padding = rng.next_below(k.min(3));
        let h = k + stride * (1 + rng.next_below(4));
        let wd = k + stride * (1 + rng.next_below(4));
        let n = 1 + rng.next_below(2);

        let x: Tensor<f32> = rand_tensor(&mut rng, &[n, h, wd, cin], -1.0, 1.0);
        let w: Tensor<f32> = rand_tensor(&mut rng, &[k, k, cin / groups, cout], -1.0, 1.0);
        let b: Tensor<f32> = rand_tensor(&mut rng, &[cout], -0.5, 0.5);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let y = g.conv2d(xn, wn, Some(bn), stride, padding, groups).unwrap();
        let expect = ref_conv2d(&x, &w, Some(&b), stride, padding, groups);
        assert_tensors_close(
            g.value(y),
            &expect,
            1e-6,
            &format!("conv trial {trial}: k={k} s={stride} p={padding} g={groups}"),
        );
    }
}

#[test]
fn conv_rejects_inconsistent_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[1, 4, 4, 4]));
    let w_bad_cin = g.leaf(Tensor::zeros(&[3, 3, 3, 8]));
    assert!(g.conv2d(x, w_bad_cin, None, 1, 1, 1).is_err());
    let w = g.leaf(Tensor::zeros(&[3, 3, 2, 6]));
    // cin/groups=2 ok, but cout=6 not divisible by groups=4.
    let w2 = g.leaf(Tensor::zeros(&[3, 3, 1, 6]));
    assert!(g.conv2d(x, w2, None, 1, 1, 4).is_err());
    // kernel larger than padded input
    let wbig = g.leaf(Tensor::zeros(&[7, 7, 4, 4]));
    assert!(g.conv2d(x, wbig, None, 1, 0, 1).is_err());
    // stride zero
    assert!(g.conv2d(x, w, None, 0, 1, 2).is_err());
}

// ====================================================================
// Channel shuffle
// ====================================================================

#[test]
fn shuffle_gather_matches_fixed_examples() {
    assert_eq!(shuffle_permutation(8, 2), vec![0, 4, 1, 5, 2, 6, 3, 7]);
    // One group only: identity.
    assert_eq!(shuffle_permutation(4, 4), vec![0, 1, 2, 3]);
    // heads == 1: identity.
    assert_eq!(shuffle_permutation(5, 1), vec![0, 1, 2, 3, 4]);
}

#[test]
fn shuffle_is_a_permutation_and_inverts() {
    let mut rng = Rng::from_seed(31);
    for &(c, heads) in &[(8usize, 2usize), (8, 4), (12, 3), (16, 4), (64, 4)] {
        let mut sorted = shuffle_permutation(c, heads);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..c).collect::<Vec<_>>(), "bijective c={c} h={heads}");

        // Shuffling with the complementary head count inverts the shuffle.
        let t: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, c], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let s = g.shuffle_channels(x, heads).unwrap();
        let back = g.shuffle_channels(s, c / heads).unwrap();
        assert_eq!(g.value(back).data(), t.data(), "inverse c={c} h={heads}");
    }
}

#[test]
fn shuffle_moves_values_by_the_gather_rule() {
    let c = 8;
    let t = Tensor::from_vec(&[1, 1, c], (0..c).map(|v| v as f32).collect()).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(t);
    let s = g.shuffle_channels(x, 2).unwrap();
    let got: Vec<f32> = g.value(s).data().to_vec();
    assert_eq!(got, vec![0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    assert!(g.shuffle_channels(x, 3).is_err(), "8 % 3 != 0");
}

// ====================================================================
// Normalization
// ====================================================================

#[test]
fn layer_norm_fixed_examples() {
    // Two elements [1,3]: mean 2, biased variance 1 -> roughly [-1, 1].
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap());
    let gamma = g.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
    let beta = g.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-6);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-6);

    // Three elements [1,2,3]: biased variance 2/3 -> ±sqrt(3/2).
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let gamma = g.leaf(Tensor::from_vec(&[3], vec![1.0; 3]).unwrap());
    let beta = g.leaf(Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let s = (3.0f64 / 2.0).sqrt();
    for (got, want) in g.value(y).data().iter().zip([-s, 0.0, s]) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn layer_norm_matches_reference_with_affine() {
    let mut rng = Rng::from_seed(41);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, 6], -3.0, 3.0);
    let gamma: Tensor<f32> = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let beta: Tensor<f32> = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    let mut g = Graph::new();
    let (xn, gn, bn) = (g.leaf(x.clone()), g.leaf(gamma.clone()), g.leaf(beta.clone()));
    let y = g.layer_norm(xn, gn, bn, 1e-6).unwrap();
    assert_tensors_close(
        g.value(y),
        &ref_layer_norm(&x, &gamma, &beta, 1e-6),
        1e-5,
        "layer_norm",
    );
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let mut rng = Rng::from_seed(42);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 3, 3, 4], -2.0, 5.0);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let gamma = g.leaf(Tensor::full(&[4], 1.0));
    let beta = g.leaf(Tensor::zeros(&[4]));
    let (y, mean, var) = g.batch_norm_train(xn, gamma, beta, 1e-12).unwrap();

    // Reported statistics are the plain per-channel batch moments.
    let rows = 2 * 3 * 3;
    for c in 0..4 {
        let vals: Vec<f64> = (0..rows).map(|r| x.data()[r * 4 + c]).collect();
        let m = vals.iter().sum::<f64>() / rows as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / rows as f64;
        assert!((mean[c] - m).abs() < 1e-12);
        assert!((var[c] - v).abs() < 1e-12);
    }
    // Output channels have zero mean, unit variance.
    for c in 0..4 {
        let vals: Vec<f64> = (0..rows).map(|r| g.value(y).data()[r * 4 + c]).collect();
        let m = vals.iter().sum::<f64>() / rows as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / rows as f64;
        assert!(m.abs() < 1e-10, "channel {c} mean {m}");
        assert!((v - 1.0).abs() < 1e-8, "channel {c} var {v}");
    }
}

#[test]
fn batch_norm_eval_uses_supplied_statistics() {
    let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0f64, -1.0]).unwrap();
    let mut g = Graph::new();
    let xn = g.leaf(x);
    let gamma = g.leaf(Tensor::from_vec(&[2], vec![2.0, 1.0]).unwrap());
    let beta = g.leaf(Tensor::from_vec(&[2], vec![0.5, 0.0]).unwrap());
    let y = g
        .batch_norm_eval(xn, gamma, beta, &[1.0, -1.0], &[4.0, 1.0], 0.0)
        .unwrap();
    // (3-1)/2 * 2 + 0.5 = 2.5 ; (-1 - -1)/1 * 1 + 0 = 0
    assert!((g.value(y).data()[0] - 2.5).abs() < 1e-12);
    assert!(g.value(y).data()[1].abs() < 1e-12);
}

// ====================================================================
// Activations, softmax, pooling, loss
// ====================================================================

#[test]
fn gelu_matches_closed_form() {
    let mut g = Graph::<f64>::new();
    let xs = vec![-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0];
    let x = g.leaf(Tensor::from_vec(&[8], xs.clone()).unwrap());
    let y = g.gelu(x);
    for (i, &v) in xs.iter().enumerate() {
        assert!((g.value(y).data()[i] - ref_gelu(v)).abs() < 1e-12);
    }
    // gelu(x) - gelu(-x) = x for the tanh form.
    for &v in &xs {
        assert!((ref_gelu(v) - ref_gelu(-v) - v).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_are_stable_distributions() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0]).unwrap());
    let y = g.softmax(x);
    for r in 0..2 {
        let row = &g.value(y).data()[r * 3..(r + 1) * 3];
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    let expect = ref_softmax_row(&[1000.0, 1001.0, 1002.0]);
    for i in 0..3 {
        assert!((g.value(y).data()[i] as f64 - expect[i]).abs() < 1e-6);
    }
}

#[test]
fn global_avg_pool_means_over_space() {
    let x = Tensor::from_vec(
        &[1, 2, 2, 2],
        vec![1.0f32, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0],
    )
    .unwrap();
    let mut g = Graph::new();
    let xn = g.leaf(x);
    let y = g.global_avg_pool(xn).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2]);
    assert!((g.value(y).data()[0] - 2.5).abs() < 1e-6);
    assert!((g.value(y).data()[1] - 25.0).abs() < 1e-6);
}

#[test]
fn cross_entropy_uniform_logits_give_log_k() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 5]));
    let loss = g.cross_entropy(x, &[0, 3], 0.0).unwrap();
    assert!((g.value(loss).data()[0] - (5.0f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_smoothed_formula() {
    let mut rng = Rng::from_seed(51);
    let logits: Tensor<f64> = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let targets = [1usize, 0, 3];
    let s = 0.1;
    let mut g = Graph::new();
    let xn = g.leaf(logits.clone());
    let loss = g.cross_entropy(xn, &targets, s).unwrap();

    let k = 4.0;
    let mut expect = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * 4..(r + 1) * 4];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mean: f64 = row.iter().sum::<f64>() / k;
        expect += lse - (1.0 - s) * row[t] - s * mean;
    }
    expect /= 3.0;
    assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
    assert!(g.cross_entropy(xn, &[0, 1], s).is_err(), "target count");
    assert!(g.cross_entropy(xn, &[0, 9, 1], s).is_err(), "class range");
}

// ====================================================================
// Composite mixers vs references
// ====================================================================

#[test]
fn mhmc_identity_kernels_preserve_input() {
    use smt_core::blocks::{CaptureSpec, Fwd, MhmcLayer, Mode};
    use smt_core::params::{ParamBuilder, ParamStore};

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = Rng::from_seed(61);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let layer = MhmcLayer::build(&mut pb, "mh", 8, 4).unwrap();
    // Overwrite every head's filter with a centered delta.
    for (h, &wid) in layer.weights.iter().enumerate() {
        let k = 3 + 2 * h;
        let per = 2;
        let t = store.get_mut(wid);
        for v in t.data_mut().iter_mut() {
            *v = 0.0;
        }
        let center = (k / 2) * k + k / 2;
        for c in 0..per {
            t.data_mut()[center * per + c] = 1.0;
        }
    }
    let mut rng2 = Rng::from_seed(62);
    let x: Tensor<f32> = rand_tensor(&mut rng2, &[1, 6, 6, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let mut fc = Fwd::new(&mut g, &store, Mode::Eval, None, CaptureSpec::none());
    let xn = fc.g.constant(x.clone());
    let y = layer.forward(&mut fc, xn).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn mhmc_matches_per_head_conv_reference() {
    use smt_core::blocks::{CaptureSpec, Fwd, MhmcLayer, Mode};
    use smt_core::params::{ParamBuilder, ParamStore};

    let mut rng = Rng::from_seed(63);
    for &(c, heads, hw) in &[(8usize, 4usize, 6usize), (6, 2, 5), (4, 1, 7), (12, 4, 8)] {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut seed_rng = Rng::from_seed(64 + c as u64);
        let mut pb = ParamBuilder::new(&mut store, &mut seed_rng);
        let layer = MhmcLayer::build(&mut pb, "mh", c, heads).unwrap();
        assert_eq!(
            layer.kernel_sizes,
            (0..heads).map(|i| 3 + 2 * i).collect::<Vec<_>>()
        );

        let x: Tensor<f32> = rand_tensor(&mut rng, &[2, hw, hw, c], -1.0, 1.0);
        let weights: Vec<Tensor<f32>> =
            layer.weights.iter().map(|&id| store.get(id).clone()).collect();
        let biases: Vec<Tensor<f32>> =
            layer.biases.iter().map(|&id| store.get(id).clone()).collect();

        let mut g = Graph::new();
        let mut fc = Fwd::new(&mut g, &store, Mode::Eval, None, CaptureSpec::none());
        let xn = fc.g.constant(x.clone());
        let y = layer.forward(&mut fc, xn).unwrap();
        let expect = ref_mhmc(&x, &weights, &biases);
        assert_tensors_close(g.value(y), &expect, 1e-6, &format!("mhmc c={c} h={heads}"));
    }
}

#[test]
fn saa_layer_matches_reference() {
    use smt_core::blocks::{CaptureSpec, Fwd, Mode, SaaLayer};
    use smt_core::params::{ParamBuilder, ParamStore};

    let mut rng = Rng::from_seed(71);
    for &(c, heads, e) in &[(8usize, 4usize, 2usize), (8, 2, 2), (16, 4, 3), (6, 3, 1)] {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut seed_rng = Rng::from_seed(72 + c as u64 + e as u64);
        let mut pb = ParamBuilder::new(&mut store, &mut seed_rng);
        let layer = SaaLayer::build(&mut pb, "saa", c, heads, e).unwrap();

        // Weight-shape arithmetic: grouped expand holds heads*(e*c)
        // values, dense fuse (e*c)*c.
        assert_eq!(store.get(layer.expand_w).numel(), heads * e * c);
        assert_eq!(store.get(layer.fuse.w).numel(), e * c * c);

        let x: Tensor<f32> = rand_tensor(&mut rng, &[2, 4, 4, c], -1.0, 1.0);
        let expand_w = store.get(layer.expand_w).clone();
        let expand_b = store.get(layer.expand_b).clone();
        let fuse_w = store.get(layer.fuse.w).clone();
        let fuse_b = store.get(layer.fuse.b).clone();

        let mut g = Graph::new();
        let mut fc = Fwd::new(&mut g, &store, Mode::Eval, None, CaptureSpec::none());
        let xn = fc.g.constant(x.clone());
        let y = layer.forward(&mut fc, xn).unwrap();
        let expect = ref_saa(&x, heads, &expand_w, &expand_b, &fuse_w, &fuse_b);
        assert_tensors_close(g.value(y), &expect, 1e-5, &format!("saa c={c} h={heads} e={e}"));
    }
}

#[test]
fn saa_pipeline_can_represent_the_identity() {
    // With the activation bypassed, expand weights stacking two copies of
    // the identity and a fuse that averages the copies, the aggregation
    // pipeline reduces to the channel shuffle exactly.
    let (c, heads, e) = (8usize, 4usize, 2usize);
    let m = c / heads;
    let ec = e * c;
    let e_per_group = ec / m;

    let mut expand = vec![0.0f32; heads * ec];
    for g in 0..m {
        for oc in 0..e_per_group {
            let co = g * e_per_group + oc;
            let ic = oc % heads;
            expand[ic * ec + co] = 1.0;
        }
    }
    let mut fuse = vec![0.0f32; ec * c];
    for out_c in 0..c {
        let g = out_c / heads;
        let j = out_c % heads;
        fuse[(g * e_per_group + j) * c + out_c] = 0.5;
        fuse[(g * e_per_group + heads + j) * c + out_c] = 0.5;
    }

    let mut rng = Rng::from_seed(81);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[1, 3, 3, c], -1.0, 1.0);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let sh = g.shuffle_channels(xn, heads).unwrap();
    let ew = g.leaf(Tensor::from_vec(&[1, 1, heads, ec], expand).unwrap());
    let hidden = g.conv2d(sh, ew, None, 1, 0, m).unwrap();
    let fw = g.leaf(Tensor::from_vec(&[ec, c], fuse).unwrap());
    let out = g.linear(hidden, fw, None).unwrap();
    assert_eq!(g.value(out).data(), g.value(sh).data());
}

#[test]
fn msa_layer_matches_reference() {
    use smt_core::blocks::{CaptureSpec, Fwd, Mode, MsaLayer};
    use smt_core::params::{ParamBuilder, ParamStore};

    let mut rng = Rng::from_seed(91);
    for &(c, heads, hw) in &[(8usize, 2usize, 2usize), (16, 4, 3), (12, 3, 2), (8, 8, 4)] {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut seed_rng = Rng::from_seed(92 + c as u64 + heads as u64);
        let mut pb = ParamBuilder::new(&mut store, &mut seed_rng);
        let layer = MsaLayer::build(&mut pb, "attn", c, heads).unwrap();

        let x: Tensor<f32> = rand_tensor(&mut rng, &[2, hw, hw, c], -1.0, 1.0);
        let qkv_w = store.get(layer.qkv.w).clone();
        let qkv_b = store.get(layer.qkv.b).clone();
        let proj_w = store.get(layer.proj.w).clone();
        let proj_b = store.get(layer.proj.b).clone();

        let mut g = Graph::new();
        let mut fc = Fwd::new(&mut g, &store, Mode::Eval, None, CaptureSpec::none());
        let xn = fc.g.constant(x.clone());
        let y = layer.forward(&mut fc, xn).unwrap();
        let expect = ref_msa(&x, heads, &qkv_w, &qkv_b, &proj_w, &proj_b);
        assert_tensors_close(g.value(y), &expect, 1e-5, &format!("msa c={c} h={heads}"));
    }
}

#[test]
fn sam_gating_is_an_exact_elementwise_product() {
    use smt_core::blocks::{CaptureKind, CaptureSpec, Fwd, Mode, SamLayer};
    use smt_core::config::Aggregation;
    use smt_core::params::{ParamBuilder, ParamStore};

    let mut store: ParamStore<f64> = ParamStore::new();
    let mut seed_rng = Rng::from_seed(101);
    let mut pb = ParamBuilder::new(&mut store, &mut seed_rng);
    let layer = SamLayer::build(&mut pb, "sam", 8, 4, 2, Aggregation::Saa).unwrap();

    let mut rng = Rng::from_seed(102);
    let x: Tensor<f64> = rand_tensor(&mut rng, &[2, 4, 4, 8], -1.0, 1.0);
    let mut g = Graph::new();
    let mut fc = Fwd::new(
        &mut g,
        &store,
        Mode::Eval,
        None,
        CaptureSpec {
            modulation: true,
            attention: false,
        },
    );
    let xn = fc.g.constant(x);
    layer.forward(&mut fc, xn).unwrap();
    let captures = fc.captures.clone();

    let find = |kind: CaptureKind| {
        captures
            .iter()
            .find(|c| c.kind == kind)
            .unwrap_or_else(|| panic!("missing capture {kind:?}"))
            .node
    };
    let modulator = g.value(find(CaptureKind::Modulator)).clone();
    let value = g.value(find(CaptureKind::Value)).clone();
    let gated = g.value(find(CaptureKind::Modulated)).clone();
    assert_eq!(modulator.shape(), value.shape());
    for i in 0..gated.numel() {
        // Bit-exact: the gate is literally the product of the two tensors.
        assert_eq!(gated.data()[i], modulator.data()[i] * value.data()[i]);
    }
}
