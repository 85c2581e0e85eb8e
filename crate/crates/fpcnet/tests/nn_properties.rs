//! Property tests for the layer primitives: every forward op against a
//! naive nested-loop reference, analytic gradients against central finite
//! differences, and the exact permutation-commutation of 1×1 convolutions.

use fpcnet::models::{
    backward, forward, forward_trace, init_params, InitScheme, NetworkSpec, Node, NodeInput,
};
use fpcnet::nn::{
    avg_pool_forward, brelu_forward, concat_channels, conv2d_forward, max_pool_forward,
    maxout_forward, pointwise_conv_forward, relu_forward, KernelWeights, LayerSpec,
};
use fpcnet::rng;
use fpcnet::tensor::Tensor;
use fpcnet::trainer::mse_loss;
use proptest::prelude::*;
use rand::Rng;

type T = Tensor<f64>;

fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> T {
    let mut r = rng::stream(seed, 0);
    T::new(c, h, w, (0..c * h * w).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn random_kernel(o: usize, i: usize, kh: usize, kw: usize, seed: u64) -> KernelWeights<f64> {
    let mut r = rng::stream(seed, 1);
    KernelWeights::new(
        o,
        i,
        kh,
        kw,
        (0..o * i * kh * kw).map(|_| r.gen::<f64>() - 0.5).collect(),
        (0..o).map(|_| r.gen::<f64>() - 0.5).collect(),
    )
    .unwrap()
}

/// Reference convolution: materialize the zero-padded input, then six
/// nested loops.
fn naive_conv2d(x: &T, w: &KernelWeights<f64>, pad: usize, stride: usize) -> T {
    let (c, h, wd) = x.shape();
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = T::zeros(c, ph, pw);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..wd {
                *padded.at_mut(ch, r + pad, col + pad) = x.at(ch, r, col);
            }
        }
    }
    let oh = (ph - w.kh) / stride + 1;
    let ow = (pw - w.kw) / stride + 1;
    let mut out = T::zeros(w.out_channels, oh, ow);
    for o in 0..w.out_channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = w.bias[o];
                for ch in 0..c {
                    for m in 0..w.kh {
                        for n in 0..w.kw {
                            acc += padded.at(ch, i * stride + m, j * stride + n)
                                * w.weight(o, ch, m, n);
                        }
                    }
                }
                *out.at_mut(o, i, j) = acc;
            }
        }
    }
    out
}

fn assert_close(a: &T, b: &T, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv2d_matches_naive_reference(
        seed in 0u64..1_000_000,
        c in 1usize..4,
        o in 1usize..5,
        k in 1usize..4,
        pad in 0usize..3,
        stride in 1usize..3,
        h in 4usize..9,
        w in 4usize..9,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = random_tensor(c, h, w, seed);
        let kernel = random_kernel(o, c, k, k, seed + 1);
        let got = conv2d_forward(&x, &kernel, pad, stride).unwrap();
        let want = naive_conv2d(&x, &kernel, pad, stride);
        assert_close(&got, &want, 1e-10);
    }

    #[test]
    fn pointwise_matches_general_conv_with_k1(
        seed in 0u64..1_000_000,
        c in 1usize..5,
        o in 1usize..6,
        h in 1usize..9,
        w in 1usize..9,
    ) {
        let x = random_tensor(c, h, w, seed);
        let kernel = random_kernel(o, c, 1, 1, seed + 2);
        let got = pointwise_conv_forward(&x, &kernel).unwrap();
        let want = conv2d_forward(&x, &kernel, 0, 1).unwrap();
        assert_close(&got, &want, 1e-10);
    }

    #[test]
    fn max_pool_matches_naive_scan(
        seed in 0u64..1_000_000,
        c in 1usize..4,
        k in 1usize..4,
        pad in 0usize..2,
        stride in 1usize..4,
        h in 4usize..10,
        w in 4usize..10,
    ) {
        prop_assume!(pad < k);
        let x = random_tensor(c, h, w, seed);
        let (got, argmax) = max_pool_forward(&x, (k, k), pad, stride).unwrap();
        let (oh, ow) = (got.height(), got.width());
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for m in 0..k {
                        for n in 0..k {
                            let r = (i * stride + m) as isize - pad as isize;
                            let s = (j * stride + n) as isize - pad as isize;
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                best = best.max(x.at(ch, r as usize, s as usize));
                            }
                        }
                    }
                    assert_eq!(got.at(ch, i, j), best);
                    // The argmax really points at a cell holding the max.
                    let idx = argmax[(ch * oh + i) * ow + j];
                    assert_eq!(x.data()[idx], best);
                }
            }
        }
    }

    #[test]
    fn avg_pool_matches_naive_scan(
        seed in 0u64..1_000_000,
        c in 1usize..4,
        k in 1usize..4,
        pad in 0usize..2,
        stride in 1usize..4,
        h in 4usize..10,
        w in 4usize..10,
    ) {
        prop_assume!(pad < k);
        let x = random_tensor(c, h, w, seed);
        let got = avg_pool_forward(&x, (k, k), pad, stride).unwrap();
        for ch in 0..c {
            for i in 0..got.height() {
                for j in 0..got.width() {
                    let mut acc = 0.0;
                    let mut count = 0;
                    for m in 0..k {
                        for n in 0..k {
                            let r = (i * stride + m) as isize - pad as isize;
                            let s = (j * stride + n) as isize - pad as isize;
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                acc += x.at(ch, r as usize, s as usize);
                                count += 1;
                            }
                        }
                    }
                    assert!((got.at(ch, i, j) - acc / count as f64).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn maxout_matches_naive_scan(
        seed in 0u64..1_000_000,
        groups in 1usize..5,
        group in 1usize..5,
        h in 1usize..7,
        w in 1usize..7,
    ) {
        let c = groups * group;
        let x = random_tensor(c, h, w, seed);
        let (got, _) = maxout_forward(&x, group).unwrap();
        for g in 0..groups {
            for r in 0..h {
                for col in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    for k in 0..group {
                        best = best.max(x.at(g * group + k, r, col));
                    }
                    assert_eq!(got.at(g, r, col), best);
                }
            }
        }
    }

    #[test]
    fn activations_and_concat(seed in 0u64..1_000_000, h in 1usize..8, w in 1usize..8) {
        let x = random_tensor(2, h, w, seed);
        let relu = relu_forward(&x);
        let brelu = brelu_forward(&x);
        for (&v, (&r, &b)) in x.data().iter().zip(relu.data().iter().zip(brelu.data())) {
            assert_eq!(r, v.max(0.0));
            assert_eq!(b, v.clamp(0.0, 1.0));
            // relu(x) · relu(−x) == 0 elementwise.
            assert_eq!(v.max(0.0) * (-v).max(0.0), 0.0);
        }
        let y = random_tensor(3, h, w, seed + 1);
        let cat = concat_channels(&[&x, &y]).unwrap();
        assert_eq!(cat.shape(), (5, h, w));
        assert_eq!(&cat.data()[..x.len()], x.data());
        assert_eq!(&cat.data()[x.len()..], y.data());
    }

    #[test]
    fn pointwise_conv_commutes_with_pixel_permutation(seed in 0u64..1_000_000) {
        // conv(P(x)) == P(conv(x)) bitwise, for whole-image permutations.
        let x = random_tensor(3, 6, 6, seed);
        let kernel = random_kernel(4, 3, 1, 1, seed + 3);
        let conv_then_permute = {
            let y = pointwise_conv_forward(&x, &kernel).unwrap();
            fpcnet::ensemble::shuffle_image(&y, seed).unwrap().pixels
        };
        let permute_then_conv = {
            let p = fpcnet::ensemble::shuffle_image(&x, seed).unwrap().pixels;
            pointwise_conv_forward(&p, &kernel).unwrap()
        };
        assert_eq!(conv_then_permute.data(), permute_then_conv.data());
    }
}

/// Spatial shape rule: floor((n + 2·pad − k)/stride) + 1, checked for every
/// conv/pool row of the three reference architectures.
#[test]
fn pooling_and_conv_shapes_follow_the_floor_rule() {
    let rows: &[(usize, usize, usize, usize, usize)] = &[
        // (input side, kernel, pad, stride, expected output side)
        (32, 8, 0, 8, 4),   // 8×8/s8 pools
        (32, 10, 1, 8, 4),  // 10×10/s8/p1 pool
        (32, 3, 1, 1, 32),  // 3×3/p1 conv
        (4, 4, 0, 4, 1),    // 4×4/s4 head pool and conv
        (16, 2, 0, 2, 8),   // 2×2/s2 pool
        (8, 8, 0, 8, 1),    // 8×8/s8 pool
        (32, 1, 0, 1, 32),  // pointwise
    ];
    for &(n, k, pad, stride, expect) in rows {
        let spec = LayerSpec::max_pool(1, k, pad, stride);
        let (_, oh, ow) = spec.output_shape((1, n, n)).unwrap();
        assert_eq!((oh, ow), (expect, expect), "n={n} k={k} pad={pad} s={stride}");
        assert_eq!(oh, (n + 2 * pad - k) / stride + 1);
    }
}

/// Central finite differences over a small composite network that uses
/// every layer kind at least once.
#[test]
fn composite_network_gradients_match_finite_differences() {
    let mut nodes = Vec::new();
    let mut push = |n: Node| -> usize {
        nodes.push(n);
        nodes.len() - 1
    };
    let conv1 = push(Node {
        id: "conv1".into(),
        layer: LayerSpec::pointwise(2, 8),
        inputs: vec![NodeInput::Source],
    });
    let maxout = push(Node {
        id: "maxout".into(),
        layer: LayerSpec::maxout(8, 2),
        inputs: vec![NodeInput::Node(conv1)],
    });
    let relu = push(Node {
        id: "relu".into(),
        layer: LayerSpec::relu(4),
        inputs: vec![NodeInput::Node(maxout)],
    });
    let conv2 = push(Node {
        id: "conv2".into(),
        layer: LayerSpec::conv2d(4, 6, (3, 3), 1, 1),
        inputs: vec![NodeInput::Node(relu)],
    });
    let pool_a = push(Node {
        id: "maxpool".into(),
        layer: LayerSpec::max_pool(6, 2, 0, 2),
        inputs: vec![NodeInput::Node(conv2)],
    });
    let pool_b = push(Node {
        id: "avgpool".into(),
        layer: LayerSpec::avg_pool(6, 2, 0, 2),
        inputs: vec![NodeInput::Node(conv2)],
    });
    let cat = push(Node {
        id: "concat".into(),
        layer: LayerSpec::concat(12),
        inputs: vec![NodeInput::Node(pool_a), NodeInput::Node(pool_b)],
    });
    let conv3 = push(Node {
        id: "conv3".into(),
        layer: LayerSpec::pointwise(12, 1),
        inputs: vec![NodeInput::Node(cat)],
    });
    let head_pool = push(Node {
        id: "headpool".into(),
        layer: LayerSpec::max_pool(1, 3, 0, 3),
        inputs: vec![NodeInput::Node(conv3)],
    });
    let brelu = push(Node {
        id: "brelu".into(),
        layer: LayerSpec::brelu(1),
        inputs: vec![NodeInput::Node(head_pool)],
    });
    let spec = NetworkSpec {
        name: "composite".into(),
        input_shape: (2, 6, 6),
        nodes,
        outputs: vec![brelu],
    };
    spec.validate().unwrap();

    for seed in 0..5u64 {
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, seed).unwrap();
        let input = random_tensor(2, 6, 6, 100 + seed).map(|v| v.abs());
        let target = vec![0.4];

        let trace = forward_trace(&spec, &params, &input).unwrap();
        let (_, dpred) = mse_loss(&trace.predictions, &target).unwrap();
        let analytic = backward(&spec, &params, &trace, &dpred).unwrap();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (node, layer) in params.layers.iter().enumerate() {
            let Some(k) = layer else { continue };
            for idx in 0..k.weights.len() + k.bias.len() {
                let loss_at = |delta: f64| {
                    let mut p = params.clone();
                    let kk = p.layers[node].as_mut().unwrap();
                    if idx < kk.weights.len() {
                        kk.weights[idx] += delta;
                    } else {
                        kk.bias[idx - kk.weights.len()] += delta;
                    }
                    let pred = forward(&spec, &p, &input).unwrap();
                    mse_loss(&pred, &target).unwrap().0
                };
                let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let a = if idx < k.weights.len() {
                    analytic[node].as_ref().unwrap().weights[idx]
                } else {
                    analytic[node].as_ref().unwrap().bias[idx - k.weights.len()]
                };
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
    }
}

/// Forward and backward keep values finite on finite input.
#[test]
fn finiteness_through_the_reference_networks() {
    for (spec, seed) in [
        (fpcnet::models::build_fpcnet_dh(), 3u64),
        (fpcnet::models::build_fpcnet_cc_scaled(8).unwrap(), 4u64),
    ] {
        let params = init_params::<f64>(&spec, InitScheme::UniformFanIn, seed).unwrap();
        let (c, h, w) = spec.input_shape;
        let input = random_tensor(c, h, w, seed).map(|v| v.abs());
        let trace = forward_trace(&spec, &params, &input).unwrap();
        assert!(trace.predictions.iter().all(|v| v.is_finite()));
        assert!(trace.node_outputs.iter().all(Tensor::all_finite));
        let target = vec![0.5; trace.predictions.len()];
        let (_, dpred) = mse_loss(&trace.predictions, &target).unwrap();
        let grads = backward(&spec, &params, &trace, &dpred).unwrap();
        assert!(grads.iter().flatten().all(KernelWeights::all_finite));
    }
}

/// The whole stack is generic over the scalar; the f32 instantiation agrees
/// with f64 to single precision.
#[test]
fn f32_path_tracks_f64() {
    let spec = fpcnet::models::build_fpcnet_dh();
    let p64 = init_params::<f64>(&spec, InitScheme::UniformFanIn, 12).unwrap();
    let p32 = fpcnet::models::ParamStore::<f32> {
        layers: p64
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|k| {
                    KernelWeights::new(
                        k.out_channels,
                        k.in_channels,
                        k.kh,
                        k.kw,
                        k.weights.iter().map(|&v| v as f32).collect(),
                        k.bias.iter().map(|&v| v as f32).collect(),
                    )
                    .unwrap()
                })
            })
            .collect(),
        init: p64.init.clone(),
    };
    let x64 = random_tensor(3, 16, 16, 13).map(f64::abs);
    let x32 = x64.cast::<f32>();
    let y64 = forward(&spec, &p64, &x64).unwrap();
    let y32 = fpcnet::models::forward(&spec, &p32, &x32).unwrap();
    assert_eq!(y64.len(), y32.len());
    for (a, b) in y64.iter().zip(&y32) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}
