//! Backbone, fusion, nested residual block and classifier head.

use colfig_core::blocks::{
    backbone_forward, bottleneck_project, classifier_head, fuse_branches, global_average,
    nested_residual_forward, BackboneParams, ConvParams, FeatureLayout, LinearParams,
    NestedResidualParams, SeparableBlock, BONAFIDE,
};
use colfig_core::tensor::{batch_norm, conv2d, elementwise_add, relu, BatchNormParams};
use colfig_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
}

fn conv(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> ConvParams {
    ConvParams {
        weight: uniform(rng, &shape),
        bias: uniform(rng, &[shape[0]]),
    }
}

fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BatchNormParams {
    BatchNormParams {
        gamma: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        running_mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
        running_var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        epsilon: 1e-5,
    }
}

fn residual_params(rng: &mut ChaCha8Rng, c: usize, pool: usize) -> NestedResidualParams {
    NestedResidualParams {
        conv1: conv(rng, [c, c, 3, 3]),
        bn1: random_bn(rng, c),
        conv2: conv(rng, [c, c, 3, 3]),
        bn2: random_bn(rng, c),
        pool,
    }
}

#[test]
fn empty_backbone_is_identity() {
    let x = Tensor::from_fn(&[3, 4, 4], |i| i as f32).unwrap();
    assert_eq!(backbone_forward(&x, &BackboneParams::default()).unwrap(), x);
}

#[test]
fn zero_block_gives_zero_map_of_strided_shape() {
    let block = SeparableBlock {
        depthwise: ConvParams {
            weight: Tensor::zeros(&[3, 1, 3, 3]).unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
        },
        bn1: BatchNormParams::identity(3),
        pointwise: ConvParams {
            weight: Tensor::zeros(&[5, 3, 1, 1]).unwrap(),
            bias: Tensor::zeros(&[5]).unwrap(),
        },
        bn2: BatchNormParams::identity(5),
        stride: 2,
    };
    let x = Tensor::full(&[3, 4, 4], 0.3).unwrap();
    let y = backbone_forward(
        &x,
        &BackboneParams {
            blocks: vec![block],
        },
    )
    .unwrap();
    assert_eq!(y.shape(), &[5, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn seeded_block_matches_kernel_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let block = SeparableBlock {
        depthwise: conv(&mut rng, [3, 1, 3, 3]),
        bn1: random_bn(&mut rng, 3),
        pointwise: conv(&mut rng, [6, 3, 1, 1]),
        bn2: random_bn(&mut rng, 6),
        stride: 2,
    };
    let x = uniform(&mut rng, &[3, 4, 4]);
    let got = backbone_forward(
        &x,
        &BackboneParams {
            blocks: vec![block.clone()],
        },
    )
    .unwrap();

    // stride-2 output pixel (oy, ox) is the 3x3 window centred on (2oy, 2ox)
    let full = conv2d(
        &x,
        &block.depthwise.weight,
        Some(block.depthwise.bias.data()),
        1,
        1,
        3,
    )
    .unwrap();
    let strided = Tensor::from_fn(&[3, 2, 2], |i| {
        let (c, oy, ox) = (i / 4, (i / 2) % 2, i % 2);
        full.data()[(c * 4 + 2 * oy) * 4 + 2 * ox]
    })
    .unwrap();
    let h = relu(&batch_norm(&strided, &block.bn1).unwrap());
    let h = conv2d(
        &h,
        &block.pointwise.weight,
        Some(block.pointwise.bias.data()),
        1,
        0,
        1,
    )
    .unwrap();
    let want = relu(&batch_norm(&h, &block.bn2).unwrap());
    assert_eq!(got, want);
}

#[test]
fn backbone_checks_chaining_and_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let block = |rng: &mut ChaCha8Rng, cin, cout| SeparableBlock {
        depthwise: conv(rng, [cin, 1, 3, 3]),
        bn1: BatchNormParams::identity(cin),
        pointwise: conv(rng, [cout, cin, 1, 1]),
        bn2: BatchNormParams::identity(cout),
        stride: 2,
    };
    let bad = BackboneParams {
        blocks: vec![block(&mut rng, 3, 4), block(&mut rng, 5, 6)],
    };
    assert!(matches!(
        backbone_forward(&Tensor::zeros(&[3, 8, 8]).unwrap(), &bad),
        Err(Error::Shape(_))
    ));
    let good = BackboneParams {
        blocks: vec![block(&mut rng, 3, 4), block(&mut rng, 4, 6)],
    };
    assert!(backbone_forward(&Tensor::zeros(&[3, 6, 6]).unwrap(), &good).is_err());
    assert_eq!(
        backbone_forward(&Tensor::zeros(&[3, 8, 8]).unwrap(), &good)
            .unwrap()
            .shape(),
        &[6, 2, 2]
    );
}

#[test]
fn bottleneck_is_pointwise_then_token_major() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let f = uniform(&mut rng, &[4, 2, 3]);
    let p = conv(&mut rng, [5, 4, 1, 1]);
    let t = bottleneck_project(&f, &p).unwrap();
    assert_eq!(t.shape(), &[2, 3, 5]);
    for y in 0..2 {
        for x in 0..3 {
            for o in 0..5 {
                let mut acc = 0.0f64;
                for c in 0..4 {
                    acc += p.weight.data()[o * 4 + c] as f64 * f.data()[(c * 2 + y) * 3 + x] as f64;
                }
                acc += p.bias.data()[o] as f64;
                assert!((t.data()[(y * 3 + x) * 5 + o] as f64 - acc).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn nested_residual_trace_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..100 {
        let c = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let (h, w) = (k * rng.random_range(1..=3), k * rng.random_range(1..=3));
        let x = uniform(&mut rng, &[c, h, w]);
        let p = residual_params(&mut rng, c, k);
        let (y, t) = nested_residual_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(t.x_res, elementwise_add(&t.x1, &t.x_up).unwrap());
        assert_eq!(t.x_up.shape(), t.x1.shape());
        assert_eq!(t.x_down.shape(), &[c, h / k, w / k]);
        assert_eq!(t.y, y);
    }
}

#[test]
fn pool_one_doubles_x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let x = uniform(&mut rng, &[3, 4, 4]);
    let (_, t) = nested_residual_forward(&x, &residual_params(&mut rng, 3, 1)).unwrap();
    assert_eq!(t.x_res, t.x1.map(|v| 2.0 * v));
}

#[test]
fn residual_rejects_bad_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let x = uniform(&mut rng, &[2, 5, 5]);
    assert!(nested_residual_forward(&x, &residual_params(&mut rng, 2, 2)).is_err());
}

#[test]
fn fusion_rejects_mismatch_and_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mix = conv(&mut rng, [2, 2, 1, 1]);
    assert!(matches!(fuse_branches(&[], &mix), Err(Error::Fusion(_))));
    let a = uniform(&mut rng, &[2, 2, 2]);
    let b = uniform(&mut rng, &[2, 1, 2]);
    assert!(matches!(
        fuse_branches(&[a, b], &mix),
        Err(Error::Fusion(_))
    ));
}

#[test]
fn head_zero_weights_give_even_odds() {
    let f = Tensor::from_fn(&[3, 2, 2], |i| i as f32).unwrap();
    let fc = LinearParams {
        weight: Tensor::zeros(&[2, 3]).unwrap(),
        bias: Tensor::zeros(&[2]).unwrap(),
    };
    let p = classifier_head(&f, FeatureLayout::Chw, &fc).unwrap();
    assert_eq!(p.data(), &[0.5, 0.5]);
    assert_eq!(BONAFIDE, 0);
}

proptest! {
    #[test]
    fn fusion_is_permutation_invariant(n in 1usize..5, seed in any::<u64>(), rot in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Tensor> = (0..n).map(|_| uniform(&mut rng, &[2, 3, 4])).collect();
        let mix = conv(&mut rng, [4, 4, 1, 1]);
        let mut perm = maps.clone();
        perm.rotate_left(rot % n);
        perm.swap(0, n - 1);
        prop_assert_eq!(fuse_branches(&maps, &mix).unwrap(), fuse_branches(&perm, &mix).unwrap());
    }

    #[test]
    fn global_average_layouts_agree(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chw = uniform(&mut rng, &[c, h, w]);
        let hwc = chw.chw_to_hwc().unwrap();
        prop_assert_eq!(
            global_average(&chw, FeatureLayout::Chw).unwrap(),
            global_average(&hwc, FeatureLayout::Hwc).unwrap()
        );
    }

    #[test]
    fn head_outputs_probabilities(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = uniform(&mut rng, &[4, 3, 3]);
        let fc = LinearParams { weight: uniform(&mut rng, &[2, 4]), bias: uniform(&mut rng, &[2]) };
        let p = classifier_head(&f, FeatureLayout::Chw, &fc).unwrap();
        prop_assert!((p.data()[0] + p.data()[1] - 1.0).abs() <= 1e-6);
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
