//! Property tests: the stripe execution order is always a pure reordering of
//! the dense convolution, and serialization is lossless for f32-representable
//! payloads.

mod common;

use common::{max_abs_diff, oracle_conv};
use proptest::prelude::*;
use swp_core::format::{deserialize_model, serialize_model};
use swp_core::fsconv::{FilterSkeleton, FsConvLayer};
use swp_core::prune::{extract_stripes, StripeLayer, StripeRecord};
use swp_core::stripe::{stripe_conv_forward, InfNode, StripeModel};
use swp_core::{Tensor2, Tensor4};

fn small_f32_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((-64i32..=64).prop_map(|q| q as f64 / 16.0), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stripe_order_reproduces_dense_conv(
        n in 1usize..=3,
        c in 1usize..=3,
        k_idx in 0usize..=1,
        stride in 1usize..=2,
        h in 3usize..=7,
        w in 3usize..=7,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let k = [1, 3][k_idx];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor4::from_vec(
            n, c, k, k,
            (0..n * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut skeleton = FilterSkeleton::ones(n, k);
        for i in 0..skeleton.values.len() {
            if rng.gen::<f64>() < 0.4 {
                skeleton.values[i] = 0.0;
                skeleton.frozen[i] = true;
            } else {
                skeleton.values[i] = rng.gen_range(-1.0..1.0);
            }
        }
        let layer = FsConvLayer::new(weight, skeleton, stride);
        let x = Tensor4::from_vec(
            1, c, h, w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let sparse = stripe_conv_forward(&extract_stripes(&layer), &x).unwrap();
        let dense = oracle_conv(&layer, &x);
        prop_assert!(max_abs_diff(&sparse, &dense) < 1e-12);
    }

    #[test]
    fn serialization_round_trips_bit_exactly(
        n in 1usize..=4,
        c in 1usize..=4,
        keep in 0usize..=9,
        weights in small_f32_vec(16),
        lin in small_f32_vec(8),
    ) {
        let stripes: Vec<StripeRecord> = (0..keep)
            .map(|s| StripeRecord {
                filter: s % n,
                offset: (s / 3, s % 3),
                weights: (0..c).map(|i| weights[(s * 3 + i) % weights.len()]).collect(),
            })
            .collect();
        let surviving: Vec<usize> = {
            let mut f: Vec<usize> = stripes.iter().map(|s| s.filter).collect();
            f.sort_unstable();
            f.dedup();
            f
        };
        let model = StripeModel {
            nodes: vec![
                InfNode::StripeConv(StripeLayer {
                    stripes,
                    n,
                    c,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    surviving_filters: surviving,
                }),
                InfNode::Affine {
                    scale: vec![lin[0]; n],
                    bias: vec![lin[1]; n],
                },
                InfNode::Relu,
                InfNode::GlobalAvgPool,
                InfNode::Linear {
                    weight: Tensor2::from_vec(2, n, (0..2 * n).map(|i| lin[i % lin.len()]).collect()),
                    bias: vec![lin[2], lin[3]],
                },
            ],
            in_c: c,
            in_h: 5,
            in_w: 5,
            classes: 2,
        };
        let bytes = serialize_model(&model);
        let back = deserialize_model(&bytes).unwrap();
        prop_assert_eq!(back, model);
    }
}
