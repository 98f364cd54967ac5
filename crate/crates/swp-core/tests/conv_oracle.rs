//! Forward kernels against the brute-force loop-nest oracle, the
//! skeleton-merge identity, and the scale-invariance of the masked product.

mod common;

use common::{max_abs_diff, oracle_conv, random_layer, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swp_core::fsconv::{fs_conv_forward, merge_skeleton};
use swp_core::prune::extract_stripes;
use swp_core::stripe::stripe_conv_forward;

#[test]
fn dense_forward_matches_oracle_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..60 {
        let n = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=4);
        let k = *[1usize, 3].iter().nth(rng.gen_range(0..2)).unwrap();
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let layer = random_layer(&mut rng, n, c, k, stride);
        let x = random_tensor(&mut rng, 2, c, h, w);
        let got = fs_conv_forward(&layer, &x).unwrap();
        let want = oracle_conv(&layer, &x);
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn stripe_forward_matches_oracle_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..60 {
        let n = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=4);
        let k = *[1usize, 3].iter().nth(rng.gen_range(0..2)).unwrap();
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let mut layer = random_layer(&mut rng, n, c, k, stride);
        // freeze a random subset; frozen entries must read as exact zeros
        for idx in 0..layer.skeleton.values.len() {
            if rng.gen::<f64>() < 0.3 {
                layer.skeleton.values[idx] = 0.0;
                layer.skeleton.frozen[idx] = true;
            }
        }
        let x = random_tensor(&mut rng, 2, c, h, w);
        let stripes = extract_stripes(&layer);
        let got = stripe_conv_forward(&stripes, &x).unwrap();
        let want = oracle_conv(&layer, &x);
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn merge_preserves_forward_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..50 {
        let n = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let layer = random_layer(&mut rng, n, c, 3, stride);
        let merged = merge_skeleton(&layer);
        assert!(merged.skeleton.values.iter().all(|&v| v == 1.0));
        let x = random_tensor(&mut rng, 1, c, 6, 6);
        let a = fs_conv_forward(&layer, &x).unwrap();
        let b = fs_conv_forward(&merged, &x).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }
}

#[test]
fn joint_rescaling_of_weight_and_skeleton_is_invariant() {
    // (W/s) ⊙ (I·s) computes the same function as W ⊙ I
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..20 {
        let layer = random_layer(&mut rng, 3, 2, 3, 1);
        let scale = rng.gen_range(0.2..5.0);
        let mut scaled = swp_core::fsconv::FsConvLayer::new(
            layer.weight.clone(),
            layer.skeleton.clone(),
            layer.stride,
        );
        for v in scaled.weight.data_mut() {
            *v /= scale;
        }
        for v in scaled.skeleton.values.iter_mut() {
            *v *= scale;
        }
        let x = random_tensor(&mut rng, 1, 2, 5, 5);
        let a = fs_conv_forward(&layer, &x).unwrap();
        let b = fs_conv_forward(&scaled, &x).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-10);
    }
}
