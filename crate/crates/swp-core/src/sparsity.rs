//! The sparsity objective and its training-time mechanics: the L1 penalty on
//! the skeleton, its subgradient, the threshold-freeze rule, and the two
//! comparison regularizers (shared group skeleton, group Lasso on weights).

use crate::error::{Error, Result};
use crate::fsconv::FsConvLayer;
use crate::net::Network;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityMode {
    Stripe,
    Group,
    LassoWeights,
}

impl SparsityMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SparsityMode::Stripe => "stripe",
            SparsityMode::Group => "group",
            SparsityMode::LassoWeights => "lasso-weights",
        }
    }
}

impl std::str::FromStr for SparsityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<SparsityMode> {
        match s {
            "stripe" => Ok(SparsityMode::Stripe),
            "group" => Ok(SparsityMode::Group),
            "lasso-weights" | "lasso" => Ok(SparsityMode::LassoWeights),
            other => Err(Error::Config(format!("unknown sparsity mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SparsityConfig {
    /// Penalty weight α.
    pub alpha: f64,
    /// Freeze threshold δ, compared against |I| (or the stripe group norm in
    /// lasso-weights mode).
    pub delta: f64,
    pub mode: SparsityMode,
}

impl SparsityConfig {
    pub fn new(alpha: f64, delta: f64, mode: SparsityMode) -> Result<SparsityConfig> {
        if alpha < 0.0 || delta < 0.0 {
            return Err(Error::Config("alpha and delta must be non-negative".into()));
        }
        Ok(SparsityConfig { alpha, delta, mode })
    }
}

fn require_mode(cfg: &SparsityConfig, ok: &[SparsityMode], expected: &str) -> Result<()> {
    if ok.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(Error::Mode {
            expected: expected.into(),
            actual: cfg.mode.as_str().into(),
        })
    }
}

/// `g(I) = Σ_l Σ_n Σ_i Σ_j |I|` over unfrozen entries (frozen entries are
/// exactly 0 and contribute nothing).
pub fn skeleton_penalty(net: &Network, cfg: &SparsityConfig) -> Result<f64> {
    require_mode(cfg, &[SparsityMode::Stripe, SparsityMode::Group], "stripe or group")?;
    let mut total = 0.0;
    net.for_each_conv(&mut |cv| {
        total += cv.layer.skeleton.values.iter().map(|v| v.abs()).sum::<f64>();
    });
    Ok(total)
}

/// Group-mode penalty: each layer's skeleton is one shared (K, K) matrix, so
/// the sum runs over kernel positions only.
pub fn group_penalty_view(net: &Network, cfg: &SparsityConfig) -> Result<f64> {
    require_mode(cfg, &[SparsityMode::Group], "group")?;
    let mut total = 0.0;
    net.for_each_conv(&mut |cv| {
        let k = cv.layer.skeleton.k;
        for p in 0..k * k {
            total += cv.layer.skeleton.values[p].abs();
        }
    });
    Ok(total)
}

/// Group-Lasso penalty on the weight stripes: Σ ‖W[n,·,i,j]‖₂ over unfrozen
/// stripe groups, with per-group gradient W_g/‖W_g‖₂ (0 when the norm is
/// below 1e-12). Returns the penalty and the unscaled gradient per layer.
pub fn lasso_layer_penalty(layer: &FsConvLayer) -> (f64, Tensor4) {
    let (nf, cin, k, _) = layer.weight.dims();
    let mut grad = Tensor4::zeros(nf, cin, k, k);
    let mut penalty = 0.0;
    for n in 0..nf {
        for ki in 0..k {
            for kj in 0..k {
                if layer.skeleton.is_frozen(n, ki, kj) {
                    continue;
                }
                let mut sq = 0.0;
                for c in 0..cin {
                    let w = layer.weight.at(n, c, ki, kj);
                    sq += w * w;
                }
                let norm = sq.sqrt();
                penalty += norm;
                if norm >= 1e-12 {
                    for c in 0..cin {
                        *grad.at_mut(n, c, ki, kj) = layer.weight.at(n, c, ki, kj) / norm;
                    }
                }
            }
        }
    }
    (penalty, grad)
}

pub fn lasso_weight_penalty(net: &Network, cfg: &SparsityConfig) -> Result<f64> {
    require_mode(cfg, &[SparsityMode::LassoWeights], "lasso-weights")?;
    let mut total = 0.0;
    net.for_each_conv(&mut |cv| total += lasso_layer_penalty(&cv.layer).0);
    Ok(total)
}

/// The regularization term of the training objective under the active mode.
pub fn penalty_value(net: &Network, cfg: &SparsityConfig) -> f64 {
    match cfg.mode {
        SparsityMode::Stripe => skeleton_penalty(net, cfg).unwrap(),
        SparsityMode::Group => group_penalty_view(net, cfg).unwrap(),
        SparsityMode::LassoWeights => lasso_weight_penalty(net, cfg).unwrap(),
    }
}

/// Add `α · ∂penalty` into the accumulated gradients. Stripe mode adds
/// `α·sign(I)` per entry; group mode adds it once per shared position (the
/// optimizer's cross-filter reduction then distributes it); lasso mode adds
/// the group-normalized weight direction to the weight gradient.
pub fn accumulate_penalty_grads(net: &mut Network, cfg: &SparsityConfig) {
    let alpha = cfg.alpha;
    if alpha == 0.0 {
        return;
    }
    match cfg.mode {
        SparsityMode::Stripe => net.for_each_conv_mut(&mut |cv| {
            let sk = &cv.layer.skeleton;
            for (g, (&v, &frozen)) in cv
                .d_skeleton
                .iter_mut()
                .zip(sk.values.iter().zip(&sk.frozen))
            {
                if !frozen {
                    *g += alpha * v.signum_or_zero();
                }
            }
        }),
        SparsityMode::Group => net.for_each_conv_mut(&mut |cv| {
            let k = cv.layer.skeleton.k;
            for p in 0..k * k {
                if !cv.layer.skeleton.frozen[p] {
                    cv.d_skeleton[p] += alpha * cv.layer.skeleton.values[p].signum_or_zero();
                }
            }
        }),
        SparsityMode::LassoWeights => net.for_each_conv_mut(&mut |cv| {
            let (_, grad) = lasso_layer_penalty(&cv.layer);
            for (g, &v) in cv.d_weight.data_mut().iter_mut().zip(grad.data()) {
                *g += alpha * v;
            }
        }),
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Freeze every stripe whose magnitude criterion falls strictly below δ and
/// pin it at exactly 0. Returns the number of skeleton entries that changed
/// state; immediately re-applying with the same δ returns 0.
pub fn apply_threshold(net: &mut Network, cfg: &SparsityConfig) -> usize {
    let delta = cfg.delta;
    let mut newly_frozen = 0;
    match cfg.mode {
        SparsityMode::Stripe => net.for_each_conv_mut(&mut |cv| {
            let sk = &mut cv.layer.skeleton;
            for i in 0..sk.values.len() {
                if !sk.frozen[i] && sk.values[i].abs() < delta {
                    sk.values[i] = 0.0;
                    sk.frozen[i] = true;
                    newly_frozen += 1;
                }
            }
        }),
        SparsityMode::Group => net.for_each_conv_mut(&mut |cv| {
            let (nf, k) = (cv.layer.skeleton.n, cv.layer.skeleton.k);
            for p in 0..k * k {
                if !cv.layer.skeleton.frozen[p] && cv.layer.skeleton.values[p].abs() < delta {
                    for n in 0..nf {
                        let at = n * k * k + p;
                        if !cv.layer.skeleton.frozen[at] {
                            cv.layer.skeleton.values[at] = 0.0;
                            cv.layer.skeleton.frozen[at] = true;
                            newly_frozen += 1;
                        }
                    }
                }
            }
        }),
        SparsityMode::LassoWeights => net.for_each_conv_mut(&mut |cv| {
            let (nf, cin, k, _) = cv.layer.weight.dims();
            for n in 0..nf {
                for ki in 0..k {
                    for kj in 0..k {
                        if cv.layer.skeleton.is_frozen(n, ki, kj) {
                            continue;
                        }
                        let mut sq = 0.0;
                        for c in 0..cin {
                            let w = cv.layer.weight.at(n, c, ki, kj);
                            sq += w * w;
                        }
                        if sq.sqrt() < delta {
                            cv.layer.skeleton.freeze(n, ki, kj);
                            newly_frozen += 1;
                        }
                    }
                }
            }
        }),
    }
    newly_frozen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsconv::FilterSkeleton;
    use crate::net::{tiny_vgg, ConvNode, LinearNode, Network, Node};
    use crate::tensor::{Tensor2, Tensor4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_conv_net(layer: FsConvLayer) -> Network {
        let classes = 2;
        let in_c = layer.in_channels();
        let out_f = layer.out_filters();
        Network::from_parts(
            vec![Node::Conv(ConvNode::new("conv1", layer))],
            LinearNode::new(crate::aux::Linear {
                weight: Tensor2::zeros(classes, out_f),
                bias: vec![0.0; classes],
            }),
            (in_c, 4, 4),
            classes,
        )
    }

    fn stripe_cfg(alpha: f64, delta: f64) -> SparsityConfig {
        SparsityConfig::new(alpha, delta, SparsityMode::Stripe).unwrap()
    }

    #[test]
    fn penalty_counts_entries_for_all_ones() {
        let w = Tensor4::zeros(2, 1, 3, 3);
        let net = one_conv_net(FsConvLayer::new(w, FilterSkeleton::ones(2, 3), 1));
        assert_eq!(skeleton_penalty(&net, &stripe_cfg(1.0, 0.0)).unwrap(), 18.0);
    }

    #[test]
    fn penalty_matches_scalar_loop_on_random_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = tiny_vgg((1, 8, 8), 10, &mut rng);
        let mut expect = 0.0;
        net.for_each_conv_mut(&mut |cv| {
            for (i, v) in cv.layer.skeleton.values.iter_mut().enumerate() {
                *v = ((i as f64 * 0.37).sin()) * 2.0;
                expect += v.abs();
            }
        });
        let got = skeleton_penalty(&net, &stripe_cfg(1.0, 0.0)).unwrap();
        assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn penalty_grad_is_alpha_sign() {
        let w = Tensor4::zeros(1, 1, 3, 3);
        let mut net = one_conv_net(FsConvLayer::new(w, FilterSkeleton::ones(1, 3), 1));
        net.for_each_conv_mut(&mut |cv| {
            cv.layer.skeleton.values[0] = 2.0;
            cv.layer.skeleton.values[1] = -3.0;
            cv.layer.skeleton.values[2] = 0.0;
        });
        accumulate_penalty_grads(&mut net, &stripe_cfg(1e-5, 0.0));
        net.for_each_conv(&mut |cv| {
            assert_eq!(cv.d_skeleton[0], 1e-5);
            assert_eq!(cv.d_skeleton[1], -1e-5);
            assert_eq!(cv.d_skeleton[2], 0.0);
        });
    }

    #[test]
    fn zero_alpha_adds_nothing() {
        let w = Tensor4::zeros(1, 1, 3, 3);
        let mut net = one_conv_net(FsConvLayer::new(w, FilterSkeleton::ones(1, 3), 1));
        accumulate_penalty_grads(&mut net, &stripe_cfg(0.0, 0.0));
        net.for_each_conv(&mut |cv| assert!(cv.d_skeleton.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn threshold_freezes_below_delta_and_is_idempotent() {
        let w = Tensor4::zeros(1, 1, 3, 3);
        let mut net = one_conv_net(FsConvLayer::new(w, FilterSkeleton::ones(1, 3), 1));
        net.for_each_conv_mut(&mut |cv| {
            cv.layer.skeleton.values[0] = 0.04;
            cv.layer.skeleton.values[1] = 0.06;
            cv.layer.skeleton.values[2] = -0.01;
        });
        let cfg = stripe_cfg(0.0, 0.05);
        assert_eq!(apply_threshold(&mut net, &cfg), 2);
        net.for_each_conv(&mut |cv| {
            assert_eq!(cv.layer.skeleton.values[0], 0.0);
            assert!(cv.layer.skeleton.frozen[0]);
            assert_eq!(cv.layer.skeleton.values[1], 0.06);
            assert!(cv.layer.skeleton.frozen[2]);
        });
        assert_eq!(apply_threshold(&mut net, &cfg), 0);
    }

    #[test]
    fn threshold_zero_freezes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = tiny_vgg((1, 8, 8), 10, &mut rng);
        assert_eq!(apply_threshold(&mut net, &stripe_cfg(0.0, 0.0)), 0);
    }

    #[test]
    fn monotone_pruning_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut small = tiny_vgg((1, 8, 8), 10, &mut rng);
        small.for_each_conv_mut(&mut |cv| {
            for (i, v) in cv.layer.skeleton.values.iter_mut().enumerate() {
                *v = ((i * 31 % 97) as f64) / 97.0;
            }
        });
        let mut big = tiny_vgg((1, 8, 8), 10, &mut ChaCha8Rng::seed_from_u64(11));
        big.for_each_conv_mut(&mut |cv| {
            for (i, v) in cv.layer.skeleton.values.iter_mut().enumerate() {
                *v = ((i * 31 % 97) as f64) / 97.0;
            }
        });
        apply_threshold(&mut small, &stripe_cfg(0.0, 0.2));
        apply_threshold(&mut big, &stripe_cfg(0.0, 0.6));
        // frozen set at delta=0.2 must be a subset of the set at delta=0.6
        let mut small_frozen = Vec::new();
        small.for_each_conv(&mut |cv| small_frozen.push(cv.layer.skeleton.frozen.clone()));
        let mut big_frozen = Vec::new();
        big.for_each_conv(&mut |cv| big_frozen.push(cv.layer.skeleton.frozen.clone()));
        for (s, b) in small_frozen.iter().zip(&big_frozen) {
            for (sv, bv) in s.iter().zip(b) {
                assert!(!sv || *bv);
            }
        }
    }

    #[test]
    fn group_penalty_counts_shared_positions_once() {
        let w = Tensor4::zeros(4, 1, 3, 3);
        let mut sk = FilterSkeleton::ones(4, 3);
        sk.shared = true;
        let net = one_conv_net(FsConvLayer::new(w, sk, 1));
        let cfg = SparsityConfig::new(1.0, 0.0, SparsityMode::Group).unwrap();
        assert_eq!(group_penalty_view(&net, &cfg).unwrap(), 9.0);
    }

    #[test]
    fn group_view_in_stripe_mode_is_mode_error() {
        let w = Tensor4::zeros(1, 1, 3, 3);
        let net = one_conv_net(FsConvLayer::new(w, FilterSkeleton::ones(1, 3), 1));
        assert!(matches!(
            group_penalty_view(&net, &stripe_cfg(0.0, 0.0)),
            Err(crate::error::Error::Mode { .. })
        ));
    }

    #[test]
    fn group_threshold_freezes_whole_position() {
        let w = Tensor4::zeros(4, 2, 3, 3);
        let mut sk = FilterSkeleton::ones(4, 3);
        sk.shared = true;
        for n in 0..4 {
            sk.values[n * 9 + 4] = 0.01;
        }
        let mut net = one_conv_net(FsConvLayer::new(w, sk, 1));
        let cfg = SparsityConfig::new(0.0, 0.05, SparsityMode::Group).unwrap();
        assert_eq!(apply_threshold(&mut net, &cfg), 4);
        net.for_each_conv(&mut |cv| {
            for n in 0..4 {
                assert!(cv.layer.skeleton.is_frozen(n, 1, 1));
            }
        });
    }

    #[test]
    fn lasso_penalty_euclidean_example() {
        // single stripe with weights (3, 4): penalty 5, gradient (0.6, 0.8)
        let w = Tensor4::from_vec(1, 2, 1, 1, vec![3.0, 4.0]);
        let layer = FsConvLayer::new(w, FilterSkeleton::ones(1, 1), 1);
        let (p, g) = lasso_layer_penalty(&layer);
        assert!((p - 5.0).abs() < 1e-12);
        assert!((g.at(0, 0, 0, 0) - 0.6).abs() < 1e-12);
        assert!((g.at(0, 1, 0, 0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lasso_zero_group_has_zero_gradient() {
        let w = Tensor4::zeros(1, 3, 1, 1);
        let layer = FsConvLayer::new(w, FilterSkeleton::ones(1, 1), 1);
        let (p, g) = lasso_layer_penalty(&layer);
        assert_eq!(p, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lasso_in_stripe_mode_is_mode_error() {
        let w = Tensor4::zeros(1, 1, 3, 3);
        let net = one_conv_net(FsConvLayer::new(w, FilterSkeleton::ones(1, 3), 1));
        assert!(lasso_weight_penalty(&net, &stripe_cfg(0.0, 0.0)).is_err());
    }
}
