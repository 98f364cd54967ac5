//! Turning a trained skeleton network into a stripe-sparse inference model:
//! stripe extraction, batch-norm folding into per-channel affines, and
//! optional compaction of fully-pruned filters.

use crate::aux::BN_EPS;
use crate::error::{Error, Result};
use crate::net::{Network, Node};
use crate::prune::extract_stripes;
use crate::stripe::{run_model, InfNode, StripeModel};
use crate::tensor::Tensor4;

fn convert_nodes(nodes: &[Node]) -> Vec<InfNode> {
    nodes
        .iter()
        .map(|node| match node {
            Node::Conv(cv) => InfNode::StripeConv(extract_stripes(&cv.layer)),
            Node::Bn(bn) => {
                let c = bn.bn.channels();
                let mut scale = vec![0.0; c];
                let mut bias = vec![0.0; c];
                for ch in 0..c {
                    let s = bn.bn.gamma[ch] / (bn.bn.running_var[ch] + BN_EPS).sqrt();
                    scale[ch] = s;
                    bias[ch] = bn.bn.beta[ch] - s * bn.bn.running_mean[ch];
                }
                InfNode::Affine { scale, bias }
            }
            Node::Relu(_) => InfNode::Relu,
            Node::MaxPool(_) => InfNode::MaxPool2,
            Node::Residual(body) => InfNode::Residual(convert_nodes(body)),
        })
        .collect()
}

/// True if a residual block consumes this conv's output before the next conv
/// rewires channels; such convs must keep their zero channels.
fn feeds_residual(rest: &[InfNode]) -> bool {
    for node in rest {
        match node {
            InfNode::Residual(_) => return true,
            InfNode::StripeConv(_) | InfNode::Linear { .. } => return false,
            _ => {}
        }
    }
    false
}

fn last_conv_index(nodes: &[InfNode]) -> Option<usize> {
    nodes
        .iter()
        .rposition(|n| matches!(n, InfNode::StripeConv(_)))
}

/// Remove fully-pruned filters and drop the matching input channels from
/// downstream layers. `mask` lists the live channels of the incoming
/// activation; `keep_output` pins the channel count of the segment's last
/// conv (needed inside residual bodies, whose output is added to the input).
fn compact_seq(nodes: &mut [InfNode], mut mask: Vec<usize>, keep_output: bool) -> Vec<usize> {
    let pinned_last = if keep_output { last_conv_index(nodes) } else { None };
    for i in 0..nodes.len() {
        let (head, rest) = nodes.split_at_mut(i + 1);
        let node = &mut head[i];
        match node {
            InfNode::StripeConv(layer) => {
                // compact input channels
                if mask.len() != layer.c || mask.iter().enumerate().any(|(a, &b)| a != b) {
                    for s in layer.stripes.iter_mut() {
                        s.weights = mask.iter().map(|&ch| s.weights[ch]).collect();
                    }
                    layer.c = mask.len();
                }
                let must_keep = pinned_last == Some(i) || feeds_residual(rest);
                if must_keep || layer.surviving_filters.len() == layer.n {
                    mask = (0..layer.n).collect();
                } else {
                    let survivors = layer.surviving_filters.clone();
                    let remap: std::collections::HashMap<usize, usize> = survivors
                        .iter()
                        .enumerate()
                        .map(|(new, &old)| (old, new))
                        .collect();
                    for s in layer.stripes.iter_mut() {
                        s.filter = remap[&s.filter];
                    }
                    layer.n = survivors.len();
                    layer.surviving_filters = (0..layer.n).collect();
                    mask = survivors;
                }
            }
            InfNode::Affine { scale, bias } => {
                if mask.len() != scale.len() || mask.iter().enumerate().any(|(a, &b)| a != b) {
                    *scale = mask.iter().map(|&ch| scale[ch]).collect();
                    *bias = mask.iter().map(|&ch| bias[ch]).collect();
                }
            }
            InfNode::Linear { weight, bias } => {
                if mask.len() != weight.cols() || mask.iter().enumerate().any(|(a, &b)| a != b) {
                    let rows = weight.rows();
                    let mut data = Vec::with_capacity(rows * mask.len());
                    for r in 0..rows {
                        let row = weight.row(r);
                        data.extend(mask.iter().map(|&ch| row[ch]));
                    }
                    *weight = crate::tensor::Tensor2::from_vec(rows, mask.len(), data);
                    let _ = bias;
                }
            }
            InfNode::Residual(body) => {
                debug_assert!(mask.iter().enumerate().all(|(a, &b)| a == b));
                let full: Vec<usize> = mask.clone();
                let out = compact_seq(body, full, true);
                mask = out;
            }
            InfNode::Relu | InfNode::MaxPool2 | InfNode::GlobalAvgPool => {}
        }
    }
    mask
}

/// Export a trained network as a stripe model. With `compact` set,
/// fully-pruned filters are removed (the degeneration to filter pruning);
/// without it, zero channels are kept so outputs match the dense path
/// exactly.
pub fn export_model(net: &Network, compact: bool) -> StripeModel {
    let mut nodes = convert_nodes(&net.features);
    nodes.push(InfNode::GlobalAvgPool);
    nodes.push(InfNode::Linear {
        weight: net.head.lin.weight.clone(),
        bias: net.head.lin.bias.clone(),
    });
    if compact {
        let full: Vec<usize> = (0..net.in_shape.0).collect();
        compact_seq(&mut nodes, full, false);
    }
    StripeModel {
        nodes,
        in_c: net.in_shape.0,
        in_h: net.in_shape.1,
        in_w: net.in_shape.2,
        classes: net.classes,
    }
}

/// Check that batch-norm folding preserved the network function: the
/// uncompacted export must match the dense eval-mode forward within `tol`
/// on the given sample batch.
pub fn verify_export(net: &mut Network, sample: &Tensor4, tol: f64) -> Result<f64> {
    let model = export_model(net, false);
    let dense = net.forward(sample, false)?;
    let sparse = run_model(&model, sample)?;
    let mut max_diff = 0.0f64;
    for (&a, &b) in dense.data().iter().zip(sparse.data()) {
        max_diff = max_diff.max((a - b).abs());
    }
    if max_diff > tol {
        return Err(Error::Config(format!(
            "export verification failed: max logit diff {max_diff:e} exceeds {tol:e}"
        )));
    }
    Ok(max_diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{tiny_resnet, tiny_vgg};
    use crate::sparsity::{apply_threshold, SparsityConfig, SparsityMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn export_matches_dense_eval_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = tiny_vgg((1, 12, 12), 10, &mut rng);
        let x = random_batch(&mut rng, 2, 1, 12, 12);
        let diff = verify_export(&mut net, &x, 1e-8).unwrap();
        assert!(diff < 1e-10, "diff {diff}");
    }

    #[test]
    fn export_matches_for_resnet_with_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = tiny_resnet((1, 12, 12), 10, &mut rng);
        // freeze a random assortment of stripes
        net.for_each_conv_mut(&mut |cv| {
            let (nf, k) = (cv.layer.skeleton.n, cv.layer.skeleton.k);
            for n in 0..nf {
                for i in 0..k {
                    for j in 0..k {
                        if (n * 7 + i * 3 + j) % 3 == 0 {
                            cv.layer.skeleton.freeze(n, i, j);
                        }
                    }
                }
            }
        });
        let x = random_batch(&mut rng, 2, 1, 12, 12);
        let diff = verify_export(&mut net, &x, 1e-8).unwrap();
        assert!(diff < 1e-10, "diff {diff}");
    }

    #[test]
    fn compaction_removes_dead_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = tiny_vgg((1, 12, 12), 10, &mut rng);
        // fully freeze half the filters of conv2
        let mut idx = 0;
        net.for_each_conv_mut(&mut |cv| {
            if idx == 1 {
                let (nf, k) = (cv.layer.skeleton.n, cv.layer.skeleton.k);
                for n in 0..nf / 2 {
                    for i in 0..k {
                        for j in 0..k {
                            cv.layer.skeleton.freeze(n, i, j);
                        }
                    }
                }
            }
            idx += 1;
        });
        let compacted = export_model(&net, true);
        let keep = export_model(&net, false);
        let conv2_c = |m: &StripeModel| match &m.nodes[3] {
            InfNode::StripeConv(l) => l.n,
            _ => panic!("expected conv"),
        };
        assert_eq!(conv2_c(&keep), 32);
        assert_eq!(conv2_c(&compacted), 16);
        // downstream conv input channels shrank to match
        match (&compacted.nodes[7], &keep.nodes[7]) {
            (InfNode::StripeConv(c), InfNode::StripeConv(k)) => {
                assert_eq!(c.c, 16);
                assert_eq!(k.c, 32);
            }
            _ => panic!("expected conv"),
        }
    }

    #[test]
    fn pruned_export_still_valid_after_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = tiny_vgg((1, 12, 12), 10, &mut rng);
        net.for_each_conv_mut(&mut |cv| {
            for (i, v) in cv.layer.skeleton.values.iter_mut().enumerate() {
                if i % 4 == 0 {
                    *v = 0.01;
                }
            }
        });
        let cfg = SparsityConfig::new(0.0, 0.05, SparsityMode::Stripe).unwrap();
        let frozen = apply_threshold(&mut net, &cfg);
        assert!(frozen > 0);
        let x = random_batch(&mut rng, 2, 1, 12, 12);
        verify_export(&mut net, &x, 1e-8).unwrap();
    }
}
