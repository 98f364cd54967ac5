//! Converting a trained skeleton model into its stripe-sparse form and the
//! accounting that goes with it: parameter counts with index overhead, FLOP
//! counts, per-layer pruning ratios and filter-shape statistics.

use crate::fsconv::FsConvLayer;
use crate::stripe::{InfNode, StripeModel};

/// One kept stripe: filter index, kernel offset, and its length-C weight
/// vector with the skeleton value already merged in.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeRecord {
    pub filter: usize,
    pub offset: (usize, usize),
    pub weights: Vec<f64>,
}

/// A pruned conv layer: kept stripes sorted by (filter, i, j), plus layer
/// geometry and the set of filters that still own at least one stripe.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeLayer {
    pub stripes: Vec<StripeRecord>,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub surviving_filters: Vec<usize>,
}

impl StripeLayer {
    pub fn kept_stripes(&self) -> usize {
        self.stripes.len()
    }
}

/// Emit a stripe record for every unfrozen skeleton entry, with weights
/// `I[n,i,j] · W[n,·,i,j]`. Frozen entries emit nothing.
pub fn extract_stripes(layer: &FsConvLayer) -> StripeLayer {
    let (nf, cin, k, _) = layer.weight.dims();
    let mut stripes = Vec::new();
    let mut surviving = Vec::new();
    for n in 0..nf {
        let mut owns_stripe = false;
        for i in 0..k {
            for j in 0..k {
                if layer.skeleton.is_frozen(n, i, j) {
                    continue;
                }
                let ival = layer.skeleton.value(n, i, j);
                let weights = (0..cin).map(|c| ival * layer.weight.at(n, c, i, j)).collect();
                stripes.push(StripeRecord {
                    filter: n,
                    offset: (i, j),
                    weights,
                });
                owns_stripe = true;
            }
        }
        if owns_stripe {
            surviving.push(n);
        }
    }
    StripeLayer {
        stripes,
        n: nf,
        c: cin,
        k,
        stride: layer.stride,
        pad: layer.pad,
        surviving_filters: surviving,
    }
}

/// Cost accounting for one layer. Index entries count one parameter
/// equivalent per kept stripe (the sparse (n, i, j) list the model file
/// actually stores); the dense-bitmap alternative and a packed byte figure
/// are reported alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub weight_params: u64,
    pub dense_weight_params: u64,
    pub index_entries: u64,
    pub dense_bitmap_bits: u64,
    pub index_bytes_packed: u64,
    pub flops: u64,
    pub pruning_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_weight_params: u64,
    pub total_index_entries: u64,
    pub total_flops: u64,
    /// 1 - kept / dense over all conv layers.
    pub conv_pruning_ratio: f64,
}

/// Direct arithmetic for one conv layer with `kept` surviving stripes.
pub fn conv_layer_cost(
    name: impl Into<String>,
    n: usize,
    c: usize,
    k: usize,
    kept: usize,
    out_h: usize,
    out_w: usize,
) -> LayerCost {
    let dense = (n * c * k * k) as u64;
    let weight_params = (kept * c) as u64;
    LayerCost {
        name: name.into(),
        weight_params,
        dense_weight_params: dense,
        index_entries: kept as u64,
        dense_bitmap_bits: (n * k * k) as u64,
        index_bytes_packed: (kept * 2) as u64,
        flops: (kept * c * 2 * out_h * out_w) as u64,
        pruning_ratio: if dense == 0 {
            0.0
        } else {
            1.0 - weight_params as f64 / dense as f64
        },
    }
}

fn walk_costs(
    nodes: &[InfNode],
    hw: &mut (usize, usize),
    conv_idx: &mut usize,
    out: &mut Vec<LayerCost>,
) {
    for node in nodes {
        match node {
            InfNode::StripeConv(layer) => {
                *conv_idx += 1;
                let oh = crate::fsconv::conv_out_dim(hw.0, layer.k, layer.stride, layer.pad);
                let ow = crate::fsconv::conv_out_dim(hw.1, layer.k, layer.stride, layer.pad);
                out.push(conv_layer_cost(
                    format!("conv{conv_idx}"),
                    layer.n,
                    layer.c,
                    layer.k,
                    layer.kept_stripes(),
                    oh,
                    ow,
                ));
                *hw = (oh, ow);
            }
            InfNode::Affine { scale, .. } => {
                out.push(LayerCost {
                    name: format!("bn{conv_idx}"),
                    weight_params: 2 * scale.len() as u64,
                    dense_weight_params: 2 * scale.len() as u64,
                    index_entries: 0,
                    dense_bitmap_bits: 0,
                    index_bytes_packed: 0,
                    flops: (2 * scale.len() * hw.0 * hw.1) as u64,
                    pruning_ratio: 0.0,
                });
            }
            InfNode::MaxPool2 => {
                *hw = (hw.0 / 2, hw.1 / 2);
            }
            InfNode::GlobalAvgPool => {
                *hw = (1, 1);
            }
            InfNode::Linear { weight, bias } => {
                let params = (weight.rows() * weight.cols() + bias.len()) as u64;
                out.push(LayerCost {
                    name: "linear".into(),
                    weight_params: params,
                    dense_weight_params: params,
                    index_entries: 0,
                    dense_bitmap_bits: 0,
                    index_bytes_packed: 0,
                    flops: (2 * weight.rows() * weight.cols()) as u64,
                    pruning_ratio: 0.0,
                });
            }
            InfNode::Relu => {}
            InfNode::Residual(body) => {
                let mut inner_hw = *hw;
                walk_costs(body, &mut inner_hw, conv_idx, out);
                *hw = inner_hw;
            }
        }
    }
}

/// Full cost report for a pruned model on inputs of the given spatial size.
/// FLOPs count one multiply-accumulate as 2 operations, per input image.
pub fn cost_report(model: &StripeModel, input_hw: (usize, usize)) -> CostReport {
    let mut layers = Vec::new();
    let mut hw = input_hw;
    let mut conv_idx = 0;
    walk_costs(&model.nodes, &mut hw, &mut conv_idx, &mut layers);

    let total_weight_params = layers.iter().map(|l| l.weight_params).sum();
    let total_index_entries = layers.iter().map(|l| l.index_entries).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum();
    let (kept, dense) = layers
        .iter()
        .filter(|l| l.name.starts_with("conv"))
        .fold((0u64, 0u64), |(k, d), l| {
            (k + l.weight_params, d + l.dense_weight_params)
        });
    CostReport {
        layers,
        total_weight_params,
        total_index_entries,
        total_flops,
        conv_pruning_ratio: if dense == 0 {
            0.0
        } else {
            1.0 - kept as f64 / dense as f64
        },
    }
}

/// Parameter-count view of [`cost_report`].
pub fn count_params(model: &StripeModel) -> CostReport {
    cost_report(model, (model.in_h, model.in_w))
}

/// FLOP-count view of [`cost_report`] at an explicit input size.
pub fn count_flops(model: &StripeModel, input_hw: (usize, usize)) -> CostReport {
    cost_report(model, input_hw)
}

impl CostReport {
    /// Total parameters as reported: kept weights plus one entry per stripe
    /// index.
    pub fn reported_params(&self) -> u64 {
        self.total_weight_params + self.total_index_entries
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str("FLOP convention: 1 multiply-accumulate = 2 FLOPs\n");
        s.push_str(&format!(
            "{:<10} {:>12} {:>12} {:>10} {:>12} {:>12} {:>8}\n",
            "layer", "params", "dense", "indexes", "bitmap_bits", "flops", "pruned"
        ));
        for l in &self.layers {
            s.push_str(&format!(
                "{:<10} {:>12} {:>12} {:>10} {:>12} {:>12} {:>7.1}%\n",
                l.name,
                l.weight_params,
                l.dense_weight_params,
                l.index_entries,
                l.dense_bitmap_bits,
                l.flops,
                l.pruning_ratio * 100.0
            ));
        }
        s.push_str(&format!(
            "total params (weights + indexes): {}\n",
            self.reported_params()
        ));
        s.push_str(&format!("total flops: {}\n", self.total_flops));
        s.push_str(&format!(
            "conv pruning ratio: {:.4}\n",
            self.conv_pruning_ratio
        ));
        s
    }

    /// One `layer.metric value` line per entry.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&format!("{}.weight_params {}\n", l.name, l.weight_params));
            s.push_str(&format!(
                "{}.dense_weight_params {}\n",
                l.name, l.dense_weight_params
            ));
            s.push_str(&format!("{}.index_entries {}\n", l.name, l.index_entries));
            s.push_str(&format!(
                "{}.dense_bitmap_bits {}\n",
                l.name, l.dense_bitmap_bits
            ));
            s.push_str(&format!(
                "{}.index_bytes_packed {}\n",
                l.name, l.index_bytes_packed
            ));
            s.push_str(&format!("{}.flops {}\n", l.name, l.flops));
            s.push_str(&format!("{}.pruning_ratio {:.6}\n", l.name, l.pruning_ratio));
        }
        s.push_str(&format!("total.params {}\n", self.reported_params()));
        s.push_str(&format!("total.flops {}\n", self.total_flops));
        s.push_str(&format!(
            "total.conv_pruning_ratio {:.6}\n",
            self.conv_pruning_ratio
        ));
        s
    }
}

/// Per conv layer: each filter's kept-stripe pattern as a K·K bitmask (bit
/// i·K+j), binned by frequency, sorted by descending frequency then
/// ascending mask.
pub fn shape_histogram(model: &StripeModel) -> Vec<Vec<(u16, usize)>> {
    let mut result = Vec::new();
    for layer in conv_layers(model) {
        assert!(layer.k * layer.k <= 16, "bitmask limited to K*K <= 16");
        let mut masks = vec![0u16; layer.n];
        for s in &layer.stripes {
            masks[s.filter] |= 1 << (s.offset.0 * layer.k + s.offset.1);
        }
        let mut freq = std::collections::BTreeMap::new();
        for m in masks {
            *freq.entry(m).or_insert(0usize) += 1;
        }
        let mut bins: Vec<(u16, usize)> = freq.into_iter().collect();
        bins.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        result.push(bins);
    }
    result
}

/// Per conv layer, the fraction of filters retaining each of the K·K stripe
/// positions.
pub fn stripe_ratio_per_position(model: &StripeModel) -> Vec<Vec<f64>> {
    let mut result = Vec::new();
    for layer in conv_layers(model) {
        let mut counts = vec![0usize; layer.k * layer.k];
        for s in &layer.stripes {
            counts[s.offset.0 * layer.k + s.offset.1] += 1;
        }
        result.push(counts.iter().map(|&c| c as f64 / layer.n as f64).collect());
    }
    result
}

fn conv_layers(model: &StripeModel) -> Vec<&StripeLayer> {
    fn walk<'a>(nodes: &'a [InfNode], out: &mut Vec<&'a StripeLayer>) {
        for node in nodes {
            match node {
                InfNode::StripeConv(l) => out.push(l),
                InfNode::Residual(body) => walk(body, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&model.nodes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsconv::{FilterSkeleton, FsConvLayer};
    use crate::tensor::Tensor4;

    fn layer(n: usize, c: usize, k: usize) -> FsConvLayer {
        let data = (0..n * c * k * k).map(|i| i as f64 * 0.01 + 0.1).collect();
        FsConvLayer::new(
            Tensor4::from_vec(n, c, k, k, data),
            FilterSkeleton::ones(n, k),
            1,
        )
    }

    #[test]
    fn all_ones_skeleton_keeps_every_stripe() {
        let sl = extract_stripes(&layer(2, 3, 3));
        assert_eq!(sl.kept_stripes(), 18);
        assert_eq!(sl.surviving_filters, vec![0, 1]);
    }

    #[test]
    fn all_frozen_keeps_nothing() {
        let mut l = layer(2, 3, 3);
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    l.skeleton.freeze(n, i, j);
                }
            }
        }
        let sl = extract_stripes(&l);
        assert_eq!(sl.kept_stripes(), 0);
        assert!(sl.surviving_filters.is_empty());
    }

    #[test]
    fn fully_frozen_filter_degenerates_to_filter_pruning() {
        let mut l = layer(2, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                l.skeleton.freeze(0, i, j);
            }
        }
        let sl = extract_stripes(&l);
        assert_eq!(sl.surviving_filters, vec![1]);
        assert_eq!(sl.kept_stripes(), 9);
        // kept weight params equal the filter-pruning count
        assert_eq!(sl.kept_stripes() * sl.c, 1 * 3 * 3 * 3);
    }

    #[test]
    fn stripes_carry_merged_skeleton_values() {
        let mut l = layer(1, 2, 1);
        l.skeleton.values[0] = 0.5;
        let sl = extract_stripes(&l);
        assert_eq!(sl.stripes.len(), 1);
        for (c, &w) in sl.stripes[0].weights.iter().enumerate() {
            assert_eq!(w, 0.5 * l.weight.at(0, c, 0, 0));
        }
    }

    #[test]
    fn supplementary_layer_arithmetic() {
        // 64 filters of 62 channels, 3x3, 300 kept stripes -> ratio ~0.479
        let cost = conv_layer_cost("conv", 64, 62, 3, 300, 8, 8);
        assert!((cost.pruning_ratio - 0.479).abs() < 1e-3);
        assert_eq!(cost.weight_params, 300 * 62);
        assert_eq!(cost.index_entries, 300);
        assert_eq!(cost.dense_bitmap_bits, 64 * 9);
    }

    #[test]
    fn zero_pruning_ratio_and_flops_identity() {
        let n = 4;
        let cost = conv_layer_cost("conv", n, 3, 3, n * 9, 5, 5);
        assert_eq!(cost.pruning_ratio, 0.0);
        // unpruned stripe-wise flops equal the dense count
        assert_eq!(cost.flops, (n * 3 * 9 * 2 * 25) as u64);
    }

    #[test]
    fn half_kept_halves_flops() {
        let full = conv_layer_cost("conv", 4, 8, 3, 36, 6, 6);
        let half = conv_layer_cost("conv", 4, 8, 3, 18, 6, 6);
        assert_eq!(half.flops * 2, full.flops);
    }
}
