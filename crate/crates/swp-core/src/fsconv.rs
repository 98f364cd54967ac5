//! Convolution masked by a learnable filter skeleton.
//!
//! A layer's effective weight is `W ⊙ I` with the skeleton `I` (one scalar
//! per filter and kernel position) broadcast over the channel axis. The
//! forward pass, the exact gradients with respect to `W`, `I` and the input,
//! and the merge that folds `I` into `W` all live here.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Per-layer skeleton `I` of shape (N, K, K) with a frozen-entry mask.
/// Frozen entries are pinned at exactly 0 and never receive updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSkeleton {
    pub n: usize,
    pub k: usize,
    pub values: Vec<f64>,
    pub frozen: Vec<bool>,
    /// Group mode: one (K, K) pattern shared by all N filters. The values
    /// are still materialized per filter but kept identical across n.
    pub shared: bool,
}

impl FilterSkeleton {
    /// All-ones, nothing frozen. This is the training-time initialization.
    pub fn ones(n: usize, k: usize) -> FilterSkeleton {
        FilterSkeleton {
            n,
            k,
            values: vec![1.0; n * k * k],
            frozen: vec![false; n * k * k],
            shared: false,
        }
    }

    #[inline]
    pub fn idx(&self, n: usize, i: usize, j: usize) -> usize {
        debug_assert!(n < self.n && i < self.k && j < self.k);
        (n * self.k + i) * self.k + j
    }

    #[inline]
    pub fn value(&self, n: usize, i: usize, j: usize) -> f64 {
        self.values[self.idx(n, i, j)]
    }

    #[inline]
    pub fn is_frozen(&self, n: usize, i: usize, j: usize) -> bool {
        self.frozen[self.idx(n, i, j)]
    }

    /// Permanently zero one entry.
    pub fn freeze(&mut self, n: usize, i: usize, j: usize) {
        let at = self.idx(n, i, j);
        self.values[at] = 0.0;
        self.frozen[at] = true;
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }
}

/// Dense conv weights (N, C, K, K) paired with their skeleton. Padding is
/// fixed at (K-1)/2 so stride-1 layers preserve spatial dims; only odd K.
#[derive(Debug, Clone, PartialEq)]
pub struct FsConvLayer {
    pub weight: Tensor4,
    pub skeleton: FilterSkeleton,
    pub stride: usize,
    pub pad: usize,
}

impl FsConvLayer {
    pub fn new(weight: Tensor4, skeleton: FilterSkeleton, stride: usize) -> FsConvLayer {
        let (n, _c, kh, kw) = weight.dims();
        assert_eq!(kh, kw, "kernels must be square");
        assert_eq!(kh % 2, 1, "only odd kernel sizes are supported");
        assert_eq!(skeleton.n, n, "skeleton filter dim must match weights");
        assert_eq!(skeleton.k, kh, "skeleton kernel dim must match weights");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        FsConvLayer {
            weight,
            skeleton,
            stride,
            pad: (kh - 1) / 2,
        }
    }

    pub fn out_filters(&self) -> usize {
        self.weight.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.c()
    }

    pub fn kernel(&self) -> usize {
        self.weight.h()
    }
}

/// Gradients of one conv layer: `d_skeleton` is laid out like the skeleton
/// values. `d_weight[n,c,i,j]` is 0 wherever `I[n,i,j]` is 0.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weight: Tensor4,
    pub d_skeleton: Vec<f64>,
    pub d_input: Tensor4,
}

#[inline]
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output index range [lo, hi) for which `o*stride + koff - pad` lands inside
/// `0..input`.
#[inline]
pub(crate) fn valid_out_range(input: usize, out: usize, stride: usize, koff: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > koff {
        (pad - koff + stride - 1) / stride
    } else {
        0
    };
    if input + pad <= koff {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - koff) / stride + 1).min(out);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

fn check_conv_shapes(layer: &FsConvLayer, x: &Tensor4) -> Result<(usize, usize)> {
    if x.c() != layer.in_channels() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            layer.in_channels(),
            x.c()
        )));
    }
    let oh = conv_out_dim(x.h(), layer.kernel(), layer.stride, layer.pad);
    let ow = conv_out_dim(x.w(), layer.kernel(), layer.stride, layer.pad);
    Ok((oh, ow))
}

/// Forward pass: `out[b,n,·] = Σ_c Σ_i Σ_j I[n,i,j]·W[n,c,i,j]·x_shifted`.
/// Each (i, j) term is a scalar-times-shifted-plane accumulation, which is
/// exactly the stripe decomposition the pruned engine exploits.
pub fn fs_conv_forward(layer: &FsConvLayer, x: &Tensor4) -> Result<Tensor4> {
    let (oh_dim, ow_dim) = check_conv_shapes(layer, x)?;
    let (batch, cin, h, w) = x.dims();
    let nf = layer.out_filters();
    let k = layer.kernel();
    let (s, p) = (layer.stride, layer.pad);
    let mut out = Tensor4::zeros(batch, nf, oh_dim, ow_dim);

    for b in 0..batch {
        for n in 0..nf {
            let acc = out.plane_mut(b, n);
            for c in 0..cin {
                let xp = x.plane(b, c);
                for ki in 0..k {
                    let (oh0, oh1) = valid_out_range(h, oh_dim, s, ki, p);
                    for kj in 0..k {
                        let weff =
                            layer.skeleton.value(n, ki, kj) * layer.weight.at(n, c, ki, kj);
                        if weff == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = valid_out_range(w, ow_dim, s, kj, p);
                        if ow0 >= ow1 {
                            continue;
                        }
                        for oh in oh0..oh1 {
                            let ih = oh * s + ki - p;
                            let xrow = &xp[ih * w..ih * w + w];
                            let orow = &mut acc[oh * ow_dim..oh * ow_dim + ow_dim];
                            if s == 1 {
                                let ibase = ow0 + kj - p;
                                let xs = &xrow[ibase..ibase + (ow1 - ow0)];
                                for (o, &xv) in orow[ow0..ow1].iter_mut().zip(xs) {
                                    *o += weff * xv;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    orow[ow] += weff * xrow[ow * s + kj - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass. The shared inner sum
/// `S[n,c,i,j] = Σ_b Σ_h Σ_w dOut[b,n,h,w]·x_shifted` gives
/// `dW = I ⊙ S` and `dI[n,i,j] = Σ_c W[n,c,i,j]·S[n,c,i,j]`; the input
/// gradient is the transposed convolution with the effective weight.
/// Frozen skeleton entries report `dI = 0`.
pub fn fs_conv_backward(layer: &FsConvLayer, x: &Tensor4, d_out: &Tensor4) -> Result<LayerGrads> {
    let (oh_dim, ow_dim) = check_conv_shapes(layer, x)?;
    let (batch, cin, h, w) = x.dims();
    let nf = layer.out_filters();
    let k = layer.kernel();
    let (s, p) = (layer.stride, layer.pad);
    if d_out.dims() != (batch, nf, oh_dim, ow_dim) {
        return Err(Error::shape(format!(
            "conv backward expects dOut of {:?}, got {:?}",
            (batch, nf, oh_dim, ow_dim),
            d_out.dims()
        )));
    }

    let mut inner = Tensor4::zeros(nf, cin, k, k); // S
    let mut d_input = Tensor4::zeros(batch, cin, h, w);

    for b in 0..batch {
        for n in 0..nf {
            let dp = d_out.plane(b, n);
            for c in 0..cin {
                let xp = x.plane(b, c);
                let dxp_base = d_input.idx(b, c, 0, 0);
                for ki in 0..k {
                    let (oh0, oh1) = valid_out_range(h, oh_dim, s, ki, p);
                    for kj in 0..k {
                        let weff =
                            layer.skeleton.value(n, ki, kj) * layer.weight.at(n, c, ki, kj);
                        let (ow0, ow1) = valid_out_range(w, ow_dim, s, kj, p);
                        if ow0 >= ow1 || oh0 >= oh1 {
                            continue;
                        }
                        let mut ssum = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * s + ki - p;
                            let drow = &dp[oh * ow_dim..oh * ow_dim + ow_dim];
                            let dx = d_input.data_mut();
                            if s == 1 {
                                let ibase = ow0 + kj - p;
                                let xs = &xp[ih * w + ibase..ih * w + ibase + (ow1 - ow0)];
                                let ds = &drow[ow0..ow1];
                                let mut acc = 0.0;
                                for (&d, &xv) in ds.iter().zip(xs) {
                                    acc += d * xv;
                                }
                                ssum += acc;
                                if weff != 0.0 {
                                    let dxs = &mut dx
                                        [dxp_base + ih * w + ibase..dxp_base + ih * w + ibase + (ow1 - ow0)];
                                    for (dxv, &d) in dxs.iter_mut().zip(ds) {
                                        *dxv += weff * d;
                                    }
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * s + kj - p;
                                    let d = drow[ow];
                                    ssum += d * xp[ih * w + iw];
                                    if weff != 0.0 {
                                        dx[dxp_base + ih * w + iw] += weff * d;
                                    }
                                }
                            }
                        }
                        *inner.at_mut(n, c, ki, kj) += ssum;
                    }
                }
            }
        }
    }

    let mut d_weight = Tensor4::zeros(nf, cin, k, k);
    let mut d_skeleton = vec![0.0; nf * k * k];
    for n in 0..nf {
        for ki in 0..k {
            for kj in 0..k {
                let sk = layer.skeleton.idx(n, ki, kj);
                let ival = layer.skeleton.values[sk];
                let mut di = 0.0;
                for c in 0..cin {
                    let sv = inner.at(n, c, ki, kj);
                    *d_weight.at_mut(n, c, ki, kj) = ival * sv;
                    di += layer.weight.at(n, c, ki, kj) * sv;
                }
                d_skeleton[sk] = if layer.skeleton.frozen[sk] { 0.0 } else { di };
            }
        }
    }

    Ok(LayerGrads {
        d_weight,
        d_skeleton,
        d_input,
    })
}

/// Fold the skeleton into the weights (`W ← W ⊙ I`) and reset the skeleton
/// to all-ones/unfrozen. Forward outputs are preserved.
pub fn merge_skeleton(layer: &FsConvLayer) -> FsConvLayer {
    let (nf, cin, k, _) = layer.weight.dims();
    let mut weight = layer.weight.clone();
    for n in 0..nf {
        for ki in 0..k {
            for kj in 0..k {
                let ival = layer.skeleton.value(n, ki, kj);
                for c in 0..cin {
                    *weight.at_mut(n, c, ki, kj) *= ival;
                }
            }
        }
    }
    let mut skeleton = FilterSkeleton::ones(nf, k);
    skeleton.shared = layer.skeleton.shared;
    FsConvLayer {
        weight,
        skeleton,
        stride: layer.stride,
        pad: layer.pad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_layer() -> FsConvLayer {
        let w = Tensor4::from_vec(
            1,
            1,
            3,
            3,
            vec![0.5, -1.0, 0.25, 2.0, 1.0, -0.5, 0.0, 3.0, 1.5],
        );
        FsConvLayer::new(w, FilterSkeleton::ones(1, 3), 1)
    }

    #[test]
    fn all_zero_skeleton_gives_zero_output() {
        let mut layer = small_layer();
        layer.skeleton.values.iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let y = fs_conv_forward(&layer, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride1_preserves_spatial_dims() {
        let layer = small_layer();
        let x = Tensor4::zeros(2, 1, 5, 7);
        let y = fs_conv_forward(&layer, &x).unwrap();
        assert_eq!(y.dims(), (2, 1, 5, 7));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let layer = small_layer();
        let x = Tensor4::zeros(1, 3, 4, 4);
        assert!(fs_conv_forward(&layer, &x).is_err());
    }

    #[test]
    fn zero_skeleton_entry_zeroes_weight_grad_column() {
        let mut layer = small_layer();
        layer.skeleton.values[4] = 0.0; // center entry
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| 0.3 * i as f64 - 1.0).collect());
        let y = fs_conv_forward(&layer, &x).unwrap();
        let g = fs_conv_backward(&layer, &x, &y).unwrap();
        assert_eq!(g.d_weight.at(0, 0, 1, 1), 0.0);
    }

    #[test]
    fn zero_upstream_grad_gives_zero_grads() {
        let layer = small_layer();
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let d_out = Tensor4::zeros(1, 1, 4, 4);
        let g = fs_conv_backward(&layer, &x, &d_out).unwrap();
        assert!(g.d_weight.data().iter().all(|&v| v == 0.0));
        assert!(g.d_skeleton.iter().all(|&v| v == 0.0));
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_identity_and_zero_cases() {
        let layer = small_layer();
        let merged = merge_skeleton(&layer);
        assert_eq!(merged.weight, layer.weight);

        let mut zeroed = small_layer();
        zeroed.skeleton.values.iter_mut().for_each(|v| *v = 0.0);
        let merged = merge_skeleton(&zeroed);
        assert!(merged.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_entries_report_zero_skeleton_grad() {
        let mut layer = small_layer();
        layer.skeleton.freeze(0, 0, 1);
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let y = fs_conv_forward(&layer, &x).unwrap();
        let g = fs_conv_backward(&layer, &x, &y).unwrap();
        assert_eq!(g.d_skeleton[layer.skeleton.idx(0, 0, 1)], 0.0);
    }
}
