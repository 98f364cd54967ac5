//! Shared test oracles: a literal masked-convolution loop nest written
//! against the 1-based padded accessor, and central finite differences.
//! These deliberately share no code with the production kernels.
#![allow(dead_code)] // each test binary uses a different subset

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use swp_core::fsconv::{conv_out_dim, FilterSkeleton, FsConvLayer};
use swp_core::Tensor4;

/// out[b,n,p,q] = sum_c sum_i sum_j W[n,c,i,j] * I[n,i,j] * X(b,c, p*s+i-pad, q*s+j-pad)
/// with X read through the 1-based zero-padded accessor.
pub fn oracle_conv(layer: &FsConvLayer, x: &Tensor4) -> Tensor4 {
    let (nf, cin, k, _) = layer.weight.dims();
    let (batch, _, h, w) = x.dims();
    let (s, pad) = (layer.stride, layer.pad);
    let oh = conv_out_dim(h, k, s, pad);
    let ow = conv_out_dim(w, k, s, pad);
    let mut out = Tensor4::zeros(batch, nf, oh, ow);
    for b in 0..batch {
        for n in 0..nf {
            for p in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for i in 0..k {
                            for j in 0..k {
                                let xi = (p * s + i) as i64 - pad as i64 + 1;
                                let xj = (q * s + j) as i64 - pad as i64 + 1;
                                acc += layer.weight.at(n, c, i, j)
                                    * layer.skeleton.value(n, i, j)
                                    * x.padded_get(b, c, xi, xj);
                            }
                        }
                    }
                    *out.at_mut(b, n, p, q) = acc;
                }
            }
        }
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn random_layer(
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
    k: usize,
    stride: usize,
) -> FsConvLayer {
    let weight = random_tensor(rng, n, c, k, k);
    let mut skeleton = FilterSkeleton::ones(n, k);
    for v in skeleton.values.iter_mut() {
        *v = rng.gen_range(-1.5..1.5);
    }
    FsConvLayer::new(weight, skeleton, stride)
}

pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Relative agreement with an absolute escape hatch for near-zero gradients,
/// where central differences bottom out in cancellation noise.
pub fn grads_agree(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    (analytic - numeric).abs() < 1e-9 || rel_err(analytic, numeric) < rel_tol
}

/// Central finite difference of a scalar-valued function with respect to one
/// perturbed coordinate; `f` must be side-effect free.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, at: f64, eps: f64) -> f64 {
    (f(at + eps) - f(at - eps)) / (2.0 * eps)
}
