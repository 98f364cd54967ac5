//! Auxiliary layers used to assemble the desk-scale networks: ReLU, 2x2 max
//! pooling, global average pooling, batch normalization, a fully-connected
//! head and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Tensor2, Tensor4};

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    Tensor4::from_vec(n, c, h, w, x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// `y` must be the output of `relu_forward` on the same input.
pub fn relu_backward(y: &Tensor4, d_out: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = d_out.dims();
    let data = y
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&yv, &dv)| if yv > 0.0 { dv } else { 0.0 })
        .collect();
    Tensor4::from_vec(n, c, h, w, data)
}

pub struct MaxPoolCache {
    /// Flat input index of the winning element, one per output element.
    argmax: Vec<usize>,
    in_dims: (usize, usize, usize, usize),
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
pub fn maxpool2_forward(x: &Tensor4) -> (Tensor4, MaxPoolCache) {
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    assert!(oh >= 1 && ow >= 1, "input too small for 2x2 pooling");
    let mut out = Tensor4::zeros(n, c, oh, ow);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let mut oi = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane_base = (b * c + ch) * h * w;
            let xp = x.plane(b, ch);
            let op = out.plane_mut(b, ch);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let at = (2 * i + di) * w + 2 * j + dj;
                            if xp[at] > best {
                                best = xp[at];
                                best_at = at;
                            }
                        }
                    }
                    op[i * ow + j] = best;
                    argmax[oi] = plane_base + best_at;
                    oi += 1;
                }
            }
        }
    }
    (
        out,
        MaxPoolCache {
            argmax,
            in_dims: (n, c, h, w),
        },
    )
}

pub fn maxpool2_backward(cache: &MaxPoolCache, d_out: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = cache.in_dims;
    let mut dx = Tensor4::zeros(n, c, h, w);
    let data = dx.data_mut();
    for (&at, &d) in cache.argmax.iter().zip(d_out.data()) {
        data[at] += d;
    }
    dx
}

/// Mean over the spatial plane, (B, C, H, W) -> (B, C).
pub fn global_avgpool_forward(x: &Tensor4) -> Tensor2 {
    let (n, c, h, w) = x.dims();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor2::zeros(n, c);
    for b in 0..n {
        for ch in 0..c {
            *out.at_mut(b, ch) = x.plane(b, ch).iter().sum::<f64>() * inv;
        }
    }
    out
}

pub fn global_avgpool_backward(in_dims: (usize, usize, usize, usize), d_out: &Tensor2) -> Tensor4 {
    let (n, c, h, w) = in_dims;
    let inv = 1.0 / (h * w) as f64;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let g = d_out.at(b, ch) * inv;
            dx.plane_mut(b, ch).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization state for conv activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub struct BnCache {
    inv_std: Vec<f64>,
    xhat: Tensor4,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, BnCache)> {
        let (n, c, h, w) = x.dims();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels()
            )));
        }
        let count = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                sum += x.plane(b, ch).iter().sum::<f64>();
            }
            mean[ch] = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                for &v in x.plane(b, ch) {
                    let d = v - mean[ch];
                    sq += d * d;
                }
            }
            var[ch] = sq / count; // biased, as used for normalization
        }
        let mut xhat = Tensor4::zeros(n, c, h, w);
        let mut out = Tensor4::zeros(n, c, h, w);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for b in 0..n {
            for ch in 0..c {
                let (m, is, g, be) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                let xp = x.plane(b, ch);
                let xh = xhat.plane_mut(b, ch);
                for (o, &v) in xh.iter_mut().zip(xp) {
                    *o = (v - m) * is;
                }
                let op = out.plane_mut(b, ch);
                for (o, &xh) in op.iter_mut().zip(&*xhat.plane(b, ch)) {
                    *o = g * xh + be;
                }
            }
        }
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch];
        }
        Ok((out, BnCache { inv_std, xhat }))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = x.dims();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels()
            )));
        }
        let mut out = Tensor4::zeros(n, c, h, w);
        for b in 0..n {
            for ch in 0..c {
                let is = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
                let scale = self.gamma[ch] * is;
                let bias = self.beta[ch] - scale * self.running_mean[ch];
                let xp = x.plane(b, ch);
                let op = out.plane_mut(b, ch);
                for (o, &v) in op.iter_mut().zip(xp) {
                    *o = scale * v + bias;
                }
            }
        }
        Ok(out)
    }

    /// Returns (dx, dgamma, dbeta) for the training-mode forward.
    pub fn backward(&self, cache: &BnCache, d_out: &Tensor4) -> (Tensor4, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = d_out.dims();
        let count = (n * h * w) as f64;
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let dp = d_out.plane(b, ch);
                let xh = cache.xhat.plane(b, ch);
                let mut dg = 0.0;
                let mut db = 0.0;
                for (&d, &x) in dp.iter().zip(xh) {
                    dg += d * x;
                    db += d;
                }
                d_gamma[ch] += dg;
                d_beta[ch] += db;
            }
        }
        let mut dx = Tensor4::zeros(n, c, h, w);
        for b in 0..n {
            for ch in 0..c {
                let g = self.gamma[ch];
                let is = cache.inv_std[ch];
                let dp = d_out.plane(b, ch);
                let xh = cache.xhat.plane(b, ch);
                let dxp = dx.plane_mut(b, ch);
                // dx = g*is/count * (count*d - sum(d) - xhat*sum(d*xhat))
                let (sum_d, sum_dx) = (d_beta[ch], d_gamma[ch]);
                for ((o, &d), &x) in dxp.iter_mut().zip(dp).zip(xh) {
                    *o = g * is / count * (count * d - sum_d - x * sum_dx);
                }
            }
        }
        (dx, d_gamma, d_beta)
    }
}

/// Fully-connected layer, weights stored (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let (out_f, in_f) = (self.weight.rows(), self.weight.cols());
        if x.cols() != in_f {
            return Err(Error::shape(format!(
                "linear expects {in_f} input features, got {}",
                x.cols()
            )));
        }
        let mut out = Tensor2::zeros(x.rows(), out_f);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let or = out.row_mut(b);
            for o in 0..out_f {
                let wr = self.weight.row(o);
                let mut acc = self.bias[o];
                for (&wv, &xv) in wr.iter().zip(xr) {
                    acc += wv * xv;
                }
                or[o] = acc;
            }
        }
        Ok(out)
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(&self, x: &Tensor2, d_out: &Tensor2) -> (Tensor2, Tensor2, Vec<f64>) {
        let (out_f, in_f) = (self.weight.rows(), self.weight.cols());
        let mut dx = Tensor2::zeros(x.rows(), in_f);
        let mut dw = Tensor2::zeros(out_f, in_f);
        let mut db = vec![0.0; out_f];
        for b in 0..x.rows() {
            let xr = x.row(b);
            let dr = d_out.row(b);
            let dxr = dx.row_mut(b);
            for o in 0..out_f {
                let d = dr[o];
                db[o] += d;
                let wr = self.weight.row(o);
                let dwr = dw.row_mut(o);
                for i in 0..in_f {
                    dwr[i] += d * xr[i];
                    dxr[i] += d * wr[i];
                }
            }
        }
        (dx, dw, db)
    }
}

/// Mean cross-entropy over the batch plus the logit gradient.
pub fn softmax_xent(logits: &Tensor2, labels: &[usize]) -> (f64, Tensor2) {
    let (b, k) = (logits.rows(), logits.cols());
    assert_eq!(labels.len(), b);
    let mut loss = 0.0;
    let mut d = Tensor2::zeros(b, k);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[labels[i]]) * inv_b;
        let dr = d.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_denom).exp();
            dr[j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    (loss, d)
}

pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor4::from_vec(1, 1, 1, 3, vec![-1.0, 0.0, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_roundtrip_gradient() {
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| (i * 7 % 13) as f64).collect());
        let (y, cache) = maxpool2_forward(&x);
        assert_eq!(y.dims(), (1, 1, 2, 2));
        let d = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = maxpool2_backward(&cache, &d);
        assert_eq!(dx.data().iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let logits = Tensor2::zeros(2, 10);
        let (loss, _) = softmax_xent(&logits, &[3, 7]);
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bn_normalizes_batch() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor4::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = bn.forward_train(&x).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
