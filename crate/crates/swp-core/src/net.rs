//! Network assembly: a feature stack of conv/bn/relu/pool/residual nodes,
//! global average pooling, and a linear head. Parameter mutation (the SGD
//! step) only happens here, single-threaded.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aux::{
    global_avgpool_backward, global_avgpool_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, BatchNorm, BnCache, Linear, MaxPoolCache,
};
use crate::error::Result;
use crate::fsconv::{fs_conv_backward, fs_conv_forward, FilterSkeleton, FsConvLayer};
use crate::tensor::{Tensor2, Tensor4};

pub struct ConvNode {
    pub name: String,
    pub layer: FsConvLayer,
    pub d_weight: Tensor4,
    pub d_skeleton: Vec<f64>,
    vel_weight: Tensor4,
    vel_skeleton: Vec<f64>,
    cache_in: Option<Tensor4>,
}

impl ConvNode {
    pub fn new(name: impl Into<String>, layer: FsConvLayer) -> ConvNode {
        let (n, c, k, _) = layer.weight.dims();
        ConvNode {
            name: name.into(),
            d_weight: Tensor4::zeros(n, c, k, k),
            d_skeleton: vec![0.0; n * k * k],
            vel_weight: Tensor4::zeros(n, c, k, k),
            vel_skeleton: vec![0.0; n * k * k],
            cache_in: None,
            layer,
        }
    }
}

pub struct BnNode {
    pub bn: BatchNorm,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
    vel_gamma: Vec<f64>,
    vel_beta: Vec<f64>,
    cache: Option<BnCache>,
}

impl BnNode {
    pub fn new(channels: usize) -> BnNode {
        BnNode {
            bn: BatchNorm::new(channels),
            d_gamma: vec![0.0; channels],
            d_beta: vec![0.0; channels],
            vel_gamma: vec![0.0; channels],
            vel_beta: vec![0.0; channels],
            cache: None,
        }
    }
}

pub struct LinearNode {
    pub lin: Linear,
    pub d_weight: Tensor2,
    pub d_bias: Vec<f64>,
    vel_weight: Tensor2,
    vel_bias: Vec<f64>,
    cache_in: Option<Tensor2>,
}

impl LinearNode {
    pub fn new(lin: Linear) -> LinearNode {
        let (o, i) = (lin.weight.rows(), lin.weight.cols());
        LinearNode {
            d_weight: Tensor2::zeros(o, i),
            d_bias: vec![0.0; o],
            vel_weight: Tensor2::zeros(o, i),
            vel_bias: vec![0.0; o],
            cache_in: None,
            lin,
        }
    }
}

pub enum Node {
    Conv(ConvNode),
    Bn(BnNode),
    Relu(Option<Tensor4>),
    MaxPool(Option<MaxPoolCache>),
    /// Identity-skip residual block: out = body(x) + x.
    Residual(Vec<Node>),
}

/// Which parameter groups the optimizer touches; the shape-only experiment
/// freezes the conv weights, the control run freezes everything.
#[derive(Debug, Clone, Copy)]
pub struct UpdateMask {
    pub conv_weights: bool,
    pub skeleton: bool,
    pub head: bool,
}

impl UpdateMask {
    pub const ALL: UpdateMask = UpdateMask {
        conv_weights: true,
        skeleton: true,
        head: true,
    };
    pub const SHAPE_ONLY: UpdateMask = UpdateMask {
        conv_weights: false,
        skeleton: true,
        head: true,
    };
    pub const NONE: UpdateMask = UpdateMask {
        conv_weights: false,
        skeleton: false,
        head: false,
    };
}

pub struct Network {
    pub features: Vec<Node>,
    pub head: LinearNode,
    pub in_shape: (usize, usize, usize), // (C, H, W)
    pub classes: usize,
    gap_dims: Option<(usize, usize, usize, usize)>,
    pooled: Option<Tensor2>,
}

fn node_forward(node: &mut Node, x: Tensor4, train: bool) -> Result<Tensor4> {
    match node {
        Node::Conv(cv) => {
            let y = fs_conv_forward(&cv.layer, &x)?;
            cv.cache_in = if train { Some(x) } else { None };
            Ok(y)
        }
        Node::Bn(bn) => {
            if train {
                let (y, cache) = bn.bn.forward_train(&x)?;
                bn.cache = Some(cache);
                Ok(y)
            } else {
                bn.bn.forward_eval(&x)
            }
        }
        Node::Relu(cache) => {
            let y = relu_forward(&x);
            *cache = if train { Some(y.clone()) } else { None };
            Ok(y)
        }
        Node::MaxPool(cache) => {
            let (y, c) = maxpool2_forward(&x);
            *cache = if train { Some(c) } else { None };
            Ok(y)
        }
        Node::Residual(body) => {
            let mut cur = x.clone();
            for n in body.iter_mut() {
                cur = node_forward(n, cur, train)?;
            }
            crate::tensor::Tensor4::elementwise(&cur, &x, crate::tensor::ElemOp::Add)
        }
    }
}

fn node_backward(node: &mut Node, d_out: Tensor4) -> Result<Tensor4> {
    match node {
        Node::Conv(cv) => {
            let x = cv.cache_in.take().expect("conv backward without forward");
            let g = fs_conv_backward(&cv.layer, &x, &d_out)?;
            for (acc, v) in cv.d_weight.data_mut().iter_mut().zip(g.d_weight.data()) {
                *acc += v;
            }
            for (acc, v) in cv.d_skeleton.iter_mut().zip(&g.d_skeleton) {
                *acc += v;
            }
            Ok(g.d_input)
        }
        Node::Bn(bn) => {
            let cache = bn.cache.take().expect("bn backward without forward");
            let (dx, dg, db) = bn.bn.backward(&cache, &d_out);
            for (acc, v) in bn.d_gamma.iter_mut().zip(dg) {
                *acc += v;
            }
            for (acc, v) in bn.d_beta.iter_mut().zip(db) {
                *acc += v;
            }
            Ok(dx)
        }
        Node::Relu(cache) => {
            let y = cache.take().expect("relu backward without forward");
            Ok(relu_backward(&y, &d_out))
        }
        Node::MaxPool(cache) => {
            let c = cache.take().expect("pool backward without forward");
            Ok(maxpool2_backward(&c, &d_out))
        }
        Node::Residual(body) => {
            let mut d = d_out.clone();
            for n in body.iter_mut().rev() {
                d = node_backward(n, d)?;
            }
            crate::tensor::Tensor4::elementwise(&d, &d_out, crate::tensor::ElemOp::Add)
        }
    }
}

impl Network {
    pub fn from_parts(
        features: Vec<Node>,
        head: LinearNode,
        in_shape: (usize, usize, usize),
        classes: usize,
    ) -> Network {
        Network {
            features,
            head,
            in_shape,
            classes,
            gap_dims: None,
            pooled: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor2> {
        let mut cur = x.clone();
        for node in self.features.iter_mut() {
            cur = node_forward(node, cur, train)?;
        }
        self.gap_dims = Some(cur.dims());
        let pooled = global_avgpool_forward(&cur);
        let logits = self.head.lin.forward(&pooled)?;
        self.head.cache_in = if train { Some(pooled.clone()) } else { None };
        self.pooled = if train { Some(pooled) } else { None };
        Ok(logits)
    }

    pub fn backward(&mut self, d_logits: &Tensor2) -> Result<()> {
        let pooled = self.head.cache_in.take().expect("backward without forward");
        let (d_pooled, dw, db) = self.head.lin.backward(&pooled, d_logits);
        for (acc, v) in self.head.d_weight.data_mut().iter_mut().zip(dw.data()) {
            *acc += v;
        }
        for (acc, v) in self.head.d_bias.iter_mut().zip(db) {
            *acc += v;
        }
        let mut d = global_avgpool_backward(self.gap_dims.unwrap(), &d_pooled);
        for node in self.features.iter_mut().rev() {
            d = node_backward(node, d)?;
        }
        self.pooled = None;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.for_each_conv_mut(&mut |cv| {
            cv.d_weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            cv.d_skeleton.iter_mut().for_each(|v| *v = 0.0);
        });
        fn zero_aux(nodes: &mut [Node]) {
            for node in nodes {
                match node {
                    Node::Bn(bn) => {
                        bn.d_gamma.iter_mut().for_each(|v| *v = 0.0);
                        bn.d_beta.iter_mut().for_each(|v| *v = 0.0);
                    }
                    Node::Residual(body) => zero_aux(body),
                    _ => {}
                }
            }
        }
        zero_aux(&mut self.features);
        self.head.d_weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.head.d_bias.iter_mut().for_each(|v| *v = 0.0);
    }

    /// One SGD-with-momentum step over all parameter groups in `mask`.
    /// Frozen stripes are skipped entirely: neither their skeleton entry nor
    /// their weight column moves. In group (shared-skeleton) mode the
    /// per-filter skeleton gradients are first summed across filters so every
    /// copy takes the identical update.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64, mask: UpdateMask) {
        self.for_each_conv_mut(&mut |cv| {
            let (nf, cin, k, _) = cv.layer.weight.dims();
            if mask.conv_weights {
                for n in 0..nf {
                    for ki in 0..k {
                        for kj in 0..k {
                            if cv.layer.skeleton.is_frozen(n, ki, kj) {
                                continue;
                            }
                            for c in 0..cin {
                                let at = cv.layer.weight.idx(n, c, ki, kj);
                                let g = cv.d_weight.data()[at]
                                    + weight_decay * cv.layer.weight.data()[at];
                                let v = momentum * cv.vel_weight.data()[at] + g;
                                cv.vel_weight.data_mut()[at] = v;
                                cv.layer.weight.data_mut()[at] -= lr * v;
                            }
                        }
                    }
                }
            }
            if mask.skeleton {
                if cv.layer.skeleton.shared {
                    // reduce over the filter axis, then broadcast
                    let kk = k * k;
                    let mut g = vec![0.0; kk];
                    for n in 0..nf {
                        for p in 0..kk {
                            g[p] += cv.d_skeleton[n * kk + p];
                        }
                    }
                    for n in 0..nf {
                        for p in 0..kk {
                            cv.d_skeleton[n * kk + p] = g[p];
                        }
                    }
                }
                let sk = &mut cv.layer.skeleton;
                for (i, val) in sk.values.iter_mut().enumerate() {
                    if sk.frozen[i] {
                        continue;
                    }
                    let v = momentum * cv.vel_skeleton[i] + cv.d_skeleton[i];
                    cv.vel_skeleton[i] = v;
                    *val -= lr * v;
                }
            }
        });
        if mask.head {
            fn step_aux(nodes: &mut [Node], lr: f64, momentum: f64) {
                for node in nodes {
                    match node {
                        Node::Bn(bn) => {
                            for i in 0..bn.bn.gamma.len() {
                                let vg = momentum * bn.vel_gamma[i] + bn.d_gamma[i];
                                bn.vel_gamma[i] = vg;
                                bn.bn.gamma[i] -= lr * vg;
                                let vb = momentum * bn.vel_beta[i] + bn.d_beta[i];
                                bn.vel_beta[i] = vb;
                                bn.bn.beta[i] -= lr * vb;
                            }
                        }
                        Node::Residual(body) => step_aux(body, lr, momentum),
                        _ => {}
                    }
                }
            }
            step_aux(&mut self.features, lr, momentum);
            let head = &mut self.head;
            for i in 0..head.lin.weight.data().len() {
                let g = head.d_weight.data()[i] + weight_decay * head.lin.weight.data()[i];
                let v = momentum * head.vel_weight.data()[i] + g;
                head.vel_weight.data_mut()[i] = v;
                head.lin.weight.data_mut()[i] -= lr * v;
            }
            for i in 0..head.lin.bias.len() {
                let v = momentum * head.vel_bias[i] + head.d_bias[i];
                head.vel_bias[i] = v;
                head.lin.bias[i] -= lr * v;
            }
        }
    }

    pub fn for_each_conv_mut(&mut self, f: &mut dyn FnMut(&mut ConvNode)) {
        fn walk(nodes: &mut [Node], f: &mut dyn FnMut(&mut ConvNode)) {
            for node in nodes {
                match node {
                    Node::Conv(cv) => f(cv),
                    Node::Residual(body) => walk(body, f),
                    _ => {}
                }
            }
        }
        walk(&mut self.features, f);
    }

    pub fn for_each_conv(&self, f: &mut dyn FnMut(&ConvNode)) {
        fn walk(nodes: &[Node], f: &mut dyn FnMut(&ConvNode)) {
            for node in nodes {
                match node {
                    Node::Conv(cv) => f(cv),
                    Node::Residual(body) => walk(body, f),
                    _ => {}
                }
            }
        }
        walk(&self.features, f);
    }

    pub fn frozen_stripe_count(&self) -> usize {
        let mut total = 0;
        self.for_each_conv(&mut |cv| total += cv.layer.skeleton.frozen_count());
        total
    }

    pub fn total_stripe_count(&self) -> usize {
        let mut total = 0;
        self.for_each_conv(&mut |cv| total += cv.layer.skeleton.values.len());
        total
    }
}

pub fn normal_sample(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; two uniforms per draw keeps RNG consumption deterministic.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

fn init_conv(
    name: &str,
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
) -> Node {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let data: Vec<f64> = (0..out_c * in_c * k * k)
        .map(|_| normal_sample(rng, std))
        .collect();
    let w = Tensor4::from_vec(out_c, in_c, k, k, data);
    Node::Conv(ConvNode::new(
        name,
        FsConvLayer::new(w, FilterSkeleton::ones(out_c, k), stride),
    ))
}

fn init_linear(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> LinearNode {
    let std = (2.0 / in_f as f64).sqrt();
    let data: Vec<f64> = (0..out_f * in_f).map(|_| normal_sample(rng, std)).collect();
    LinearNode::new(Linear {
        weight: Tensor2::from_vec(out_f, in_f, data),
        bias: vec![0.0; out_f],
    })
}

/// conv(in->32)-BN-ReLU x2, maxpool, conv(32->64)-BN-ReLU x2, maxpool,
/// global-avgpool, linear.
pub fn tiny_vgg(in_shape: (usize, usize, usize), classes: usize, rng: &mut ChaCha8Rng) -> Network {
    let in_c = in_shape.0;
    let features = vec![
        init_conv("conv1", rng, 32, in_c, 3, 1),
        Node::Bn(BnNode::new(32)),
        Node::Relu(None),
        init_conv("conv2", rng, 32, 32, 3, 1),
        Node::Bn(BnNode::new(32)),
        Node::Relu(None),
        Node::MaxPool(None),
        init_conv("conv3", rng, 64, 32, 3, 1),
        Node::Bn(BnNode::new(64)),
        Node::Relu(None),
        init_conv("conv4", rng, 64, 64, 3, 1),
        Node::Bn(BnNode::new(64)),
        Node::Relu(None),
        Node::MaxPool(None),
    ];
    Network {
        features,
        head: init_linear(rng, classes, 64),
        in_shape,
        classes,
        gap_dims: None,
        pooled: None,
    }
}

/// One residual stage analog: stem conv, an identity-skip block, then a
/// stride-2 downsampling conv.
pub fn tiny_resnet(in_shape: (usize, usize, usize), classes: usize, rng: &mut ChaCha8Rng) -> Network {
    let in_c = in_shape.0;
    let body = vec![
        init_conv("block1.conv1", rng, 16, 16, 3, 1),
        Node::Bn(BnNode::new(16)),
        Node::Relu(None),
        init_conv("block1.conv2", rng, 16, 16, 3, 1),
        Node::Bn(BnNode::new(16)),
    ];
    let features = vec![
        init_conv("stem", rng, 16, in_c, 3, 1),
        Node::Bn(BnNode::new(16)),
        Node::Relu(None),
        Node::Residual(body),
        Node::Relu(None),
        init_conv("down", rng, 32, 16, 3, 2),
        Node::Bn(BnNode::new(32)),
        Node::Relu(None),
    ];
    Network {
        features,
        head: init_linear(rng, classes, 32),
        in_shape,
        classes,
        gap_dims: None,
        pooled: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tiny_vgg_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = tiny_vgg((1, 28, 28), 10, &mut rng);
        let x = Tensor4::zeros(2, 1, 28, 28);
        let logits = net.forward(&x, false).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (2, 10));
    }

    #[test]
    fn tiny_resnet_forward_and_backward_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = tiny_resnet((1, 12, 12), 10, &mut rng);
        let x = Tensor4::from_vec(1, 1, 12, 12, (0..144).map(|i| (i % 9) as f64 * 0.1).collect());
        let logits = net.forward(&x, true).unwrap();
        let (_, d) = crate::aux::softmax_xent(&logits, &[3]);
        net.zero_grads();
        net.backward(&d).unwrap();
        net.sgd_step(0.01, 0.9, 1e-4, UpdateMask::ALL);
    }
}
