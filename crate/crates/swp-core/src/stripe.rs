//! Stripe-wise inference: each kept stripe acts as a shifted 1x1 convolution
//! and the per-filter feature maps are summed. This only reorders the dense
//! convolution's arithmetic, so a fully-kept layer reproduces it exactly.

use crate::error::{Error, Result};
use crate::fsconv::{conv_out_dim, valid_out_range};
use crate::prune::StripeLayer;
use crate::tensor::{Tensor2, Tensor4};

/// Inference-time node. Batch norm arrives here already folded into a
/// per-channel affine.
#[derive(Debug, Clone, PartialEq)]
pub enum InfNode {
    StripeConv(StripeLayer),
    Affine { scale: Vec<f64>, bias: Vec<f64> },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear { weight: Tensor2, bias: Vec<f64> },
    Residual(Vec<InfNode>),
}

/// A pruned network ready for stripe-wise execution. Immutable once built;
/// `run_model` can be called concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeModel {
    pub nodes: Vec<InfNode>,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub classes: usize,
}

/// Eq.-(7) execution order: stripes outer, spatial plane inner. Filters with
/// no stripes output zero planes.
pub fn stripe_conv_forward(layer: &StripeLayer, x: &Tensor4) -> Result<Tensor4> {
    if x.c() != layer.c {
        return Err(Error::shape(format!(
            "stripe conv expects {} input channels, got {}",
            layer.c,
            x.c()
        )));
    }
    let (batch, _, h, w) = x.dims();
    let (s, p) = (layer.stride, layer.pad);
    let oh_dim = conv_out_dim(h, layer.k, s, p);
    let ow_dim = conv_out_dim(w, layer.k, s, p);
    let mut out = Tensor4::zeros(batch, layer.n, oh_dim, ow_dim);

    for b in 0..batch {
        for stripe in &layer.stripes {
            let (ki, kj) = stripe.offset;
            let (oh0, oh1) = valid_out_range(h, oh_dim, s, ki, p);
            let (ow0, ow1) = valid_out_range(w, ow_dim, s, kj, p);
            if oh0 >= oh1 || ow0 >= ow1 {
                continue;
            }
            let base = out.idx(b, stripe.filter, 0, 0);
            for (c, &wv) in stripe.weights.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let xp = x.plane(b, c);
                let od = out.data_mut();
                for oh in oh0..oh1 {
                    let ih = oh * s + ki - p;
                    let xrow = &xp[ih * w..ih * w + w];
                    let orow = &mut od[base + oh * ow_dim..base + oh * ow_dim + ow_dim];
                    if s == 1 {
                        let ibase = ow0 + kj - p;
                        let xs = &xrow[ibase..ibase + (ow1 - ow0)];
                        for (o, &xv) in orow[ow0..ow1].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for ow in ow0..ow1 {
                            orow[ow] += wv * xrow[ow * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

enum Value {
    Act(Tensor4),
    Flat(Tensor2),
}

fn node_forward(node: &InfNode, v: Value) -> Result<Value> {
    match (node, v) {
        (InfNode::StripeConv(layer), Value::Act(x)) => {
            Ok(Value::Act(stripe_conv_forward(layer, &x)?))
        }
        (InfNode::Affine { scale, bias }, Value::Act(mut x)) => {
            let (n, c, _, _) = x.dims();
            if c != scale.len() {
                return Err(Error::shape(format!(
                    "affine expects {} channels, got {c}",
                    scale.len()
                )));
            }
            for b in 0..n {
                for ch in 0..c {
                    let (s, o) = (scale[ch], bias[ch]);
                    for v in x.plane_mut(b, ch) {
                        *v = s * *v + o;
                    }
                }
            }
            Ok(Value::Act(x))
        }
        (InfNode::Relu, Value::Act(x)) => Ok(Value::Act(crate::aux::relu_forward(&x))),
        (InfNode::MaxPool2, Value::Act(x)) => Ok(Value::Act(crate::aux::maxpool2_forward(&x).0)),
        (InfNode::GlobalAvgPool, Value::Act(x)) => {
            Ok(Value::Flat(crate::aux::global_avgpool_forward(&x)))
        }
        (InfNode::Linear { weight, bias }, Value::Flat(x)) => {
            let lin = crate::aux::Linear {
                weight: weight.clone(),
                bias: bias.clone(),
            };
            Ok(Value::Flat(lin.forward(&x)?))
        }
        (InfNode::Residual(body), Value::Act(x)) => {
            let mut cur = Value::Act(x.clone());
            for n in body {
                cur = node_forward(n, cur)?;
            }
            match cur {
                Value::Act(y) => Ok(Value::Act(crate::tensor::Tensor4::elementwise(
                    &y,
                    &x,
                    crate::tensor::ElemOp::Add,
                )?)),
                Value::Flat(_) => Err(Error::shape("residual body must stay rank-4")),
            }
        }
        _ => Err(Error::shape("node applied to wrong value rank")),
    }
}

/// Deterministic logits for a batch; identical inputs give identical outputs.
pub fn run_model(model: &StripeModel, batch: &Tensor4) -> Result<Tensor2> {
    let (_, c, h, w) = batch.dims();
    if (c, h, w) != (model.in_c, model.in_h, model.in_w) {
        return Err(Error::shape(format!(
            "model expects input ({}, {}, {}), got ({c}, {h}, {w})",
            model.in_c, model.in_h, model.in_w
        )));
    }
    let mut cur = Value::Act(batch.clone());
    for node in &model.nodes {
        cur = node_forward(node, cur)?;
    }
    match cur {
        Value::Flat(logits) => Ok(logits),
        Value::Act(_) => Err(Error::shape(
            "model does not end in a flat (logit) layer",
        )),
    }
}
