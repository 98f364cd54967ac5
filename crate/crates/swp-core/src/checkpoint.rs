//! `SWPC` checkpoint format for trained (unpruned) skeleton networks: full
//! f64 weights, skeleton values and frozen masks, and batch-norm statistics.
//! A whole-file CRC32 trailer guards against corruption.

use std::fs;
use std::path::Path;

use crate::aux::{BatchNorm, Linear};
use crate::error::{Error, Result};
use crate::fsconv::{FilterSkeleton, FsConvLayer};
use crate::net::{BnNode, ConvNode, LinearNode, Network, Node};
use crate::tensor::{Tensor2, Tensor4};

const MAGIC: &[u8; 4] = b"SWPC";
const VERSION: u16 = 1;

const TAG_CONV: u8 = 1;
const TAG_BN: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_RESIDUAL: u8 = 5;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

fn write_nodes(buf: &mut Vec<u8>, nodes: &[Node]) {
    put_u32(buf, nodes.len());
    for node in nodes {
        match node {
            Node::Conv(cv) => {
                buf.push(TAG_CONV);
                put_str(buf, &cv.name);
                let (n, c, k, _) = cv.layer.weight.dims();
                put_u32(buf, n);
                put_u32(buf, c);
                put_u32(buf, k);
                put_u32(buf, cv.layer.stride);
                put_f64s(buf, cv.layer.weight.data());
                put_f64s(buf, &cv.layer.skeleton.values);
                buf.push(cv.layer.skeleton.shared as u8);
                buf.extend(cv.layer.skeleton.frozen.iter().map(|&b| b as u8));
            }
            Node::Bn(bn) => {
                buf.push(TAG_BN);
                put_u32(buf, bn.bn.channels());
                put_f64s(buf, &bn.bn.gamma);
                put_f64s(buf, &bn.bn.beta);
                put_f64s(buf, &bn.bn.running_mean);
                put_f64s(buf, &bn.bn.running_var);
            }
            Node::Relu(_) => buf.push(TAG_RELU),
            Node::MaxPool(_) => buf.push(TAG_MAXPOOL),
            Node::Residual(body) => {
                buf.push(TAG_RESIDUAL);
                write_nodes(buf, body);
            }
        }
    }
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, net.in_shape.0);
    put_u32(&mut buf, net.in_shape.1);
    put_u32(&mut buf, net.in_shape.2);
    put_u32(&mut buf, net.classes);
    write_nodes(&mut buf, &net.features);
    put_u32(&mut buf, net.head.lin.weight.rows());
    put_u32(&mut buf, net.head.lin.weight.cols());
    put_f64s(&mut buf, net.head.lin.weight.data());
    put_f64s(&mut buf, &net.head.lin.bias);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());
    let path = path.as_ref();
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "need {n} bytes, only {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("invalid utf-8 in name"))
    }

    fn nodes(&mut self) -> Result<Vec<Node>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = self.u8()?;
            out.push(match tag {
                TAG_CONV => {
                    let name = self.string()?;
                    let n = self.u32()?;
                    let c = self.u32()?;
                    let k = self.u32()?;
                    let stride = self.u32()?;
                    let weight = Tensor4::from_vec(n, c, k, k, self.f64s(n * c * k * k)?);
                    let values = self.f64s(n * k * k)?;
                    let shared = self.u8()? != 0;
                    let frozen: Vec<bool> =
                        self.take(n * k * k)?.iter().map(|&b| b != 0).collect();
                    let skeleton = FilterSkeleton {
                        n,
                        k,
                        values,
                        frozen,
                        shared,
                    };
                    Node::Conv(ConvNode::new(name, FsConvLayer::new(weight, skeleton, stride)))
                }
                TAG_BN => {
                    let c = self.u32()?;
                    let mut node = BnNode::new(c);
                    node.bn = BatchNorm {
                        gamma: self.f64s(c)?,
                        beta: self.f64s(c)?,
                        running_mean: self.f64s(c)?,
                        running_var: self.f64s(c)?,
                    };
                    Node::Bn(node)
                }
                TAG_RELU => Node::Relu(None),
                TAG_MAXPOOL => Node::MaxPool(None),
                TAG_RESIDUAL => Node::Residual(self.nodes()?),
                other => return Err(self.fail(format!("unknown node tag {other}"))),
            });
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 10 {
        return Err(Error::Format {
            offset: 0,
            reason: "file too short".into(),
        });
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
        return Err(Error::Integrity { layer: 0 });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected SWPC".into(),
        });
    }
    let b = r.take(2)?;
    if u16::from_le_bytes([b[0], b[1]]) != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: "unsupported version".into(),
        });
    }
    let in_c = r.u32()?;
    let in_h = r.u32()?;
    let in_w = r.u32()?;
    let classes = r.u32()?;
    let features = r.nodes()?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let weight = Tensor2::from_vec(rows, cols, r.f64s(rows * cols)?);
    let bias = r.f64s(rows)?;
    Ok(Network::from_parts(
        features,
        LinearNode::new(Linear { weight, bias }),
        (in_c, in_h, in_w),
        classes,
    ))
}
