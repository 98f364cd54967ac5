//! The `SWPM` stripe-model file format.
//!
//! Layout (all integers little-endian):
//!   magic `SWPM`, version u16, then io meta (in_c, in_h, in_w, classes,
//!   node count as u32). Each node is `tag u8 | payload | crc32 u32` with
//!   the CRC taken over tag and payload. Stripe indexes are u16 triples
//!   (filter, i, j); weights are an f32 payload. Residual blocks nest their
//!   body nodes, each carrying its own CRC.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prune::{StripeLayer, StripeRecord};
use crate::stripe::{InfNode, StripeModel};
use crate::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"SWPM";
const VERSION: u16 = 1;

/// Upper bound on any dimension or count field; files are desk-scale.
const MAX_DIM: usize = 1 << 24;

const TAG_STRIPE_CONV: u8 = 1;
const TAG_AFFINE: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_GAP: u8 = 5;
const TAG_LINEAR: u8 = 6;
const TAG_RESIDUAL: u8 = 7;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u16(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u16).to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn node_payload(node: &InfNode) -> (u8, Vec<u8>) {
    let mut p = Vec::new();
    match node {
        InfNode::StripeConv(l) => {
            put_u32(&mut p, l.n);
            put_u32(&mut p, l.c);
            put_u32(&mut p, l.k);
            put_u32(&mut p, l.stride);
            put_u32(&mut p, l.pad);
            put_u32(&mut p, l.stripes.len());
            for s in &l.stripes {
                put_u16(&mut p, s.filter);
                put_u16(&mut p, s.offset.0);
                put_u16(&mut p, s.offset.1);
            }
            for s in &l.stripes {
                for &w in &s.weights {
                    put_f32(&mut p, w);
                }
            }
            (TAG_STRIPE_CONV, p)
        }
        InfNode::Affine { scale, bias } => {
            put_u32(&mut p, scale.len());
            for &v in scale.iter().chain(bias) {
                put_f32(&mut p, v);
            }
            (TAG_AFFINE, p)
        }
        InfNode::Relu => (TAG_RELU, p),
        InfNode::MaxPool2 => (TAG_MAXPOOL, p),
        InfNode::GlobalAvgPool => (TAG_GAP, p),
        InfNode::Linear { weight, bias } => {
            put_u32(&mut p, weight.rows());
            put_u32(&mut p, weight.cols());
            for &v in weight.data().iter().chain(bias) {
                put_f32(&mut p, v);
            }
            (TAG_LINEAR, p)
        }
        InfNode::Residual(body) => {
            put_u32(&mut p, body.len());
            (TAG_RESIDUAL, p)
        }
    }
}

fn write_node(out: &mut Vec<u8>, node: &InfNode) {
    let (tag, payload) = node_payload(node);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&[tag]);
    hasher.update(&payload);
    out.push(tag);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&hasher.finalize().to_le_bytes());
    if let InfNode::Residual(body) = node {
        for n in body {
            write_node(out, n);
        }
    }
}

pub fn serialize_model(model: &StripeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.in_c);
    put_u32(&mut out, model.in_h);
    put_u32(&mut out, model.in_w);
    put_u32(&mut out, model.classes);
    put_u32(&mut out, model.nodes.len());
    for node in &model.nodes {
        write_node(&mut out, node);
    }
    out
}

/// Weights are stored as f32; callers exporting f64 models lose the low
/// mantissa bits at save time, after which round-trips are bit-exact.
pub fn save_model(model: &StripeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_model(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    layer: usize,
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

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }

    /// A dimension or count field. Bounded so corrupt values cannot drive
    /// huge allocations before the payload read fails.
    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > MAX_DIM {
            return Err(self.fail(format!("{what} {v} exceeds limit {MAX_DIM}")));
        }
        Ok(v)
    }

    /// Check that `count` elements of at least `elem_bytes` each can still
    /// be present before allocating for them.
    fn ensure_payload(&self, count: usize, elem_bytes: usize) -> Result<()> {
        let need = count
            .checked_mul(elem_bytes)
            .ok_or_else(|| self.fail("element count overflows"))?;
        if need > self.buf.len() - self.pos {
            return Err(self.fail(format!(
                "payload of {need} bytes exceeds {} remaining",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    fn read_node(&mut self) -> Result<InfNode> {
        let start = self.pos;
        let tag = self.u8()?;
        let node = match tag {
            TAG_STRIPE_CONV => {
                let n = self.dim("filter count")?;
                let c = self.dim("channel count")?;
                let k = self.dim("kernel size")?;
                let stride = self.dim("stride")?;
                let pad = self.dim("padding")?;
                let count = self.dim("stripe count")?;
                let dense = n
                    .checked_mul(k)
                    .and_then(|v| v.checked_mul(k))
                    .ok_or_else(|| self.fail("n*k*k overflows"))?;
                if count > dense {
                    return Err(self.fail(format!(
                        "stripe count {count} exceeds n*k*k = {dense}"
                    )));
                }
                self.ensure_payload(count, 6)?;
                let mut idx = Vec::with_capacity(count);
                for _ in 0..count {
                    let f = self.u16()? as usize;
                    let i = self.u16()? as usize;
                    let j = self.u16()? as usize;
                    if f >= n || i >= k || j >= k {
                        return Err(self.fail(format!("stripe index ({f},{i},{j}) out of range")));
                    }
                    idx.push((f, i, j));
                }
                self.ensure_payload(count, c.saturating_mul(4))?;
                let mut stripes = Vec::with_capacity(count);
                for (f, i, j) in idx {
                    let mut weights = Vec::with_capacity(c);
                    for _ in 0..c {
                        weights.push(self.f32()?);
                    }
                    stripes.push(StripeRecord {
                        filter: f,
                        offset: (i, j),
                        weights,
                    });
                }
                let mut surviving: Vec<usize> = stripes.iter().map(|s| s.filter).collect();
                surviving.sort_unstable();
                surviving.dedup();
                InfNode::StripeConv(StripeLayer {
                    stripes,
                    n,
                    c,
                    k,
                    stride,
                    pad,
                    surviving_filters: surviving,
                })
            }
            TAG_AFFINE => {
                let c = self.dim("channel count")?;
                self.ensure_payload(c, 8)?;
                let mut scale = Vec::with_capacity(c);
                for _ in 0..c {
                    scale.push(self.f32()?);
                }
                let mut bias = Vec::with_capacity(c);
                for _ in 0..c {
                    bias.push(self.f32()?);
                }
                InfNode::Affine { scale, bias }
            }
            TAG_RELU => InfNode::Relu,
            TAG_MAXPOOL => InfNode::MaxPool2,
            TAG_GAP => InfNode::GlobalAvgPool,
            TAG_LINEAR => {
                let rows = self.dim("row count")?;
                let cols = self.dim("column count")?;
                self.ensure_payload(rows.saturating_mul(cols), 4)?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    data.push(self.f32()?);
                }
                let mut bias = Vec::with_capacity(rows);
                for _ in 0..rows {
                    bias.push(self.f32()?);
                }
                InfNode::Linear {
                    weight: Tensor2::from_vec(rows, cols, data),
                    bias,
                }
            }
            TAG_RESIDUAL => {
                let body_len = self.dim("residual body length")?;
                // verify the header CRC before descending
                self.check_crc(start)?;
                self.layer += 1;
                self.ensure_payload(body_len, 5)?;
                let mut body = Vec::with_capacity(body_len);
                for _ in 0..body_len {
                    body.push(self.read_node()?);
                }
                return Ok(InfNode::Residual(body));
            }
            other => return Err(self.fail(format!("unknown node tag {other}"))),
        };
        self.check_crc(start)?;
        self.layer += 1;
        Ok(node)
    }

    fn check_crc(&mut self, start: usize) -> Result<()> {
        let payload_end = self.pos;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&self.buf[start..payload_end]);
        let expect = hasher.finalize();
        let got = self.u32()?;
        if got != expect {
            return Err(Error::Integrity { layer: self.layer });
        }
        Ok(())
    }
}

pub fn deserialize_model(buf: &[u8]) -> Result<StripeModel> {
    let mut r = Reader {
        buf,
        pos: 0,
        layer: 0,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected SWPM"),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let in_c = r.u32()? as usize;
    let in_h = r.u32()? as usize;
    let in_w = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let count = r.dim("node count")?;
    // every node costs at least a tag byte plus its CRC
    r.ensure_payload(count, 5)?;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        nodes.push(r.read_node()?);
    }
    if r.pos != r.buf.len() {
        return Err(r.fail("trailing bytes after final node"));
    }
    Ok(StripeModel {
        nodes,
        in_c,
        in_h,
        in_w,
        classes,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<StripeModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_model(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> StripeModel {
        StripeModel {
            nodes: vec![
                InfNode::StripeConv(StripeLayer {
                    stripes: vec![StripeRecord {
                        filter: 1,
                        offset: (0, 2),
                        weights: vec![0.5, -0.25],
                    }],
                    n: 2,
                    c: 2,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    surviving_filters: vec![1],
                }),
                InfNode::Affine {
                    scale: vec![1.0, 0.5],
                    bias: vec![0.0, -1.0],
                },
                InfNode::Relu,
                InfNode::GlobalAvgPool,
                InfNode::Linear {
                    weight: Tensor2::from_vec(3, 2, vec![0.125; 6]),
                    bias: vec![0.0; 3],
                },
            ],
            in_c: 2,
            in_h: 4,
            in_w: 4,
            classes: 3,
        }
    }

    #[test]
    fn round_trip_is_identical() {
        let m = sample_model();
        let bytes = serialize_model(&m);
        let back = deserialize_model(&bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_stripe_layer_round_trips() {
        let mut m = sample_model();
        if let InfNode::StripeConv(l) = &mut m.nodes[0] {
            l.stripes.clear();
            l.surviving_filters.clear();
        }
        let back = deserialize_model(&serialize_model(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = serialize_model(&sample_model());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 2] {
            let err = deserialize_model(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Format { .. } | Error::Integrity { .. }),
                "cut at {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn corruption_is_an_integrity_error() {
        let mut bytes = serialize_model(&sample_model());
        let at = bytes.len() - 20;
        bytes[at] ^= 0xff;
        let err = deserialize_model(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Integrity { .. } | Error::Format { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = serialize_model(&sample_model());
        bytes[0] = b'X';
        assert!(matches!(
            deserialize_model(&bytes).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));
    }
}
