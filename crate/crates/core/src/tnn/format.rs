//! `TNN1` binary model file: little-endian, 2-bit packed weights,
//! 16.16 fixed-point batchnorm parameters.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{InputSpec, Layer, NetworkModel};
use super::ops::{ActivationKind, BatchNormParams};
use super::ternary::TernaryTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNN1";

const TAG_CONV3X3: u8 = 1;
const TAG_DENSE: u8 = 2;
const TAG_MAXPOOL2: u8 = 3;
const TAG_BATCHNORM: u8 = 4;
const TAG_ACTIVATION: u8 = 5;

const ACT_SIGN: u8 = 0;
const ACT_PHI: u8 = 1;

const FIXED_ONE: f64 = 65536.0;

fn to_fixed(v: f64, what: &str) -> Result<i32> {
    let q = (v * FIXED_ONE).round();
    if !q.is_finite() || q < i32::MIN as f64 || q > i32::MAX as f64 {
        return Err(Error::domain(format!("{what} = {v} does not fit 16.16 fixed point")));
    }
    Ok(q as i32)
}

fn from_fixed(q: i32) -> f64 {
    q as f64 / FIXED_ONE
}

fn threshold_i32(t: i64) -> Result<i32> {
    i32::try_from(t).map_err(|_| Error::domain(format!("threshold {t} exceeds i32")))
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::domain(format!("dimension {n} exceeds u32")))
}

/// Serializes a model to bytes.
pub fn encode_model(model: &NetworkModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let input = model.input();
    for v in [model.layers().len(), input.channels, input.height, input.width] {
        out.extend_from_slice(&dim_u32(v)?.to_le_bytes());
    }
    for layer in model.layers() {
        match layer {
            Layer::Conv3x3 { in_channels: i, out_channels: o, weights, thresholds }
            | Layer::Dense { inputs: i, outputs: o, weights, thresholds } => {
                let tag = if matches!(layer, Layer::Conv3x3 { .. }) { TAG_CONV3X3 } else { TAG_DENSE };
                out.push(tag);
                out.extend_from_slice(&dim_u32(*i)?.to_le_bytes());
                out.extend_from_slice(&dim_u32(*o)?.to_le_bytes());
                for &t in thresholds {
                    out.extend_from_slice(&threshold_i32(t)?.to_le_bytes());
                }
                out.extend_from_slice(&weights.to_code_bytes());
            }
            Layer::MaxPool2 => out.push(TAG_MAXPOOL2),
            Layer::BatchNorm(ps) => {
                out.push(TAG_BATCHNORM);
                out.extend_from_slice(&dim_u32(ps.len())?.to_le_bytes());
                for p in ps {
                    for (v, what) in [(p.gamma, "gamma"), (p.beta, "beta"), (p.mean, "mean"), (p.std, "std")] {
                        out.extend_from_slice(&to_fixed(v, what)?.to_le_bytes());
                    }
                }
            }
            Layer::Activation(kind) => {
                out.push(TAG_ACTIVATION);
                let (code, delta) = match kind {
                    ActivationKind::Sign => (ACT_SIGN, 0.0),
                    ActivationKind::Phi { delta } => (ACT_PHI, *delta),
                    ActivationKind::None => return Err(Error::domain("identity activation cannot be stored")),
                };
                out.push(code);
                out.extend_from_slice(&to_fixed(delta, "delta")?.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a model from bytes. Every structural problem is reported with
/// the byte offset where it was detected.
pub fn decode_model(bytes: &[u8]) -> Result<NetworkModel> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected TNN1"));
    }
    let count = cur.u32("layer count")?;
    let input = InputSpec {
        channels: cur.u32("input channels")?,
        height: cur.u32("input height")?,
        width: cur.u32("input width")?,
    };
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = cur.pos;
        match cur.u8("layer tag")? {
            tag @ (TAG_CONV3X3 | TAG_DENSE) => {
                let i = cur.u32("fan-in")?;
                let o = cur.u32("fan-out")?;
                let taps = if tag == TAG_CONV3X3 { 9 } else { 1 };
                let n = i
                    .checked_mul(o)
                    .and_then(|v| v.checked_mul(taps))
                    .ok_or_else(|| Error::format(at, "layer size overflows"))?;
                // thresholds (4 bytes each) plus packed codes must be present
                let need = o.saturating_mul(4).saturating_add(n.div_ceil(4));
                if bytes.len() - cur.pos < need {
                    return Err(Error::format(cur.pos, "truncated layer body"));
                }
                let thresholds = (0..o).map(|_| cur.i32("threshold").map(i64::from)).collect::<Result<Vec<_>>>()?;
                let code_at = cur.pos;
                let shape: Vec<usize> = if tag == TAG_CONV3X3 { vec![o, i, 3, 3] } else { vec![o, i] };
                let weights = TernaryTensor::from_code_bytes(&shape, cur.take(n.div_ceil(4), "weights")?)
                    .map_err(|e| Error::format(code_at, e.to_string()))?;
                layers.push(if tag == TAG_CONV3X3 {
                    Layer::Conv3x3 { in_channels: i, out_channels: o, weights, thresholds }
                } else {
                    Layer::Dense { inputs: i, outputs: o, weights, thresholds }
                });
            }
            TAG_MAXPOOL2 => layers.push(Layer::MaxPool2),
            TAG_BATCHNORM => {
                let n = cur.u32("batchnorm size")?;
                if (bytes.len() - cur.pos) / 16 < n {
                    return Err(Error::format(cur.pos, "truncated batchnorm parameters"));
                }
                let mut ps = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut q = [0f64; 4];
                    for v in &mut q {
                        *v = from_fixed(cur.i32("batchnorm parameter")?);
                    }
                    ps.push(BatchNormParams { gamma: q[0], beta: q[1], mean: q[2], std: q[3] });
                }
                layers.push(Layer::BatchNorm(ps));
            }
            TAG_ACTIVATION => {
                let code_at = cur.pos;
                let code = cur.u8("activation kind")?;
                let delta = from_fixed(cur.i32("activation threshold")?);
                layers.push(Layer::Activation(match code {
                    ACT_SIGN => ActivationKind::Sign,
                    ACT_PHI => ActivationKind::Phi { delta },
                    other => return Err(Error::format(code_at, format!("unknown activation kind {other}"))),
                }));
            }
            other => return Err(Error::format(at, format!("unknown layer tag {other}"))),
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, "trailing bytes after last layer"));
    }
    NetworkModel::new(input, layers).map_err(|e| Error::format(bytes.len(), e.to_string()))
}

pub fn write_model(model: &NetworkModel, mut out: impl Write) -> Result<()> {
    let bytes = encode_model(model)?;
    out.write_all(&bytes).map_err(|e| Error::io("<model writer>", e))
}

pub fn read_model(mut input: impl Read) -> Result<NetworkModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<model reader>", e))?;
    decode_model(&bytes)
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
