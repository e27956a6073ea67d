//! `TNS1` checkpoint container: latent weights, batchnorm state and AdamW
//! moments, little-endian.

use std::path::Path;

use tnnsim_core::tnn::InputSpec;

use crate::error::{Error, Result};
use crate::net::{format_arch, parse_arch, Mode, NetSpec, ShadowModel};
use crate::optim::AdamState;
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TNS1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_vec<F: Real>(out: &mut Vec<u8>, v: &[F]) {
    put_u32(out, v.len());
    for x in v {
        put_f64(out, x.to_f64().unwrap());
    }
}

pub fn encode_checkpoint<F: Real>(model: &ShadowModel<F>, opt: &AdamState<F>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.push(match model.mode() {
        Mode::Bnn => 0,
        Mode::Tnn => 1,
    });
    for v in [model.weight_delta(), model.activation_delta(), model.bn_eps()] {
        put_f64(&mut out, v);
    }
    let i = model.input();
    for v in [i.channels, i.height, i.width, model.classes()] {
        put_u32(&mut out, v);
    }
    let arch = format_arch(model.blocks());
    put_u32(&mut out, arch.len());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    for (k, p) in model.params().iter().enumerate() {
        put_vec(&mut out, &p.values);
        put_vec(&mut out, &opt.m[k]);
        put_vec(&mut out, &opt.v[k]);
    }
    for rs in model.running() {
        put_vec(&mut out, &rs.mean);
        put_vec(&mut out, &rs.var);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint { offset: self.pos, msg: "truncated".into() });
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec_into<F: Real>(&mut self, dst: &mut [F]) -> Result<()> {
        let at = self.pos;
        let n = self.u32()?;
        if n != dst.len() {
            return Err(Error::Checkpoint { offset: at, msg: format!("expected {} values, found {n}", dst.len()) });
        }
        for d in dst {
            *d = F::of(self.f64()?);
        }
        Ok(())
    }
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<(ShadowModel<F>, AdamState<F>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint { offset: 0, msg: "bad magic, expected TNS1".into() });
    }
    let mode = match r.take(1)?[0] {
        0 => Mode::Bnn,
        1 => Mode::Tnn,
        other => return Err(Error::Checkpoint { offset: 4, msg: format!("unknown mode {other}") }),
    };
    let spec = NetSpec { mode, weight_delta: r.f64()?, activation_delta: r.f64()?, bn_eps: r.f64()? };
    let input = InputSpec { channels: r.u32()?, height: r.u32()?, width: r.u32()? };
    let classes = r.u32()?;
    let at = r.pos;
    let len = r.u32()?;
    let arch = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Checkpoint { offset: at, msg: "architecture is not UTF-8".into() })?
        .to_owned();
    let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut model = ShadowModel::<F>::empty(input, classes, &parse_arch(&arch)?, spec)?;
    let mut opt = AdamState::new(&model);
    opt.step = step;
    for k in 0..model.params().len() {
        r.vec_into(&mut model.params_mut()[k].values)?;
        r.vec_into(&mut opt.m[k])?;
        r.vec_into(&mut opt.v[k])?;
    }
    for k in 0..model.running.len() {
        let rs = &mut model.running[k];
        r.vec_into(&mut rs.mean)?;
        r.vec_into(&mut rs.var)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint { offset: r.pos, msg: "trailing bytes".into() });
    }
    Ok((model, opt))
}

pub fn save_checkpoint<F: Real>(path: impl AsRef<Path>, model: &ShadowModel<F>, opt: &AdamState<F>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, opt)).map_err(|e| tnnsim_core::Error::io(path, e).into())
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<(ShadowModel<F>, AdamState<F>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(tnnsim_core::Error::io(path, e)))?;
    decode_checkpoint(&bytes)
}
