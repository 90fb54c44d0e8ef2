//! Binary checkpoints: `IGDMCKPT`, a version byte, the architecture, then
//! little-endian `f64` parameters (weights row-major, then bias, per layer).

use std::fs;
use std::path::Path;

use igdm_core::model::Layer;
use igdm_core::{Activation, Architecture, Mlp, ParamSet, Tensor};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"IGDMCKPT";
pub const VERSION: u8 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Softplus => 1,
    }
}

pub fn encode(arch: &Architecture, params: &ParamSet) -> Result<Vec<u8>> {
    params.check_against(arch)?;
    let mut out = Vec::with_capacity(32 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(arch.input_dim);
    put(arch.hidden.len());
    for &h in &arch.hidden {
        put(h);
    }
    put(arch.num_classes);
    out.push(activation_tag(arch.activation));
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(LabError::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated checkpoint"),
            )),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).unwrap_or(usize::MAX))?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Mlp> {
    let mut c = Cursor { path, bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(LabError::format(path, "not a checkpoint (bad magic)"));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(LabError::format(
            path,
            format!("unsupported checkpoint version {version}, expected {VERSION}"),
        ));
    }
    let input_dim = c.u32()?;
    let depth = c.u32()?;
    if depth > bytes.len() {
        return Err(LabError::format(path, "implausible layer count"));
    }
    let hidden = (0..depth).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let num_classes = c.u32()?;
    let activation = match c.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Softplus,
        t => return Err(LabError::format(path, format!("unknown activation tag {t}"))),
    };
    let arch = Architecture::new(input_dim, hidden, num_classes, activation);
    arch.validate().map_err(|e| LabError::format(path, e.to_string()))?;
    let mut layers = Vec::new();
    for (fan_in, fan_out) in arch.layer_dims() {
        let weight = Tensor::matrix(fan_out, fan_in, c.f64s(fan_in * fan_out)?);
        let bias = Tensor::vector(c.f64s(fan_out)?);
        layers.push(Layer { weight, bias });
    }
    if c.pos != bytes.len() {
        return Err(LabError::format(path, "trailing bytes after parameters"));
    }
    Ok(Mlp::new(arch, ParamSet { layers })?)
}

pub fn save_checkpoint(model: &Mlp, path: &Path) -> Result<()> {
    let bytes = encode(&model.arch, &model.params)?;
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes, path)
}
