//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "STDIMPRM"
//! version    u32      1
//! meta_len   u32      byte length of the metadata block
//! meta       UTF-8    free-form text (encoder checkpoints store their config here)
//! n_params   u32
//! n_params × {
//!     name_len u16, name UTF-8,
//!     ndim u8, dims u32 × ndim,
//!     values f32 × prod(dims)
//! }
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"STDIMPRM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar, M: Parameterized<T> + ?Sized>(metadata: impl Into<String>, model: &M) -> Self {
        Self {
            metadata: metadata.into(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name().to_string(), p.value().cast::<f32>()))
                .collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::format("checkpoint", "parameter name too long"));
            }
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.ndim() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = read_u32(r)? as usize;
        let metadata = String::from_utf8(read_vec(r, meta_len)?)
            .map_err(|_| Error::format("checkpoint", "metadata is not UTF-8"))?;
        let n = read_u32(r)? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let name = String::from_utf8(read_vec(r, u16::from_le_bytes(len) as usize)?)
                .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
            let mut nd = [0u8; 1];
            read_exact(r, &mut nd)?;
            let mut shape = Vec::with_capacity(nd[0] as usize);
            for _ in 0..nd[0] {
                shape.push(read_u32(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = read_vec(r, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            params.push((name, t));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes after last record"));
        }
        Ok(Self { metadata, params })
    }

    /// Copies values into `model`, matching parameters by position and name.
    pub fn load_into<T: Scalar, M: Parameterized<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut targets = model.params_mut();
        if targets.len() != self.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} records for a model with {} parameters", self.params.len(), targets.len()),
            ));
        }
        for (p, (name, t)) in targets.iter_mut().zip(&self.params) {
            if p.name() != name {
                return Err(Error::format(
                    "checkpoint",
                    format!("record `{name}` where `{}` was expected", p.name()),
                ));
            }
            p.set_value(t.cast())?;
        }
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("checkpoint", "truncated file"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(len as u64).read_to_end(&mut v)?;
    if v.len() != len {
        return Err(Error::format("checkpoint", "truncated file"));
    }
    Ok(v)
}
