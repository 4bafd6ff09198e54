//! Binary checkpoint: magic, version, model dims, then each layer as
//! `out, in` followed by row-major little-endian f64 weights and biases.

use std::io::{Read, Write};
use std::path::Path;

use super::{Affine, Layer, ModelDims, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AR2VPCKP";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(p: &ModelParams, w: &mut impl Write) -> Result<()> {
    let mut out = Vec::with_capacity(64 + 8 * p.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let d = &p.dims;
    for v in [
        d.input_channels,
        d.context_pool as usize,
        d.feature_channels,
        d.decoder_channels,
        d.num_classes,
        d.compression,
        Layer::ALL.len(),
    ] {
        put_u32(&mut out, v)?;
    }
    for a in p.layers() {
        put_u32(&mut out, a.out_dim)?;
        put_u32(&mut out, a.in_dim)?;
        for v in a.weight.iter().chain(&a.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let context_pool = |v: usize| match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Checkpoint(format!("bad context_pool flag {v}"))),
    };
    let dims = ModelDims {
        input_channels: c.u32()?,
        context_pool: context_pool(c.u32()?)?,
        feature_channels: c.u32()?,
        decoder_channels: c.u32()?,
        num_classes: c.u32()?,
        compression: c.u32()?,
    };
    dims.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid dims: {e}")))?;
    let layers = c.u32()?;
    if layers != Layer::ALL.len() {
        return Err(Error::Checkpoint(format!("expected {} layers, found {layers}", Layer::ALL.len())));
    }
    let mut p = ModelParams::zeros(dims)?;
    for a in p.layers_mut() {
        let (out_dim, in_dim) = (c.u32()?, c.u32()?);
        if (out_dim, in_dim) != (a.out_dim, a.in_dim) {
            return Err(Error::Checkpoint(format!(
                "layer shape {out_dim}x{in_dim} does not match dims ({}x{})",
                a.out_dim, a.in_dim
            )));
        }
        *a = Affine {
            in_dim,
            out_dim,
            weight: c.f64s(out_dim * in_dim)?,
            bias: c.f64s(out_dim)?,
        };
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(p)
}

pub fn save_checkpoint(p: &ModelParams, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(p, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
