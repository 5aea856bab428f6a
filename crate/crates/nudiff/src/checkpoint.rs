//! `NDCK` network checkpoints.
//!
//! Layout (little-endian): magic `NDCK`, `u32` version, `u8` conditional flag,
//! the network shape as `u32` fields (levels, each channel width, attention
//! level count, each attention level, resolution, res_blocks, spade_hidden),
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name, `u32`
//! rank, `u32` dims, `f32` values.

use std::fs;
use std::path::Path;

use nudiff_core::nn::{NetworkShape, Param, ParamStore, Unet};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDCK";
pub const VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(net: &Unet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put(&mut out, VERSION as usize);
    out.push(u8::from(net.is_conditional()));
    let s = net.shape();
    put(&mut out, s.levels);
    s.channels.iter().for_each(|&c| put(&mut out, c));
    put(&mut out, s.attn_levels.len());
    s.attn_levels.iter().for_each(|&l| put(&mut out, l));
    put(&mut out, s.resolution);
    put(&mut out, s.res_blocks);
    put(&mut out, s.spade_hidden);
    let params = net.params().params();
    put(&mut out, params.len());
    for p in params {
        put(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put(&mut out, p.shape.len());
        p.shape.iter().for_each(|&d| put(&mut out, d));
        p.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn list(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32()).collect()
    }
}

/// Parses a checkpoint; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Unet<f32>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected NDCK"));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let conditional = match c.take(1)?[0] {
        0 => false,
        1 => true,
        v => return Err(Error::format(path, format!("bad conditional flag {v}"))),
    };
    let levels = c.u32()?;
    if levels > 64 {
        return Err(Error::format(path, format!("implausible level count {levels}")));
    }
    let channels = c.list(levels)?;
    let n_attn = c.u32()?;
    if n_attn > levels {
        return Err(Error::format(path, "more attention levels than levels"));
    }
    let attn_levels = c.list(n_attn)?;
    let shape = NetworkShape {
        levels,
        channels,
        attn_levels,
        resolution: c.u32()?,
        res_blocks: c.u32()?,
        spade_hidden: c.u32()?,
    };
    let mut net = Unet::<f32>::new(shape, conditional, 0).map_err(|e| Error::format(path, e.to_string()))?;
    let count = c.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32()?;
        let shape = c.list(rank)?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, "tensor size overflows"))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor size overflows"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        params.push(Param { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    let store = ParamStore::from_params(params)?;
    net.load_params(store).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(net)
}

pub fn save(net: &Unet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Unet<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
