//! Image, instance-map and structure files.
//!
//! Images are 8-bit RGB PNGs mapped linearly onto `[-1, 1]`
//! (`b -> b / 127.5 - 1`). Instance maps are 16-bit grayscale PNGs holding
//! the instance id of each pixel. Structures use the `NSTR` binary layout:
//! the magic bytes, little-endian `u32` height, width and channel count (3),
//! then the `f32` payload channel-major.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use nudiff_core::structure::NucleiStructure;
use nudiff_core::{ImageRaster, InstanceMap, Raster};

use crate::{Error, Result};

pub const NSTR_MAGIC: &[u8; 4] = b"NSTR";

pub fn byte_to_unit(b: u8) -> f32 {
    f32::from(b) / 127.5 - 1.0
}

/// Nearest byte for a value in `[-1, 1]` (values outside are clamped).
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::format(path, format!("malformed PNG: {e}"));
    let mut reader = png::Decoder::new(Cursor::new(raw)).read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut bytes = vec![0u8; size];
    let info = reader.next_frame(&mut bytes).map_err(bad)?;
    bytes.truncate(info.line_size * info.height as usize);
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    let err = |e: png::EncodingError| Error::format(path, format!("PNG encoding failed: {e}"));
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Balanced);
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(data).map_err(err)?;
        writer.finish().map_err(err)?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageRaster> {
    let path = path.as_ref();
    let d = decode_png(path)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("expected 8-bit RGB, found {:?} at {:?}", d.color, d.depth)));
    }
    let n = d.width * d.height;
    let mut r = Raster::zeros(3, d.height, d.width);
    for (i, px) in d.bytes.chunks_exact(3).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            r.data[c * n + i] = byte_to_unit(b);
        }
    }
    Ok(ImageRaster::new(r)?)
}

pub fn write_image(img: &ImageRaster, path: impl AsRef<Path>) -> Result<()> {
    let r = img.raster();
    let n = r.plane_len();
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(unit_to_byte(r.data[c * n + i]));
        }
    }
    encode_png(path.as_ref(), r.width, r.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Reads a 16-bit (or 8-bit) grayscale instance map.
pub fn read_instance(path: impl AsRef<Path>) -> Result<InstanceMap> {
    let path = path.as_ref();
    let d = decode_png(path)?;
    if d.color != png::ColorType::Grayscale {
        return Err(Error::format(path, format!("expected single-channel PNG, found {:?}", d.color)));
    }
    let labels: Vec<u32> = match d.depth {
        png::BitDepth::Sixteen => d.bytes.chunks_exact(2).map(|b| u32::from(u16::from_be_bytes([b[0], b[1]]))).collect(),
        png::BitDepth::Eight => d.bytes.iter().map(|&b| u32::from(b)).collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(InstanceMap::from_vec(d.height, d.width, labels)?)
}

pub fn write_instance(inst: &InstanceMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if inst.max_id() > u32::from(u16::MAX) {
        return Err(Error::format(path, format!("instance id {} exceeds 65535", inst.max_id())));
    }
    let bytes: Vec<u8> = inst.labels.iter().flat_map(|&l| (l as u16).to_be_bytes()).collect();
    encode_png(path, inst.width, inst.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn encode_nstr(ns: &NucleiStructure) -> Vec<u8> {
    let r = ns.raster();
    let mut out = Vec::with_capacity(16 + 4 * r.data.len());
    out.extend_from_slice(NSTR_MAGIC);
    for v in [r.height, r.width, r.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an `NSTR` payload; `path` only labels errors.
pub fn decode_nstr(bytes: &[u8], path: &Path) -> Result<NucleiStructure> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != NSTR_MAGIC {
        return Err(Error::format(path, "bad magic, expected NSTR"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != 3 {
        return Err(Error::format(path, format!("channel count C = {c}, C ≠ 3")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("truncated payload: {} bytes for {h}x{w}x3, expected {expected}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    let raster = Raster::from_vec(3, h, w, data)?;
    Ok(NucleiStructure::new(raster)?)
}

pub fn read_structure(path: impl AsRef<Path>) -> Result<NucleiStructure> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nstr(&bytes, path)
}

pub fn write_structure(ns: &NucleiStructure, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_nstr(ns)).map_err(|e| Error::io(path, e))
}

/// Creates `dir` and its parents.
pub fn ensure_dir(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Files in `dir` with the given extension, sorted by name.
pub fn list_files(dir: impl AsRef<Path>, extension: &str) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == extension))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints_and_inverse() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
        assert!((1..=255u8).all(|b| byte_to_unit(b) > byte_to_unit(b - 1)));
    }

    #[test]
    fn nstr_size_and_errors() {
        let ns = NucleiStructure::new(Raster::zeros(3, 2, 2)).unwrap();
        let bytes = encode_nstr(&ns);
        assert_eq!(bytes.len(), 4 + 12 + 48);
        let p = Path::new("x.nstr");
        assert_eq!(decode_nstr(&bytes, p).unwrap(), ns);
        let mut four = bytes.clone();
        four[12] = 4;
        assert!(decode_nstr(&four, p).unwrap_err().to_string().contains("C ≠ 3"));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_nstr(&magic, p).is_err());
        assert!(decode_nstr(&bytes[..bytes.len() - 1], p).is_err());
        assert!(decode_nstr(&bytes[..10], p).is_err());
    }
}
