//! Binary file formats. All multi-byte values are little-endian; all float
//! payloads are f32 (state is f64 in memory and narrows at this boundary).
//!
//! - NPC1: `NPC1`, u32 version, u64 point count, u32 feature dim; per point
//!   3xf32 position, f32 confidence, F x f32 features.
//! - DPTH: `DPTH`, u32 width, u32 height, then width*height f32 row-major;
//!   0.0 encodes "no depth".
//! - MSK3: `MSK3`, u64 count, then sorted u64 point indices.
//! - Images: binary PPM (P6, maxval 255) with round-half-away-from-zero
//!   quantization; masks are binary PGM (P5, maxval 255, 255 = masked).

use crate::error::{CliError, Result};
use nperf_core::math::Vec3;
use nperf_core::scene::{DepthMap, Mask2D, Mask3D, NeuralPointCloud};
use std::io::Write;
use std::path::Path;

const NPC1_MAGIC: &[u8; 4] = b"NPC1";
const NPC1_VERSION: u32 = 1;
const DPTH_MAGIC: &[u8; 4] = b"DPTH";
const MSK3_MAGIC: &[u8; 4] = b"MSK3";

fn data_err(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {what}", path.display()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| data_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| data_err(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(data_err(self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(data_err(
                self.path,
                format!("bad magic {:?}, expected {:?}", got, expected),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(data_err(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn write_npc1(path: &Path, cloud: &NeuralPointCloud) -> Result<()> {
    let f_dim = cloud.feature_dim();
    let mut out =
        Vec::with_capacity(20 + cloud.len() * (4 * (4 + f_dim)));
    out.extend_from_slice(NPC1_MAGIC);
    out.extend_from_slice(&NPC1_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&(f_dim as u32).to_le_bytes());
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(cloud.confidence(i) as f32).to_le_bytes());
        for &v in cloud.feature(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_npc1(path: &Path) -> Result<NeuralPointCloud> {
    let buf = read_file(path)?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    c.magic(NPC1_MAGIC)?;
    let version = c.u32()?;
    if version != NPC1_VERSION {
        return Err(data_err(path, format!("unsupported NPC1 version {version}")));
    }
    let count = c.u64()? as usize;
    let f_dim = c.u32()? as usize;
    if f_dim == 0 {
        return Err(data_err(path, "feature dim must be >= 1"));
    }
    let mut positions = Vec::with_capacity(count);
    let mut confidences = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * f_dim);
    for _ in 0..count {
        let x = c.f32()? as f64;
        let y = c.f32()? as f64;
        let z = c.f32()? as f64;
        positions.push(Vec3::new(x, y, z));
        confidences.push(c.f32()? as f64);
        for _ in 0..f_dim {
            features.push(c.f32()? as f64);
        }
    }
    c.done()?;
    NeuralPointCloud::new(positions, confidences, features, f_dim)
        .map_err(|e| data_err(path, e))
}

pub fn write_dpth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = Vec::with_capacity(12 + depth.raw().len() * 4);
    out.extend_from_slice(DPTH_MAGIC);
    out.extend_from_slice(&depth.width.to_le_bytes());
    out.extend_from_slice(&depth.height.to_le_bytes());
    for &v in depth.raw() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_dpth(path: &Path) -> Result<DepthMap> {
    let buf = read_file(path)?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    c.magic(DPTH_MAGIC)?;
    let width = c.u32()?;
    let height = c.u32()?;
    let n = (width as usize) * (height as usize);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(c.f32()? as f64);
    }
    c.done()?;
    DepthMap::new(width, height, values).map_err(|e| data_err(path, e))
}

pub fn write_msk3(path: &Path, mask: &Mask3D) -> Result<()> {
    let mut out = Vec::with_capacity(12 + mask.len() * 8);
    out.extend_from_slice(MSK3_MAGIC);
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    for &i in mask.indices() {
        out.extend_from_slice(&(i as u64).to_le_bytes());
    }
    write_file(path, &out)
}

/// `cloud_len` bounds the stored indices.
pub fn read_msk3(path: &Path, cloud_len: usize) -> Result<Mask3D> {
    let buf = read_file(path)?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    c.magic(MSK3_MAGIC)?;
    let count = c.u64()? as usize;
    let mut indices = Vec::with_capacity(count);
    let mut prev: Option<u64> = None;
    for _ in 0..count {
        let v = c.u64()?;
        if let Some(p) = prev {
            if v <= p {
                return Err(data_err(path, "indices must be strictly increasing"));
            }
        }
        prev = Some(v);
        indices.push(v as usize);
    }
    c.done()?;
    Mask3D::new(indices, cloud_len).map_err(|e| data_err(path, e))
}

/// Round-half-away-from-zero quantization of [0,1] to u8.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_ppm(path: &Path, pixels: &[[f64; 3]], width: u32, height: u32) -> Result<()> {
    if pixels.len() != (width as usize) * (height as usize) {
        return Err(data_err(path, "pixel buffer does not match raster"));
    }
    let mut out = Vec::with_capacity(20 + pixels.len() * 3);
    write!(&mut out, "P6\n{width} {height}\n255\n").unwrap();
    for px in pixels {
        for c in 0..3 {
            out.push(quantize(px[c]));
        }
    }
    write_file(path, &out)
}

/// Reads a P6 PPM into [0,1] floats.
pub fn read_ppm(path: &Path) -> Result<(Vec<[f64; 3]>, u32, u32)> {
    let buf = read_file(path)?;
    let (width, height, start) = parse_netpbm_header(&buf, b"P6", path)?;
    let n = (width as usize) * (height as usize);
    if buf.len() != start + n * 3 {
        return Err(data_err(path, "PPM payload size mismatch"));
    }
    let mut pixels = Vec::with_capacity(n);
    for i in 0..n {
        let o = start + i * 3;
        pixels.push([
            buf[o] as f64 / 255.0,
            buf[o + 1] as f64 / 255.0,
            buf[o + 2] as f64 / 255.0,
        ]);
    }
    Ok((pixels, width, height))
}

pub fn write_pgm_mask(path: &Path, mask: &Mask2D) -> Result<()> {
    let mut out = Vec::with_capacity(20 + (mask.width as usize) * (mask.height as usize));
    write!(&mut out, "P5\n{} {}\n255\n", mask.width, mask.height).unwrap();
    for v in 0..mask.height {
        for u in 0..mask.width {
            out.push(if mask.contains(u, v) { 255 } else { 0 });
        }
    }
    write_file(path, &out)
}

/// Reads a P5 PGM as a mask; any value >= 128 counts as masked.
pub fn read_pgm_mask(path: &Path) -> Result<Mask2D> {
    let buf = read_file(path)?;
    let (width, height, start) = parse_netpbm_header(&buf, b"P5", path)?;
    let n = (width as usize) * (height as usize);
    if buf.len() != start + n {
        return Err(data_err(path, "PGM payload size mismatch"));
    }
    let mut mask = Mask2D::empty(width, height);
    for (i, &b) in buf[start..].iter().enumerate() {
        if b >= 128 {
            mask.set((i as u32) % width, (i as u32) / width, true);
        }
    }
    Ok(mask)
}

fn parse_netpbm_header(buf: &[u8], magic: &[u8; 2], path: &Path) -> Result<(u32, u32, usize)> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(data_err(path, "bad netpbm magic"));
    }
    // magic, whitespace, width, whitespace, height, whitespace, maxval,
    // single whitespace byte, payload. No comment support: these files are
    // only ever produced by this tool.
    let mut pos = 2usize;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(data_err(path, "malformed netpbm header"));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| data_err(path, "malformed netpbm header"))?;
    }
    if fields[2] != 255 {
        return Err(data_err(path, "netpbm maxval must be 255"));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(data_err(path, "malformed netpbm header"));
    }
    Ok((fields[0], fields[1], pos + 1))
}
