//! Binary PPM (RGB, 8-bit), PGM (16-bit) and DFT1 tensor files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_container, write_container, NamedTensor, Tensor};

/// Default fixed-point scale of 16-bit depth maps (1/256 unit resolution).
pub const DEPTH_SCALE: f64 = 256.0;

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII header".into()))
}

fn read_header(r: &mut impl BufRead, magic: &str) -> Result<(usize, usize, u32)> {
    let m = header_token(r)?;
    if m != magic {
        return Err(Error::Format(format!("expected {magic} magic, found {m:?}")));
    }
    let mut num = |what: &str| -> Result<u32> {
        let t = header_token(r)?;
        t.parse()
            .map_err(|_| Error::Format(format!("bad {what} {t:?}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err(Error::Format(format!("bad dimensions {w}x{h} (maxval {max})")));
    }
    Ok((w as usize, h as usize, max))
}

/// Writes a `[3, H, W]` image with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let wrap = |e| Error::file(path, e);
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("PPM image must be [3, H, W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape(format!("PPM image must have 3 channels, got {c}")));
    }
    let d = image.data();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = BufWriter::new(File::create(path).map_err(wrap)?);
    f.write_all(&buf).map_err(wrap)?;
    f.flush().map_err(wrap)
}

/// Reads a binary PPM into `[3, H, W]` with values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let wrap = |e: Error| Error::file(path, e);
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    let (w, h, max) = read_header(&mut r, "P6").map_err(wrap)?;
    if max > 255 {
        return Err(Error::file(path, "only 8-bit PPM is supported"));
    }
    let mut raw = vec![0u8; 3 * w * h];
    r.read_exact(&mut raw)
        .map_err(|e| Error::file(path, format!("truncated pixel data: {e}")))?;
    let scale = 1.0 / max as f32;
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = f32::from(px[ch]) * scale;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes an `[H, W]`-shaped map as 16-bit PGM storing `round(v · scale)`.
/// Non-positive or non-finite values are stored as 0 (missing).
pub fn write_pgm16(path: &Path, values: &[f32], width: usize, height: usize, scale: f64) -> Result<()> {
    let wrap = |e| Error::file(path, e);
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "{} values for a {width}x{height} map",
            values.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = if v.is_finite() && v > 0.0 {
            (f64::from(v) * scale).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = BufWriter::new(File::create(path).map_err(wrap)?);
    f.write_all(&buf).map_err(wrap)?;
    f.flush().map_err(wrap)
}

/// Reads a 16-bit PGM, dividing by `scale`; returns `(values, width, height)`.
/// Stored zeros stay 0.
pub fn read_pgm16(path: &Path, scale: f64) -> Result<(Vec<f32>, usize, usize)> {
    let wrap = |e: Error| Error::file(path, e);
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    let (w, h, max) = read_header(&mut r, "P5").map_err(wrap)?;
    let wide = max > 255;
    let mut raw = vec![0u8; w * h * if wide { 2 } else { 1 }];
    r.read_exact(&mut raw)
        .map_err(|e| Error::file(path, format!("truncated pixel data: {e}")))?;
    let values = if wide {
        raw.chunks_exact(2)
            .map(|b| (f64::from(u16::from_be_bytes([b[0], b[1]])) / scale) as f32)
            .collect()
    } else {
        raw.iter().map(|&b| (f64::from(b) / scale) as f32).collect()
    };
    Ok((values, w, h))
}

pub fn write_tensor(path: &Path, name: &str, t: &Tensor<f32>) -> Result<()> {
    let entry = NamedTensor::new(name, t.shape().to_vec(), t.to_vec())?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    write_container(&mut w, &[entry]).map_err(|e| Error::file(path, e))?;
    w.flush().map_err(|e| Error::file(path, e))
}

/// Reads the entry called `name` from a DFT1 file.
pub fn read_tensor(path: &Path, name: &str) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    let entries = read_container(&mut r).map_err(|e| Error::file(path, e))?;
    let e = entries
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::file(path, format!("no entry named {name}")))?;
    Tensor::from_vec(&e.shape, e.data)
}
