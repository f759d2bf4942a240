//! `DFT1` named-tensor container.
//!
//! Layout (all integers little-endian `u32`): magic `b"DFT1"`, entry count,
//! then per entry the name length, UTF-8 name, rank, extents, and the
//! payload as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "entry {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    /// Stores arbitrary bytes (e.g. a JSON manifest) one byte per value.
    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            name: name.into(),
            shape: vec![bytes.len()],
            data: bytes.iter().map(|&b| f32::from(b)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("entry {} does not hold bytes", self.name)))
                }
            })
            .collect()
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_container(w: &mut impl Write, entries: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, entries.len())?;
    for e in entries {
        put_u32(w, e.name.len())?;
        w.write_all(e.name.as_bytes())?;
        put_u32(w, e.shape.len())?;
        for &d in &e.shape {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(e.data.len() * 4);
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_container(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("missing DFT1 magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = get_u32(r)?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("entry name: {e}")))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated payload for {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(NamedTensor { name, shape, data });
    }
    Ok(entries)
}
