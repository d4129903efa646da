//! `TTMT` named-tensor container.
//!
//! Layout (little-endian): magic `TTMT`, version `u32 = 1`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64),
//! ndim `u32`, dims `u32 × ndim`, row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::tensor::Tensor;
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"TTMT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    entries: Vec<(String, Entry)>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.insert(name.into(), Entry::F32(t));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.insert(name.into(), Entry::F64(t));
    }

    fn insert(&mut self, name: String, e: Entry) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = e,
            None => self.entries.push((name, e)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(Entry::F64(_)) => Err(Error::Format(format!("entry {name} is f64, expected f32"))),
            None => Err(Error::Format(format!("missing entry {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let (dtype, shape) = match e {
                Entry::F32(t) => (0u8, t.shape()),
                Entry::F64(t) => (1u8, t.shape()),
            };
            w.write_all(&[dtype])?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut payload = Vec::new();
            match e {
                Entry::F32(t) => t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                Entry::F64(t) => t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a TTMT container".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut bundle = TensorBundle::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| Error::Format(format!("entry name: {e}")))?
                .to_string();
            let dtype = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let entry = match dtype {
                0 => {
                    let bytes = cur.take(numel * 4)?;
                    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::F32(Tensor::new(&shape, data)?)
                }
                1 => {
                    let bytes = cur.take(numel * 8)?;
                    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::F64(Tensor::new(&shape, data)?)
                }
                other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
            };
            bundle.insert(name, entry);
        }
        if cur.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - cur.pos)));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
