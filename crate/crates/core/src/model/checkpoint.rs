//! Binary checkpoint of every named tensor of a store.
//!
//! Layout (little-endian): magic `LYV5`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, u8 dtype code, u8 rank,
//! u32 per dimension and the raw payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: [u8; 4] = *b"LYV5";
pub const VERSION: u32 = 1;

pub fn encode<T: Float>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        T::to_le_bytes_vec(p.value.data(), &mut out);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint, converting payloads to `T` if the stored dtype differs.
pub fn decode<T: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or(Error::UnknownDtype(code))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * dtype.size(), &format!("payload of {name}"))?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => payload.chunks(d.size()).map(T::from_le_chunk).collect(),
            DType::F32 => payload.chunks(4).map(|c| T::from_f64_lossy(f32::from_le_chunk(c) as f64)).collect(),
            DType::F64 => payload.chunks(8).map(|c| T::from_f64_lossy(f64::from_le_chunk(c))).collect(),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Copies decoded tensors into `store`; names and shapes must match exactly.
pub fn restore<T: Float>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!("{} tensors in file, model has {}", tensors.len(), store.len())));
    }
    for (name, t) in tensors {
        let id = store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let want = store.value(id).shape();
        if want != t.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} in file, model expects {want:?}", t.shape())));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

/// Class count implied by the first head convolution in a decoded checkpoint.
pub fn class_count<T: Float>(tensors: &[(String, Tensor<T>)]) -> Option<usize> {
    let (_, w) = tensors.iter().find(|(n, _)| n == "detect.m.0.conv.weight")?;
    let per_anchor = w.shape().first()? / super::head::ANCHORS_PER_LEVEL;
    per_anchor.checked_sub(5).filter(|&nc| nc > 0)
}

pub fn save<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Float>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    restore(store, decode(&bytes)?)
}
