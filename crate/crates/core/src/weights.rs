//! Binary weights container.
//!
//! Layout (little-endian): magic `CAIRW1`, `u32` version, `u64` entry count,
//! then per entry `u32` name length, UTF-8 name, `u8` rank, `u64` dims,
//! `u8` dtype, raw payload; a trailing CRC32 covers every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CAIRW1";
pub const VERSION: u32 = 1;

/// A tensor in either storage precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_typed<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Convert to `T`; exact when the precisions agree.
    pub fn to_typed<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub type Entry = (String, AnyTensor);

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::contract(
                "weights encode",
                format!("duplicate entry `{name}`"),
            ));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.dtype() as u8);
        match t {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptWeights(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn typed<T: Real>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let data = bytes
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::CorruptWeights("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptWeights("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::CorruptWeights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptWeights(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u64()?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptWeights("entry name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::CorruptWeights(format!("duplicate entry `{name}`")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_tag(r.u8()?)
            .ok_or_else(|| Error::CorruptWeights(format!("unknown dtype for `{name}`")))?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::CorruptWeights(format!("oversized entry `{name}`")))?;
        let payload = r.take(numel)?;
        let t = match dtype {
            DType::F32 => AnyTensor::F32(typed(payload, &shape)?),
            DType::F64 => AnyTensor::F64(typed(payload, &shape)?),
        };
        entries.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptWeights(
            "trailing bytes after last entry".into(),
        ));
    }
    Ok(entries)
}

pub fn write_file(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parameters in store order, in their own precision.
pub fn store_entries<T: Real>(store: &ParamStore<T>) -> Vec<Entry> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), AnyTensor::from_typed(t)))
        .collect()
}

/// Fill `store` from `entries`. Every parameter must be present with the
/// expected shape; entries not naming a parameter are ignored.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &AnyTensor> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        let name = store.name(*id).to_string();
        let t = by_name
            .get(name.as_str())
            .ok_or(Error::MissingParam(name.clone()))?;
        let expected = store.get(*id).shape();
        if expected != t.shape() {
            return Err(Error::ParamShape {
                name,
                expected: expected.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    for id in ids {
        let t = by_name[store.name(id)].to_typed::<T>();
        store.set(id, t)?;
    }
    Ok(())
}

pub fn save_store<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_file(path, &store_entries(store))
}

pub fn load_store<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    load_into(store, &read_file(path)?)
}
