//! Named parameter tensors and their binary record format.
//!
//! A parameter blob is `"RSTR"`, a `u32` version, a `u32` record count and
//! then per record: `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! the `f64` values, all little-endian.

use std::path::Path;

use transem_tensor::Tensor;

use crate::error::{CoreError, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"RSTR";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(CoreError::invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(CoreError::invalid(format!(
                    "parameter layout mismatch: {na}{:?} vs {nb}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.numel());
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a blob starting at `reader`'s position and advances it.
    pub fn read_from(reader: &mut ByteReader<'_>) -> Result<Self> {
        if reader.take(4)? != PARAMS_MAGIC {
            return Err(reader.error("bad parameter magic"));
        }
        let version = reader.u32()?;
        if version != PARAMS_VERSION {
            return Err(reader.error(&format!("unsupported parameter version {version}")));
        }
        let count = reader.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = reader.u32()? as usize;
            let name = std::str::from_utf8(reader.take(len)?)
                .map_err(|_| reader.error("parameter name is not UTF-8"))?
                .to_string();
            let ndim = reader.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| reader.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= reader.remaining()))
                .ok_or_else(|| reader.error("parameter record overruns the blob"))?;
            let data = (0..numel)
                .map(|_| reader.f64())
                .collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(&shape, data).map_err(|e| reader.error(&e.to_string()))?;
            set.push(name, tensor);
        }
        Ok(set)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = ByteReader::new(bytes, "RSTR", path);
        let set = Self::read_from(&mut reader)?;
        reader.finish()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(CoreError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CoreError::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Little-endian cursor over a binary artifact, producing format errors
/// tagged with the artifact kind and path.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], kind: &'static str, path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            kind,
            path,
        }
    }

    pub fn error(&self, reason: &str) -> CoreError {
        CoreError::Format {
            kind: self.kind,
            path: self.path.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error("unexpected end of data"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error("trailing bytes"));
        }
        Ok(())
    }
}
