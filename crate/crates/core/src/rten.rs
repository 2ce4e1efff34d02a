//! RTEN: a small little-endian container for named `f32` tensors.
//!
//! Layout:
//!
//! ```text
//! magic "RTEN" | version u32 = 1 | count u32
//! per entry: name_len u8 | name | dtype u8 (1 = f32) | rank u8
//!            | rank x extent u32 | numel x f32
//! ```

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"RTEN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a file from entries, enforcing the name rules.
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut f = Self::new();
        for (name, t) in entries {
            f.push(name, t)?;
        }
        Ok(f)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        check_name(&name)?;
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact number of bytes `serialize` will produce.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|(n, t)| 1 + n.len() + 2 + 4 * t.rank() + 4 * t.numel())
                .sum::<usize>()
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::EmptyName);
    }
    if name.len() > 255 {
        return Err(Error::NameTooLong(name.len()));
    }
    Ok(())
}

pub fn serialize(file: &TensorFile) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    for (name, _) in &file.entries {
        check_name(name)?;
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }

    let mut out = Vec::with_capacity(file.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(file.entries.len() as u32).to_le_bytes());
    for (name, t) in &file.entries {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<TensorFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;

    let mut file = TensorFile::new();
    for _ in 0..count {
        let name_len = r.u8()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::InvalidName)?
            .into();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let rank = r.u8()?;
        if rank as usize > MAX_RANK {
            return Err(Error::RankTooLarge(rank));
        }
        if rank == 0 {
            return Err(Error::InvalidShape(format!("rank 0 for '{}'", name)));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::ZeroExtent(name));
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let payload = r.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        file.push(name, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(file)
}
