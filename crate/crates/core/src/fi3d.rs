//! FI3D little-endian block container.
//!
//! Layout: magic `FI3D`, `u16` version (= 1), `u32` block count, then per
//! block: `u16` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = u8,
//! 2 = u32), `u8` ndim, `ndim` × `u64` dims, raw element data.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FI3D";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("format error: {0}")]
    Format(String),
    #[error("missing block `{0}`")]
    MissingBlock(String),
    #[error("block `{name}`: {msg}")]
    BadBlock { name: String, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl BlockData {
    fn dtype_code(&self) -> u8 {
        match self {
            BlockData::F32(_) => 0,
            BlockData::U8(_) => 1,
            BlockData::U32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlockData::F32(v) => v.len(),
            BlockData::U8(v) => v.len(),
            BlockData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: BlockData,
}

impl Block {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: BlockData) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self::new(
            name,
            dims.iter().map(|&d| d as u64).collect(),
            BlockData::F32(data),
        )
    }

    pub fn u8(name: impl Into<String>, dims: &[usize], data: Vec<u8>) -> Self {
        Self::new(
            name,
            dims.iter().map(|&d| d as u64).collect(),
            BlockData::U8(data),
        )
    }

    pub fn u32(name: impl Into<String>, dims: &[usize], data: Vec<u32>) -> Self {
        Self::new(
            name,
            dims.iter().map(|&d| d as u64).collect(),
            BlockData::U32(data),
        )
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    fn bad(&self, msg: impl Into<String>) -> ContainerError {
        ContainerError::BadBlock {
            name: self.name.clone(),
            msg: msg.into(),
        }
    }

    /// f32 payload, checked against an expected rank.
    pub fn as_f32(&self, ndim: usize) -> Result<&[f32], ContainerError> {
        if self.dims.len() != ndim {
            return Err(self.bad(format!("expected {ndim} dims, found {}", self.dims.len())));
        }
        match &self.data {
            BlockData::F32(v) => Ok(v),
            _ => Err(self.bad("expected f32 data")),
        }
    }

    pub fn as_u8(&self, ndim: usize) -> Result<&[u8], ContainerError> {
        if self.dims.len() != ndim {
            return Err(self.bad(format!("expected {ndim} dims, found {}", self.dims.len())));
        }
        match &self.data {
            BlockData::U8(v) => Ok(v),
            _ => Err(self.bad("expected u8 data")),
        }
    }

    pub fn as_u32(&self, ndim: usize) -> Result<&[u32], ContainerError> {
        if self.dims.len() != ndim {
            return Err(self.bad(format!("expected {ndim} dims, found {}", self.dims.len())));
        }
        match &self.data {
            BlockData::U32(v) => Ok(v),
            _ => Err(self.bad("expected u32 data")),
        }
    }
}

/// An ordered set of named blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, block: Block) -> &mut Self {
        self.blocks.push(block);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Block, ContainerError> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingBlock(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ContainerError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            let expected: u64 = b.dims.iter().product();
            if expected != b.data.len() as u64 {
                return Err(b.bad(format!(
                    "dims {:?} imply {expected} elements, data has {}",
                    b.dims,
                    b.data.len()
                )));
            }
            let name = b.name.as_bytes();
            let name_len =
                u16::try_from(name.len()).map_err(|_| b.bad("name longer than 65535 bytes"))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[b.data.dtype_code(), b.dims.len() as u8])?;
            for d in &b.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &b.data {
                BlockData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                BlockData::U8(v) => w.write_all(v)?,
                BlockData::U32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(ContainerError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(ContainerError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ContainerError::Format("block name is not UTF-8".into()))?
                .to_string();
            let [dtype, ndim] = r.array::<2>()?;
            let mut dims = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.array()?));
            }
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| ContainerError::Format(format!("block `{name}` too large")))?;
            let elem = match dtype {
                0 | 2 => 4,
                1 => 1,
                other => {
                    return Err(ContainerError::Format(format!(
                        "block `{name}`: unknown dtype code {other}"
                    )))
                }
            };
            let nbytes = count
                .checked_mul(elem)
                .ok_or_else(|| ContainerError::Format(format!("block `{name}` too large")))?;
            let raw = r.take(nbytes)?;
            let data = match dtype {
                0 => BlockData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                1 => BlockData::U8(raw.to_vec()),
                _ => BlockData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
            };
            blocks.push(Block { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Format(format!(
                "{} trailing bytes after last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { blocks })
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ContainerError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ContainerError::Format("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        let s = self.take(N)?;
        let mut out = [0u8; N];
        out.copy_from_slice(s);
        Ok(out)
    }
}
