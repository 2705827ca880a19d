//! Named parameter blocks and the binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "NACFCKPT"
//! version      u32      1
//! meta_len     u32      length of the metadata JSON
//! meta         meta_len bytes, UTF-8 JSON
//! block_count  u32
//! per block:   name_len u16, name bytes, rows u32, cols u32,
//!              offset u64 (bytes from the start of the data section)
//! data         rows * cols f32 values per block, little-endian
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, NacfError, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NACFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
}

/// An ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

/// Handle to a block inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> BlockId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter block {name}");
        self.blocks.push(ParamBlock { name, value });
        BlockId(self.blocks.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn id(&self, name: &str) -> BlockId {
        self.find(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }

    pub fn get(&self, id: BlockId) -> &Matrix {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: BlockId) -> &mut Matrix {
        &mut self.blocks[id.0].value
    }

    pub fn by_name(&self, name: &str) -> &Matrix {
        self.get(self.id(name))
    }

    pub fn by_name_mut(&mut self, name: &str) -> &mut Matrix {
        let id = self.id(name);
        self.get_mut(id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len()).map(BlockId)
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.value.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.blocks
            .iter()
            .map(|b| Matrix::zeros(b.value.rows, b.value.cols))
            .collect()
    }

    /// SHA-256 of a block's shape and the little-endian bytes of its values.
    pub fn block_digest(&self, id: BlockId) -> [u8; 32] {
        let m = &self.blocks[id.0].value;
        let mut h = Sha256::new();
        h.update((m.rows as u64).to_le_bytes());
        h.update((m.cols as u64).to_le_bytes());
        for v in &m.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint
    /// round trip stores.
    pub fn round_to_f32(&mut self) {
        for b in &mut self.blocks {
            for v in &mut b.value.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Serialises parameters and a metadata string into the checkpoint layout.
pub fn encode_checkpoint(metadata: &str, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for b in params.blocks() {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.value.rows as u32).to_le_bytes());
        out.extend_from_slice(&(b.value.cols as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * b.value.data.len() as u64;
    }
    for b in params.blocks() {
        for v in &b.value.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(String, ParamSet), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|e| e.to_string())?
        .to_string();
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let offset = r.u64()? as usize;
        table.push((name, rows, cols, offset));
    }
    let data = &bytes[r.pos..];
    let mut params = ParamSet::new();
    for (name, rows, cols, offset) in table {
        let n = rows * cols;
        let raw = data
            .get(offset..offset + 4 * n)
            .ok_or_else(|| format!("block {name} out of bounds"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.find(&name).is_some() {
            return Err(format!("duplicate block {name}"));
        }
        params.add(name, Matrix::from_vec(rows, cols, values));
    }
    Ok((meta, params))
}

pub fn write_checkpoint(path: &Path, metadata: &str, params: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode_checkpoint(metadata, params)).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<(String, ParamSet)> {
    if !path.exists() {
        return Err(invalid(format!("checkpoint {} does not exist", path.display())));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes).map_err(|reason| NacfError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.add("w", Matrix::from_vec(1, 2, vec![1.0, -2.5]));
        let bytes = encode_checkpoint("{}", &p);
        assert_eq!(&bytes[..8], b"NACFCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(tail, [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_f32_rounding(
            vals in proptest::collection::vec(-1e3f64..1e3, 1..40),
            meta in "[a-z]{0,12}",
        ) {
            let mut p = ParamSet::new();
            let n = vals.len();
            p.add("a.w", Matrix::from_vec(1, n, vals.clone()));
            p.add("b", Matrix::from_vec(n, 1, vals.iter().map(|v| v * 0.5).collect()));
            let (m, q) = decode_checkpoint(&encode_checkpoint(&meta, &p)).unwrap();
            let mut rounded = p.clone();
            rounded.round_to_f32();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(q, rounded);
        }
    }
}
