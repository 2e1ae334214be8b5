//! Index file: magic, version, `N`, `d`, metadata JSON, row-major
//! little-endian f32 vectors, then the length-prefixed id table.

use std::path::Path;

use ebadapt_core::retrieval::{DenseIndex, IndexMeta};

use super::binary::{Reader, Writer};
use super::{read_file, write_file};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EBADINDX";
pub const INDEX_VERSION: u32 = 1;

pub fn encode_index(index: &DenseIndex) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(INDEX_VERSION);
    w.u64(index.len());
    w.u64(index.dim());
    w.json(index.meta());
    w.f32s(index.data());
    for id in index.ids() {
        w.string(id);
    }
    w.buf
}

pub fn decode_index(path: &Path, bytes: &[u8]) -> Result<DenseIndex> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::format(path, format!("unsupported index version {version}")));
    }
    let n = r.u64()?;
    let d = r.u64()?;
    let meta: IndexMeta = r.json()?;
    if let Some(c) = &meta.compression {
        if c.output_dim() != d {
            return Err(Error::format(path, format!("compression yields dim {} but rows have {d}", c.output_dim())));
        }
    }
    let data = r.f32s(n.checked_mul(d).ok_or_else(|| Error::format(path, "size overflow"))?)?;
    let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    DenseIndex::from_parts(meta, d, ids, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_index(path: &Path, index: &DenseIndex) -> Result<()> {
    write_file(path, &encode_index(index))
}

pub fn load_index(path: &Path) -> Result<DenseIndex> {
    decode_index(path, &read_file(path)?)
}
