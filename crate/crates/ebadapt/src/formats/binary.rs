//! Little-endian framing shared by the checkpoint and index files.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Reader { path, buf, at: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated at byte {} (wanted {n} more)", self.at))),
        }
    }

    pub fn magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(Error::format(self.path, "bad magic bytes"));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("length {v} too large")))
    }

    pub fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let n = self.u64()?;
        let bytes = self.take(n)?;
        serde_json::from_slice(bytes).map_err(|e| Error::format(self.path, format!("header: {e}")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 string"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: usize) {
        self.bytes(&(v as u64).to_le_bytes());
    }

    pub fn json<T: serde::Serialize>(&mut self, v: &T) {
        let s = serde_json::to_vec(v).expect("header serializes");
        self.u64(s.len());
        self.bytes(&s);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}
