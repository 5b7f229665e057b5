use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Little-endian reader that reports short reads as [`Error::Truncated`].
pub(crate) struct LeReader {
    inner: BufReader<File>,
    path: PathBuf,
    len: u64,
    pos: u64,
}

impl LeReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        Ok(Self {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
            len,
            pos: 0,
        })
    }

    pub fn remaining(&self) -> u64 {
        self.len - self.pos
    }

    pub fn bytes(&mut self, n: usize, context: &str) -> Result<Vec<u8>> {
        if (n as u64) > self.remaining() {
            return Err(self.truncated(context));
        }
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.pos += n as u64;
        Ok(buf)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let b = self.bytes(4, "magic")?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected,
                found,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, context: &str) -> Result<u8> {
        Ok(self.bytes(1, context)?[0])
    }

    pub fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.bytes(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, context: &str) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4, context)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, context: &str) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8, context)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn skip(&mut self, n: u64, context: &str) -> Result<()> {
        if n > self.remaining() {
            return Err(self.truncated(context));
        }
        self.inner
            .seek_relative(n as i64)
            .map_err(|e| Error::io(&self.path, e))?;
        self.pos += n;
        Ok(())
    }

    pub fn truncated(&self, context: &str) -> Error {
        Error::Truncated {
            path: self.path.clone(),
            context: context.to_string(),
        }
    }

    pub fn malformed(&self, context: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.clone(),
            context: context.into(),
        }
    }
}

/// Buffered little-endian writer.
pub(crate) struct LeWriter {
    inner: BufWriter<File>,
    path: PathBuf,
}

impl LeWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}
