//! Little-endian helpers shared by the checkpoint, dataset and world formats.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported {format} version {found} (supported: {supported})")]
    UnsupportedVersion { format: &'static str, found: u32, supported: u32 },
    #[error("malformed {format}: {reason}")]
    Malformed { format: &'static str, reason: String },
}

pub(crate) struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> io::Result<()> {
        vs.iter().try_for_each(|&v| self.f64(v))
    }

    /// u32 length prefix, then UTF-8 bytes.
    pub fn str(&mut self, s: &str) -> io::Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct BinReader<R: Read> {
    inner: R,
    format: &'static str,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R, format: &'static str) -> Self {
        Self { inner, format }
    }

    pub fn malformed(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Malformed { format: self.format, reason: reason.into() }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>, FormatError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                self.malformed("truncated")
            } else {
                FormatError::Io(e)
            }
        })?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let v = self.bytes(N)?;
        Ok(v.try_into().expect("length checked"))
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<(), FormatError> {
        let found = self.bytes(expected.len())?;
        if found != expected.as_bytes() {
            return Err(FormatError::BadMagic { expected });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<u32, FormatError> {
        let found = self.u32()?;
        if found != supported {
            return Err(FormatError::UnsupportedVersion { format: self.format, found, supported });
        }
        Ok(found)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        let raw = self.bytes(n)?;
        String::from_utf8(raw).map_err(|_| self.malformed("string is not UTF-8"))
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(self.malformed("trailing bytes")),
        }
    }
}
