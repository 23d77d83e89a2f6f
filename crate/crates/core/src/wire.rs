//! Length-prefixed byte framing shared by envelopes and the channel log.
//!
//! Every field is a 4-byte big-endian length followed by that many bytes.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("field {field} has length {actual}, expected {expected}")]
    BadLength {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("invalid value for {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf
            .extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u32_field(&mut self, v: u32) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn u64_field(&mut self, v: u64) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn field(&mut self) -> Result<&'a [u8], WireError> {
        let len = u32::from_be_bytes(self.raw(4)?.try_into().expect("4 bytes"));
        self.raw(len as usize)
    }

    pub fn fixed<const N: usize>(&mut self, name: &'static str) -> Result<[u8; N], WireError> {
        let f = self.field()?;
        f.try_into().map_err(|_| WireError::BadLength {
            field: name,
            expected: N,
            actual: f.len(),
        })
    }

    pub fn u32_field(&mut self, name: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.fixed::<4>(name)?))
    }

    pub fn u64_field(&mut self, name: &'static str) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.fixed::<8>(name)?))
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}
