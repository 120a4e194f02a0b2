//! Canonical length-prefixed binary encoding shared by deals and wire messages.

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::group::{Group, GroupElement, GroupError, Scalar};

/// 32-byte SHA-256 output.
pub type Digest = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("input truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Group(#[from] GroupError),
}

pub fn sha256(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

#[derive(Default, Debug, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Writer { buf: Vec::with_capacity(n) }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("length fits in u32"))
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.len(b.len());
        self.buf.extend_from_slice(b);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(d);
        self
    }

    pub fn scalar(&mut self, g: &Group, s: &Scalar) -> &mut Self {
        self.buf.extend(g.encode_scalar(s));
        self
    }

    pub fn element(&mut self, g: &Group, e: &GroupElement) -> &mut Self {
        g.append_element(e, &mut self.buf);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or(CodecError::Truncated(self.pos))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Invalid("boolean")),
        }
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads a list length, bounded by the bytes that remain.
    pub fn len(&mut self) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n > self.data.len() - self.pos {
            return Err(CodecError::Truncated(self.pos));
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.len()?;
        self.take(n)
    }

    pub fn digest(&mut self) -> Result<Digest, CodecError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    pub fn scalar(&mut self, g: &Group) -> Result<Scalar, CodecError> {
        Ok(g.decode_scalar(self.take(g.scalar_len())?)?)
    }

    pub fn element(&mut self, g: &Group) -> Result<GroupElement, CodecError> {
        Ok(g.decode_element(self.take(g.element_len())?)?)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}
