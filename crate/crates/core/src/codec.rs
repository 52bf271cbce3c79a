//! Big-endian byte reader shared by the graph and frame decoders.

use crate::error::{Error, Result};
use crate::object::Guid;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` within the enclosing stream, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self::with_base(buf, 0)
    }

    pub(crate) fn with_base(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::protocol(
                self.offset(),
                format!("truncated {what}: need {n} bytes, have {}", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    pub(crate) fn guid(&mut self, what: &str) -> Result<Guid> {
        let b = self.bytes(16, what)?;
        let mut a = [0u8; 16];
        a.copy_from_slice(b);
        Ok(Guid(a))
    }

    /// A `u32` count followed by that many GUIDs.
    pub(crate) fn guid_list(&mut self, what: &str) -> Result<Vec<Guid>> {
        let n = self.u32(what)? as usize;
        if n.saturating_mul(16) > self.remaining() {
            return Err(Error::protocol(
                self.offset(),
                format!("{what} count {n} exceeds remaining input"),
            ));
        }
        (0..n).map(|_| self.guid(what)).collect()
    }

    /// A `u32` length followed by that many bytes.
    pub(crate) fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.bytes(n, what)
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_guid_list(out: &mut Vec<u8>, guids: &[Guid]) {
    put_u32(out, guids.len() as u32);
    for g in guids {
        out.extend_from_slice(&g.0);
    }
}

pub(crate) fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}
