//! Big-endian byte cursor helpers shared by the codecs.

use crate::error::Error;
use crate::id::NodeId;

/// Which codec a [`Reader`] belongs to, so errors name the right record.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Format {
    Advertisement,
    Envelope,
    Payload(&'static str),
}

impl Format {
    fn error(self, offset: usize, reason: &'static str) -> Error {
        match self {
            Format::Advertisement => Error::MalformedAdvertisement { offset, reason },
            Format::Envelope => Error::MalformedEnvelope { offset, reason },
            Format::Payload(what) => Error::MalformedPayload { what, offset },
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: Format,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], format: Format) -> Self {
        Reader { buf, pos: 0, format }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn fail(&self, reason: &'static str) -> Error {
        self.format.error(self.pos, reason)
    }

    pub fn fail_at(&self, offset: usize, reason: &'static str) -> Error {
        self.format.error(offset, reason)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], Error> {
        if self.remaining() < n {
            return Err(self.fail("truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_be_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_be_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_be_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    /// `u8` length followed by the id bytes.
    pub fn id(&mut self) -> Result<NodeId, Error> {
        let at = self.pos;
        let len = self.u8()? as usize;
        let raw = self.bytes(len)?;
        NodeId::from_be_bytes(raw).map_err(|_| self.fail_at(at, "bad id length"))
    }

    pub fn short_str(&mut self) -> Result<String, Error> {
        let len = self.u8()? as usize;
        self.utf8(len)
    }

    pub fn utf8(&mut self, len: usize) -> Result<String, Error> {
        let at = self.pos;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail_at(at, "invalid utf-8"))
    }

    /// Reads the trailing CRC-32 and checks it against every byte before it.
    pub fn crc_trailer(&mut self) -> Result<(), Error> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if crc32fast::hash(&self.buf[..body_end]) != stored {
            return Err(self.fail_at(body_end, "crc mismatch"));
        }
        self.finish()
    }

    pub fn finish(&self) -> Result<(), Error> {
        if self.remaining() != 0 {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) trait PutExt {
    fn put_u8(&mut self, v: u8);
    fn put_u16(&mut self, v: u16);
    fn put_u32(&mut self, v: u32);
    fn put_u64(&mut self, v: u64);
    fn put_id(&mut self, id: &NodeId);
    fn put_short_str(&mut self, s: &str);
}

impl PutExt for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }
    fn put_u16(&mut self, v: u16) {
        self.extend_from_slice(&v.to_be_bytes());
    }
    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_be_bytes());
    }
    fn put_u64(&mut self, v: u64) {
        self.extend_from_slice(&v.to_be_bytes());
    }
    fn put_id(&mut self, id: &NodeId) {
        let bytes = id.to_be_bytes();
        self.push(bytes.len() as u8);
        self.extend_from_slice(&bytes);
    }
    /// Callers guarantee `s.len() <= 255`.
    fn put_short_str(&mut self, s: &str) {
        debug_assert!(s.len() <= 255);
        self.push(s.len() as u8);
        self.extend_from_slice(s.as_bytes());
    }
}

/// Appends a CRC-32 of everything written so far.
pub(crate) fn seal_crc(buf: &mut Vec<u8>) {
    let crc = crc32fast::hash(buf);
    buf.put_u32(crc);
}

