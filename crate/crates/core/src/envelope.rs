//! The transport-independent envelope every overlay message travels in.
//!
//! Layout (big-endian):
//!
//! ```text
//! magic 0xE0 | version u8 | payload_kind u8 | flags u8 | ttl u8
//! src id (u8 len + bytes) | dst id (u8 len + bytes) | group id (u8 len + bytes)
//! correlation_id u64 | payload u32 len + bytes | crc32 u32
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::id::{GroupId, NodeId, PeerId};
use crate::wire::{seal_crc, Format, PutExt, Reader};

pub const ENVELOPE_MAGIC: u8 = 0xE0;
pub const ENVELOPE_VERSION: u8 = 1;
pub const DEFAULT_TTL: u8 = 8;

/// Bytes of an envelope with an empty payload and ids of `id_bytes` bytes.
pub const fn envelope_overhead(id_bytes: usize) -> usize {
    5 + 3 * (1 + id_bytes) + 8 + 4 + 4
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PayloadKind(pub u8);

impl PayloadKind {
    pub const FIND_SUCC: Self = Self(0x01);
    pub const FIND_SUCC_REPLY: Self = Self(0x02);
    pub const FIND_SUCC_ACK: Self = Self(0x03);
    pub const GET_PRED: Self = Self(0x04);
    pub const GET_PRED_REPLY: Self = Self(0x05);
    pub const NOTIFY: Self = Self(0x06);
    pub const PING: Self = Self(0x07);
    pub const PONG: Self = Self(0x08);
    pub const PUT: Self = Self(0x09);
    pub const PUT_ACK: Self = Self(0x0A);
    pub const GET: Self = Self(0x0B);
    pub const GET_REPLY: Self = Self(0x0C);
    pub const TRANSFER_REQ: Self = Self(0x0D);
    pub const TRANSFER: Self = Self(0x0E);
    pub const REPLICATE: Self = Self(0x0F);
    pub const PIPE_DATA: Self = Self(0x20);
    pub const COAP: Self = Self(0x30);
    pub const KEY_MGMT: Self = Self(0x40);
    pub const BEACON: Self = Self(0x50);

    pub fn is_dht(&self) -> bool {
        (0x01..=0x0F).contains(&self.0)
    }

    pub fn name(&self) -> &'static str {
        match *self {
            Self::FIND_SUCC => "FIND_SUCC",
            Self::FIND_SUCC_REPLY => "FIND_SUCC_REPLY",
            Self::FIND_SUCC_ACK => "FIND_SUCC_ACK",
            Self::GET_PRED => "GET_PRED",
            Self::GET_PRED_REPLY => "GET_PRED_REPLY",
            Self::NOTIFY => "NOTIFY",
            Self::PING => "PING",
            Self::PONG => "PONG",
            Self::PUT => "PUT",
            Self::PUT_ACK => "PUT_ACK",
            Self::GET => "GET",
            Self::GET_REPLY => "GET_REPLY",
            Self::TRANSFER_REQ => "TRANSFER_REQ",
            Self::TRANSFER => "TRANSFER",
            Self::REPLICATE => "REPLICATE",
            Self::PIPE_DATA => "PIPE_DATA",
            Self::COAP => "COAP",
            Self::KEY_MGMT => "KEY_MGMT",
            Self::BEACON => "BEACON",
            _ => "UNKNOWN",
        }
    }
}

impl fmt::Debug for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(0x{:02x})", self.name(), self.0)
    }
}

pub mod flags {
    pub const ENCRYPTED: u8 = 0b01;
    pub const PROPAGATE: u8 = 0b10;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub version: u8,
    pub payload_kind: PayloadKind,
    pub flags: u8,
    pub ttl: u8,
    pub src: PeerId,
    /// A peer, or a group for propagated traffic.
    pub dst: NodeId,
    pub group: GroupId,
    pub correlation_id: u64,
    pub payload: Vec<u8>,
}

impl MessageEnvelope {
    pub fn new(kind: PayloadKind, src: PeerId, dst: NodeId, group: GroupId, payload: Vec<u8>) -> Self {
        MessageEnvelope {
            version: ENVELOPE_VERSION,
            payload_kind: kind,
            flags: 0,
            ttl: DEFAULT_TTL,
            src,
            dst,
            group,
            correlation_id: 0,
            payload,
        }
    }

    pub fn with_correlation(mut self, id: u64) -> Self {
        self.correlation_id = id;
        self
    }

    pub fn with_flags(mut self, flags: u8) -> Self {
        self.flags |= flags;
        self
    }

    pub fn is_encrypted(&self) -> bool {
        self.flags & flags::ENCRYPTED != 0
    }

    pub fn is_propagate(&self) -> bool {
        self.flags & flags::PROPAGATE != 0
    }

    pub fn encoded_len(&self) -> usize {
        5 + 3 + self.src.0.byte_len() + self.dst.byte_len() + self.group.0.byte_len()
            + 8
            + 4
            + self.payload.len()
            + 4
    }
}

fn check_aligned(id: &NodeId) -> Result<()> {
    if !id.bits().is_multiple_of(8) {
        return Err(Error::Config(format!("id width {} is not byte aligned", id.bits())));
    }
    Ok(())
}

pub fn encode_envelope(e: &MessageEnvelope) -> Result<Vec<u8>> {
    for id in [&e.src.0, &e.dst, &e.group.0] {
        check_aligned(id)?;
    }
    let payload_len = u32::try_from(e.payload.len())
        .map_err(|_| Error::TooLarge(e.payload.len()))?;
    let mut out = Vec::with_capacity(e.encoded_len());
    out.put_u8(ENVELOPE_MAGIC);
    out.put_u8(e.version);
    out.put_u8(e.payload_kind.0);
    out.put_u8(e.flags);
    out.put_u8(e.ttl);
    out.put_id(&e.src.0);
    out.put_id(&e.dst);
    out.put_id(&e.group.0);
    out.put_u64(e.correlation_id);
    out.put_u32(payload_len);
    out.extend_from_slice(&e.payload);
    seal_crc(&mut out);
    Ok(out)
}

pub fn decode_envelope(bytes: &[u8]) -> Result<MessageEnvelope> {
    let mut r = Reader::new(bytes, Format::Envelope);
    if r.u8()? != ENVELOPE_MAGIC {
        return Err(r.fail_at(0, "bad magic"));
    }
    let version = r.u8()?;
    if version != ENVELOPE_VERSION {
        return Err(r.fail_at(1, "unsupported version"));
    }
    if bytes.len() < 4 || crc32fast::hash(&bytes[..bytes.len() - 4]).to_be_bytes() != bytes[bytes.len() - 4..] {
        return Err(r.fail_at(bytes.len().saturating_sub(4), "crc mismatch"));
    }
    let payload_kind = PayloadKind(r.u8()?);
    let flags = r.u8()?;
    let ttl = r.u8()?;
    let src = PeerId(r.id()?);
    let dst = r.id()?;
    let group = GroupId(r.id()?);
    let correlation_id = r.u64()?;
    let len = r.u32()? as usize;
    let payload = r.bytes(len)?.to_vec();
    r.crc_trailer()?;
    Ok(MessageEnvelope { version, payload_kind, flags, ttl, src, dst, group, correlation_id, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(payload: Vec<u8>) -> MessageEnvelope {
        let m = 16;
        let src = PeerId::from_name(b"a", m).unwrap();
        let dst = PeerId::from_name(b"b", m).unwrap().0;
        let g = GroupId::from_name(b"root", m).unwrap();
        MessageEnvelope::new(PayloadKind::COAP, src, dst, g, payload).with_correlation(42)
    }

    #[test]
    fn minimal_envelope_has_fixed_size() {
        // 5 header bytes + 3 ids of (1 + 2) bytes + 8 + 4 + 4 = 30 at m=16
        let bytes = encode_envelope(&sample(vec![])).unwrap();
        assert_eq!(bytes.len(), 30);
        assert_eq!(envelope_overhead(2), 30);
        assert_eq!(decode_envelope(&bytes).unwrap(), sample(vec![]));
    }

    #[test]
    fn maximal_payload_round_trips() {
        let e = sample((0..65_536u32).map(|i| i as u8).collect());
        let bytes = encode_envelope(&e).unwrap();
        assert_eq!(bytes.len(), e.encoded_len());
        assert_eq!(decode_envelope(&bytes).unwrap(), e);
    }

    #[test]
    fn corrupted_header_fails_crc() {
        let mut bytes = encode_envelope(&sample(b"hi".to_vec())).unwrap();
        bytes[3] ^= 0x40;
        let err = decode_envelope(&bytes).unwrap_err();
        assert!(matches!(err, Error::MalformedEnvelope { reason: "crc mismatch", .. }), "{err}");
        let mut bad_magic = encode_envelope(&sample(vec![])).unwrap();
        bad_magic[0] = 0;
        assert!(matches!(
            decode_envelope(&bad_magic),
            Err(Error::MalformedEnvelope { offset: 0, reason: "bad magic" })
        ));
    }
}
