//! Advertisements and their compact tag-table codec.
//!
//! Wire layout (big-endian):
//!
//! ```text
//! magic 0xAD | version u8 | kind u8
//! subject_id (u8 len + bytes) | group_scope (u8 len + bytes)
//! name (u8 len + utf-8)
//! attribute count u8, each: tag u8 | 0xFF + u8 len + key, then u16 len + value
//! endpoint count u8, each: transport kind u8 + u8 len + address
//! expiration u64 | crc32 u32
//! ```
//!
//! Attribute keys found in [`TagTable`] cost one byte on the wire.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::id::{scoped_key, GroupId, NodeId};
use crate::transport::{EndpointAddress, TransportKind};
use crate::wire::{seal_crc, Format, PutExt, Reader};

pub const ADVERTISEMENT_MAGIC: u8 = 0xAD;
pub const MAX_ATTRIBUTES: usize = 64;
pub const MAX_NAME_LEN: usize = 255;
/// Escape marking a literal attribute key.
pub const LITERAL_KEY: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum AdvKind {
    Peer = 1,
    Group = 2,
    Pipe = 3,
    Resource = 4,
}

impl AdvKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(AdvKind::Peer),
            2 => Some(AdvKind::Group),
            3 => Some(AdvKind::Pipe),
            4 => Some(AdvKind::Resource),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdvKind::Peer => "peer",
            AdvKind::Group => "group",
            AdvKind::Pipe => "pipe",
            AdvKind::Resource => "resource",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "peer" => Some(AdvKind::Peer),
            "group" => Some(AdvKind::Group),
            "pipe" => Some(AdvKind::Pipe),
            "resource" => Some(AdvKind::Resource),
            _ => None,
        }
    }
}

/// A published record announcing a peer, group, pipe or resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Advertisement {
    pub kind: AdvKind,
    pub subject_id: NodeId,
    pub group_scope: GroupId,
    pub name: String,
    pub attributes: BTreeMap<String, String>,
    pub endpoints: Vec<EndpointAddress>,
    /// Absolute simulated milliseconds.
    pub expiration: u64,
    pub version: u8,
}

/// Attribute keys with reserved meanings.
pub mod attr {
    pub const PEER: &str = "peer";
    pub const PATH: &str = "path";
    pub const POLICY: &str = "policy";
    pub const CREATOR: &str = "creator";
    pub const PARENT: &str = "parent";
    pub const CONTENT_FORMAT: &str = "ct";
    pub const ROLE: &str = "role";
}

impl Advertisement {
    pub fn new(kind: AdvKind, subject_id: NodeId, group_scope: GroupId, name: impl Into<String>) -> Self {
        Advertisement {
            kind,
            subject_id,
            group_scope,
            name: name.into(),
            attributes: BTreeMap::new(),
            endpoints: Vec::new(),
            expiration: u64::MAX,
            version: 1,
        }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn with_endpoints(mut self, endpoints: Vec<EndpointAddress>) -> Self {
        self.endpoints = endpoints;
        self
    }

    pub fn with_expiration(mut self, expiration: u64) -> Self {
        self.expiration = expiration;
        self
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expiration
    }

    /// The name the DHT key is derived from: the subject id in hex for peers,
    /// the advertised name otherwise.
    pub fn discovery_name(&self) -> String {
        match self.kind {
            AdvKind::Peer => self.subject_id.to_string(),
            _ => self.name.clone(),
        }
    }

    /// `hash(group_scope ‖ discovery_name)`.
    pub fn discovery_key(&self) -> Result<NodeId> {
        scoped_key(&self.group_scope, self.discovery_name().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAdvertisement(m));
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN {
            return bad(format!("name length {} outside 1..=255", self.name.len()));
        }
        if self.attributes.len() > MAX_ATTRIBUTES {
            return bad(format!("{} attributes exceed {MAX_ATTRIBUTES}", self.attributes.len()));
        }
        for (k, v) in &self.attributes {
            if k.is_empty() || k.len() > 255 {
                return bad(format!("attribute key length {}", k.len()));
            }
            if v.len() > u16::MAX as usize {
                return bad(format!("attribute {k} value of {} bytes", v.len()));
            }
        }
        if self.endpoints.len() > 255 {
            return bad("more than 255 endpoints".into());
        }
        if let Some(e) = self.endpoints.iter().find(|e| e.address.len() > 255) {
            return bad(format!("endpoint address {} too long", e.address));
        }
        for id in [&self.subject_id, &self.group_scope.0] {
            if id.bits() % 8 != 0 {
                return bad(format!("id width {} is not byte aligned", id.bits()));
            }
        }
        Ok(())
    }
}

/// Static bijection between well-known names and one-byte codes.
///
/// Codes are the position in [`TagTable::KEYS`]; `0xFF` escapes a literal.
pub struct TagTable;

impl TagTable {
    pub const KEYS: &'static [&'static str] = &[
        // advertisement field names
        "kind",
        "subject",
        "group",
        "name",
        "endpoint",
        "expires",
        "version",
        // attribute keys
        attr::PEER,
        attr::PATH,
        attr::POLICY,
        attr::CREATOR,
        attr::PARENT,
        attr::CONTENT_FORMAT,
        attr::ROLE,
        "rt",
        "if",
        "uri",
        "method",
        "unit",
        "description",
        "location",
        "vendor",
        "model",
        "firmware",
        "transport",
        "mtu",
        "bandwidth",
        "latency",
        "interval",
        "observable",
        "security",
        "service",
        "pipe-type",
        "key-epoch",
        "lifetime",
        "sensor",
        "actuator",
        "battery",
    ];

    pub fn code(key: &str) -> Option<u8> {
        Self::KEYS.iter().position(|k| *k == key).map(|i| i as u8)
    }

    pub fn key(code: u8) -> Option<&'static str> {
        Self::KEYS.get(code as usize).copied()
    }

    pub fn is_well_known(key: &str) -> bool {
        Self::code(key).is_some()
    }
}

pub fn encode_advertisement(a: &Advertisement) -> Result<Vec<u8>> {
    a.validate()?;
    let mut out = Vec::with_capacity(64 + a.name.len());
    out.put_u8(ADVERTISEMENT_MAGIC);
    out.put_u8(a.version);
    out.put_u8(a.kind as u8);
    out.put_id(&a.subject_id);
    out.put_id(&a.group_scope.0);
    out.put_short_str(&a.name);
    out.put_u8(a.attributes.len() as u8);
    for (k, v) in &a.attributes {
        match TagTable::code(k) {
            Some(code) => out.put_u8(code),
            None => {
                out.put_u8(LITERAL_KEY);
                out.put_short_str(k);
            }
        }
        out.put_u16(v.len() as u16);
        out.extend_from_slice(v.as_bytes());
    }
    out.put_u8(a.endpoints.len() as u8);
    for e in &a.endpoints {
        out.put_u8(e.kind as u8);
        out.put_short_str(&e.address);
    }
    out.put_u64(a.expiration);
    seal_crc(&mut out);
    Ok(out)
}

pub fn decode_advertisement(bytes: &[u8]) -> Result<Advertisement> {
    let mut r = Reader::new(bytes, Format::Advertisement);
    if r.u8()? != ADVERTISEMENT_MAGIC {
        return Err(r.fail_at(0, "bad magic"));
    }
    let version = r.u8()?;
    let at = r.pos();
    let kind = AdvKind::from_u8(r.u8()?).ok_or_else(|| r.fail_at(at, "unknown kind"))?;
    let subject_id = r.id()?;
    let group_scope = GroupId(r.id()?);
    let at = r.pos();
    let name = r.short_str()?;
    if name.is_empty() {
        return Err(r.fail_at(at, "empty name"));
    }
    let count_at = r.pos();
    let count = r.u8()? as usize;
    if count > MAX_ATTRIBUTES {
        return Err(r.fail_at(count_at, "too many attributes"));
    }
    let mut attributes = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos();
        let key = match r.u8()? {
            LITERAL_KEY => r.short_str()?,
            code => TagTable::key(code).ok_or_else(|| r.fail_at(at, "unknown tag"))?.to_string(),
        };
        let len = r.u16()? as usize;
        let value = r.utf8(len)?;
        if attributes.insert(key, value).is_some() {
            return Err(r.fail_at(at, "duplicate attribute key"));
        }
    }
    let count = r.u8()? as usize;
    let mut endpoints = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos();
        let kind = TransportKind::from_u8(r.u8()?).ok_or_else(|| r.fail_at(at, "unknown transport kind"))?;
        endpoints.push(EndpointAddress { kind, address: r.short_str()? });
    }
    let expiration = r.u64()?;
    r.crc_trailer()?;
    Ok(Advertisement { kind, subject_id, group_scope, name, attributes, endpoints, expiration, version })
}

/// `key=value;` text rendering of the same content, the size baseline the
/// binary codec is measured against.
pub fn render_plain(a: &Advertisement) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "version={};kind={};subject={};group={};name={};",
        a.version,
        a.kind.as_str(),
        a.subject_id,
        a.group_scope,
        a.name
    );
    for (k, v) in &a.attributes {
        let _ = write!(s, "{k}={v};");
    }
    for e in &a.endpoints {
        let _ = write!(s, "endpoint={e};");
    }
    let _ = write!(s, "expires={};", a.expiration);
    s
}

/// Parses advertisements written as `key = value` lines. Blocks are
/// separated by `---`; `#` starts a comment. `kind`, `subject`, `group` and
/// `name` are required, `endpoint = <kind>:<address>` may repeat, and any
/// other key becomes an attribute.
pub fn parse_text(text: &str) -> Result<Vec<Advertisement>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str, &str)> = Vec::new();
    let lines = text.lines().chain(std::iter::once("---"));
    for (i, raw) in lines.enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line == "---" {
            if !block.is_empty() {
                out.push(parse_block(&block)?);
                block.clear();
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
        block.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn parse_block(block: &[(usize, &str, &str)]) -> Result<Advertisement> {
    let first = block[0].0;
    let (mut kind, mut subject, mut group, mut name) = (None, None, None, None);
    let mut attributes = BTreeMap::new();
    let mut endpoints = Vec::new();
    let (mut expiration, mut version) = (u64::MAX, 1u8);
    for &(line, k, v) in block {
        let bad = |msg: String| Error::Parse { line, msg };
        match k {
            "kind" => kind = Some(AdvKind::parse(v).ok_or_else(|| bad(format!("unknown kind {v:?}")))?),
            "subject" => subject = Some(NodeId::from_hex(v).map_err(|e| bad(e.to_string()))?),
            "group" => group = Some(GroupId(NodeId::from_hex(v).map_err(|e| bad(e.to_string()))?)),
            "name" => name = Some(v.to_string()),
            "expires" => expiration = v.parse().map_err(|_| bad(format!("bad expiration {v:?}")))?,
            "version" => version = v.parse().map_err(|_| bad(format!("bad version {v:?}")))?,
            "endpoint" => {
                let (tk, addr) = v.split_once(':').ok_or_else(|| bad(format!("expected kind:address, got {v:?}")))?;
                let tk = TransportKind::parse(tk).ok_or_else(|| bad(format!("unknown transport {tk:?}")))?;
                endpoints.push(EndpointAddress::new(tk, addr));
            }
            _ => {
                attributes.insert(k.to_string(), v.to_string());
            }
        }
    }
    let missing = |f: &str| Error::Parse { line: first, msg: format!("advertisement is missing {f}") };
    let mut a = Advertisement::new(
        kind.ok_or_else(|| missing("kind"))?,
        subject.ok_or_else(|| missing("subject"))?,
        group.ok_or_else(|| missing("group"))?,
        name.ok_or_else(|| missing("name"))?,
    );
    a.attributes = attributes;
    a.endpoints = endpoints;
    a.expiration = expiration;
    a.version = version;
    a.validate()?;
    Ok(a)
}

/// Encoded size divided by plain-text size.
pub fn compactness_ratio(a: &Advertisement) -> Result<f64> {
    Ok(encode_advertisement(a)?.len() as f64 / render_plain(a).len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::hash_to_id;

    fn group() -> GroupId {
        GroupId::from_name(b"root", 16).unwrap()
    }

    fn minimal() -> Advertisement {
        Advertisement::new(AdvKind::Resource, hash_to_id(b"t", 16).unwrap(), group(), "temperature")
            .with_expiration(60_000)
    }

    #[test]
    fn tag_table_is_bijective() {
        let mut seen = std::collections::BTreeSet::new();
        for (i, k) in TagTable::KEYS.iter().enumerate() {
            assert!(seen.insert(*k), "duplicate key {k}");
            assert_eq!(TagTable::code(k), Some(i as u8));
            assert_eq!(TagTable::key(i as u8), Some(*k));
        }
        assert!(TagTable::KEYS.len() < LITERAL_KEY as usize);
    }

    #[test]
    fn minimal_resource_is_header_plus_name() {
        let a = minimal();
        let bytes = encode_advertisement(&a).unwrap();
        // magic, version, kind, 2 ids of 3 bytes, name, 2 counts, expiration, crc
        assert_eq!(bytes.len(), 3 + 6 + 1 + a.name.len() + 2 + 8 + 4);
        assert_eq!(decode_advertisement(&bytes).unwrap(), a);
    }

    #[test]
    fn well_known_keys_beat_plain_text() {
        let a = minimal()
            .with_attr("rt", "sensor.temp")
            .with_attr("unit", "celsius")
            .with_attr("path", "/temp");
        let enc = encode_advertisement(&a).unwrap().len();
        let plain = render_plain(&a).len();
        assert!(enc < plain, "{enc} vs {plain}");
    }

    #[test]
    fn literal_keys_round_trip() {
        let a = minimal().with_attr("x-custom", "1").with_attr("path", "/a/b");
        assert_eq!(decode_advertisement(&encode_advertisement(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_advertisement(&minimal()).unwrap();
        // name length byte sits at offset 9; cut in the middle of the name
        let cut = &bytes[..14];
        match decode_advertisement(cut) {
            Err(Error::MalformedAdvertisement { offset, reason }) => {
                assert_eq!(offset, 10);
                assert_eq!(reason, "truncated");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crc_catches_flips() {
        let mut bytes = encode_advertisement(&minimal()).unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 1;
        assert!(matches!(
            decode_advertisement(&bytes),
            Err(Error::MalformedAdvertisement { reason: "crc mismatch", .. })
        ));
    }

    #[test]
    fn validation() {
        let mut a = minimal();
        a.name.clear();
        assert!(encode_advertisement(&a).is_err());
        let mut a = minimal();
        for i in 0..65 {
            a.attributes.insert(format!("k{i}"), "v".into());
        }
        assert!(encode_advertisement(&a).is_err());
    }

    #[test]
    fn text_blocks_parse_into_advertisements() {
        let text = "kind = resource\nsubject = 00ff\ngroup = 0102\nname = temp # trailing\npath = /temp\nendpoint = mem:lan/a\n---\n\nkind = peer\nsubject = 0a0b\ngroup = 0000\nname = gw\n";
        let ads = parse_text(text).unwrap();
        assert_eq!(ads.len(), 2);
        assert_eq!(ads[0].attributes.get("path").map(String::as_str), Some("/temp"));
        assert_eq!(ads[0].endpoints, vec![EndpointAddress::new(TransportKind::Mem, "lan/a")]);
        assert_eq!(ads[1].kind, AdvKind::Peer);
        assert!(matches!(parse_text("kind = peer\nname = x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_text("kind = peer\nbogus\n"), Err(Error::Parse { line: 2, .. })));
    }
}
