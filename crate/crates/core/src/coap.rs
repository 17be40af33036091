//! CoAP-style request/response over overlay envelopes: compact message
//! codec, confirmable retransmission with exponential backoff, token
//! matching and a resource registry.
//!
//! Message layout (big-endian):
//!
//! ```text
//! msg_type u8 | code u8 (class << 5 | detail) | message_id u16
//! token (u8 len + bytes) | path segment count u8, each u8 len + bytes
//! content_format u16 | payload u16 len + bytes
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::id::{GroupId, PeerId};
use crate::wire::{Format, PutExt, Reader};

pub const ACK_TIMEOUT_MS: u64 = 2_000;
pub const MAX_RETRANSMIT: u8 = 4;
/// How long a NON request waits for a best-effort response.
pub const NON_TIMEOUT_MS: u64 = 2 * ACK_TIMEOUT_MS;
/// How long a server remembers a response for duplicate requests.
pub const EXCHANGE_LIFETIME_MS: u64 = 64_000;
pub const MAX_TOKEN_LEN: usize = 8;
pub const CONTENT_FORMAT_TEXT: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Con = 0,
    Non = 1,
    Ack = 2,
    Rst = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(MsgType::Con),
            1 => Some(MsgType::Non),
            2 => Some(MsgType::Ack),
            3 => Some(MsgType::Rst),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code::new(0, 0);
    pub const GET: Code = Code::new(0, 1);
    pub const POST: Code = Code::new(0, 2);
    pub const PUT: Code = Code::new(0, 3);
    pub const DELETE: Code = Code::new(0, 4);
    pub const CREATED: Code = Code::new(2, 1);
    pub const DELETED: Code = Code::new(2, 2);
    pub const CHANGED: Code = Code::new(2, 4);
    pub const CONTENT: Code = Code::new(2, 5);
    pub const UNAUTHORIZED: Code = Code::new(4, 1);
    pub const NOT_FOUND: Code = Code::new(4, 4);
    pub const INTERNAL_ERROR: Code = Code::new(5, 0);

    pub const fn new(class: u8, detail: u8) -> Self {
        Code((class << 5) | (detail & 0x1F))
    }

    pub fn class(&self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(&self) -> u8 {
        self.0 & 0x1F
    }

    pub fn is_request(&self) -> bool {
        self.class() == 0 && self.detail() != 0
    }

    pub fn is_response(&self) -> bool {
        self.class() >= 2
    }

    pub fn parse_method(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Some(Code::GET),
            "POST" => Some(Code::POST),
            "PUT" => Some(Code::PUT),
            "DELETE" => Some(Code::DELETE),
            _ => None,
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoapMessage {
    pub msg_type: MsgType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    pub uri_path: Vec<String>,
    pub content_format: u16,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    pub fn request(msg_type: MsgType, method: Code, message_id: u16, token: Vec<u8>, path: &str) -> Self {
        CoapMessage {
            msg_type,
            code: method,
            message_id,
            token,
            uri_path: split_path(path),
            content_format: CONTENT_FORMAT_TEXT,
            payload: Vec::new(),
        }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    /// A response to `req`: piggybacked on an ACK for CON requests, a NON
    /// carrying `own_mid` otherwise.
    pub fn response_to(req: &CoapMessage, code: Code, payload: Vec<u8>, own_mid: u16) -> Self {
        let (msg_type, message_id) = match req.msg_type {
            MsgType::Con => (MsgType::Ack, req.message_id),
            _ => (MsgType::Non, own_mid),
        };
        CoapMessage {
            msg_type,
            code,
            message_id,
            token: req.token.clone(),
            uri_path: Vec::new(),
            content_format: CONTENT_FORMAT_TEXT,
            payload,
        }
    }

    pub fn path(&self) -> String {
        format!("/{}", self.uri_path.join("/"))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.token.len() > MAX_TOKEN_LEN {
            return Err(Error::Precondition(format!("token of {} bytes", self.token.len())));
        }
        if self.uri_path.len() > 255 || self.uri_path.iter().any(|s| s.len() > 255) {
            return Err(Error::Precondition("uri path too long".into()));
        }
        let payload_len = u16::try_from(self.payload.len()).map_err(|_| Error::TooLarge(self.payload.len()))?;
        let mut out = Vec::with_capacity(10 + self.token.len() + self.payload.len());
        out.put_u8(self.msg_type as u8);
        out.put_u8(self.code.0);
        out.put_u16(self.message_id);
        out.put_u8(self.token.len() as u8);
        out.extend_from_slice(&self.token);
        out.put_u8(self.uri_path.len() as u8);
        for seg in &self.uri_path {
            out.put_short_str(seg);
        }
        out.put_u16(self.content_format);
        out.put_u16(payload_len);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Format::Payload("coap"));
        let msg_type = MsgType::from_u8(r.u8()?).ok_or_else(|| r.fail_at(0, "message type"))?;
        let code = Code(r.u8()?);
        let message_id = r.u16()?;
        let tlen = r.u8()? as usize;
        if tlen > MAX_TOKEN_LEN {
            return Err(r.fail_at(4, "token length"));
        }
        let token = r.bytes(tlen)?.to_vec();
        let n = r.u8()? as usize;
        let uri_path = (0..n).map(|_| r.short_str()).collect::<Result<Vec<_>>>()?;
        let content_format = r.u16()?;
        let plen = r.u16()? as usize;
        let payload = r.bytes(plen)?.to_vec();
        r.finish()?;
        Ok(CoapMessage { msg_type, code, message_id, token, uri_path, content_format, payload })
    }
}

/// `'/'`-separated segments; empty segments are dropped.
pub fn split_path(path: &str) -> Vec<String> {
    path.split('/').filter(|s| !s.is_empty()).map(str::to_string).collect()
}

pub type Handler = Arc<dyn Fn(&CoapMessage) -> (Code, Vec<u8>) + Send + Sync>;

/// A handler that always answers 2.05 with `body`.
pub fn static_handler(body: impl Into<Vec<u8>>) -> Handler {
    let body = body.into();
    Arc::new(move |_| (Code::CONTENT, body.clone()))
}

#[derive(Clone)]
pub struct ResourceEntry {
    pub path: String,
    pub handler: Handler,
    pub resource_name: String,
    pub group: GroupId,
}

impl fmt::Debug for ResourceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResourceEntry")
            .field("path", &self.path)
            .field("resource_name", &self.resource_name)
            .field("group", &self.group)
            .finish_non_exhaustive()
    }
}

/// Resource registry plus the duplicate-request cache of one peer.
#[derive(Debug, Default)]
pub struct CoapServer {
    resources: BTreeMap<String, ResourceEntry>,
    cache: BTreeMap<(PeerId, u16), (CoapMessage, u64)>,
    next_mid: u16,
    pub duplicates: u64,
}

impl CoapServer {
    pub fn serve(&mut self, entry: ResourceEntry) -> Result<()> {
        let key = canonical_path(&entry.path);
        if self.resources.contains_key(&key) {
            return Err(Error::DuplicatePath(key));
        }
        self.resources.insert(key, entry);
        Ok(())
    }

    pub fn resource(&self, path: &str) -> Option<&ResourceEntry> {
        self.resources.get(&canonical_path(path))
    }

    pub fn resources(&self) -> impl Iterator<Item = &ResourceEntry> {
        self.resources.values()
    }

    /// Answers a request. `authorized` is false when a secured group's
    /// request arrived unencrypted or undecryptable.
    /// Resources registered for another group answer 4.04.
    pub fn handle(
        &mut self,
        src: PeerId,
        group: GroupId,
        req: &CoapMessage,
        authorized: bool,
        now: u64,
    ) -> Option<CoapMessage> {
        if !req.code.is_request() || !matches!(req.msg_type, MsgType::Con | MsgType::Non) {
            return None;
        }
        self.cache.retain(|_, (_, until)| *until > now);
        if let Some((resp, _)) = self.cache.get(&(src, req.message_id)) {
            if resp.token == req.token {
                self.duplicates += 1;
                return Some(resp.clone());
            }
        }
        let (code, payload) = if !authorized {
            (Code::UNAUTHORIZED, Vec::new())
        } else {
            match self.resources.get(&req.path()).filter(|e| e.group == group) {
                Some(entry) => (entry.handler)(req),
                None => (Code::NOT_FOUND, Vec::new()),
            }
        };
        self.next_mid = self.next_mid.wrapping_add(1);
        let resp = CoapMessage::response_to(req, code, payload, self.next_mid);
        self.cache.insert((src, req.message_id), (resp.clone(), now + EXCHANGE_LIFETIME_MS));
        Some(resp)
    }
}

fn canonical_path(path: &str) -> String {
    format!("/{}", split_path(path).join("/"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingRequest {
    pub token: Vec<u8>,
    pub message_id: u16,
    pub destination: PeerId,
    pub deadline: u64,
    pub attempt: u8,
    /// Current timeout.
    pub backoff: u64,
    pub request: CoapMessage,
    /// Simulated send time of every transmission so far.
    pub sent_at: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matched {
    Resolved { pending: PendingRequest, response: CoapMessage },
    Duplicate,
    Orphan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientTimer {
    Retransmit { destination: PeerId, request: CoapMessage },
    TimedOut(PendingRequest),
}

/// Client-side pending table of one peer.
#[derive(Debug, Default)]
pub struct CoapClient {
    pending: BTreeMap<Vec<u8>, PendingRequest>,
    resolved: VecDeque<Vec<u8>>,
    resolved_set: BTreeSet<Vec<u8>>,
    next_mid: u16,
    next_token: u64,
    pub orphans: u64,
    pub duplicates: u64,
    pub retransmissions: u64,
}

impl CoapClient {
    pub fn new(seed: u16) -> Self {
        CoapClient { next_mid: seed, ..Default::default() }
    }

    /// A fresh request with unique message id and token.
    pub fn build(&mut self, msg_type: MsgType, method: Code, path: &str, payload: Vec<u8>) -> CoapMessage {
        self.next_mid = self.next_mid.wrapping_add(1);
        self.next_token += 1;
        let token = self.next_token.to_be_bytes().to_vec();
        CoapMessage::request(msg_type, method, self.next_mid, token, path).with_payload(payload)
    }

    /// Starts tracking a request sent at `now`.
    pub fn track(&mut self, destination: PeerId, request: CoapMessage, now: u64) {
        let backoff = match request.msg_type {
            MsgType::Con => ACK_TIMEOUT_MS,
            _ => NON_TIMEOUT_MS,
        };
        let p = PendingRequest {
            token: request.token.clone(),
            message_id: request.message_id,
            destination,
            deadline: now + backoff,
            attempt: 0,
            backoff,
            request,
            sent_at: vec![now],
        };
        self.pending.insert(p.token.clone(), p);
    }

    pub fn pending(&self, token: &[u8]) -> Option<&PendingRequest> {
        self.pending.get(token)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn match_response(&mut self, msg: &CoapMessage) -> Matched {
        if let Some(pending) = self.pending.remove(&msg.token) {
            self.remember(msg.token.clone());
            return Matched::Resolved { pending, response: msg.clone() };
        }
        if self.resolved_set.contains(&msg.token) {
            self.duplicates += 1;
            return Matched::Duplicate;
        }
        self.orphans += 1;
        Matched::Orphan
    }

    fn remember(&mut self, token: Vec<u8>) {
        if self.resolved.len() == 1024 {
            if let Some(old) = self.resolved.pop_front() {
                self.resolved_set.remove(&old);
            }
        }
        self.resolved_set.insert(token.clone());
        self.resolved.push_back(token);
    }

    /// Handles every deadline at or before `now`.
    pub fn poll(&mut self, now: u64) -> Vec<ClientTimer> {
        let due: Vec<Vec<u8>> =
            self.pending.iter().filter(|(_, p)| p.deadline <= now).map(|(t, _)| t.clone()).collect();
        let mut out = Vec::new();
        for token in due {
            let p = self.pending.get_mut(&token).unwrap();
            if p.request.msg_type == MsgType::Con && p.attempt < MAX_RETRANSMIT {
                p.attempt += 1;
                p.backoff *= 2;
                p.deadline = now + p.backoff;
                p.sent_at.push(now);
                self.retransmissions += 1;
                out.push(ClientTimer::Retransmit { destination: p.destination, request: p.request.clone() });
            } else {
                let p = self.pending.remove(&token).unwrap();
                out.push(ClientTimer::TimedOut(p));
            }
        }
        out
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.pending.values().map(|p| p.deadline).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peer(n: &str) -> PeerId {
        PeerId::from_name(n.as_bytes(), 16).unwrap()
    }

    #[test]
    fn codec_round_trip_and_code_display() {
        let m = CoapMessage::request(MsgType::Con, Code::GET, 7, vec![1, 2], "/sensors/temp").with_payload(b"x".to_vec());
        let back = CoapMessage::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.path(), "/sensors/temp");
        assert_eq!(Code::CONTENT.to_string(), "2.05");
        assert_eq!(Code::NOT_FOUND.0, (4 << 5) | 4);
        assert!(CoapMessage::decode(&m.encode().unwrap()[..5]).is_err());
    }

    #[test]
    fn server_answers_known_unknown_and_unauthorized() {
        let g = crate::id::root_group(16).unwrap();
        let mut s = CoapServer::default();
        let entry = ResourceEntry {
            path: "/temp".into(),
            handler: static_handler("21.5"),
            resource_name: "temperature".into(),
            group: g,
        };
        s.serve(entry.clone()).unwrap();
        assert!(matches!(s.serve(entry), Err(Error::DuplicatePath(_))));
        let c = peer("c");
        let get = CoapMessage::request(MsgType::Con, Code::GET, 1, vec![9], "/temp");
        let r = s.handle(c, g, &get, true, 0).unwrap();
        assert_eq!((r.msg_type, r.code, r.message_id), (MsgType::Ack, Code::CONTENT, 1));
        assert_eq!(r.payload, b"21.5");
        assert_eq!(r.token, vec![9]);
        let nope = CoapMessage::request(MsgType::Con, Code::GET, 2, vec![8], "/nope");
        assert_eq!(s.handle(c, g, &nope, true, 0).unwrap().code, Code::NOT_FOUND);
        let sec = CoapMessage::request(MsgType::Con, Code::GET, 3, vec![7], "/temp");
        assert_eq!(s.handle(c, g, &sec, false, 0).unwrap().code, Code::UNAUTHORIZED);
        // a retransmitted request is answered from the cache
        s.handle(c, g, &get, true, 10).unwrap();
        assert_eq!(s.duplicates, 1);
    }

    #[test]
    fn backoff_schedule_and_timeout() {
        let mut c = CoapClient::new(0);
        let req = c.build(MsgType::Con, Code::GET, "/temp", vec![]);
        let dst = peer("s");
        c.track(dst, req.clone(), 1_000);
        let mut now;
        let mut retransmits = Vec::new();
        loop {
            now = c.next_deadline().unwrap();
            match c.poll(now).pop().unwrap() {
                ClientTimer::Retransmit { .. } => retransmits.push(now - 1_000),
                ClientTimer::TimedOut(p) => {
                    assert_eq!(p.sent_at.len(), 5);
                    break;
                }
            }
        }
        // gaps of 2, 4, 8, 16 s; the timeout fires 32 s after the last send
        assert_eq!(retransmits, vec![2_000, 6_000, 14_000, 30_000]);
        assert_eq!(now - 1_000, 62_000);
        assert_eq!(c.match_response(&CoapMessage::response_to(&req, Code::CONTENT, vec![], 0)), Matched::Orphan);
        assert_eq!(c.orphans, 1);
    }

    #[test]
    fn match_response_resolves_once() {
        let mut c = CoapClient::new(0);
        let req = c.build(MsgType::Con, Code::GET, "/temp", vec![]);
        c.track(peer("s"), req.clone(), 0);
        let resp = CoapMessage::response_to(&req, Code::CONTENT, b"ok".to_vec(), 0);
        assert!(matches!(c.match_response(&resp), Matched::Resolved { .. }));
        assert_eq!(c.match_response(&resp), Matched::Duplicate);
        assert_eq!((c.orphans, c.duplicates), (0, 1));
    }
}
