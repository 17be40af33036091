//! Unicast and propagate pipes, PIPE_DATA framing and duplicate suppression.

use std::collections::{BTreeSet, VecDeque};

use crate::advertisement::{attr, AdvKind, Advertisement};
use crate::error::{Error, Result};
use crate::id::{GroupId, NodeId, PeerId, ResourceId};
use crate::wire::{Format, PutExt, Reader};

/// Entries kept by a [`DedupWindow`].
pub const DEDUP_WINDOW: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnicastPipe {
    pub pipe_id: ResourceId,
    pub remote: PeerId,
    pub group: GroupId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fanout {
    /// Each receiver forwards to its ring successor until the sender is reached.
    RingWalk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagatePipe {
    pub pipe_id: ResourceId,
    pub group: GroupId,
    pub fanout: Fanout,
}

impl PropagatePipe {
    pub fn new(pipe_id: ResourceId, group: GroupId) -> Self {
        PropagatePipe { pipe_id, group, fanout: Fanout::RingWalk }
    }
}

/// Builds the advertisement a peer publishes for a pipe it listens on.
pub fn pipe_advertisement(pipe_id: ResourceId, name: &str, group: GroupId, owner: PeerId) -> Advertisement {
    Advertisement::new(AdvKind::Pipe, pipe_id.0, group, name).with_attr(attr::PEER, owner.to_string())
}

/// Binds a pipe from its advertisement.
pub fn open_unicast_pipe(adv: &Advertisement, now: u64) -> Result<UnicastPipe> {
    if adv.kind != AdvKind::Pipe {
        return Err(Error::Binding(format!("{} advertisement is not a pipe", adv.kind.as_str())));
    }
    if adv.is_expired(now) {
        return Err(Error::Binding(format!("pipe {} expired at {}", adv.name, adv.expiration)));
    }
    let remote = adv
        .attributes
        .get(attr::PEER)
        .ok_or_else(|| Error::Binding(format!("pipe {} names no peer", adv.name)))?;
    let remote = NodeId::from_hex(remote).map_err(|e| Error::Binding(e.to_string()))?;
    Ok(UnicastPipe { pipe_id: ResourceId(adv.subject_id), remote: PeerId(remote), group: adv.group_scope })
}

/// `pipe_id` (u8 len + bytes) followed by the data.
pub fn encode_pipe_data(pipe_id: &ResourceId, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + pipe_id.0.byte_len() + data.len());
    out.put_id(&pipe_id.0);
    out.extend_from_slice(data);
    out
}

pub fn decode_pipe_data(bytes: &[u8]) -> Result<(ResourceId, &[u8])> {
    let mut r = Reader::new(bytes, Format::Payload("pipe data"));
    let id = ResourceId(r.id()?);
    let rest = r.remaining();
    Ok((id, r.bytes(rest)?))
}

/// Remembers the most recent `(src, correlation_id)` pairs.
#[derive(Debug, Clone)]
pub struct DedupWindow {
    cap: usize,
    order: VecDeque<(PeerId, u64)>,
    seen: BTreeSet<(PeerId, u64)>,
}

impl Default for DedupWindow {
    fn default() -> Self {
        DedupWindow::new(DEDUP_WINDOW)
    }
}

impl DedupWindow {
    pub fn new(cap: usize) -> Self {
        DedupWindow { cap, order: VecDeque::new(), seen: BTreeSet::new() }
    }

    /// True the first time a pair is seen within the window.
    pub fn first_sight(&mut self, src: PeerId, correlation_id: u64) -> bool {
        let key = (src, correlation_id);
        if self.seen.contains(&key) {
            // refresh recency
            if let Some(i) = self.order.iter().position(|k| *k == key) {
                self.order.remove(i);
            }
            self.order.push_back(key);
            return false;
        }
        if self.order.len() == self.cap {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(key);
        self.seen.insert(key);
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: u8 = 16;

    #[test]
    fn pipe_binding_rules() {
        let g = crate::id::root_group(M).unwrap();
        let owner = PeerId::from_name(b"srv", M).unwrap();
        let pid = ResourceId::from_name(b"chat", M).unwrap();
        let adv = pipe_advertisement(pid, "chat", g, owner).with_expiration(1000);
        let pipe = open_unicast_pipe(&adv, 10).unwrap();
        assert_eq!(pipe.remote, owner);
        assert_eq!(pipe.pipe_id, pid);
        assert!(matches!(open_unicast_pipe(&adv, 1000), Err(Error::Binding(_))));
    }

    #[test]
    fn pipe_data_framing() {
        let pid = ResourceId::from_name(b"chat", M).unwrap();
        let bytes = encode_pipe_data(&pid, b"ping");
        let (id, data) = decode_pipe_data(&bytes).unwrap();
        assert_eq!(id, pid);
        assert_eq!(data, b"ping");
    }

    #[test]
    fn dedup_window_evicts_oldest() {
        let a = PeerId::from_name(b"a", M).unwrap();
        let mut w = DedupWindow::new(3);
        assert!(w.first_sight(a, 1));
        assert!(!w.first_sight(a, 1));
        for c in 2..=4 {
            assert!(w.first_sight(a, c));
        }
        assert_eq!(w.len(), 3);
        // 1 was the least recent and fell out
        assert!(w.first_sight(a, 1));
        assert!(!w.first_sight(a, 4));
    }
}
