use std::collections::BTreeMap;

use crate::id::{in_interval, NodeId, Openness, PeerId};
use crate::transport::EndpointAddress;

/// A peer id plus the endpoints it can be reached on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRef {
    pub id: PeerId,
    pub endpoints: Vec<EndpointAddress>,
}

impl PeerRef {
    pub fn new(id: PeerId, endpoints: Vec<EndpointAddress>) -> Self {
        PeerRef { id, endpoints }
    }

    pub fn bare(id: PeerId) -> Self {
        PeerRef { id, endpoints: Vec::new() }
    }

    pub fn node(&self) -> NodeId {
        self.id.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhtRecord {
    pub key: NodeId,
    /// Encoded advertisement.
    pub payload: Vec<u8>,
    pub publisher: PeerId,
    pub expires_at: u64,
}

impl DhtRecord {
    pub fn is_live(&self, now: u64) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChordConfig {
    /// Ring width in bits.
    pub m: u8,
    /// Successor-list length and replica count.
    pub r: usize,
    pub stabilize_ms: u64,
    /// Timeout for direct RPCs and per-hop forwarding acks.
    pub rpc_timeout_ms: u64,
    pub lookup_timeout_ms: u64,
    /// Owners push their records to replicas every this many rounds.
    pub replicate_every: u64,
    /// Replica copies not refreshed for this long are dropped.
    pub replica_lease_ms: u64,
    /// How long a peer that missed a deadline stays excluded from routing.
    pub suspect_ms: u64,
}

impl ChordConfig {
    pub fn new(m: u8) -> Self {
        let stabilize_ms = 500;
        ChordConfig {
            m,
            r: 4,
            stabilize_ms,
            rpc_timeout_ms: 2 * stabilize_ms,
            lookup_timeout_ms: 16 * stabilize_ms,
            replicate_every: 4,
            replica_lease_ms: 12 * stabilize_ms,
            suspect_ms: 10 * stabilize_ms,
        }
    }
}

impl Default for ChordConfig {
    fn default() -> Self {
        ChordConfig::new(64)
    }
}

/// `m` shortcuts; entry `i` (0-based here) targets `n + 2^i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerTable {
    owner: NodeId,
    entries: Vec<Option<PeerRef>>,
}

impl FingerTable {
    pub fn new(owner: NodeId) -> Self {
        FingerTable { owner, entries: vec![None; owner.bits() as usize] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn start(&self, index: usize) -> NodeId {
        self.owner.add_pow2(index as u8)
    }

    pub fn get(&self, index: usize) -> Option<&PeerRef> {
        self.entries[index].as_ref()
    }

    pub fn set(&mut self, index: usize, peer: PeerRef) {
        self.entries[index] = Some(peer);
    }

    pub fn clear_peer(&mut self, peer: &PeerId) {
        for e in &mut self.entries {
            if e.as_ref().is_some_and(|p| p.id == *peer) {
                *e = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&PeerRef>> {
        self.entries.iter().map(|e| e.as_ref())
    }
}

/// Up to `r` distinct successors, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuccessorList {
    r: usize,
    peers: Vec<PeerRef>,
}

impl SuccessorList {
    pub fn new(r: usize, first: PeerRef) -> Self {
        SuccessorList { r, peers: vec![first] }
    }

    pub fn first(&self) -> &PeerRef {
        &self.peers[0]
    }

    pub fn as_slice(&self) -> &[PeerRef] {
        &self.peers
    }

    pub fn ids(&self) -> Vec<PeerId> {
        self.peers.iter().map(|p| p.id).collect()
    }

    /// Replaces the list with `candidates` minus `me`, duplicates and
    /// anything `keep` rejects, truncated to `r`. Falls back to `me` alone.
    pub fn rebuild<'a>(
        &mut self,
        me: &PeerRef,
        candidates: impl IntoIterator<Item = &'a PeerRef>,
        keep: impl Fn(&PeerId) -> bool,
    ) {
        let mut out: Vec<PeerRef> = Vec::with_capacity(self.r);
        for c in candidates {
            if out.len() == self.r {
                break;
            }
            if c.id == me.id || !keep(&c.id) || out.iter().any(|p| p.id == c.id) {
                continue;
            }
            out.push(c.clone());
        }
        if out.is_empty() {
            out.push(me.clone());
        }
        self.peers = out;
    }
}

/// A stored record plus the last time its owner refreshed it here.
#[derive(Debug, Clone)]
struct Stored {
    record: DhtRecord,
    refreshed_at: u64,
}

/// Multi-value record store: one record per `(key, publisher)`.
#[derive(Debug, Clone, Default)]
pub struct RecordStore {
    map: BTreeMap<NodeId, BTreeMap<PeerId, Stored>>,
}

impl RecordStore {
    pub fn insert(&mut self, record: DhtRecord, now: u64) {
        self.map
            .entry(record.key)
            .or_default()
            .insert(record.publisher, Stored { record, refreshed_at: now });
    }

    pub fn live(&self, key: &NodeId, now: u64) -> Vec<DhtRecord> {
        self.map
            .get(key)
            .into_iter()
            .flat_map(|m| m.values())
            .filter(|s| s.record.is_live(now))
            .map(|s| s.record.clone())
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &NodeId> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Live records whose key satisfies `pred`.
    pub fn select(&self, now: u64, pred: impl Fn(&NodeId) -> bool) -> Vec<DhtRecord> {
        self.map
            .iter()
            .filter(|(k, _)| pred(k))
            .flat_map(|(_, m)| m.values())
            .filter(|s| s.record.is_live(now))
            .map(|s| s.record.clone())
            .collect()
    }

    pub fn touch(&mut self, now: u64, pred: impl Fn(&NodeId) -> bool) {
        for (_, m) in self.map.iter_mut().filter(|(k, _)| pred(k)) {
            for s in m.values_mut() {
                s.refreshed_at = now;
            }
        }
    }

    /// Drops expired records, and records outside the owned range that have
    /// not been refreshed within `lease_ms`.
    pub fn sweep(&mut self, now: u64, lease_ms: u64, owned: Option<(&NodeId, &NodeId)>) {
        for (key, m) in self.map.iter_mut() {
            let is_owned = owned.is_none_or(|(pred, me)| in_interval(key, pred, me, Openness::OpenClosed));
            m.retain(|_, s| s.record.is_live(now) && (is_owned || s.refreshed_at + lease_ms > now));
        }
        self.map.retain(|_, m| !m.is_empty());
    }
}
