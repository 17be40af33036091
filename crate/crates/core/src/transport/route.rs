use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::id::PeerId;
use crate::transport::EndpointAddress;

/// What a peer knows about other peers' attachments, learned from
/// advertisements and overlay traffic.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    entries: BTreeMap<PeerId, KnownPeer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct KnownPeer {
    endpoints: Vec<EndpointAddress>,
    expires_at: u64,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `peer`'s endpoints; a later expiry never shortens a known one.
    pub fn learn(&mut self, peer: PeerId, endpoints: &[EndpointAddress], expires_at: u64) {
        if endpoints.is_empty() {
            return;
        }
        match self.entries.get_mut(&peer) {
            Some(known) if known.endpoints == endpoints => {
                known.expires_at = known.expires_at.max(expires_at);
            }
            _ => {
                self.entries.insert(
                    peer,
                    KnownPeer { endpoints: endpoints.to_vec(), expires_at },
                );
            }
        }
    }

    pub fn forget(&mut self, peer: &PeerId) {
        self.entries.remove(peer);
    }

    pub fn endpoints(&self, peer: &PeerId, now: u64) -> Option<&[EndpointAddress]> {
        self.entries
            .get(peer)
            .filter(|k| k.expires_at > now)
            .map(|k| k.endpoints.as_slice())
    }

    /// Live entries with their expiry.
    pub fn entries(&self, now: u64) -> impl Iterator<Item = (PeerId, &[EndpointAddress], u64)> {
        self.entries
            .iter()
            .filter(move |(_, k)| k.expires_at > now)
            .map(|(id, k)| (*id, k.endpoints.as_slice(), k.expires_at))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Live peers attached to two or more segments.
    pub fn bridges(&self, now: u64) -> impl Iterator<Item = (PeerId, &[EndpointAddress])> {
        self.entries.iter().filter_map(move |(id, k)| {
            (k.expires_at > now && segments_of(&k.endpoints).len() >= 2)
                .then_some((*id, k.endpoints.as_slice()))
        })
    }
}

fn segments_of(endpoints: &[EndpointAddress]) -> BTreeSet<&str> {
    endpoints.iter().filter_map(|e| e.segment()).collect()
}

fn endpoint_on<'a>(endpoints: &'a [EndpointAddress], segment: &str) -> Option<&'a EndpointAddress> {
    endpoints.iter().find(|e| e.segment() == Some(segment))
}

/// A source route through zero or more bridge peers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    pub destination: PeerId,
    /// First link-level receiver: a bridge, or the destination itself.
    pub next_hop: EndpointAddress,
    /// The source's attachment on `segment_path[0]`.
    pub egress: EndpointAddress,
    pub segment_path: Vec<String>,
    /// Bridges in traversal order.
    pub relays: Vec<PeerId>,
    /// Link-level receiver at each stage; `hops[k]` sits on `segment_path[k]`.
    pub hops: Vec<EndpointAddress>,
    /// Number of relays.
    pub cost: usize,
}

/// Minimum-relay path from `src` to `dst` over the segment graph known to
/// `directory`: segments are vertices, bridges are edges. Ties go to the
/// lexicographically smallest segment path, then the smallest bridge id.
pub fn resolve_route(
    directory: &Directory,
    src: PeerId,
    src_endpoints: &[EndpointAddress],
    dst: PeerId,
    now: u64,
) -> Result<RouteEntry> {
    let dst_eps = directory
        .endpoints(&dst, now)
        .ok_or_else(|| Error::Unreachable(format!("no advertisement for {dst}")))?;
    let src_segs = segments_of(src_endpoints);
    let dst_segs = segments_of(dst_eps);

    // segment -> adjacent (segment, bridge) pairs
    let mut adjacency: BTreeMap<&str, BTreeMap<&str, PeerId>> = BTreeMap::new();
    for (bridge, eps) in directory.bridges(now) {
        if bridge == src || bridge == dst {
            continue;
        }
        let segs = segments_of(eps);
        for a in &segs {
            for b in &segs {
                if a != b {
                    let slot = adjacency.entry(a).or_default().entry(b).or_insert(bridge);
                    if bridge < *slot {
                        *slot = bridge;
                    }
                }
            }
        }
    }

    let mut visited: BTreeSet<&str> = src_segs.clone();
    let mut frontier: BTreeMap<&str, Vec<&str>> = src_segs.iter().map(|s| (*s, vec![*s])).collect();
    let path = loop {
        if frontier.is_empty() {
            return Err(Error::Unreachable(format!("no segment path to {dst}")));
        }
        if let Some(best) = frontier
            .iter()
            .filter(|(seg, _)| dst_segs.contains(*seg))
            .map(|(_, p)| p)
            .min()
        {
            break best.clone();
        }
        let mut next: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (seg, path) in &frontier {
            for t in adjacency.get(seg).into_iter().flat_map(|m| m.keys()) {
                if visited.contains(t) {
                    continue;
                }
                let mut candidate = path.clone();
                candidate.push(t);
                match next.get(t) {
                    Some(existing) if *existing <= candidate => {}
                    _ => {
                        next.insert(t, candidate);
                    }
                }
            }
        }
        visited.extend(next.keys().copied());
        frontier = next;
    };

    let mut relays = Vec::new();
    let mut hops = Vec::new();
    for pair in path.windows(2) {
        let bridge = adjacency[pair[0]][pair[1]];
        let eps = directory.endpoints(&bridge, now).unwrap();
        relays.push(bridge);
        hops.push(endpoint_on(eps, pair[0]).unwrap().clone());
    }
    let last = path.last().unwrap();
    hops.push(endpoint_on(dst_eps, last).unwrap().clone());
    let egress = endpoint_on(src_endpoints, path[0]).unwrap().clone();
    Ok(RouteEntry {
        destination: dst,
        next_hop: hops[0].clone(),
        egress,
        segment_path: path.iter().map(|s| s.to_string()).collect(),
        cost: relays.len(),
        relays,
        hops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::TransportKind::*;

    fn pid(n: &str) -> PeerId {
        PeerId::from_name(n.as_bytes(), 16).unwrap()
    }

    fn ep(seg: &str, label: &str) -> EndpointAddress {
        EndpointAddress::sim(Mem, seg, label)
    }

    #[test]
    fn same_segment_is_direct() {
        let mut d = Directory::new();
        d.learn(pid("b"), &[ep("s1", "b")], u64::MAX);
        let r = resolve_route(&d, pid("a"), &[ep("s1", "a")], pid("b"), 0).unwrap();
        assert_eq!(r.cost, 0);
        assert_eq!(r.next_hop, ep("s1", "b"));
        assert_eq!(r.segment_path, vec!["s1"]);
    }

    #[test]
    fn one_bridge() {
        let mut d = Directory::new();
        d.learn(pid("b"), &[ep("s2", "b")], u64::MAX);
        d.learn(pid("r"), &[ep("s1", "r"), ep("s2", "r")], u64::MAX);
        let r = resolve_route(&d, pid("a"), &[ep("s1", "a")], pid("b"), 0).unwrap();
        assert_eq!(r.cost, 1);
        assert_eq!(r.relays, vec![pid("r")]);
        assert_eq!(r.segment_path, vec!["s1", "s2"]);
        assert_eq!(r.hops, vec![ep("s1", "r"), ep("s2", "b")]);
    }

    #[test]
    fn chain_of_two_bridges_and_no_path() {
        let mut d = Directory::new();
        d.learn(pid("b"), &[ep("s3", "b")], u64::MAX);
        d.learn(pid("r1"), &[ep("s1", "r1"), ep("s2", "r1")], u64::MAX);
        let err = resolve_route(&d, pid("a"), &[ep("s1", "a")], pid("b"), 0).unwrap_err();
        assert!(matches!(err, Error::Unreachable(_)));
        d.learn(pid("r2"), &[ep("s2", "r2"), ep("s3", "r2")], u64::MAX);
        let r = resolve_route(&d, pid("a"), &[ep("s1", "a")], pid("b"), 0).unwrap();
        assert_eq!(r.cost, 2);
        assert_eq!(r.segment_path, vec!["s1", "s2", "s3"]);
    }

    #[test]
    fn expired_bridge_is_ignored() {
        let mut d = Directory::new();
        d.learn(pid("b"), &[ep("s2", "b")], u64::MAX);
        d.learn(pid("r"), &[ep("s1", "r"), ep("s2", "r")], 100);
        assert!(resolve_route(&d, pid("a"), &[ep("s1", "a")], pid("b"), 50).is_ok());
        assert!(resolve_route(&d, pid("a"), &[ep("s1", "a")], pid("b"), 100).is_err());
    }
}
