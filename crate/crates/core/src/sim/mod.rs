//! Deterministic discrete-event simulator. All randomness comes from one
//! seeded ChaCha8 stream and all iteration is over ordered maps, so a
//! `(scenario, seed)` pair always produces the same report.

pub mod metrics;
mod net;
mod peer;
pub mod scenario;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advertisement::Advertisement;
use crate::chord::{ChordNode, DhtRecord, GetResult, LookupResult, PeerRef};
use crate::coap::{CoapMessage, Code, Handler, MsgType};
use crate::envelope::MessageEnvelope;
use crate::error::{Error, Result};
use crate::group::{Credential, GroupPolicy, KeyRing};
use crate::id::{root_group, GroupId, NodeId, PeerId};
use crate::transport::{EndpointAddress, LinkProfile, TransportKind};

pub use metrics::{MetricLine, Metrics, MetricsReport};
pub use net::{Captured, DropRule, PayloadTrace, Segment, SimLog, TraceRole, Transmission};
pub use peer::{GroupInfo, Peer, AD_LIFETIME_MS, BEACON_INTERVAL_MS, LEARNED_LIFETIME_MS};

use net::{Ctx, EventKind, EventQueue};

/// Handle for an asynchronous operation; its outcome is fetched with
/// [`Sim::result`] or awaited with [`Sim::run_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub enum OpResult {
    Done,
    Joined,
    Lookup(LookupResult),
    Records(GetResult),
    Discovered { ads: Vec<Advertisement>, hops: u8, latency_ms: u64 },
    Coap { response: CoapMessage, sent_at: Vec<u64>, latency_ms: u64 },
    Multicast { responses: Vec<(PeerId, CoapMessage)> },
}

/// Outcome of one propagate send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagateReport {
    pub delivered: Vec<PeerId>,
    pub transmissions: u64,
    pub duplicates: u64,
}

pub struct Sim {
    ctx: Ctx,
    peers: BTreeMap<PeerId, Peer>,
    labels: BTreeMap<String, PeerId>,
    groups: BTreeMap<GroupId, GroupInfo>,
    /// Root-ring members in the order they started joining.
    root_order: Vec<PeerId>,
    next_op: u64,
}

impl Sim {
    pub fn new(seed: u64, m: u8) -> Result<Self> {
        if !m.is_multiple_of(8) || !(8..=128).contains(&m) {
            return Err(Error::Config(format!("ring width {m} must be a multiple of 8 in 8..=128")));
        }
        let root = GroupInfo { id: root_group(m)?, name: crate::id::ROOT_GROUP_NAME.into(), parent: None, policy: GroupPolicy::Open };
        Ok(Sim {
            ctx: Ctx {
                now: 0,
                m,
                rng: ChaCha8Rng::seed_from_u64(seed),
                queue: EventQueue::default(),
                segments: BTreeMap::new(),
                metrics: Metrics::default(),
                results: BTreeMap::new(),
                log: SimLog::default(),
                drop_rules: Vec::new(),
            },
            peers: BTreeMap::new(),
            labels: BTreeMap::new(),
            groups: BTreeMap::from([(root.id, root)]),
            root_order: Vec::new(),
            next_op: 0,
        })
    }

    pub fn now(&self) -> u64 {
        self.ctx.now
    }

    pub fn m(&self) -> u8 {
        self.ctx.m
    }

    pub fn root(&self) -> GroupId {
        root_group(self.ctx.m).expect("validated in new")
    }

    fn op(&mut self) -> OpId {
        self.next_op += 1;
        OpId(self.next_op)
    }

    // ---- topology ----

    pub fn add_segment(&mut self, name: &str, kind: TransportKind, profile: LinkProfile) -> Result<()> {
        profile.validate()?;
        if kind == TransportKind::Tcp {
            return Err(Error::Config("tcp endpoints are not simulated".into()));
        }
        if name.is_empty() || name.contains('/') {
            return Err(Error::Config(format!("bad segment name {name:?}")));
        }
        if self.ctx.segments.contains_key(name) {
            return Err(Error::Config(format!("segment {name} already exists")));
        }
        self.ctx.segments.insert(name.to_string(), Segment::new(name, kind, profile));
        Ok(())
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.ctx.segments.get(name)
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.ctx.segments.values()
    }

    /// Creates a peer named `label` attached to each of `segments`.
    pub fn add_peer(&mut self, label: &str, segments: &[&str]) -> Result<PeerId> {
        if self.labels.contains_key(label) {
            return Err(Error::Config(format!("peer {label} already exists")));
        }
        let id = PeerId::from_name(label.as_bytes(), self.ctx.m)?;
        if self.peers.contains_key(&id) {
            return Err(Error::Config(format!("peer id collision for {label}")));
        }
        self.peers.insert(id, Peer::new(id, label, self.ctx.m));
        self.labels.insert(label.to_string(), id);
        for s in segments {
            let kind = self
                .ctx
                .segments
                .get(*s)
                .ok_or_else(|| Error::Config(format!("unknown segment {s}")))?
                .kind;
            self.register_transport(id, EndpointAddress::sim(kind, s, label))?;
        }
        Ok(id)
    }

    /// Attaches `endpoint` (of the form `<segment>/<name>`) to `peer`.
    pub fn register_transport(&mut self, peer: PeerId, endpoint: EndpointAddress) -> Result<()> {
        let seg_name = endpoint
            .segment()
            .ok_or_else(|| Error::Config(format!("{endpoint} is not a simulated endpoint")))?
            .to_string();
        let seg = self
            .ctx
            .segments
            .get_mut(&seg_name)
            .ok_or_else(|| Error::Config(format!("unknown segment {seg_name}")))?;
        if seg.kind != endpoint.kind {
            return Err(Error::Config(format!("{endpoint} does not match segment kind {}", seg.kind.as_str())));
        }
        if seg.members.contains_key(&endpoint.address) {
            return Err(Error::DuplicateRegistration(endpoint.to_string()));
        }
        let p = self.peers.get_mut(&peer).ok_or_else(|| Error::Precondition(format!("unknown peer {peer}")))?;
        if p.segments().contains(seg_name.as_str()) {
            return Err(Error::DuplicateRegistration(format!("{} already attached to {seg_name}", p.label)));
        }
        seg.members.insert(endpoint.address.clone(), peer);
        p.endpoints.push(endpoint);
        if p.is_bridge() && !p.beacon_armed {
            p.beacon_armed = true;
            self.ctx.queue.push(self.ctx.now, EventKind::Beacon { peer });
        }
        Ok(())
    }

    pub fn peer_id(&self, label: &str) -> Option<PeerId> {
        self.labels.get(label).copied()
    }

    pub fn peer(&self, id: PeerId) -> Option<&Peer> {
        self.peers.get(&id)
    }

    pub fn peers(&self) -> impl Iterator<Item = &Peer> {
        self.peers.values()
    }

    fn live_peer(&mut self, id: PeerId) -> Result<&mut Peer> {
        live(&mut self.peers, id)
    }

    // ---- groups ----

    /// Joins the root ring through an already joined peer, preferring one on
    /// a shared segment; the first peer creates the ring.
    pub fn join_root(&mut self, peer: PeerId) -> Result<OpId> {
        let root = self.groups[&self.root()].clone();
        let me = self.live_peer(peer)?;
        let my_segs: Vec<String> = me.segments().into_iter().map(String::from).collect();
        let candidates: Vec<&Peer> = self
            .root_order
            .iter()
            .filter_map(|id| self.peers.get(id))
            .filter(|p| p.alive && p.id != peer && p.is_joined(&root.id))
            .collect();
        let bootstrap = candidates
            .iter()
            .find(|p| p.segments().iter().any(|s| my_segs.iter().any(|m| m == s)))
            .or(candidates.first())
            .map(|p| p.peer_ref());
        let op = self.op();
        if !self.root_order.contains(&peer) {
            self.root_order.push(peer);
        }
        let p = self.peers.get_mut(&peer).unwrap();
        p.join_ring(&mut self.ctx, root, bootstrap, Some(op));
        self.reschedule(peer);
        Ok(op)
    }

    /// Creates a child group of `parent` with `creator` as its key authority.
    pub fn create_group(&mut self, creator: PeerId, parent: GroupId, name: &str, policy: GroupPolicy) -> Result<(GroupId, OpId)> {
        if !self.groups.contains_key(&parent) {
            return Err(Error::Precondition(format!("unknown parent group {parent}")));
        }
        let g = crate::group::PeerGroup::child(&parent, name, policy)?;
        if let Some(existing) = self.groups.get(&g.id) {
            if existing.policy != policy {
                return Err(Error::Config(format!("group {name} already exists with another policy")));
            }
        }
        let info = GroupInfo { id: g.id, name: name.to_string(), parent: Some(parent), policy };
        let op = self.op();
        let p = live(&mut self.peers, creator)?;
        p.create_group(&mut self.ctx, op, info.clone())?;
        self.groups.entry(info.id).or_insert(info);
        self.reschedule(creator);
        Ok((g.id, op))
    }

    pub fn group(&self, id: &GroupId) -> Option<&GroupInfo> {
        self.groups.get(id)
    }

    pub fn group_named(&self, name: &str) -> Option<GroupId> {
        self.groups.values().find(|g| g.name == name).map(|g| g.id)
    }

    /// Out-of-band credential from the group's creator.
    pub fn issue_credential(&self, creator: PeerId, group: GroupId, peer: PeerId) -> Result<Credential> {
        let c = self.peers.get(&creator).ok_or_else(|| Error::Precondition(format!("unknown peer {creator}")))?;
        c.issue_credential(&group, peer, self.ctx.now)
    }

    pub fn join_group(&mut self, peer: PeerId, group: GroupId, credential: Option<Credential>) -> Result<OpId> {
        let info = self.groups.get(&group).cloned().ok_or_else(|| Error::Precondition(format!("unknown group {group}")))?;
        if info.parent.is_none() {
            return self.join_root(peer);
        }
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.join_group(&mut self.ctx, op, info, credential)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn rotate_key(&mut self, creator: PeerId, group: GroupId, evict: &[PeerId]) -> Result<u32> {
        let p = live(&mut self.peers, creator)?;
        let id = p.rotate_key(&mut self.ctx, group, evict)?;
        self.reschedule(creator);
        Ok(id)
    }

    pub fn key_ring(&self, peer: PeerId, group: GroupId) -> Option<&KeyRing> {
        self.peers.get(&peer)?.key_ring(&group)
    }

    /// Live peers whose ring for `group` has joined.
    pub fn members(&self, group: GroupId) -> Vec<PeerId> {
        self.peers.values().filter(|p| p.alive && p.is_joined(&group)).map(|p| p.id).collect()
    }

    pub fn chord(&self, peer: PeerId, group: GroupId) -> Option<&ChordNode> {
        self.peers.get(&peer)?.chord(&group)
    }

    // ---- services ----

    pub fn serve(&mut self, peer: PeerId, group: GroupId, path: &str, name: &str, handler: Handler) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.serve(&mut self.ctx, op, group, path, name, handler)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn discover(&mut self, peer: PeerId, group: GroupId, name: &str) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.discover(&mut self.ctx, op, group, name)?;
        self.reschedule(peer);
        Ok(op)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn coap_request(
        &mut self,
        peer: PeerId,
        group: GroupId,
        target: PeerId,
        msg_type: MsgType,
        method: Code,
        path: &str,
        payload: Vec<u8>,
    ) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.coap_request(&mut self.ctx, op, group, target, msg_type, method, path, payload)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn coap_multicast(&mut self, peer: PeerId, group: GroupId, method: Code, path: &str, payload: Vec<u8>) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.coap_multicast(&mut self.ctx, op, group, method, path, payload)?;
        self.reschedule(peer);
        Ok(op)
    }

    /// Sends `data` to every member of `group`; returns the correlation id.
    pub fn propagate(&mut self, peer: PeerId, group: GroupId, data: &[u8]) -> Result<u64> {
        let p = live(&mut self.peers, peer)?;
        let corr = p.propagate(&mut self.ctx, group, data)?;
        self.reschedule(peer);
        Ok(corr)
    }

    pub fn propagate_report(&self, src: PeerId, correlation_id: u64) -> PropagateReport {
        let key = (src, correlation_id);
        let log = &self.ctx.log;
        PropagateReport {
            delivered: log.deliveries.get(&key).cloned().unwrap_or_default(),
            transmissions: log.propagate_tx.get(&key).copied().unwrap_or(0),
            duplicates: log.duplicates.get(&key).copied().unwrap_or(0),
        }
    }

    pub fn listen_pipe(&mut self, peer: PeerId, group: GroupId, name: &str) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.listen_pipe(&mut self.ctx, op, group, name)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn pipe_send(&mut self, peer: PeerId, group: GroupId, name: &str, data: Vec<u8>) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.pipe_send(&mut self.ctx, op, group, name, data)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn lookup(&mut self, peer: PeerId, group: GroupId, key: NodeId) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.lookup(&mut self.ctx, op, group, key)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn dht_put(&mut self, peer: PeerId, group: GroupId, record: DhtRecord) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.dht_put(&mut self.ctx, op, group, record)?;
        self.reschedule(peer);
        Ok(op)
    }

    pub fn dht_get(&mut self, peer: PeerId, group: GroupId, key: NodeId) -> Result<OpId> {
        let op = self.op();
        let p = live(&mut self.peers, peer)?;
        p.dht_get(&mut self.ctx, op, group, key)?;
        self.reschedule(peer);
        Ok(op)
    }

    /// Injects an envelope as if `from` had sent it to `to` directly.
    pub fn inject(&mut self, to: PeerId, env: MessageEnvelope) {
        self.ctx.queue.push(self.ctx.now, EventKind::Local { to, env });
    }

    // ---- faults and observation ----

    /// Stops a peer: it drops everything it receives and its timers die.
    pub fn crash(&mut self, peer: PeerId) -> Result<()> {
        let p = self.peers.get_mut(&peer).ok_or_else(|| Error::Precondition(format!("unknown peer {peer}")))?;
        p.alive = false;
        self.ctx.metrics.incr("peers.crashed", 1);
        Ok(())
    }

    /// Every transmission matching `rule` consumes airtime but is never
    /// delivered.
    pub fn add_drop_rule(&mut self, rule: DropRule) {
        self.ctx.drop_rules.push(rule);
    }

    pub fn clear_drop_rules(&mut self) {
        self.ctx.drop_rules.clear();
    }

    /// Starts recording every envelope sent on `segment`.
    pub fn tap(&mut self, segment: &str) -> Result<()> {
        let seg = self.ctx.segments.get_mut(segment).ok_or_else(|| Error::Config(format!("unknown segment {segment}")))?;
        seg.tap.get_or_insert_with(Vec::new);
        Ok(())
    }

    pub fn captures(&self, segment: &str) -> &[Captured] {
        self.ctx.segments.get(segment).and_then(|s| s.tap.as_deref()).unwrap_or(&[])
    }

    pub fn set_trace_payloads(&mut self, on: bool) {
        self.ctx.log.trace_payloads = on;
    }

    pub fn log(&self) -> &SimLog {
        &self.ctx.log
    }

    pub fn metrics(&self) -> &Metrics {
        &self.ctx.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut Metrics {
        &mut self.ctx.metrics
    }

    pub fn report(&self, scenario: Option<&str>) -> MetricsReport {
        let mut m = self.ctx.metrics.clone();
        m.gauge("sim.time", self.ctx.now as f64, Some("ms"));
        m.gauge("sim.peers", self.peers.len() as f64, None);
        m.gauge("sim.peers_alive", self.peers.values().filter(|p| p.alive).count() as f64, None);
        m.report(scenario)
    }

    // ---- clock ----

    /// Processes the next event; false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some((time, kind)) = self.ctx.queue.pop() else { return false };
        self.ctx.now = self.ctx.now.max(time);
        let peer = match &kind {
            EventKind::Frame(f) => f.to,
            EventKind::Local { to, .. } => *to,
            EventKind::Round { peer } | EventKind::Wake { peer } | EventKind::Beacon { peer } => *peer,
            EventKind::RouteStale { to, .. } => *to,
        };
        let Some(p) = self.peers.get_mut(&peer) else { return true };
        if !p.alive {
            return true;
        }
        let ctx = &mut self.ctx;
        match kind {
            EventKind::Frame(f) => p.on_frame(ctx, f),
            EventKind::Local { env, .. } => p.on_envelope(ctx, env),
            EventKind::Round { .. } => p.on_round(ctx),
            EventKind::Wake { .. } => {
                if p.wake_at != Some(time) {
                    return true;
                }
                p.wake_at = None;
                p.poll(ctx);
            }
            EventKind::Beacon { .. } => p.on_beacon_timer(ctx),
            EventKind::RouteStale { bridge, .. } => p.on_route_stale(ctx, bridge),
        }
        self.reschedule(peer);
        true
    }

    fn reschedule(&mut self, peer: PeerId) {
        let Some(p) = self.peers.get_mut(&peer) else { return };
        let Some(d) = p.next_deadline() else { return };
        let d = d.max(self.ctx.now);
        if p.wake_at.is_none_or(|w| d < w) {
            p.wake_at = Some(d);
            self.ctx.queue.push(d, EventKind::Wake { peer });
        }
    }

    /// Runs every event up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: u64) {
        while self.ctx.queue.peek_time().is_some_and(|e| e <= t) {
            self.step();
        }
        self.ctx.now = self.ctx.now.max(t);
    }

    pub fn run_for(&mut self, ms: u64) {
        let t = self.ctx.now + ms;
        self.run_until(t);
    }

    pub fn result(&self, op: OpId) -> Option<&Result<OpResult>> {
        self.ctx.results.get(&op)
    }

    pub fn take_result(&mut self, op: OpId) -> Option<Result<OpResult>> {
        self.ctx.results.remove(&op)
    }

    /// Advances the clock until `op` completes or `max_ms` pass; `None` if
    /// it is still pending.
    pub fn wait(&mut self, op: OpId, max_ms: u64) -> Option<Result<OpResult>> {
        let limit = self.ctx.now + max_ms;
        loop {
            if let Some(r) = self.ctx.results.remove(&op) {
                return Some(r);
            }
            match self.ctx.queue.peek_time() {
                Some(t) if t <= limit => {
                    self.step();
                }
                _ => {
                    self.ctx.now = self.ctx.now.max(limit);
                    return None;
                }
            }
        }
    }

    /// Like [`wait`](Self::wait), with a pending op reported as `Timeout`.
    pub fn run_op(&mut self, op: OpId, max_ms: u64) -> Result<OpResult> {
        self.wait(op, max_ms).unwrap_or(Err(Error::Timeout))
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.ctx.queue.peek_time()
    }

    /// Removes and returns every completed operation.
    pub fn drain_results(&mut self) -> Vec<(OpId, Result<OpResult>)> {
        std::mem::take(&mut self.ctx.results).into_iter().collect()
    }

    pub fn pending_events(&self) -> usize {
        self.ctx.queue.len()
    }

    /// PeerRef of `peer` with its current endpoints.
    pub fn peer_ref(&self, peer: PeerId) -> Option<PeerRef> {
        self.peers.get(&peer).map(|p| p.peer_ref())
    }
}

fn live(peers: &mut BTreeMap<PeerId, Peer>, id: PeerId) -> Result<&mut Peer> {
    match peers.get_mut(&id) {
        Some(p) if p.alive => Ok(p),
        Some(p) => Err(Error::Precondition(format!("{} has crashed", p.label))),
        None => Err(Error::Precondition(format!("unknown peer {id}"))),
    }
}

#[cfg(test)]
mod tests;
