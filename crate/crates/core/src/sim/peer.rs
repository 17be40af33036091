//! One simulated peer: directory, reassembly, rings, group keys, CoAP and
//! pipes, driven by the events the simulator hands it.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use sha2::{Digest, Sha256};

use crate::advertisement::{attr, decode_advertisement, encode_advertisement, AdvKind, Advertisement};
use crate::chord::{ChordAction, ChordConfig, ChordEvent, ChordMsg, ChordNode, DhtRecord, PeerRef};
use crate::coap::{ClientTimer, CoapClient, CoapMessage, CoapServer, Code, Matched, MsgType, ResourceEntry, NON_TIMEOUT_MS};
use crate::envelope::{decode_envelope, flags, MessageEnvelope, PayloadKind, DEFAULT_TTL};
use crate::error::{Error, Result};
use crate::group::{
    sender_nonce, unwrap_group_key, wrap_group_key, Credential, EncryptedPayload, GroupAuthority, GroupPolicy,
    KeyMessage, KeyRing,
};
use crate::id::{GroupId, NodeId, PeerId, ResourceId, scoped_key};
use crate::pipe::{decode_pipe_data, encode_pipe_data, open_unicast_pipe, pipe_advertisement, DedupWindow};
use crate::sim::net::{Ctx, EventKind, Frame, PayloadTrace, RouteMeta, TraceRole};
use crate::sim::{OpId, OpResult};
use crate::transport::{resolve_route, Directory, EndpointAddress, Fragment, Reassembler, REASSEMBLY_TIMEOUT_MS};
use crate::wire::{Format, PutExt, Reader};

pub const BEACON_INTERVAL_MS: u64 = 2_000;
/// Bridge advertisements in beacons live for three beacon periods.
pub const BRIDGE_AD_LIFETIME_MS: u64 = 3 * BEACON_INTERVAL_MS;
pub const AD_LIFETIME_MS: u64 = 3_600_000;
/// Endpoints learned from overlay traffic rather than advertisements.
pub const LEARNED_LIFETIME_MS: u64 = 30_000;
/// How long a joiner waits for the group creator's answer.
pub const ADMISSION_TIMEOUT_MS: u64 = 8_000;
const MAX_PARKED: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupInfo {
    pub id: GroupId,
    pub name: String,
    pub parent: Option<GroupId>,
    pub policy: GroupPolicy,
}

pub(crate) struct Membership {
    pub info: GroupInfo,
    pub chord: ChordNode,
    pub keys: KeyRing,
    pub authority: Option<GroupAuthority>,
    pub credential: Option<Credential>,
    pub creator: Option<PeerRef>,
    pub dedup: DedupWindow,
    fetching: BTreeSet<u32>,
}

enum ChordOp {
    JoinRing { op: Option<OpId> },
    Lookup { op: OpId },
    Put { op: Option<OpId> },
    Get { op: OpId },
    Discover { op: OpId, name: String, started: u64 },
    ResolveGroup { op: OpId, group: GroupId },
    ResolvePeer { dst: PeerId },
    ResolvePipe { op: OpId, group: GroupId, name: String, data: Vec<u8> },
}

struct PendingJoin {
    op: OpId,
    info: GroupInfo,
    credential: Option<Credential>,
    creator: Option<PeerRef>,
    deadline: u64,
}

struct Collect {
    op: OpId,
    deadline: u64,
    responses: Vec<(PeerId, CoapMessage)>,
}

struct CoapOp {
    op: OpId,
    group: GroupId,
    started: u64,
}

enum Opened {
    Plain(Vec<u8>),
    Decrypted(Vec<u8>),
    Failed,
}

pub struct Peer {
    pub id: PeerId,
    pub label: String,
    pub endpoints: Vec<EndpointAddress>,
    pub alive: bool,
    m: u8,
    pub(crate) directory: Directory,
    reasm: Reassembler<PeerId>,
    link_seq: u32,
    corr_seq: u64,
    nonce_seq: u64,
    token_seq: u64,
    pub(crate) groups: BTreeMap<GroupId, Membership>,
    pub(crate) server: CoapServer,
    pub(crate) client: CoapClient,
    coap_ops: BTreeMap<Vec<u8>, CoapOp>,
    collects: BTreeMap<Vec<u8>, Collect>,
    chord_ops: BTreeMap<u64, (GroupId, ChordOp)>,
    joins: BTreeMap<GroupId, PendingJoin>,
    parked: BTreeMap<PeerId, Vec<MessageEnvelope>>,
    pipes: BTreeSet<ResourceId>,
    pub(crate) wake_at: Option<u64>,
    pub(crate) rounds_armed: bool,
    pub(crate) beacon_armed: bool,
}

fn token_u64(token: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    let n = token.len().min(8);
    b[8 - n..].copy_from_slice(&token[token.len() - n..]);
    u64::from_be_bytes(b)
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn encode_ads(ads: &[Advertisement]) -> Vec<u8> {
    let mut out = Vec::new();
    out.put_u16(ads.len() as u16);
    for a in ads {
        let bytes = encode_advertisement(a).expect("beacon advertisements are valid");
        out.put_u32(bytes.len() as u32);
        out.extend_from_slice(&bytes);
    }
    out
}

fn decode_ads(bytes: &[u8]) -> Result<Vec<Advertisement>> {
    let mut r = Reader::new(bytes, Format::Payload("beacon"));
    let n = r.u16()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.u32()? as usize;
        out.push(decode_advertisement(r.bytes(len)?)?);
    }
    r.finish()?;
    Ok(out)
}

fn records_to_ads(records: &[DhtRecord]) -> Vec<Advertisement> {
    records.iter().filter_map(|r| decode_advertisement(&r.payload).ok()).collect()
}

impl Peer {
    pub fn new(id: PeerId, label: &str, m: u8) -> Self {
        Peer {
            id,
            label: label.to_string(),
            endpoints: Vec::new(),
            alive: true,
            m,
            directory: Directory::new(),
            reasm: Reassembler::new(REASSEMBLY_TIMEOUT_MS),
            link_seq: 0,
            corr_seq: 0,
            nonce_seq: 0,
            token_seq: 0,
            groups: BTreeMap::new(),
            server: CoapServer::default(),
            client: CoapClient::new(id.0.low_u32() as u16),
            coap_ops: BTreeMap::new(),
            collects: BTreeMap::new(),
            chord_ops: BTreeMap::new(),
            joins: BTreeMap::new(),
            parked: BTreeMap::new(),
            pipes: BTreeSet::new(),
            wake_at: None,
            rounds_armed: false,
            beacon_armed: false,
        }
    }

    pub fn peer_ref(&self) -> PeerRef {
        PeerRef::new(self.id, self.endpoints.clone())
    }

    pub fn segments(&self) -> BTreeSet<&str> {
        self.endpoints.iter().filter_map(|e| e.segment()).collect()
    }

    pub fn is_bridge(&self) -> bool {
        self.segments().len() >= 2
    }

    pub fn is_joined(&self, group: &GroupId) -> bool {
        self.groups.get(group).is_some_and(|m| m.chord.is_joined())
    }

    pub fn membership_policy(&self, group: &GroupId) -> Option<GroupPolicy> {
        self.groups.get(group).map(|m| m.info.policy)
    }

    pub fn key_ring(&self, group: &GroupId) -> Option<&KeyRing> {
        self.groups.get(group).map(|m| &m.keys)
    }

    pub fn chord(&self, group: &GroupId) -> Option<&ChordNode> {
        self.groups.get(group).map(|m| &m.chord)
    }

    fn peer_ad(&self, group: GroupId, expiration: u64) -> Advertisement {
        let role = if self.is_bridge() { "bridge" } else { "edge" };
        Advertisement::new(AdvKind::Peer, self.id.0, group, self.label.clone())
            .with_attr(attr::ROLE, role)
            .with_endpoints(self.endpoints.clone())
            .with_expiration(expiration)
    }

    fn next_token(&mut self) -> u64 {
        self.token_seq += 1;
        self.token_seq
    }

    fn next_nonce(&mut self) -> [u8; 12] {
        self.nonce_seq += 1;
        sender_nonce(&self.id, self.nonce_seq)
    }

    pub(crate) fn next_deadline(&self) -> Option<u64> {
        let chord = self.groups.values().filter_map(|m| m.chord.next_deadline());
        let collects = self.collects.values().map(|c| c.deadline);
        let joins = self.joins.values().map(|j| j.deadline);
        chord
            .chain(collects)
            .chain(joins)
            .chain(self.client.next_deadline())
            .chain(self.reasm.next_deadline())
            .min()
    }

    // ---- sending ----

    pub(crate) fn send_to(&mut self, ctx: &mut Ctx, to: PeerId, env: MessageEnvelope) {
        if to == self.id {
            ctx.queue.push(ctx.now, EventKind::Local { to, env });
            return;
        }
        match resolve_route(&self.directory, self.id, &self.endpoints, to, ctx.now) {
            Ok(route) => {
                let meta = Rc::new(RouteMeta {
                    source: self.id,
                    source_endpoints: self.endpoints.clone(),
                    segment_path: route.segment_path.clone(),
                    hops: route.hops.clone(),
                });
                if ctx.log.trace_payloads {
                    ctx.log.traces.push(PayloadTrace {
                        correlation_id: env.correlation_id,
                        src: env.src,
                        at: self.id,
                        role: TraceRole::Source,
                        digest: digest(&env.payload),
                    });
                }
                if route.cost > 0 {
                    ctx.metrics.incr("route.bridged", 1);
                }
                self.link_seq = self.link_seq.wrapping_add(1);
                let seg = route.segment_path[0].clone();
                if let Err(e) =
                    ctx.link_send(self.id, &seg, &route.egress, Some(&route.hops[0]), &env, self.link_seq, Some(meta), 0)
                {
                    ctx.metrics.incr(&format!("link.send_errors.{}", error_name(&e)), 1);
                }
            }
            Err(_) if self.directory.endpoints(&to, ctx.now).is_none() => self.park(ctx, to, env),
            Err(_) => ctx.metrics.incr("route.unreachable", 1),
        }
    }

    /// Holds `env` until `to`'s peer advertisement has been fetched.
    fn park(&mut self, ctx: &mut Ctx, to: PeerId, env: MessageEnvelope) {
        let group = if self.is_joined(&env.group) {
            env.group
        } else {
            match self.groups.iter().find(|(_, m)| m.info.parent.is_none() && m.chord.is_joined()) {
                Some((g, _)) => *g,
                None => {
                    ctx.metrics.incr("route.unresolved", 1);
                    return;
                }
            }
        };
        let queue = self.parked.entry(to).or_default();
        let first = queue.is_empty();
        if queue.len() >= MAX_PARKED {
            ctx.metrics.incr("route.parked_overflow", 1);
            return;
        }
        queue.push(env);
        if first {
            let Ok(key) = scoped_key(&group, to.0.to_string().as_bytes()) else { return };
            ctx.metrics.incr("route.resolutions", 1);
            self.chord_call(ctx, group, ChordOp::ResolvePeer { dst: to }, |c, now, t| c.get(now, key, t));
        }
    }

    fn flush_parked(&mut self, ctx: &mut Ctx, dst: PeerId) {
        for env in self.parked.remove(&dst).unwrap_or_default() {
            if self.directory.endpoints(&dst, ctx.now).is_some() {
                self.send_to(ctx, dst, env);
            } else {
                ctx.metrics.incr("route.unresolved", 1);
            }
        }
    }

    fn seal(&mut self, group: &GroupId, plaintext: Vec<u8>) -> (Vec<u8>, u8) {
        let secured = self
            .groups
            .get(group)
            .is_some_and(|m| m.info.policy == GroupPolicy::Secured && m.keys.current().is_some());
        if !secured {
            return (plaintext, 0);
        }
        let nonce = self.next_nonce();
        let ring = &self.groups[group].keys;
        match ring.encrypt(&plaintext, nonce) {
            Ok(ep) => (ep.to_bytes(), flags::ENCRYPTED),
            Err(_) => (plaintext, 0),
        }
    }

    fn open(&mut self, ctx: &mut Ctx, env: &MessageEnvelope) -> Opened {
        if !env.is_encrypted() {
            return Opened::Plain(env.payload.clone());
        }
        let Ok(ep) = EncryptedPayload::from_bytes(&env.payload) else {
            ctx.log.decrypt_failures.entry(env.group).or_default().insert(self.id);
            return Opened::Failed;
        };
        let now = ctx.now;
        let Some(mem) = self.groups.get_mut(&env.group) else {
            ctx.log.decrypt_failures.entry(env.group).or_default().insert(self.id);
            return Opened::Failed;
        };
        match mem.keys.decrypt(&ep, now) {
            Ok(pt) => {
                ctx.log.decrypted_by.entry(env.group).or_default().insert(self.id);
                Opened::Decrypted(pt)
            }
            Err(e) => {
                ctx.log.decrypt_failures.entry(env.group).or_default().insert(self.id);
                ctx.metrics.incr("group.decrypt_failures", 1);
                let newer = mem.keys.current_id().is_none_or(|c| ep.key_id > c);
                if let (Error::StaleKey { .. }, true) = (&e, newer) {
                    if mem.fetching.insert(ep.key_id) {
                        if let (Some(cred), Some(creator)) = (mem.credential.clone(), mem.creator.clone()) {
                            let msg = KeyMessage::KeyFetch { peer: self.id, issued_at: cred.issued_at, proof: cred.join_proof() };
                            self.send_key(ctx, env.group, creator, msg);
                        }
                    }
                }
                Opened::Failed
            }
        }
    }

    fn send_key(&mut self, ctx: &mut Ctx, group: GroupId, to: PeerRef, msg: KeyMessage) {
        self.directory.learn(to.id, &to.endpoints, ctx.now + LEARNED_LIFETIME_MS);
        let env = MessageEnvelope::new(PayloadKind::KEY_MGMT, self.id, to.id.0, group, msg.encode());
        self.send_to(ctx, to.id, env);
    }

    // ---- rings ----

    fn chord_call(
        &mut self,
        ctx: &mut Ctx,
        group: GroupId,
        op: ChordOp,
        f: impl FnOnce(&mut ChordNode, u64, u64),
    ) {
        let token = self.next_token();
        let Some(mem) = self.groups.get_mut(&group) else { return };
        self.chord_ops.insert(token, (group, op));
        f(&mut mem.chord, ctx.now, token);
        self.drive(ctx, group);
    }

    fn drive(&mut self, ctx: &mut Ctx, group: GroupId) {
        loop {
            let actions = match self.groups.get_mut(&group) {
                Some(m) => m.chord.take_actions(),
                None => return,
            };
            if actions.is_empty() {
                return;
            }
            for a in actions {
                match a {
                    ChordAction::Send { to, msg } => {
                        self.directory.learn(to.id, &to.endpoints, ctx.now + LEARNED_LIFETIME_MS);
                        ctx.metrics.incr("dht.messages", 1);
                        let env = MessageEnvelope::new(msg.kind(), self.id, to.id.0, group, msg.encode());
                        self.send_to(ctx, to.id, env);
                    }
                    ChordAction::Event(ev) => self.on_chord_event(ctx, group, ev),
                }
            }
        }
    }

    fn publish(&mut self, ctx: &mut Ctx, ring: GroupId, ad: Advertisement, op: Option<OpId>) {
        let record = match (encode_advertisement(&ad), ad.discovery_key()) {
            (Ok(payload), Ok(key)) => DhtRecord { key, payload, publisher: self.id, expires_at: ad.expiration },
            (Err(e), _) | (_, Err(e)) => {
                if let Some(op) = op {
                    ctx.complete(op, Err(e));
                }
                return;
            }
        };
        if let Ok(r) = crate::advertisement::compactness_ratio(&ad) {
            ctx.metrics.sample("codec.ratio", r);
        }
        self.chord_call(ctx, ring, ChordOp::Put { op }, |c, now, t| c.put(now, record, t));
    }

    /// Joins (or creates, without a bootstrap) the ring of `info`.
    pub(crate) fn join_ring(
        &mut self,
        ctx: &mut Ctx,
        info: GroupInfo,
        bootstrap: Option<PeerRef>,
        op: Option<OpId>,
    ) {
        if let Some(b) = &bootstrap {
            self.directory.learn(b.id, &b.endpoints, ctx.now + LEARNED_LIFETIME_MS);
        }
        let id = info.id;
        let me = self.peer_ref();
        let m = self.m;
        self.groups.entry(id).or_insert_with(|| Membership {
            chord: ChordNode::new(ChordConfig::new(m), me),
            keys: KeyRing::new(id),
            authority: None,
            credential: None,
            creator: None,
            dedup: DedupWindow::default(),
            fetching: BTreeSet::new(),
            info,
        });
        self.arm_rounds(ctx);
        self.chord_call(ctx, id, ChordOp::JoinRing { op }, |c, now, t| c.join(now, bootstrap, t));
    }

    pub(crate) fn arm_rounds(&mut self, ctx: &mut Ctx) {
        if !self.rounds_armed {
            self.rounds_armed = true;
            let period = ChordConfig::new(self.m).stabilize_ms;
            ctx.queue.push(ctx.now + period, EventKind::Round { peer: self.id });
        }
    }

    fn on_chord_event(&mut self, ctx: &mut Ctx, group: GroupId, ev: ChordEvent) {
        let token = match &ev {
            ChordEvent::Joined { token, .. }
            | ChordEvent::Lookup { token, .. }
            | ChordEvent::Put { token, .. }
            | ChordEvent::Get { token, .. } => *token,
        };
        let Some((_, op)) = self.chord_ops.remove(&token) else { return };
        let now = ctx.now;
        match (ev, op) {
            (ChordEvent::Joined { result, .. }, ChordOp::JoinRing { op }) => {
                match &result {
                    Ok(()) => {
                        ctx.metrics.incr("ring.joins", 1);
                        let ad = self.peer_ad(group, now + AD_LIFETIME_MS);
                        self.publish(ctx, group, ad, None);
                    }
                    Err(_) => {
                        self.groups.remove(&group);
                        ctx.metrics.incr("ring.join_failures", 1);
                    }
                }
                if let Some(op) = op {
                    ctx.complete(op, result.map(|_| OpResult::Joined));
                }
            }
            (ChordEvent::Lookup { result, .. }, ChordOp::Lookup { op }) => {
                if let Ok(r) = &result {
                    ctx.metrics.observe("lookup_hops", r.hops as u64);
                }
                ctx.complete(op, result.map(OpResult::Lookup));
            }
            (ChordEvent::Put { result, .. }, ChordOp::Put { op }) => {
                if result.is_err() {
                    ctx.metrics.incr("dht.put_failures", 1);
                }
                if let Some(op) = op {
                    ctx.complete(op, result.map(|_| OpResult::Done));
                }
            }
            (ChordEvent::Get { result, .. }, op) => self.on_get(ctx, group, op, result),
            _ => {}
        }
    }

    fn on_get(&mut self, ctx: &mut Ctx, ring: GroupId, op: ChordOp, result: Result<crate::chord::GetResult>) {
        let now = ctx.now;
        match op {
            ChordOp::Get { op } => ctx.complete(op, result.map(OpResult::Records)),
            ChordOp::Discover { op, name, started } => {
                let res = result.map(|g| {
                    let ads: Vec<Advertisement> = records_to_ads(&g.records)
                        .into_iter()
                        .filter(|a| a.kind == AdvKind::Resource && a.name == name && a.group_scope == ring && !a.is_expired(now))
                        .collect();
                    ctx.metrics.observe("discovery_hops", g.hops as u64);
                    ctx.metrics.sample("discovery_latency", (now - started) as f64);
                    OpResult::Discovered { ads, hops: g.hops, latency_ms: now - started }
                });
                for ad in res.iter().flat_map(|r| match r {
                    OpResult::Discovered { ads, .. } => ads.as_slice(),
                    _ => &[],
                }) {
                    self.directory.learn(PeerId(ad_peer(ad).unwrap_or(ad.subject_id)), &ad.endpoints, ad.expiration);
                }
                ctx.complete(op, res);
            }
            ChordOp::ResolveGroup { op, group } => {
                let creator = result.ok().and_then(|g| {
                    records_to_ads(&g.records).into_iter().find(|a| {
                        a.kind == AdvKind::Group && a.subject_id == group.0 && !a.is_expired(now)
                    })
                });
                let creator = creator.and_then(|a| {
                    let id = NodeId::from_hex(a.attributes.get(attr::CREATOR)?).ok()?;
                    Some(PeerRef::new(PeerId(id), a.endpoints.clone()))
                });
                let Some(creator) = creator else {
                    self.joins.remove(&group);
                    ctx.complete(op, Err(Error::Join(format!("no advertisement for group {group}"))));
                    return;
                };
                let Some(pj) = self.joins.get_mut(&group) else { return };
                pj.creator = Some(creator.clone());
                pj.deadline = now + ADMISSION_TIMEOUT_MS;
                let (issued_at, proof) = match &pj.credential {
                    Some(c) => (c.issued_at, c.join_proof()),
                    None => (0, [0u8; 32]),
                };
                let msg = KeyMessage::JoinRequest { peer: self.id, issued_at, proof };
                self.send_key(ctx, group, creator, msg);
            }
            ChordOp::ResolvePeer { dst } => {
                if let Ok(g) = result {
                    for ad in records_to_ads(&g.records) {
                        if ad.kind == AdvKind::Peer && ad.subject_id == dst.0 && !ad.is_expired(now) {
                            self.directory.learn(dst, &ad.endpoints, ad.expiration);
                        }
                    }
                }
                self.flush_parked(ctx, dst);
            }
            ChordOp::ResolvePipe { op, group, name, data } => {
                let ad = result.ok().and_then(|g| {
                    records_to_ads(&g.records)
                        .into_iter()
                        .find(|a| a.kind == AdvKind::Pipe && a.name == name && !a.is_expired(now))
                });
                let Some(ad) = ad else {
                    ctx.complete(op, Err(Error::Binding(format!("no live advertisement for pipe {name}"))));
                    return;
                };
                match open_unicast_pipe(&ad, now) {
                    Ok(pipe) => {
                        self.directory.learn(pipe.remote, &ad.endpoints, ad.expiration);
                        let body = encode_pipe_data(&pipe.pipe_id, &data);
                        let (payload, fl) = self.seal(&group, body);
                        self.corr_seq += 1;
                        let env = MessageEnvelope::new(PayloadKind::PIPE_DATA, self.id, pipe.remote.0, group, payload)
                            .with_flags(fl)
                            .with_correlation(self.corr_seq);
                        self.send_to(ctx, pipe.remote, env);
                        ctx.complete(op, Ok(OpResult::Done));
                    }
                    Err(e) => ctx.complete(op, Err(e)),
                }
            }
            _ => {}
        }
    }

    // ---- public operations ----

    fn require_joined(&self, group: &GroupId) -> Result<()> {
        if self.is_joined(group) {
            Ok(())
        } else {
            Err(Error::Precondition(format!("{} is not a member of {group}", self.label)))
        }
    }

    pub(crate) fn lookup(&mut self, ctx: &mut Ctx, op: OpId, group: GroupId, key: NodeId) -> Result<()> {
        self.require_joined(&group)?;
        self.chord_call(ctx, group, ChordOp::Lookup { op }, |c, now, t| c.lookup(now, key, t));
        Ok(())
    }

    pub(crate) fn dht_put(&mut self, ctx: &mut Ctx, op: OpId, group: GroupId, record: DhtRecord) -> Result<()> {
        self.require_joined(&group)?;
        self.chord_call(ctx, group, ChordOp::Put { op: Some(op) }, |c, now, t| c.put(now, record, t));
        Ok(())
    }

    pub(crate) fn dht_get(&mut self, ctx: &mut Ctx, op: OpId, group: GroupId, key: NodeId) -> Result<()> {
        self.require_joined(&group)?;
        self.chord_call(ctx, group, ChordOp::Get { op }, |c, now, t| c.get(now, key, t));
        Ok(())
    }

    pub(crate) fn create_group(
        &mut self,
        ctx: &mut Ctx,
        op: OpId,
        info: GroupInfo,
    ) -> Result<()> {
        let parent = info.parent.ok_or_else(|| Error::Precondition("a created group needs a parent".into()))?;
        self.require_joined(&parent)
            .map_err(|_| Error::Unauthorized(format!("{} is not a member of the parent group", self.label)))?;
        if self.is_joined(&info.id) {
            ctx.complete(op, Ok(OpResult::Done));
            return Ok(());
        }
        let mut authority = GroupAuthority::new(info.id, info.policy, &mut ctx.rng);
        authority.add_open_member(self.id);
        let key = (info.policy == GroupPolicy::Secured).then(|| authority.next_key(&mut ctx.rng));
        let ad = Advertisement::new(AdvKind::Group, info.id.0, parent, info.name.clone())
            .with_attr(attr::POLICY, info.policy.as_str())
            .with_attr(attr::CREATOR, self.id.0.to_string())
            .with_attr(attr::PARENT, parent.0.to_string())
            .with_endpoints(self.endpoints.clone())
            .with_expiration(ctx.now + AD_LIFETIME_MS);
        let me = self.peer_ref();
        self.join_ring(ctx, info.clone(), None, None);
        let mem = self.groups.get_mut(&info.id).expect("ring just created");
        if let Some(k) = key {
            mem.keys.install(k, ctx.now);
        }
        mem.authority = Some(authority);
        mem.creator = Some(me);
        self.publish(ctx, parent, ad, Some(op));
        Ok(())
    }

    pub(crate) fn issue_credential(&self, group: &GroupId, peer: PeerId, issued_at: u64) -> Result<Credential> {
        let auth = self
            .groups
            .get(group)
            .and_then(|m| m.authority.as_ref())
            .ok_or_else(|| Error::Unauthorized(format!("{} is not the creator of {group}", self.label)))?;
        Ok(auth.issue(peer, issued_at))
    }

    pub(crate) fn join_group(
        &mut self,
        ctx: &mut Ctx,
        op: OpId,
        info: GroupInfo,
        credential: Option<Credential>,
    ) -> Result<()> {
        let parent = info.parent.ok_or_else(|| Error::Precondition("the root group is joined with join_root".into()))?;
        self.require_joined(&parent)?;
        if self.is_joined(&info.id) {
            ctx.complete(op, Ok(OpResult::Joined));
            return Ok(());
        }
        let group = info.id;
        self.joins.insert(
            group,
            PendingJoin { op, info, credential, creator: None, deadline: ctx.now + ADMISSION_TIMEOUT_MS * 2 },
        );
        self.chord_call(ctx, parent, ChordOp::ResolveGroup { op, group }, |c, now, t| c.get(now, group.0, t));
        Ok(())
    }

    /// Installs a fresh key and sends it to every admitted member but those
    /// in `evict`, who are removed first.
    pub(crate) fn rotate_key(&mut self, ctx: &mut Ctx, group: GroupId, evict: &[PeerId]) -> Result<u32> {
        let now = ctx.now;
        let mem = self.groups.get_mut(&group).ok_or_else(|| Error::Unauthorized("not a member".into()))?;
        let auth = mem.authority.as_mut().ok_or_else(|| Error::Unauthorized("not the key authority".into()))?;
        if auth.policy != GroupPolicy::Secured {
            return Err(Error::Precondition(format!("group {group} is open")));
        }
        for p in evict {
            auth.evict(p);
        }
        let key = auth.next_key(&mut ctx.rng);
        let targets: Vec<(PeerId, [u8; 32])> =
            auth.members().filter(|(p, _)| **p != self.id).map(|(p, w)| (*p, *w)).collect();
        mem.keys.install(key.clone(), now);
        let id = key.key_id;
        for (p, wrap) in targets {
            let nonce = self.next_nonce();
            let msg = KeyMessage::KeyUpdate { wrapped: wrap_group_key(&wrap, &key, nonce) };
            let env = MessageEnvelope::new(PayloadKind::KEY_MGMT, self.id, p.0, group, msg.encode());
            self.send_to(ctx, p, env);
        }
        ctx.metrics.incr("group.key_rotations", 1);
        Ok(id)
    }

    pub(crate) fn serve(
        &mut self,
        ctx: &mut Ctx,
        op: OpId,
        group: GroupId,
        path: &str,
        name: &str,
        handler: crate::coap::Handler,
    ) -> Result<()> {
        self.require_joined(&group)?;
        self.server.serve(ResourceEntry {
            path: path.to_string(),
            handler,
            resource_name: name.to_string(),
            group,
        })?;
        let subject = scoped_key(&group, name.as_bytes())?;
        let ad = Advertisement::new(AdvKind::Resource, subject, group, name)
            .with_attr(attr::PATH, path)
            .with_attr(attr::PEER, self.id.0.to_string())
            .with_attr(attr::CONTENT_FORMAT, "0")
            .with_endpoints(self.endpoints.clone())
            .with_expiration(ctx.now + AD_LIFETIME_MS);
        self.publish(ctx, group, ad, Some(op));
        Ok(())
    }

    pub(crate) fn discover(&mut self, ctx: &mut Ctx, op: OpId, group: GroupId, name: &str) -> Result<()> {
        self.require_joined(&group)?;
        let key = scoped_key(&group, name.as_bytes())?;
        let started = ctx.now;
        let name = name.to_string();
        self.chord_call(ctx, group, ChordOp::Discover { op, name, started }, |c, now, t| c.get(now, key, t));
        Ok(())
    }

    pub(crate) fn listen_pipe(&mut self, ctx: &mut Ctx, op: OpId, group: GroupId, name: &str) -> Result<()> {
        self.require_joined(&group)?;
        let pipe_id = ResourceId(scoped_key(&group, name.as_bytes())?);
        self.pipes.insert(pipe_id);
        let ad = pipe_advertisement(pipe_id, name, group, self.id)
            .with_endpoints(self.endpoints.clone())
            .with_expiration(ctx.now + AD_LIFETIME_MS);
        self.publish(ctx, group, ad, Some(op));
        Ok(())
    }

    pub(crate) fn pipe_send(&mut self, ctx: &mut Ctx, op: OpId, group: GroupId, name: &str, data: Vec<u8>) -> Result<()> {
        self.require_joined(&group)?;
        let key = scoped_key(&group, name.as_bytes())?;
        let name = name.to_string();
        self.chord_call(ctx, group, ChordOp::ResolvePipe { op, group, name, data }, |c, now, t| c.get(now, key, t));
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn coap_request(
        &mut self,
        ctx: &mut Ctx,
        op: OpId,
        group: GroupId,
        target: PeerId,
        msg_type: MsgType,
        method: Code,
        path: &str,
        payload: Vec<u8>,
    ) -> Result<Vec<u8>> {
        if !self.groups.contains_key(&group) {
            return Err(Error::Precondition(format!("{} is not a member of {group}", self.label)));
        }
        let req = self.client.build(msg_type, method, path, payload);
        self.coap_ops.insert(req.token.clone(), CoapOp { op, group, started: ctx.now });
        self.client.track(target, req.clone(), ctx.now);
        self.send_coap(ctx, group, target, &req, true);
        Ok(req.token)
    }

    fn send_coap(&mut self, ctx: &mut Ctx, group: GroupId, to: PeerId, msg: &CoapMessage, encrypt: bool) {
        let Ok(bytes) = msg.encode() else {
            ctx.metrics.incr("coap.encode_errors", 1);
            return;
        };
        let (payload, fl) = if encrypt { self.seal(&group, bytes) } else { (bytes, 0) };
        let env = MessageEnvelope::new(PayloadKind::COAP, self.id, to.0, group, payload)
            .with_flags(fl)
            .with_correlation(token_u64(&msg.token));
        ctx.metrics.incr("coap.sent", 1);
        self.send_to(ctx, to, env);
    }

    /// NON request to every member via the group's propagate pipe; responses
    /// are collected for one NON timeout.
    pub(crate) fn coap_multicast(
        &mut self,
        ctx: &mut Ctx,
        op: OpId,
        group: GroupId,
        method: Code,
        path: &str,
        payload: Vec<u8>,
    ) -> Result<()> {
        self.require_joined(&group)?;
        let req = self.client.build(MsgType::Non, method, path, payload);
        let mut responses = Vec::new();
        if self.server.resource(path).is_some_and(|e| e.group == group) {
            if let Some(resp) = self.server.handle(self.id, group, &req, true, ctx.now) {
                responses.push((self.id, resp));
            }
        }
        self.collects.insert(req.token.clone(), Collect { op, deadline: ctx.now + NON_TIMEOUT_MS, responses });
        let bytes = req.encode()?;
        self.propagate_raw(ctx, group, PayloadKind::COAP, bytes, token_u64(&req.token))?;
        Ok(())
    }

    /// Sends `data` to every member of `group`; returns the correlation id.
    pub(crate) fn propagate(&mut self, ctx: &mut Ctx, group: GroupId, data: &[u8]) -> Result<u64> {
        self.require_joined(&group)?;
        let pipe_id = ResourceId(scoped_key(&group, b"propagate")?);
        self.corr_seq += 1;
        let corr = (1 << 63) | self.corr_seq;
        self.propagate_raw(ctx, group, PayloadKind::PIPE_DATA, encode_pipe_data(&pipe_id, data), corr)?;
        Ok(corr)
    }

    fn propagate_raw(&mut self, ctx: &mut Ctx, group: GroupId, kind: PayloadKind, body: Vec<u8>, corr: u64) -> Result<()> {
        let (payload, fl) = self.seal(&group, body);
        let env = MessageEnvelope::new(kind, self.id, group.0, group, payload)
            .with_flags(fl | flags::PROPAGATE)
            .with_correlation(corr);
        let mem = self.groups.get_mut(&group).expect("joined");
        mem.dedup.first_sight(self.id, corr);
        ctx.log.deliveries.entry((self.id, corr)).or_default().push(self.id);
        ctx.log.propagate_tx.entry((self.id, corr)).or_default();
        self.forward_propagate(ctx, env);
        Ok(())
    }

    fn forward_propagate(&mut self, ctx: &mut Ctx, mut env: MessageEnvelope) {
        let Some(mem) = self.groups.get(&env.group) else { return };
        let Some(next) = mem.chord.successors().first().cloned() else { return };
        if next.id == self.id || next.id == env.src {
            return;
        }
        self.directory.learn(next.id, &next.endpoints, ctx.now + LEARNED_LIFETIME_MS);
        *ctx.log.propagate_tx.entry((env.src, env.correlation_id)).or_default() += 1;
        ctx.metrics.incr("propagate.transmissions", 1);
        env.ttl = DEFAULT_TTL;
        env.dst = next.id.0;
        self.send_to(ctx, next.id, env);
    }

    // ---- timers ----

    pub(crate) fn on_round(&mut self, ctx: &mut Ctx) {
        self.rounds_armed = false;
        if !self.alive {
            return;
        }
        let groups: Vec<GroupId> = self.groups.keys().copied().collect();
        for g in &groups {
            if let Some(m) = self.groups.get_mut(g) {
                m.chord.round(ctx.now);
            }
            self.drive(ctx, *g);
        }
        if !self.groups.is_empty() {
            self.arm_rounds(ctx);
        }
    }

    pub(crate) fn poll(&mut self, ctx: &mut Ctx) {
        if !self.alive {
            return;
        }
        let now = ctx.now;
        let groups: Vec<GroupId> = self.groups.keys().copied().collect();
        for g in groups {
            if let Some(m) = self.groups.get_mut(&g) {
                m.chord.poll(now);
            }
            self.drive(ctx, g);
        }
        for t in self.client.poll(now) {
            match t {
                ClientTimer::Retransmit { destination, request } => {
                    ctx.metrics.incr("coap.retransmissions", 1);
                    if let Some(group) = self.coap_ops.get(&request.token).map(|o| o.group) {
                        self.send_coap(ctx, group, destination, &request, true);
                    }
                }
                ClientTimer::TimedOut(p) => {
                    ctx.metrics.incr("coap.timeouts", 1);
                    if let Some(o) = self.coap_ops.remove(&p.token) {
                        ctx.complete(o.op, Err(Error::Timeout));
                    }
                }
            }
        }
        let expired = self.reasm.expire(now);
        if expired > 0 {
            ctx.metrics.incr("link.reassembly_timeouts", expired as u64);
        }
        let done: Vec<Vec<u8>> = self.collects.iter().filter(|(_, c)| c.deadline <= now).map(|(k, _)| k.clone()).collect();
        for k in done {
            let c = self.collects.remove(&k).unwrap();
            ctx.complete(c.op, Ok(OpResult::Multicast { responses: c.responses }));
        }
        let late: Vec<GroupId> = self.joins.iter().filter(|(_, j)| j.deadline <= now).map(|(g, _)| *g).collect();
        for g in late {
            let j = self.joins.remove(&g).unwrap();
            ctx.complete(j.op, Err(Error::Join("group creator unreachable".into())));
        }
    }

    pub(crate) fn on_beacon_timer(&mut self, ctx: &mut Ctx) {
        self.beacon_armed = false;
        if !self.alive || !self.is_bridge() {
            return;
        }
        let now = ctx.now;
        let root = crate::id::root_group(self.m).expect("valid ring width");
        let mut ads = vec![self.peer_ad(root, now + BRIDGE_AD_LIFETIME_MS)];
        for (id, eps, expires) in self.directory.entries(now) {
            let segs: BTreeSet<&str> = eps.iter().filter_map(|e| e.segment()).collect();
            if segs.len() >= 2 && id != self.id {
                ads.push(
                    Advertisement::new(AdvKind::Peer, id.0, root, "bridge")
                        .with_attr(attr::ROLE, "bridge")
                        .with_endpoints(eps.to_vec())
                        .with_expiration(expires),
                );
            }
        }
        let env = MessageEnvelope::new(PayloadKind::BEACON, self.id, root.0, root, encode_ads(&ads));
        for ep in self.endpoints.clone() {
            let Some(seg) = ep.segment() else { continue };
            self.link_seq = self.link_seq.wrapping_add(1);
            let _ = ctx.link_send(self.id, seg, &ep, None, &env, self.link_seq, None, 0);
        }
        ctx.metrics.incr("beacons.sent", 1);
        self.beacon_armed = true;
        ctx.queue.push(now + BEACON_INTERVAL_MS, EventKind::Beacon { peer: self.id });
    }

    pub(crate) fn on_route_stale(&mut self, ctx: &mut Ctx, bridge: PeerId) {
        ctx.metrics.incr("route.stale_notices", 1);
        self.directory.forget(&bridge);
    }

    // ---- receiving ----

    pub(crate) fn on_frame(&mut self, ctx: &mut Ctx, frame: Frame) {
        if !self.alive {
            return;
        }
        let frag = match Fragment::from_bytes(&frame.bytes) {
            Ok(f) => f,
            Err(_) => {
                ctx.metrics.incr("link.malformed", 1);
                return;
            }
        };
        let bytes = match self.reasm.insert(frame.from, frag, ctx.now) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(_) => {
                ctx.metrics.incr("link.malformed", 1);
                return;
            }
        };
        let env = match decode_envelope(&bytes) {
            Ok(e) => e,
            Err(_) => {
                ctx.metrics.incr("link.malformed", 1);
                return;
            }
        };
        match frame.route {
            Some(meta) => {
                self.directory.learn(meta.source, &meta.source_endpoints, ctx.now + LEARNED_LIFETIME_MS);
                if frame.stage + 1 < meta.hops.len() {
                    self.relay(ctx, env, meta, frame.stage);
                } else {
                    if ctx.log.trace_payloads {
                        ctx.log.traces.push(PayloadTrace {
                            correlation_id: env.correlation_id,
                            src: env.src,
                            at: self.id,
                            role: TraceRole::Destination,
                            digest: digest(&env.payload),
                        });
                    }
                    self.on_envelope(ctx, env);
                }
            }
            None => self.on_envelope(ctx, env),
        }
    }

    fn relay(&mut self, ctx: &mut Ctx, mut env: MessageEnvelope, meta: Rc<RouteMeta>, stage: usize) {
        if env.ttl <= 1 {
            ctx.metrics.incr("relay.ttl_drops", 1);
            return;
        }
        env.ttl -= 1;
        let next_seg = &meta.segment_path[stage + 1];
        let Some(egress) = self.endpoints.iter().find(|e| e.segment() == Some(next_seg.as_str())).cloned() else {
            ctx.metrics.incr("relay.route_stale", 1);
            ctx.queue.push(ctx.now, EventKind::RouteStale { to: meta.source, bridge: self.id });
            return;
        };
        if ctx.log.trace_payloads {
            ctx.log.traces.push(PayloadTrace {
                correlation_id: env.correlation_id,
                src: env.src,
                at: self.id,
                role: TraceRole::Relay,
                digest: digest(&env.payload),
            });
        }
        ctx.metrics.incr("relay.forwarded", 1);
        self.link_seq = self.link_seq.wrapping_add(1);
        let hop = meta.hops[stage + 1].clone();
        if let Err(e) = ctx.link_send(self.id, next_seg, &egress, Some(&hop), &env, self.link_seq, Some(meta.clone()), stage + 1) {
            ctx.metrics.incr(&format!("link.send_errors.{}", error_name(&e)), 1);
        }
    }

    pub(crate) fn on_envelope(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        if !self.alive {
            return;
        }
        if env.is_propagate() {
            self.on_propagate(ctx, env);
            return;
        }
        match env.payload_kind {
            k if k.is_dht() => self.on_chord(ctx, env),
            PayloadKind::COAP => self.on_coap(ctx, env),
            PayloadKind::PIPE_DATA => self.on_pipe(ctx, env),
            PayloadKind::KEY_MGMT => self.on_key(ctx, env),
            PayloadKind::BEACON => self.on_beacon(ctx, env),
            _ => ctx.metrics.incr("link.unknown_kind", 1),
        }
    }

    fn on_chord(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        if !self.groups.contains_key(&env.group) {
            ctx.metrics.incr("dht.not_member", 1);
            return;
        }
        let msg = match ChordMsg::decode(env.payload_kind, &env.payload) {
            Ok(m) => m,
            Err(_) => {
                ctx.metrics.incr("dht.malformed", 1);
                return;
            }
        };
        for r in msg.peer_refs() {
            if r.id != self.id {
                self.directory.learn(r.id, &r.endpoints, ctx.now + LEARNED_LIFETIME_MS);
            }
        }
        if let Some(m) = self.groups.get_mut(&env.group) {
            m.chord.handle(ctx.now, msg);
        }
        self.drive(ctx, env.group);
    }

    fn authorized(&self, group: &GroupId, opened: &Opened) -> bool {
        match self.membership_policy(group) {
            Some(GroupPolicy::Secured) => matches!(opened, Opened::Decrypted(_)),
            _ => true,
        }
    }

    fn on_coap(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        let opened = self.open(ctx, &env);
        let authorized = self.authorized(&env.group, &opened);
        let plain = match opened {
            Opened::Plain(p) | Opened::Decrypted(p) => p,
            Opened::Failed => {
                ctx.metrics.incr("coap.undecryptable", 1);
                return;
            }
        };
        let Ok(msg) = CoapMessage::decode(&plain) else {
            ctx.metrics.incr("coap.malformed", 1);
            return;
        };
        if msg.code.is_request() {
            self.serve_request(ctx, env.src, env.group, &msg, authorized);
        } else {
            self.on_coap_response(ctx, env.src, msg);
        }
    }

    fn serve_request(&mut self, ctx: &mut Ctx, src: PeerId, group: GroupId, req: &CoapMessage, authorized: bool) {
        let before = self.server.duplicates;
        let Some(resp) = self.server.handle(src, group, req, authorized, ctx.now) else { return };
        if self.server.duplicates > before {
            ctx.metrics.incr("coap.server_duplicates", 1);
        }
        ctx.metrics.incr(&format!("coap.responses.{}", resp.code), 1);
        self.send_coap(ctx, group, src, &resp, authorized);
    }

    fn on_coap_response(&mut self, ctx: &mut Ctx, src: PeerId, msg: CoapMessage) {
        if let Some(c) = self.collects.get_mut(&msg.token) {
            c.responses.push((src, msg));
            return;
        }
        match self.client.match_response(&msg) {
            Matched::Resolved { pending, response } => {
                if let Some(o) = self.coap_ops.remove(&pending.token) {
                    let latency = ctx.now - o.started;
                    ctx.metrics.sample("coap.latency", latency as f64);
                    ctx.complete(o.op, Ok(OpResult::Coap { response, sent_at: pending.sent_at, latency_ms: latency }));
                }
            }
            Matched::Duplicate => ctx.metrics.incr("coap.duplicate_responses", 1),
            Matched::Orphan => ctx.metrics.incr("coap.orphans", 1),
        }
    }

    fn on_pipe(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        let plain = match self.open(ctx, &env) {
            Opened::Plain(p) | Opened::Decrypted(p) => p,
            Opened::Failed => return,
        };
        match decode_pipe_data(&plain) {
            Ok((id, data)) if self.pipes.contains(&id) => {
                ctx.metrics.incr("pipe.delivered", 1);
                ctx.log.pipe_received.push((self.id, data.to_vec()));
            }
            Ok(_) => ctx.metrics.incr("pipe.unbound", 1),
            Err(_) => ctx.metrics.incr("pipe.malformed", 1),
        }
    }

    fn on_propagate(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        let Some(mem) = self.groups.get_mut(&env.group) else {
            ctx.metrics.incr("propagate.not_member", 1);
            return;
        };
        let key = (env.src, env.correlation_id);
        if !mem.dedup.first_sight(env.src, env.correlation_id) {
            *ctx.log.duplicates.entry(key).or_default() += 1;
            ctx.metrics.incr("propagate.duplicates", 1);
            return;
        }
        ctx.log.deliveries.entry(key).or_default().push(self.id);
        self.forward_propagate(ctx, env.clone());
        let opened = self.open(ctx, &env);
        let authorized = self.authorized(&env.group, &opened);
        let plain = match opened {
            Opened::Plain(p) | Opened::Decrypted(p) => p,
            Opened::Failed => return,
        };
        match env.payload_kind {
            PayloadKind::COAP => {
                if let Ok(req) = CoapMessage::decode(&plain) {
                    if req.code.is_request() && self.server.resource(&req.path()).is_some_and(|e| e.group == env.group) {
                        self.serve_request(ctx, env.src, env.group, &req, authorized);
                    }
                }
            }
            PayloadKind::PIPE_DATA => {
                if let Ok((_, data)) = decode_pipe_data(&plain) {
                    ctx.log.pipe_received.push((self.id, data.to_vec()));
                }
            }
            _ => {}
        }
    }

    fn on_key(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        let Ok(msg) = KeyMessage::decode(&env.payload) else {
            ctx.metrics.incr("group.malformed", 1);
            return;
        };
        let now = ctx.now;
        let group = env.group;
        match msg {
            KeyMessage::JoinRequest { peer, issued_at, proof } => {
                let Some(mem) = self.groups.get_mut(&group) else { return };
                let Some(auth) = mem.authority.as_mut() else { return };
                let reply = match auth.policy {
                    GroupPolicy::Open => {
                        auth.add_open_member(peer);
                        KeyMessage::JoinAccept { wrapped: None }
                    }
                    GroupPolicy::Secured => match auth.admit(peer, issued_at, &proof) {
                        Ok(wrap) => {
                            let key = mem.keys.current().cloned().expect("secured creator holds a key");
                            self.nonce_seq += 1;
                            let nonce = sender_nonce(&self.id, self.nonce_seq);
                            KeyMessage::JoinAccept { wrapped: Some(wrap_group_key(&wrap, &key, nonce)) }
                        }
                        Err(_) => {
                            ctx.metrics.incr("group.rejections", 1);
                            KeyMessage::JoinReject { code: Code::UNAUTHORIZED.0 }
                        }
                    },
                };
                let to = env.src;
                let env = MessageEnvelope::new(PayloadKind::KEY_MGMT, self.id, to.0, group, reply.encode());
                self.send_to(ctx, to, env);
            }
            KeyMessage::JoinAccept { wrapped } => {
                let Some(pj) = self.joins.remove(&group) else { return };
                let key = match (wrapped, &pj.credential) {
                    (None, _) => None,
                    (Some(w), Some(c)) => match unwrap_group_key(&c.wrap_key(), &w) {
                        Ok(k) => Some(k),
                        Err(e) => {
                            ctx.complete(pj.op, Err(e));
                            return;
                        }
                    },
                    (Some(_), None) => {
                        ctx.complete(pj.op, Err(Error::Unauthorized("key sent without a credential".into())));
                        return;
                    }
                };
                let creator = pj.creator.clone();
                self.join_ring(ctx, pj.info, creator.clone(), Some(pj.op));
                if let Some(mem) = self.groups.get_mut(&group) {
                    if let Some(k) = key {
                        mem.keys.install(k, now);
                    }
                    mem.credential = pj.credential;
                    mem.creator = creator;
                }
            }
            KeyMessage::JoinReject { .. } => {
                if let Some(pj) = self.joins.remove(&group) {
                    ctx.complete(pj.op, Err(Error::Unauthorized("admission rejected".into())));
                }
            }
            KeyMessage::KeyUpdate { wrapped } => {
                let Some(mem) = self.groups.get_mut(&group) else { return };
                let Some(cred) = &mem.credential else { return };
                match unwrap_group_key(&cred.wrap_key(), &wrapped) {
                    Ok(k) => {
                        mem.keys.install(k, now);
                        mem.fetching.clear();
                        ctx.metrics.incr("group.key_updates", 1);
                    }
                    Err(_) => ctx.metrics.incr("group.bad_key_updates", 1),
                }
            }
            KeyMessage::KeyFetch { peer, issued_at, proof } => {
                let Some(mem) = self.groups.get(&group) else { return };
                let (Some(auth), Some(key)) = (&mem.authority, mem.keys.current().cloned()) else { return };
                let Some(wrap) = auth.check(peer, issued_at, &proof) else {
                    ctx.metrics.incr("group.fetch_refused", 1);
                    return;
                };
                let nonce = self.next_nonce();
                let msg = KeyMessage::KeyUpdate { wrapped: wrap_group_key(&wrap, &key, nonce) };
                let env = MessageEnvelope::new(PayloadKind::KEY_MGMT, self.id, peer.0, group, msg.encode());
                self.send_to(ctx, peer, env);
            }
        }
    }

    fn on_beacon(&mut self, ctx: &mut Ctx, env: MessageEnvelope) {
        let Ok(ads) = decode_ads(&env.payload) else {
            ctx.metrics.incr("beacons.malformed", 1);
            return;
        };
        for ad in ads {
            if ad.kind == AdvKind::Peer && ad.subject_id != self.id.0 && !ad.is_expired(ctx.now) {
                self.directory.learn(PeerId(ad.subject_id), &ad.endpoints, ad.expiration);
            }
        }
        let waiting: Vec<PeerId> = self.parked.keys().copied().collect();
        for dst in waiting {
            if self.directory.endpoints(&dst, ctx.now).is_some() {
                self.flush_parked(ctx, dst);
            }
        }
    }
}

fn ad_peer(ad: &Advertisement) -> Option<NodeId> {
    NodeId::from_hex(ad.attributes.get(attr::PEER)?).ok()
}

fn error_name(e: &Error) -> &'static str {
    match e {
        Error::TooLarge(_) => "too_large",
        Error::Unreachable(_) => "unreachable",
        _ => "other",
    }
}
