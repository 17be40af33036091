//! Sans-IO ring node. The host feeds it messages, stabilization rounds and
//! timer polls, then drains the actions it produced.

use std::collections::BTreeMap;

use crate::chord::{ChordConfig, ChordMsg, DhtRecord, FingerTable, PeerRef, RecordStore, SuccessorList};
use crate::error::{Error, Result};
use crate::id::{in_interval, NodeId, Openness, PeerId};

/// Record batches above this many payload bytes are split across messages.
const BATCH_BYTES: usize = 24 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupResult {
    pub key: NodeId,
    pub owner: PeerRef,
    /// Owner first, then the peers holding replicas.
    pub replicas: Vec<PeerRef>,
    pub hops: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetResult {
    pub records: Vec<DhtRecord>,
    pub hops: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChordEvent {
    Joined { token: u64, result: Result<()> },
    Lookup { token: u64, result: Result<LookupResult> },
    Put { token: u64, result: Result<()> },
    Get { token: u64, result: Result<GetResult> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChordAction {
    Send { to: PeerRef, msg: ChordMsg },
    Event(ChordEvent),
}

#[derive(Debug, Clone)]
enum Purpose {
    User(u64),
    Join(u64),
    Finger(usize),
    Put(u64, DhtRecord),
    Get(u64, NodeId),
}

#[derive(Debug, Clone)]
enum Waiting {
    Lookup(Purpose),
    Stabilize { to: PeerId },
    CheckPred { to: PeerId },
    Put { token: u64, record: DhtRecord, rest: Vec<PeerRef>, to: PeerId },
    Get { token: u64, key: NodeId, rest: Vec<PeerRef>, hops: u8, to: PeerId },
    Transfer { token: u64, to: PeerRef, attempts: u8 },
}

#[derive(Debug, Clone)]
struct Pending {
    deadline: u64,
    what: Waiting,
}

#[derive(Debug, Clone)]
struct FindReq {
    req: u64,
    origin: PeerRef,
    key: NodeId,
    hops: u8,
}

#[derive(Debug, Clone)]
struct Forward {
    find: FindReq,
    to: PeerId,
    deadline: u64,
    attempts: u8,
}

#[derive(Debug, Clone)]
pub struct ChordNode {
    cfg: ChordConfig,
    me: PeerRef,
    pred: Option<PeerRef>,
    succ: SuccessorList,
    fingers: FingerTable,
    next_finger: usize,
    finger_inflight: bool,
    store: RecordStore,
    joined: bool,
    rounds: u64,
    next_req: u64,
    pending: BTreeMap<u64, Pending>,
    forwards: BTreeMap<(PeerId, u64), Forward>,
    suspects: BTreeMap<PeerId, u64>,
    out: Vec<ChordAction>,
}

impl ChordNode {
    pub fn new(cfg: ChordConfig, me: PeerRef) -> Self {
        ChordNode {
            succ: SuccessorList::new(cfg.r, me.clone()),
            fingers: FingerTable::new(me.node()),
            next_finger: cfg.m as usize - 1,
            cfg,
            me,
            pred: None,
            finger_inflight: false,
            store: RecordStore::default(),
            joined: false,
            rounds: 0,
            next_req: 1,
            pending: BTreeMap::new(),
            forwards: BTreeMap::new(),
            suspects: BTreeMap::new(),
            out: Vec::new(),
        }
    }

    pub fn id(&self) -> PeerId {
        self.me.id
    }

    pub fn me(&self) -> &PeerRef {
        &self.me
    }

    pub fn config(&self) -> &ChordConfig {
        &self.cfg
    }

    pub fn is_joined(&self) -> bool {
        self.joined
    }

    pub fn predecessor(&self) -> Option<&PeerRef> {
        self.pred.as_ref()
    }

    pub fn successors(&self) -> &[PeerRef] {
        self.succ.as_slice()
    }

    pub fn fingers(&self) -> &FingerTable {
        &self.fingers
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn take_actions(&mut self) -> Vec<ChordAction> {
        std::mem::take(&mut self.out)
    }

    pub fn next_deadline(&self) -> Option<u64> {
        let p = self.pending.values().map(|p| p.deadline).min();
        let f = self.forwards.values().map(|f| f.deadline).min();
        match (p, f) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Joins through `bootstrap`, or creates a new ring when there is none.
    pub fn join(&mut self, now: u64, bootstrap: Option<PeerRef>, token: u64) {
        if self.joined {
            self.emit(ChordEvent::Joined { token, result: Ok(()) });
            return;
        }
        match bootstrap {
            Some(b) if b.id != self.me.id => {
                let req = self.alloc(now + self.cfg.lookup_timeout_ms, Waiting::Lookup(Purpose::Join(token)));
                let me = self.me.clone();
                let key = me.node();
                self.send(b, ChordMsg::FindSucc { req, origin: me.clone(), prev: me, key, hops: 0 });
            }
            _ => {
                self.joined = true;
                self.emit(ChordEvent::Joined { token, result: Ok(()) });
            }
        }
    }

    pub fn lookup(&mut self, now: u64, key: NodeId, token: u64) {
        if !self.joined {
            self.emit(ChordEvent::Lookup { token, result: Err(Error::Precondition("not joined".into())) });
            return;
        }
        self.start_lookup(now, key, Purpose::User(token));
    }

    pub fn put(&mut self, now: u64, record: DhtRecord, token: u64) {
        if !self.joined {
            self.emit(ChordEvent::Put { token, result: Err(Error::Precondition("not joined".into())) });
            return;
        }
        let key = record.key;
        self.start_lookup(now, key, Purpose::Put(token, record));
    }

    pub fn get(&mut self, now: u64, key: NodeId, token: u64) {
        if !self.joined {
            self.emit(ChordEvent::Get { token, result: Err(Error::Precondition("not joined".into())) });
            return;
        }
        self.start_lookup(now, key, Purpose::Get(token, key));
    }

    /// One stabilization round: successor check, one finger refresh,
    /// predecessor liveness and periodic replica upkeep.
    pub fn round(&mut self, now: u64) {
        if !self.joined {
            return;
        }
        self.rounds += 1;
        self.suspects.retain(|_, until| *until > now);
        self.stabilize(now);
        self.fix_fingers(now);
        self.check_predecessor(now);
        if self.rounds.is_multiple_of(self.cfg.replicate_every) {
            self.push_replicas(now);
        }
        let owned = self.pred.as_ref().map(|p| (p.node(), self.me.node()));
        self.store
            .sweep(now, self.cfg.replica_lease_ms, owned.as_ref().map(|(a, b)| (a, b)));
    }

    /// Fires every deadline that has passed.
    pub fn poll(&mut self, now: u64) {
        let due: Vec<u64> = self.pending.iter().filter(|(_, p)| p.deadline <= now).map(|(k, _)| *k).collect();
        for req in due {
            if let Some(p) = self.pending.remove(&req) {
                self.on_timeout(now, p.what);
            }
        }
        let due: Vec<(PeerId, u64)> =
            self.forwards.iter().filter(|(_, f)| f.deadline <= now).map(|(k, _)| *k).collect();
        for k in due {
            if let Some(f) = self.forwards.remove(&k) {
                self.suspect(now, f.to);
                if (f.attempts as usize) < self.cfg.r + 2 {
                    self.route_find(now, f.find, f.attempts + 1);
                }
            }
        }
    }

    pub fn handle(&mut self, now: u64, msg: ChordMsg) {
        match msg {
            ChordMsg::FindSucc { req, origin, prev, key, hops } => {
                if prev.id != self.me.id {
                    self.send(prev, ChordMsg::FindSuccAck { origin: origin.id, req });
                }
                self.route_find(now, FindReq { req, origin, key, hops }, 0);
            }
            ChordMsg::FindSuccAck { origin, req } => {
                self.forwards.remove(&(origin, req));
            }
            ChordMsg::FindSuccReply { req, key, owner, successors, hops } => {
                self.on_find_reply(now, req, key, owner, successors, hops);
            }
            ChordMsg::GetPred { req, from } => {
                let reply = ChordMsg::GetPredReply {
                    req,
                    pred: self.pred.clone(),
                    successors: self.succ.as_slice().to_vec(),
                };
                self.send(from, reply);
            }
            ChordMsg::GetPredReply { req, pred, successors } => {
                if matches!(self.pending.get(&req), Some(Pending { what: Waiting::Stabilize { .. }, .. })) {
                    self.pending.remove(&req);
                    self.on_stabilize_reply(pred, successors);
                }
            }
            ChordMsg::Notify { candidate } => self.on_notify(now, candidate),
            ChordMsg::Ping { req, from } => self.send(from, ChordMsg::Pong { req }),
            ChordMsg::Pong { req } => {
                if matches!(self.pending.get(&req), Some(Pending { what: Waiting::CheckPred { .. }, .. })) {
                    self.pending.remove(&req);
                }
            }
            ChordMsg::Put { req, origin, record } => {
                if record.is_live(now) {
                    self.store_and_replicate(now, record);
                }
                self.send(origin, ChordMsg::PutAck { req });
            }
            ChordMsg::PutAck { req } => {
                if let Some(Pending { what: Waiting::Put { token, .. }, .. }) = self.take_pending(req, is_put) {
                    self.emit(ChordEvent::Put { token, result: Ok(()) });
                }
            }
            ChordMsg::Get { req, origin, key } => {
                let records = self.store.live(&key, now);
                self.send(origin, ChordMsg::GetReply { req, records });
            }
            ChordMsg::GetReply { req, records } => {
                if let Some(Pending { what: Waiting::Get { token, hops, .. }, .. }) = self.take_pending(req, is_get) {
                    let records = records.into_iter().filter(|r| r.is_live(now)).collect();
                    self.emit(ChordEvent::Get { token, result: Ok(GetResult { records, hops }) });
                }
            }
            ChordMsg::TransferReq { req, joiner } => self.on_transfer_req(now, req, joiner),
            ChordMsg::Transfer { req, records } => {
                for r in records {
                    self.store.insert(r, now);
                }
                if let Some(Pending { what: Waiting::Transfer { token, .. }, .. }) =
                    self.take_pending(req, is_transfer)
                {
                    self.emit(ChordEvent::Joined { token, result: Ok(()) });
                }
            }
            ChordMsg::Replicate { records, .. } => {
                for r in records {
                    self.store.insert(r, now);
                }
            }
        }
    }

    /// The known peer strictly inside `(self, key)` that is furthest from
    /// self, or self when there is none.
    pub fn closest_preceding_node(&self, key: &NodeId) -> PeerRef {
        let me = self.me.node();
        self.fingers
            .iter()
            .flatten()
            .chain(self.succ.as_slice())
            .filter(|p| p.id != self.me.id && !self.suspects.contains_key(&p.id))
            .filter(|p| in_interval(&p.node(), &me, key, Openness::OpenOpen))
            .max_by_key(|p| me.distance_to(&p.node()))
            .cloned()
            .unwrap_or_else(|| self.me.clone())
    }

    fn emit(&mut self, ev: ChordEvent) {
        self.out.push(ChordAction::Event(ev));
    }

    fn send(&mut self, to: PeerRef, msg: ChordMsg) {
        self.out.push(ChordAction::Send { to, msg });
    }

    fn alloc(&mut self, deadline: u64, what: Waiting) -> u64 {
        let req = self.next_req;
        self.next_req += 1;
        self.pending.insert(req, Pending { deadline, what });
        req
    }

    fn take_pending(&mut self, req: u64, want: fn(&Waiting) -> bool) -> Option<Pending> {
        match self.pending.get(&req) {
            Some(p) if want(&p.what) => self.pending.remove(&req),
            _ => None,
        }
    }

    fn start_lookup(&mut self, now: u64, key: NodeId, purpose: Purpose) {
        let req = self.alloc(now + self.cfg.lookup_timeout_ms, Waiting::Lookup(purpose));
        let origin = self.me.clone();
        self.route_find(now, FindReq { req, origin, key, hops: 0 }, 0);
    }

    /// Owner of `key` and its replica set, if this node can tell locally.
    fn resolve_local(&self, key: &NodeId) -> Option<(PeerRef, Vec<PeerRef>)> {
        let me = self.me.node();
        let s = self.succ.first();
        if s.id == self.me.id {
            return Some((self.me.clone(), vec![self.me.clone()]));
        }
        if let Some(p) = &self.pred {
            if in_interval(key, &p.node(), &me, Openness::OpenClosed) {
                let mut set = vec![self.me.clone()];
                set.extend(self.succ.as_slice().iter().take(self.cfg.r - 1).cloned());
                return Some((self.me.clone(), set));
            }
        }
        if in_interval(key, &me, &s.node(), Openness::OpenClosed) {
            return Some((s.clone(), self.succ.as_slice().to_vec()));
        }
        None
    }

    fn route_find(&mut self, now: u64, find: FindReq, attempts: u8) {
        if let Some((owner, successors)) = self.resolve_local(&find.key) {
            if find.origin.id == self.me.id {
                self.on_find_reply(now, find.req, find.key, owner, successors, find.hops);
            } else {
                let reply = ChordMsg::FindSuccReply { req: find.req, key: find.key, owner, successors, hops: find.hops };
                self.send(find.origin, reply);
            }
            return;
        }
        let mut next = self.closest_preceding_node(&find.key);
        if next.id == self.me.id {
            next = self.succ.first().clone();
        }
        let msg = ChordMsg::FindSucc {
            req: find.req,
            origin: find.origin.clone(),
            prev: self.me.clone(),
            key: find.key,
            hops: find.hops.saturating_add(1),
        };
        let to = next.id;
        self.send(next, msg);
        self.forwards.insert(
            (find.origin.id, find.req),
            Forward { find, to, deadline: now + self.cfg.rpc_timeout_ms, attempts },
        );
    }

    fn on_find_reply(&mut self, now: u64, req: u64, key: NodeId, owner: PeerRef, successors: Vec<PeerRef>, hops: u8) {
        let Some(Pending { what: Waiting::Lookup(purpose), .. }) = self.take_pending(req, is_lookup) else {
            return;
        };
        match purpose {
            Purpose::User(token) => {
                let result = Ok(LookupResult { key, owner, replicas: successors, hops });
                self.emit(ChordEvent::Lookup { token, result });
            }
            Purpose::Join(token) => {
                if owner.id == self.me.id {
                    let err = Error::Join(format!("id {} already present in the ring", self.me.id));
                    self.emit(ChordEvent::Joined { token, result: Err(err) });
                    return;
                }
                self.joined = true;
                let me = self.me.clone();
                let suspects = &self.suspects;
                self.succ.rebuild(&me, std::iter::once(&owner).chain(&successors), |p| !suspects.contains_key(p));
                self.request_transfer(now, token, owner, 0);
            }
            Purpose::Finger(i) => {
                self.finger_inflight = false;
                self.set_finger(i, owner);
            }
            Purpose::Put(token, record) => {
                let rest = self.live_candidates(successors);
                self.try_put(now, token, record, rest);
            }
            Purpose::Get(token, key) => {
                let rest = self.live_candidates(successors);
                self.try_get(now, token, key, rest, hops);
            }
        }
    }

    fn live_candidates(&self, set: Vec<PeerRef>) -> Vec<PeerRef> {
        set.into_iter().filter(|p| !self.suspects.contains_key(&p.id)).take(self.cfg.r).collect()
    }

    fn request_transfer(&mut self, now: u64, token: u64, to: PeerRef, attempts: u8) {
        let req = self.alloc(now + self.cfg.rpc_timeout_ms, Waiting::Transfer { token, to: to.clone(), attempts });
        let joiner = self.me.clone();
        self.send(to, ChordMsg::TransferReq { req, joiner });
    }

    fn try_put(&mut self, now: u64, token: u64, record: DhtRecord, mut rest: Vec<PeerRef>) {
        if rest.is_empty() {
            self.emit(ChordEvent::Put { token, result: Err(Error::NotFound) });
            return;
        }
        let c = rest.remove(0);
        if c.id == self.me.id {
            self.store_and_replicate(now, record);
            self.emit(ChordEvent::Put { token, result: Ok(()) });
            return;
        }
        let to = c.id;
        let sent = record.clone();
        let req = self.alloc(now + self.cfg.rpc_timeout_ms, Waiting::Put { token, record, rest, to });
        let origin = self.me.clone();
        self.send(c, ChordMsg::Put { req, origin, record: sent });
    }

    fn try_get(&mut self, now: u64, token: u64, key: NodeId, mut rest: Vec<PeerRef>, hops: u8) {
        if rest.is_empty() {
            self.emit(ChordEvent::Get { token, result: Err(Error::NotFound) });
            return;
        }
        let c = rest.remove(0);
        if c.id == self.me.id {
            let records = self.store.live(&key, now);
            self.emit(ChordEvent::Get { token, result: Ok(GetResult { records, hops }) });
            return;
        }
        let to = c.id;
        let req = self.alloc(now + self.cfg.rpc_timeout_ms, Waiting::Get { token, key, rest, hops, to });
        let origin = self.me.clone();
        self.send(c, ChordMsg::Get { req, origin, key });
    }

    fn store_and_replicate(&mut self, now: u64, record: DhtRecord) {
        self.store.insert(record.clone(), now);
        let targets = self.replica_targets();
        for t in targets {
            self.send(t, ChordMsg::Replicate { from: self.me.clone(), records: vec![record.clone()] });
        }
    }

    fn replica_targets(&self) -> Vec<PeerRef> {
        self.succ
            .as_slice()
            .iter()
            .filter(|p| p.id != self.me.id)
            .take(self.cfg.r - 1)
            .cloned()
            .collect()
    }

    fn set_finger(&mut self, i: usize, owner: PeerRef) {
        if self.suspects.contains_key(&owner.id) {
            return;
        }
        let me = self.me.node();
        let owner_node = owner.node();
        let is_self = owner.id == self.me.id;
        self.fingers.set(i, owner.clone());
        if is_self {
            return;
        }
        // later fingers whose start is still covered by the same owner
        let mut j = i + 1;
        while j < self.fingers.len() && in_interval(&self.fingers.start(j), &me, &owner_node, Openness::OpenClosed) {
            self.fingers.set(j, owner.clone());
            j += 1;
        }
        self.next_finger = j - 1;
    }

    fn stabilize(&mut self, now: u64) {
        if self.pending.values().any(|p| matches!(p.what, Waiting::Stabilize { .. })) {
            return;
        }
        let s = self.succ.first().clone();
        if s.id == self.me.id {
            if let Some(p) = self.pred.clone() {
                let me = self.me.clone();
                self.succ.rebuild(&me, [&p], |_| true);
                self.send(p, ChordMsg::Notify { candidate: me });
            }
            return;
        }
        let req = self.alloc(now + self.cfg.rpc_timeout_ms, Waiting::Stabilize { to: s.id });
        let from = self.me.clone();
        self.send(s, ChordMsg::GetPred { req, from });
    }

    fn on_stabilize_reply(&mut self, x: Option<PeerRef>, theirs: Vec<PeerRef>) {
        let me = self.me.clone();
        let s = self.succ.first().clone();
        let mut cands = Vec::with_capacity(theirs.len() + 2);
        if let Some(x) = x {
            if x.id != me.id
                && !self.suspects.contains_key(&x.id)
                && in_interval(&x.node(), &me.node(), &s.node(), Openness::OpenOpen)
            {
                cands.push(x);
            }
        }
        cands.push(s);
        cands.extend(theirs);
        let suspects = &self.suspects;
        self.succ.rebuild(&me, &cands, |p| !suspects.contains_key(p));
        let first = self.succ.first().clone();
        if first.id != me.id {
            self.send(first, ChordMsg::Notify { candidate: me });
        }
    }

    fn on_notify(&mut self, now: u64, c: PeerRef) {
        if c.id == self.me.id || self.suspects.contains_key(&c.id) {
            return;
        }
        let me = self.me.node();
        match &self.pred {
            None => self.pred = Some(c.clone()),
            Some(p) if in_interval(&c.node(), &p.node(), &me, Openness::OpenOpen) => {
                // hand over the records the newcomer now owns
                let (lo, hi) = (p.node(), c.node());
                let records = self.store.select(now, |k| in_interval(k, &lo, &hi, Openness::OpenClosed));
                if !records.is_empty() {
                    for batch in batches(records) {
                        self.send(c.clone(), ChordMsg::Transfer { req: 0, records: batch });
                    }
                }
                self.pred = Some(c.clone());
            }
            Some(_) => {}
        }
        if self.succ.first().id == self.me.id {
            let mine = self.me.clone();
            self.succ.rebuild(&mine, [&c], |_| true);
        }
    }

    fn on_transfer_req(&mut self, now: u64, req: u64, joiner: PeerRef) {
        let me = self.me.node();
        let j = joiner.node();
        let adopt = match &self.pred {
            None => true,
            Some(p) => in_interval(&j, &p.node(), &me, Openness::OpenOpen),
        };
        if adopt && joiner.id != self.me.id && !self.suspects.contains_key(&joiner.id) {
            self.pred = Some(joiner.clone());
        }
        let records = self.store.select(now, |k| !in_interval(k, &j, &me, Openness::OpenClosed));
        for batch in batches(records) {
            self.send(joiner.clone(), ChordMsg::Transfer { req, records: batch });
        }
    }

    fn fix_fingers(&mut self, now: u64) {
        if self.finger_inflight {
            return;
        }
        self.next_finger = (self.next_finger + 1) % self.fingers.len();
        let i = self.next_finger;
        self.finger_inflight = true;
        self.start_lookup(now, self.fingers.start(i), Purpose::Finger(i));
    }

    fn check_predecessor(&mut self, now: u64) {
        let Some(p) = self.pred.clone() else { return };
        if self.pending.values().any(|x| matches!(x.what, Waiting::CheckPred { .. })) {
            return;
        }
        let req = self.alloc(now + self.cfg.rpc_timeout_ms, Waiting::CheckPred { to: p.id });
        let from = self.me.clone();
        self.send(p, ChordMsg::Ping { req, from });
    }

    fn push_replicas(&mut self, now: u64) {
        let Some(p) = self.pred.as_ref().map(|p| p.node()) else { return };
        let me = self.me.node();
        let owned = |k: &NodeId| in_interval(k, &p, &me, Openness::OpenClosed);
        self.store.touch(now, owned);
        let records = self.store.select(now, owned);
        if records.is_empty() {
            return;
        }
        let targets = self.replica_targets();
        for batch in batches(records) {
            for t in &targets {
                self.send(t.clone(), ChordMsg::Replicate { from: self.me.clone(), records: batch.clone() });
            }
        }
    }

    /// Drops a peer that missed a deadline from every routing table.
    fn suspect(&mut self, now: u64, peer: PeerId) {
        if peer == self.me.id {
            return;
        }
        self.suspects.insert(peer, now + self.cfg.suspect_ms);
        self.fingers.clear_peer(&peer);
        if self.pred.as_ref().is_some_and(|p| p.id == peer) {
            self.pred = None;
        }
        if self.succ.as_slice().iter().any(|p| p.id == peer) {
            let me = self.me.clone();
            let mut cands: Vec<PeerRef> = self.succ.as_slice().iter().filter(|p| p.id != peer).cloned().collect();
            if cands.iter().all(|p| p.id == me.id) {
                // nothing left: fall back on the nearest finger, then the predecessor
                let mut fs: Vec<PeerRef> = self.fingers.iter().flatten().cloned().collect();
                fs.sort_by_key(|p| me.node().distance_to(&p.node()));
                cands = fs;
                cands.extend(self.pred.clone());
            }
            let suspects = &self.suspects;
            self.succ.rebuild(&me, &cands, |p| !suspects.contains_key(p));
        }
    }

    fn on_timeout(&mut self, now: u64, what: Waiting) {
        match what {
            Waiting::Lookup(purpose) => match purpose {
                Purpose::User(token) => self.emit(ChordEvent::Lookup { token, result: Err(Error::RingUnreachable) }),
                Purpose::Join(token) => self.emit(ChordEvent::Joined {
                    token,
                    result: Err(Error::Join("bootstrap unreachable".into())),
                }),
                Purpose::Finger(_) => self.finger_inflight = false,
                Purpose::Put(token, _) => self.emit(ChordEvent::Put { token, result: Err(Error::RingUnreachable) }),
                Purpose::Get(token, _) => self.emit(ChordEvent::Get { token, result: Err(Error::RingUnreachable) }),
            },
            Waiting::Stabilize { to } => {
                self.suspect(now, to);
                self.stabilize(now);
            }
            Waiting::CheckPred { to } => self.suspect(now, to),
            Waiting::Put { token, record, rest, to } => {
                self.suspect(now, to);
                self.try_put(now, token, record, rest);
            }
            Waiting::Get { token, key, rest, hops, to } => {
                self.suspect(now, to);
                self.try_get(now, token, key, rest, hops);
            }
            Waiting::Transfer { token, to, attempts } => {
                if attempts < 3 {
                    self.request_transfer(now, token, to, attempts + 1);
                } else {
                    self.emit(ChordEvent::Joined { token, result: Ok(()) });
                }
            }
        }
    }
}

fn is_lookup(w: &Waiting) -> bool {
    matches!(w, Waiting::Lookup(_))
}

fn is_put(w: &Waiting) -> bool {
    matches!(w, Waiting::Put { .. })
}

fn is_get(w: &Waiting) -> bool {
    matches!(w, Waiting::Get { .. })
}

fn is_transfer(w: &Waiting) -> bool {
    matches!(w, Waiting::Transfer { .. })
}

/// Splits records into message-sized batches; always yields at least one.
fn batches(records: Vec<DhtRecord>) -> Vec<Vec<DhtRecord>> {
    let mut out = vec![Vec::new()];
    let mut size = 0;
    for r in records {
        let len = r.payload.len() + 64;
        if size + len > BATCH_BYTES && !out.last().unwrap().is_empty() {
            out.push(Vec::new());
            size = 0;
        }
        size += len;
        out.last_mut().unwrap().push(r);
    }
    out
}
