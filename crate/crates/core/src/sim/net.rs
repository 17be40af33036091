//! Discrete-event clock, simulated segments and the link delay model.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envelope::{encode_envelope, MessageEnvelope};
use crate::error::{Error, Result};
use crate::id::{GroupId, PeerId};
use crate::sim::metrics::Metrics;
use crate::sim::{OpId, OpResult};
use crate::transport::{fragment, EndpointAddress, LinkProfile, TransportKind, MAX_ENVELOPE_BYTES};

/// Source route attached to frames as link metadata.
#[derive(Debug, Clone)]
pub(crate) struct RouteMeta {
    pub source: PeerId,
    pub source_endpoints: Vec<EndpointAddress>,
    pub segment_path: Vec<String>,
    /// Link-level receiver per stage.
    pub hops: Vec<EndpointAddress>,
}

#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub to: PeerId,
    pub from: PeerId,
    pub bytes: Vec<u8>,
    pub route: Option<Rc<RouteMeta>>,
    pub stage: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum EventKind {
    Frame(Frame),
    Local { to: PeerId, env: MessageEnvelope },
    Round { peer: PeerId },
    Wake { peer: PeerId },
    Beacon { peer: PeerId },
    RouteStale { to: PeerId, bridge: PeerId },
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Scheduled { time, seq: self.seq, kind });
    }

    pub fn pop(&mut self) -> Option<(u64, EventKind)> {
        self.heap.pop().map(|s| (s.time, s.kind))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|s| s.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

/// One envelope leaving a peer on one segment, as seen by drop rules.
#[derive(Debug)]
pub struct Transmission<'a> {
    pub now: u64,
    pub from: PeerId,
    /// `None` for a segment broadcast.
    pub to: Option<PeerId>,
    pub segment: &'a str,
    pub env: &'a MessageEnvelope,
    /// 0 on the sender's own link, then one more per relay.
    pub stage: usize,
}

pub type DropRule = Box<dyn FnMut(&Transmission<'_>) -> bool>;

/// An envelope recorded by a segment tap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captured {
    pub time: u64,
    pub from: PeerId,
    pub to: Option<PeerId>,
    pub envelope: Vec<u8>,
}

#[derive(Debug)]
pub struct Segment {
    pub name: String,
    pub kind: TransportKind,
    pub profile: LinkProfile,
    pub(crate) members: BTreeMap<String, PeerId>,
    busy_until: BTreeMap<String, u64>,
    pub bytes: u64,
    pub fragments: u64,
    pub envelopes: u64,
    pub(crate) tap: Option<Vec<Captured>>,
}

impl Segment {
    pub fn new(name: &str, kind: TransportKind, profile: LinkProfile) -> Self {
        Segment {
            name: name.to_string(),
            kind,
            profile,
            members: BTreeMap::new(),
            busy_until: BTreeMap::new(),
            bytes: 0,
            fragments: 0,
            envelopes: 0,
            tap: None,
        }
    }

    pub fn members(&self) -> impl Iterator<Item = (&String, &PeerId)> {
        self.members.iter()
    }
}

/// Where a payload was observed, for verbatim-forwarding checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TraceRole {
    Source,
    Relay,
    Destination,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadTrace {
    pub correlation_id: u64,
    pub src: PeerId,
    pub at: PeerId,
    pub role: TraceRole,
    pub digest: [u8; 32],
}

/// Run-wide observations used by property checks.
#[derive(Debug, Default)]
pub struct SimLog {
    /// `(originator, correlation) -> receivers`, in delivery order.
    pub deliveries: BTreeMap<(PeerId, u64), Vec<PeerId>>,
    pub propagate_tx: BTreeMap<(PeerId, u64), u64>,
    pub duplicates: BTreeMap<(PeerId, u64), u64>,
    /// Peers that successfully decrypted traffic of each group.
    pub decrypted_by: BTreeMap<GroupId, BTreeSet<PeerId>>,
    pub decrypt_failures: BTreeMap<GroupId, BTreeSet<PeerId>>,
    pub traces: Vec<PayloadTrace>,
    pub trace_payloads: bool,
    pub pipe_received: Vec<(PeerId, Vec<u8>)>,
}

/// State shared by every peer during event handling.
pub(crate) struct Ctx {
    pub now: u64,
    pub m: u8,
    pub rng: ChaCha8Rng,
    pub queue: EventQueue,
    pub segments: BTreeMap<String, Segment>,
    pub metrics: Metrics,
    pub results: BTreeMap<OpId, Result<OpResult>>,
    pub log: SimLog,
    pub drop_rules: Vec<DropRule>,
}

impl Ctx {
    pub fn complete(&mut self, op: OpId, result: Result<OpResult>) {
        self.results.insert(op, result);
    }

    /// Sends `env` over one segment, from `egress` to `to` (or to every
    /// other member when `to` is `None`), applying serialization delay,
    /// fragmentation, loss and drop rules.
    #[allow(clippy::too_many_arguments)]
    pub fn link_send(
        &mut self,
        from: PeerId,
        segment: &str,
        egress: &EndpointAddress,
        to: Option<&EndpointAddress>,
        env: &MessageEnvelope,
        envelope_id: u32,
        route: Option<Rc<RouteMeta>>,
        stage: usize,
    ) -> Result<()> {
        let seg = self
            .segments
            .get(segment)
            .ok_or_else(|| Error::Unreachable(format!("unknown segment {segment}")))?;
        let receivers: Vec<PeerId> = match to {
            Some(ep) => {
                let p = seg
                    .members
                    .get(&ep.address)
                    .ok_or_else(|| Error::Unreachable(format!("{ep} is not attached")))?;
                vec![*p]
            }
            None => seg.members.values().filter(|p| **p != from).copied().collect(),
        };
        let bytes = encode_envelope(env)?;
        if bytes.len() > MAX_ENVELOPE_BYTES {
            return Err(Error::TooLarge(bytes.len()));
        }
        let tx = Transmission { now: self.now, from, to: to.map(|_| receivers[0]), segment, env, stage };
        let mut dropped = false;
        for rule in &mut self.drop_rules {
            if rule(&tx) {
                dropped = true;
            }
        }
        let profile = seg.profile;
        let frags = fragment(envelope_id, &bytes, profile.mtu)?;
        let total: usize = frags.iter().map(|f| f.wire_len()).sum();
        let now = self.now;
        let seg = self.segments.get_mut(segment).unwrap();
        let start = now.max(seg.busy_until.get(&egress.address).copied().unwrap_or(0));
        seg.busy_until.insert(egress.address.clone(), start + profile.serialization_ms(total as u64));
        seg.bytes += total as u64;
        seg.fragments += frags.len() as u64;
        seg.envelopes += 1;
        if let Some(tap) = &mut seg.tap {
            tap.push(Captured { time: now, from, to: to.map(|_| receivers[0]), envelope: bytes.clone() });
        }
        self.metrics.incr(&format!("segment.{segment}.bytes"), total as u64);
        self.metrics.incr("link.envelopes", 1);
        self.metrics.incr("link.fragments", frags.len() as u64);
        if dropped {
            self.metrics.incr("link.rule_drops", 1);
            return Ok(());
        }
        let mut cum = 0;
        for f in frags {
            cum += f.wire_len();
            if profile.loss_rate > 0.0 && self.rng.gen::<f64>() < profile.loss_rate {
                self.metrics.incr("link.fragments_lost", 1);
                continue;
            }
            let arrival = start + profile.latency_ms + profile.serialization_ms(cum as u64);
            let wire = f.to_bytes();
            for r in &receivers {
                self.queue.push(
                    arrival,
                    EventKind::Frame(Frame {
                        to: *r,
                        from,
                        bytes: wire.clone(),
                        route: route.clone(),
                        stage,
                    }),
                );
            }
        }
        Ok(())
    }
}
