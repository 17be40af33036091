//! Ring-maintenance RPC payloads. The envelope's payload kind selects the
//! variant; the payload bytes carry its fields.

use crate::chord::{DhtRecord, PeerRef};
use crate::envelope::PayloadKind;
use crate::error::Result;
use crate::id::{NodeId, PeerId};
use crate::transport::{EndpointAddress, TransportKind};
use crate::wire::{Format, PutExt, Reader};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChordMsg {
    /// Recursive lookup; forwarded hop by hop, answered straight to `origin`.
    FindSucc { req: u64, origin: PeerRef, prev: PeerRef, key: NodeId, hops: u8 },
    /// Confirms receipt of a forwarded lookup to the previous hop.
    FindSuccAck { origin: PeerId, req: u64 },
    FindSuccReply { req: u64, key: NodeId, owner: PeerRef, successors: Vec<PeerRef>, hops: u8 },
    GetPred { req: u64, from: PeerRef },
    GetPredReply { req: u64, pred: Option<PeerRef>, successors: Vec<PeerRef> },
    Notify { candidate: PeerRef },
    Ping { req: u64, from: PeerRef },
    Pong { req: u64 },
    Put { req: u64, origin: PeerRef, record: DhtRecord },
    PutAck { req: u64 },
    Get { req: u64, origin: PeerRef, key: NodeId },
    GetReply { req: u64, records: Vec<DhtRecord> },
    TransferReq { req: u64, joiner: PeerRef },
    /// Records handed to a new owner; `req` 0 marks an unsolicited handoff.
    Transfer { req: u64, records: Vec<DhtRecord> },
    Replicate { from: PeerRef, records: Vec<DhtRecord> },
}

impl ChordMsg {
    pub fn kind(&self) -> PayloadKind {
        match self {
            ChordMsg::FindSucc { .. } => PayloadKind::FIND_SUCC,
            ChordMsg::FindSuccAck { .. } => PayloadKind::FIND_SUCC_ACK,
            ChordMsg::FindSuccReply { .. } => PayloadKind::FIND_SUCC_REPLY,
            ChordMsg::GetPred { .. } => PayloadKind::GET_PRED,
            ChordMsg::GetPredReply { .. } => PayloadKind::GET_PRED_REPLY,
            ChordMsg::Notify { .. } => PayloadKind::NOTIFY,
            ChordMsg::Ping { .. } => PayloadKind::PING,
            ChordMsg::Pong { .. } => PayloadKind::PONG,
            ChordMsg::Put { .. } => PayloadKind::PUT,
            ChordMsg::PutAck { .. } => PayloadKind::PUT_ACK,
            ChordMsg::Get { .. } => PayloadKind::GET,
            ChordMsg::GetReply { .. } => PayloadKind::GET_REPLY,
            ChordMsg::TransferReq { .. } => PayloadKind::TRANSFER_REQ,
            ChordMsg::Transfer { .. } => PayloadKind::TRANSFER,
            ChordMsg::Replicate { .. } => PayloadKind::REPLICATE,
        }
    }

    /// Every peer reference carried, so hosts can learn endpoints.
    pub fn peer_refs(&self) -> Vec<&PeerRef> {
        match self {
            ChordMsg::FindSucc { origin, prev, .. } => vec![origin, prev],
            ChordMsg::FindSuccReply { owner, successors, .. } => {
                std::iter::once(owner).chain(successors).collect()
            }
            ChordMsg::GetPred { from, .. } | ChordMsg::Ping { from, .. } => vec![from],
            ChordMsg::GetPredReply { pred, successors, .. } => pred.iter().chain(successors).collect(),
            ChordMsg::Notify { candidate } => vec![candidate],
            ChordMsg::Put { origin, .. } | ChordMsg::Get { origin, .. } => vec![origin],
            ChordMsg::TransferReq { joiner, .. } => vec![joiner],
            ChordMsg::Replicate { from, .. } => vec![from],
            _ => Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ChordMsg::FindSucc { req, origin, prev, key, hops } => {
                out.put_u64(*req);
                put_ref(&mut out, origin);
                put_ref(&mut out, prev);
                out.put_id(key);
                out.put_u8(*hops);
            }
            ChordMsg::FindSuccAck { origin, req } => {
                out.put_id(&origin.0);
                out.put_u64(*req);
            }
            ChordMsg::FindSuccReply { req, key, owner, successors, hops } => {
                out.put_u64(*req);
                out.put_id(key);
                put_ref(&mut out, owner);
                put_refs(&mut out, successors);
                out.put_u8(*hops);
            }
            ChordMsg::GetPred { req, from } | ChordMsg::Ping { req, from } => {
                out.put_u64(*req);
                put_ref(&mut out, from);
            }
            ChordMsg::GetPredReply { req, pred, successors } => {
                out.put_u64(*req);
                match pred {
                    Some(p) => {
                        out.put_u8(1);
                        put_ref(&mut out, p);
                    }
                    None => out.put_u8(0),
                }
                put_refs(&mut out, successors);
            }
            ChordMsg::Notify { candidate } => put_ref(&mut out, candidate),
            ChordMsg::Pong { req } | ChordMsg::PutAck { req } => out.put_u64(*req),
            ChordMsg::Put { req, origin, record } => {
                out.put_u64(*req);
                put_ref(&mut out, origin);
                put_record(&mut out, record);
            }
            ChordMsg::Get { req, origin, key } => {
                out.put_u64(*req);
                put_ref(&mut out, origin);
                out.put_id(key);
            }
            ChordMsg::GetReply { req, records } | ChordMsg::Transfer { req, records } => {
                out.put_u64(*req);
                put_records(&mut out, records);
            }
            ChordMsg::TransferReq { req, joiner } => {
                out.put_u64(*req);
                put_ref(&mut out, joiner);
            }
            ChordMsg::Replicate { from, records } => {
                put_ref(&mut out, from);
                put_records(&mut out, records);
            }
        }
        out
    }

    pub fn decode(kind: PayloadKind, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Format::Payload("chord"));
        let msg = match kind {
            PayloadKind::FIND_SUCC => ChordMsg::FindSucc {
                req: r.u64()?,
                origin: get_ref(&mut r)?,
                prev: get_ref(&mut r)?,
                key: r.id()?,
                hops: r.u8()?,
            },
            PayloadKind::FIND_SUCC_ACK => ChordMsg::FindSuccAck { origin: PeerId(r.id()?), req: r.u64()? },
            PayloadKind::FIND_SUCC_REPLY => ChordMsg::FindSuccReply {
                req: r.u64()?,
                key: r.id()?,
                owner: get_ref(&mut r)?,
                successors: get_refs(&mut r)?,
                hops: r.u8()?,
            },
            PayloadKind::GET_PRED => ChordMsg::GetPred { req: r.u64()?, from: get_ref(&mut r)? },
            PayloadKind::PING => ChordMsg::Ping { req: r.u64()?, from: get_ref(&mut r)? },
            PayloadKind::GET_PRED_REPLY => {
                let req = r.u64()?;
                let pred = match r.u8()? {
                    0 => None,
                    _ => Some(get_ref(&mut r)?),
                };
                ChordMsg::GetPredReply { req, pred, successors: get_refs(&mut r)? }
            }
            PayloadKind::NOTIFY => ChordMsg::Notify { candidate: get_ref(&mut r)? },
            PayloadKind::PONG => ChordMsg::Pong { req: r.u64()? },
            PayloadKind::PUT_ACK => ChordMsg::PutAck { req: r.u64()? },
            PayloadKind::PUT => ChordMsg::Put {
                req: r.u64()?,
                origin: get_ref(&mut r)?,
                record: get_record(&mut r)?,
            },
            PayloadKind::GET => ChordMsg::Get { req: r.u64()?, origin: get_ref(&mut r)?, key: r.id()? },
            PayloadKind::GET_REPLY => ChordMsg::GetReply { req: r.u64()?, records: get_records(&mut r)? },
            PayloadKind::TRANSFER => ChordMsg::Transfer { req: r.u64()?, records: get_records(&mut r)? },
            PayloadKind::TRANSFER_REQ => ChordMsg::TransferReq { req: r.u64()?, joiner: get_ref(&mut r)? },
            PayloadKind::REPLICATE => ChordMsg::Replicate { from: get_ref(&mut r)?, records: get_records(&mut r)? },
            _ => return Err(r.fail_at(0, "not a chord payload kind")),
        };
        r.finish()?;
        Ok(msg)
    }
}

fn put_ref(out: &mut Vec<u8>, p: &PeerRef) {
    out.put_id(&p.id.0);
    out.put_u8(p.endpoints.len() as u8);
    for e in &p.endpoints {
        out.put_u8(e.kind as u8);
        out.put_short_str(&e.address);
    }
}

fn get_ref(r: &mut Reader<'_>) -> Result<PeerRef> {
    let id = PeerId(r.id()?);
    let n = r.u8()? as usize;
    let mut endpoints = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos();
        let kind = TransportKind::from_u8(r.u8()?).ok_or_else(|| r.fail_at(at, "transport kind"))?;
        endpoints.push(EndpointAddress { kind, address: r.short_str()? });
    }
    Ok(PeerRef { id, endpoints })
}

fn put_refs(out: &mut Vec<u8>, refs: &[PeerRef]) {
    out.put_u8(refs.len() as u8);
    for p in refs {
        put_ref(out, p);
    }
}

fn get_refs(r: &mut Reader<'_>) -> Result<Vec<PeerRef>> {
    let n = r.u8()? as usize;
    (0..n).map(|_| get_ref(r)).collect()
}

fn put_record(out: &mut Vec<u8>, rec: &DhtRecord) {
    out.put_id(&rec.key);
    out.put_id(&rec.publisher.0);
    out.put_u64(rec.expires_at);
    out.put_u32(rec.payload.len() as u32);
    out.extend_from_slice(&rec.payload);
}

fn get_record(r: &mut Reader<'_>) -> Result<DhtRecord> {
    let key = r.id()?;
    let publisher = PeerId(r.id()?);
    let expires_at = r.u64()?;
    let len = r.u32()? as usize;
    Ok(DhtRecord { key, publisher, expires_at, payload: r.bytes(len)?.to_vec() })
}

fn put_records(out: &mut Vec<u8>, recs: &[DhtRecord]) {
    out.put_u16(recs.len() as u16);
    for rec in recs {
        put_record(out, rec);
    }
}

fn get_records(r: &mut Reader<'_>) -> Result<Vec<DhtRecord>> {
    let n = r.u16()? as usize;
    (0..n).map(|_| get_record(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_round_trips() {
        let m = 16;
        let p = |n: &str| {
            PeerRef::new(
                PeerId::from_name(n.as_bytes(), m).unwrap(),
                vec![EndpointAddress::sim(TransportKind::Mem, "lan", n)],
            )
        };
        let key = crate::id::hash_to_id(b"k", m).unwrap();
        let rec = DhtRecord { key, payload: vec![1, 2, 3], publisher: p("a").id, expires_at: 99 };
        let msgs = vec![
            ChordMsg::FindSucc { req: 1, origin: p("a"), prev: p("b"), key, hops: 3 },
            ChordMsg::FindSuccAck { origin: p("a").id, req: 1 },
            ChordMsg::FindSuccReply { req: 1, key, owner: p("c"), successors: vec![p("d"), p("e")], hops: 2 },
            ChordMsg::GetPred { req: 2, from: p("a") },
            ChordMsg::GetPredReply { req: 2, pred: None, successors: vec![p("b")] },
            ChordMsg::GetPredReply { req: 2, pred: Some(p("z")), successors: vec![] },
            ChordMsg::Notify { candidate: p("a") },
            ChordMsg::Ping { req: 3, from: p("a") },
            ChordMsg::Pong { req: 3 },
            ChordMsg::Put { req: 4, origin: p("a"), record: rec.clone() },
            ChordMsg::PutAck { req: 4 },
            ChordMsg::Get { req: 5, origin: p("a"), key },
            ChordMsg::GetReply { req: 5, records: vec![rec.clone(), rec.clone()] },
            ChordMsg::TransferReq { req: 6, joiner: p("j") },
            ChordMsg::Transfer { req: 0, records: vec![rec.clone()] },
            ChordMsg::Replicate { from: p("o"), records: vec![] },
        ];
        for msg in msgs {
            let back = ChordMsg::decode(msg.kind(), &msg.encode()).unwrap();
            assert_eq!(back, msg);
        }
    }
}
