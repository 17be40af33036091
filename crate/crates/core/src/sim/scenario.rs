//! Line-oriented scenario files and the runner that plays them on a [`Sim`].
//!
//! ```text
//! name ring8
//! seed 7
//! bits 16
//! segment lan mtu=1500 bw=12500000 lat=1 loss=0
//! segment radio mtu=127 bw=2500 lat=15 loss=0.05 kind=narrow
//! group lab parent=root policy=secured creator=a
//! peer a at lan groups=lab
//! peer b at lan,radio groups=lab
//! at 0 join a
//! at 500 join b
//! at 5000 publish a lab /temp temp 21.5
//! at 9000 discover b lab temp
//! at 9500 request b a lab GET /temp con
//! at 9500 lookup a root 100
//! end 60000
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coap::{static_handler, Code, MsgType};
use crate::error::{Error, Result};
use crate::group::GroupPolicy;
use crate::id::{GroupId, NodeId, PeerId, ROOT_GROUP_NAME};
use crate::sim::{MetricsReport, OpId, OpResult, Sim};
use crate::transport::{LinkProfile, TransportKind};

/// Time the runner keeps going after the last timeline event when no `end`
/// line is given.
pub const DEFAULT_TAIL_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDecl {
    pub name: String,
    pub kind: TransportKind,
    pub profile: LinkProfile,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerDecl {
    pub label: String,
    pub segments: Vec<String>,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupDecl {
    pub name: String,
    pub parent: String,
    pub policy: GroupPolicy,
    pub creator: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Joins the root ring, then every group in the peer's `groups=` list;
    /// with a group argument joins only that group.
    Join { peer: String, group: Option<String> },
    Crash { peer: String },
    Publish { peer: String, group: String, path: String, name: String, body: String },
    Discover { peer: String, group: String, name: String },
    Request { peer: String, target: String, group: String, method: Code, path: String, confirmable: bool },
    Propagate { peer: String, group: String, data: String },
    RotateKey { peer: String, group: String, evict: Vec<String> },
    /// `count` lookups of random keys, checked against the live ring.
    Lookup { peer: String, group: String, count: u32 },
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::Join { .. } => "join",
            Action::Crash { .. } => "crash",
            Action::Publish { .. } => "publish",
            Action::Discover { .. } => "discover",
            Action::Request { .. } => "request",
            Action::Propagate { .. } => "propagate",
            Action::RotateKey { .. } => "rotate_key",
            Action::Lookup { .. } => "lookup",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedAction {
    pub at: u64,
    pub action: Action,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: Option<String>,
    pub seed: u64,
    pub bits: u8,
    pub segments: Vec<SegmentDecl>,
    pub groups: Vec<GroupDecl>,
    pub peers: Vec<PeerDecl>,
    pub timeline: Vec<TimedAction>,
    pub end: Option<u64>,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(line: usize, what: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| perr(line, format!("bad {what} {v:?}")))
}

/// Splits `k=v` options off the end of a token list.
fn options<'a>(line: usize, toks: &[&'a str]) -> Result<(Vec<&'a str>, BTreeMap<&'a str, &'a str>)> {
    let mut pos = Vec::new();
    let mut opts = BTreeMap::new();
    for t in toks {
        match t.split_once('=') {
            Some((k, v)) => {
                if opts.insert(k, v).is_some() {
                    return Err(perr(line, format!("option {k} given twice")));
                }
            }
            None => pos.push(*t),
        }
    }
    Ok((pos, opts))
}

fn only<'a>(line: usize, opts: &BTreeMap<&'a str, &'a str>, allowed: &[&str]) -> Result<()> {
    match opts.keys().find(|k| !allowed.contains(k)) {
        Some(k) => Err(perr(line, format!("unknown option {k}"))),
        None => Ok(()),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario> {
        let mut sc = Scenario {
            name: None,
            seed: 0,
            bits: 16,
            segments: Vec::new(),
            groups: Vec::new(),
            peers: Vec::new(),
            timeline: Vec::new(),
            end: None,
        };
        let mut segs = BTreeSet::new();
        let mut groups = BTreeSet::from([ROOT_GROUP_NAME.to_string()]);
        let mut peers = BTreeSet::new();
        let mut last_at = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            let need = |n: usize| {
                if toks.len() < n {
                    Err(perr(line, format!("{} needs {} arguments", toks[0], n - 1)))
                } else {
                    Ok(())
                }
            };
            match toks[0] {
                "name" => {
                    need(2)?;
                    sc.name = Some(toks[1].to_string());
                }
                "seed" => {
                    need(2)?;
                    sc.seed = num(line, "seed", toks[1])?;
                }
                "bits" => {
                    need(2)?;
                    sc.bits = num(line, "bits", toks[1])?;
                }
                "end" => {
                    need(2)?;
                    sc.end = Some(num(line, "end time", toks[1])?);
                }
                "segment" => {
                    need(2)?;
                    let (pos, opts) = options(line, &toks[1..])?;
                    only(line, &opts, &["mtu", "bw", "lat", "loss", "kind"])?;
                    let name = pos.first().ok_or_else(|| perr(line, "segment needs a name"))?.to_string();
                    let get = |k: &str| opts.get(k).ok_or_else(|| perr(line, format!("segment needs {k}=")));
                    let kind = match opts.get("kind").copied().unwrap_or("mem") {
                        "mem" => TransportKind::Mem,
                        "narrow" => TransportKind::NarrowSim,
                        k => return Err(perr(line, format!("unknown segment kind {k}"))),
                    };
                    let profile = LinkProfile::new(
                        num(line, "bw", get("bw")?)?,
                        num(line, "lat", get("lat")?)?,
                        num(line, "mtu", get("mtu")?)?,
                        num(line, "loss", get("loss")?)?,
                    )
                    .map_err(|e| perr(line, e.to_string()))?;
                    if !segs.insert(name.clone()) {
                        return Err(perr(line, format!("segment {name} declared twice")));
                    }
                    sc.segments.push(SegmentDecl { name, kind, profile });
                }
                "group" => {
                    let (pos, opts) = options(line, &toks[1..])?;
                    only(line, &opts, &["parent", "policy", "creator"])?;
                    let name = pos.first().ok_or_else(|| perr(line, "group needs a name"))?.to_string();
                    let parent = opts.get("parent").copied().unwrap_or(ROOT_GROUP_NAME).to_string();
                    if !groups.contains(&parent) {
                        return Err(perr(line, format!("unknown parent group {parent}")));
                    }
                    let p = opts.get("policy").copied().unwrap_or("open");
                    let policy = GroupPolicy::parse(p).ok_or_else(|| perr(line, format!("unknown policy {p}")))?;
                    let creator = opts.get("creator").ok_or_else(|| perr(line, "group needs creator="))?.to_string();
                    if !groups.insert(name.clone()) {
                        return Err(perr(line, format!("group {name} declared twice")));
                    }
                    sc.groups.push(GroupDecl { name, parent, policy, creator });
                }
                "peer" => {
                    let (pos, opts) = options(line, &toks[1..])?;
                    only(line, &opts, &["groups"])?;
                    if pos.len() != 3 || pos[1] != "at" {
                        return Err(perr(line, "expected: peer <label> at <seg>[,<seg>...]"));
                    }
                    let label = pos[0].to_string();
                    let segments: Vec<String> = pos[2].split(',').map(String::from).collect();
                    if let Some(s) = segments.iter().find(|s| !segs.contains(*s)) {
                        return Err(perr(line, format!("unknown segment {s}")));
                    }
                    let member_of: Vec<String> =
                        opts.get("groups").map(|g| g.split(',').map(String::from).collect()).unwrap_or_default();
                    if let Some(g) = member_of.iter().find(|g| !groups.contains(*g)) {
                        return Err(perr(line, format!("unknown group {g}")));
                    }
                    if !peers.insert(label.clone()) {
                        return Err(perr(line, format!("peer {label} declared twice")));
                    }
                    sc.peers.push(PeerDecl { label, segments, groups: member_of });
                }
                "at" => {
                    need(3)?;
                    let at: u64 = num(line, "time", toks[1])?;
                    if at < last_at {
                        return Err(perr(line, format!("time {at} goes backwards (previous {last_at})")));
                    }
                    last_at = at;
                    let action = parse_action(line, &toks[2..])?;
                    check_refs(line, &action, &peers, &groups)?;
                    sc.timeline.push(TimedAction { at, action, line });
                }
                other => return Err(perr(line, format!("unknown directive {other}"))),
            }
        }
        for g in &sc.groups {
            if !peers.contains(&g.creator) {
                return Err(perr(0, format!("group {} names unknown creator {}", g.name, g.creator)));
            }
        }
        Ok(sc)
    }

    pub fn run(&self, seed: Option<u64>) -> Result<MetricsReport> {
        Runner::new(self, seed.unwrap_or(self.seed))?.run()
    }
}

fn parse_action(line: usize, t: &[&str]) -> Result<Action> {
    let s = |i: usize| t.get(i).map(|v| v.to_string()).ok_or_else(|| perr(line, format!("{} is missing arguments", t[0])));
    let action = match t[0] {
        "join" => Action::Join { peer: s(1)?, group: t.get(2).map(|g| g.to_string()) },
        "crash" => Action::Crash { peer: s(1)? },
        "publish" => Action::Publish { peer: s(1)?, group: s(2)?, path: s(3)?, name: s(4)?, body: t[5.min(t.len())..].join(" ") },
        "discover" => Action::Discover { peer: s(1)?, group: s(2)?, name: s(3)? },
        "request" => {
            let method = Code::parse_method(&s(4)?).ok_or_else(|| perr(line, format!("unknown method {}", t[4])))?;
            let confirmable = match t.get(6).copied().unwrap_or("con") {
                "con" => true,
                "non" => false,
                o => return Err(perr(line, format!("expected con or non, got {o}"))),
            };
            Action::Request { peer: s(1)?, target: s(2)?, group: s(3)?, method, path: s(5)?, confirmable }
        }
        "propagate" => Action::Propagate { peer: s(1)?, group: s(2)?, data: t[3.min(t.len())..].join(" ") },
        "rotate_key" => {
            let (pos, opts) = options(line, &t[1..])?;
            only(line, &opts, &["evict"])?;
            if pos.len() != 2 {
                return Err(perr(line, "expected: rotate_key <peer> <group> [evict=<p,...>]"));
            }
            let evict = opts.get("evict").map(|e| e.split(',').map(String::from).collect()).unwrap_or_default();
            Action::RotateKey { peer: pos[0].to_string(), group: pos[1].to_string(), evict }
        }
        "lookup" => Action::Lookup { peer: s(1)?, group: s(2)?, count: num(line, "count", &s(3)?)? },
        a => return Err(perr(line, format!("unknown action {a}"))),
    };
    Ok(action)
}

fn check_refs(line: usize, a: &Action, peers: &BTreeSet<String>, groups: &BTreeSet<String>) -> Result<()> {
    let (ps, gs): (Vec<&String>, Vec<&String>) = match a {
        Action::Join { peer, group } => (vec![peer], group.iter().collect()),
        Action::Crash { peer } => (vec![peer], vec![]),
        Action::Publish { peer, group, .. }
        | Action::Discover { peer, group, .. }
        | Action::Propagate { peer, group, .. }
        | Action::Lookup { peer, group, .. } => (vec![peer], vec![group]),
        Action::Request { peer, target, group, .. } => (vec![peer, target], vec![group]),
        Action::RotateKey { peer, group, evict } => (std::iter::once(peer).chain(evict).collect(), vec![group]),
    };
    if let Some(p) = ps.iter().find(|p| !peers.contains(**p)) {
        return Err(perr(line, format!("unknown peer {p}")));
    }
    if let Some(g) = gs.iter().find(|g| !groups.contains(**g)) {
        return Err(perr(line, format!("unknown group {g}")));
    }
    Ok(())
}

enum Pending {
    JoinChain { peer: PeerId, rest: VecDeque<String> },
    Lookup { group: GroupId, key: NodeId },
    Plain(&'static str),
}

struct Runner<'a> {
    sc: &'a Scenario,
    sim: Sim,
    rng: ChaCha8Rng,
    groups: BTreeMap<String, GroupId>,
    decls: BTreeMap<String, &'a GroupDecl>,
    pending: BTreeMap<OpId, Pending>,
}

impl<'a> Runner<'a> {
    fn new(sc: &'a Scenario, seed: u64) -> Result<Self> {
        let wrap = |e: Error| Error::Scenario { line: 0, msg: e.to_string() };
        let mut sim = Sim::new(seed, sc.bits).map_err(wrap)?;
        for s in &sc.segments {
            sim.add_segment(&s.name, s.kind, s.profile).map_err(wrap)?;
        }
        for p in &sc.peers {
            let segs: Vec<&str> = p.segments.iter().map(String::as_str).collect();
            sim.add_peer(&p.label, &segs).map_err(wrap)?;
        }
        let groups = BTreeMap::from([(ROOT_GROUP_NAME.to_string(), sim.root())]);
        Ok(Runner {
            sc,
            sim,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a210),
            groups,
            decls: sc.groups.iter().map(|g| (g.name.clone(), g)).collect(),
            pending: BTreeMap::new(),
        })
    }

    fn run(mut self) -> Result<MetricsReport> {
        for ev in &self.sc.timeline {
            self.advance_to(ev.at);
            self.exec(ev).map_err(|e| match e {
                Error::Scenario { .. } => e,
                e => Error::Scenario { line: ev.line, msg: e.to_string() },
            })?;
        }
        let last = self.sc.timeline.last().map(|e| e.at).unwrap_or(0);
        self.advance_to(self.sc.end.unwrap_or(last + DEFAULT_TAIL_MS));
        let open = self.pending.len() as u64;
        self.sim.metrics_mut().incr("scenario.unfinished", open);
        Ok(self.sim.report(self.sc.name.as_deref()))
    }

    fn advance_to(&mut self, t: u64) {
        loop {
            self.settle();
            if !self.sim.next_event_time().is_some_and(|e| e <= t) {
                break;
            }
            self.sim.step();
        }
        self.sim.run_until(t);
        self.settle();
    }

    fn settle(&mut self) {
        for (op, res) in self.sim.drain_results() {
            if let Some(p) = self.pending.remove(&op) {
                self.finish(p, res);
            }
        }
    }

    fn count(&mut self, name: &str, ok: bool) {
        let key = format!("scenario.{}.{name}", if ok { "ok" } else { "failed" });
        self.sim.metrics_mut().incr(&key, 1);
    }

    fn finish(&mut self, p: Pending, res: Result<OpResult>) {
        match p {
            Pending::JoinChain { peer, rest } => {
                self.count("join", res.is_ok());
                if res.is_ok() {
                    self.continue_chain(peer, rest);
                }
            }
            Pending::Lookup { group, key } => match res {
                Ok(OpResult::Lookup(r)) => {
                    let correct = self.oracle_owner(group, &key) == Some(r.owner.id);
                    self.sim.metrics_mut().incr(if correct { "lookup.correct" } else { "lookup.incorrect" }, 1);
                    self.count("lookup", true);
                }
                _ => self.count("lookup", false),
            },
            Pending::Plain(name) => {
                if let Ok(OpResult::Discovered { ads, .. }) = &res {
                    self.sim.metrics_mut().observe("discovery_results", ads.len() as u64);
                }
                if let Ok(OpResult::Coap { response, .. }) = &res {
                    let code = response.code;
                    self.sim.metrics_mut().incr(&format!("scenario.coap.{code}"), 1);
                }
                self.count(name, res.is_ok());
            }
        }
    }

    fn oracle_owner(&self, group: GroupId, key: &NodeId) -> Option<PeerId> {
        // members() is sorted by id
        let members = self.sim.members(group);
        members.iter().find(|p| p.0 >= *key).or(members.first()).copied()
    }

    fn peer(&self, label: &str) -> PeerId {
        self.sim.peer_id(label).expect("checked at parse time")
    }

    fn group(&self, name: &str) -> Result<GroupId> {
        self.groups
            .get(name)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("group {name} has not been created yet")))
    }

    fn continue_chain(&mut self, peer: PeerId, mut rest: VecDeque<String>) {
        let Some(next) = rest.pop_front() else { return };
        match self.join_group(peer, &next) {
            Ok(op) => {
                self.pending.insert(op, Pending::JoinChain { peer, rest });
            }
            Err(_) => self.count("join", false),
        }
    }

    /// Joins `name`, creating it first when `peer` is its declared creator.
    fn join_group(&mut self, peer: PeerId, name: &str) -> Result<OpId> {
        if name == ROOT_GROUP_NAME {
            return self.sim.join_root(peer);
        }
        let decl = self.decls[name];
        let parent = self.group(&decl.parent)?;
        if self.peer(&decl.creator) == peer && !self.groups.contains_key(name) {
            let (id, op) = self.sim.create_group(peer, parent, name, decl.policy)?;
            self.groups.insert(name.to_string(), id);
            return Ok(op);
        }
        let id = self.group(name)?;
        let cred = match decl.policy {
            GroupPolicy::Secured => Some(self.sim.issue_credential(self.peer(&decl.creator), id, peer)?),
            GroupPolicy::Open => None,
        };
        self.sim.join_group(peer, id, cred)
    }

    fn exec(&mut self, ev: &TimedAction) -> Result<()> {
        let name = ev.action.name();
        self.sim.metrics_mut().incr(&format!("scenario.actions.{name}"), 1);
        match &ev.action {
            Action::Join { peer, group } => {
                let p = self.peer(peer);
                let chain: VecDeque<String> = match group {
                    Some(g) => VecDeque::from([g.clone()]),
                    None => {
                        let decl = self.sc.peers.iter().find(|d| &d.label == peer).expect("declared");
                        std::iter::once(ROOT_GROUP_NAME.to_string()).chain(decl.groups.iter().cloned()).collect()
                    }
                };
                let mut chain = chain;
                let first = chain.pop_front().expect("non-empty");
                let op = self.join_group(p, &first)?;
                self.pending.insert(op, Pending::JoinChain { peer: p, rest: chain });
            }
            Action::Crash { peer } => self.sim.crash(self.peer(peer))?,
            Action::Publish { peer, group, path, name: res, body } => {
                let g = self.group(group)?;
                let op = self.sim.serve(self.peer(peer), g, path, res, static_handler(body.clone().into_bytes()))?;
                self.pending.insert(op, Pending::Plain(name));
            }
            Action::Discover { peer, group, name: res } => {
                let g = self.group(group)?;
                let op = self.sim.discover(self.peer(peer), g, res)?;
                self.pending.insert(op, Pending::Plain(name));
            }
            Action::Request { peer, target, group, method, path, confirmable } => {
                let g = self.group(group)?;
                let t = if *confirmable { MsgType::Con } else { MsgType::Non };
                let op = self.sim.coap_request(self.peer(peer), g, self.peer(target), t, *method, path, Vec::new())?;
                self.pending.insert(op, Pending::Plain(name));
            }
            Action::Propagate { peer, group, data } => {
                let g = self.group(group)?;
                self.sim.propagate(self.peer(peer), g, data.as_bytes())?;
            }
            Action::RotateKey { peer, group, evict } => {
                let g = self.group(group)?;
                let evict: Vec<PeerId> = evict.iter().map(|e| self.peer(e)).collect();
                self.sim.rotate_key(self.peer(peer), g, &evict)?;
            }
            Action::Lookup { peer, group, count } => {
                let g = self.group(group)?;
                let p = self.peer(peer);
                for _ in 0..*count {
                    let key = random_id(&mut self.rng, self.sc.bits);
                    let op = self.sim.lookup(p, g, key)?;
                    self.pending.insert(op, Pending::Lookup { group: g, key });
                }
            }
        }
        Ok(())
    }
}

/// Uniform id of `bits` width.
pub fn random_id(rng: &mut impl Rng, bits: u8) -> NodeId {
    let mut bytes = vec![0u8; bits.div_ceil(8) as usize];
    rng.fill(bytes.as_mut_slice());
    NodeId::from_be_bytes(&bytes).expect("byte-aligned width")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
name small
seed 3
segment lan mtu=1500 bw=12500000 lat=1 loss=0
group lab policy=secured creator=a
peer a at lan groups=lab
peer b at lan groups=lab
peer c at lan
at 0 join a
at 500 join b
at 1000 join c
at 8000 publish a lab /temp temp 21.5
at 12000 discover b lab temp
at 12000 request b a lab GET /temp
at 12000 lookup c root 20
end 40000
";

    #[test]
    fn parses_and_runs() {
        let sc = Scenario::parse(SMALL).unwrap();
        assert_eq!(sc.peers.len(), 3);
        assert_eq!(sc.timeline.len(), 7);
        let r = sc.run(None).unwrap();
        assert_eq!(r.get("scenario.ok.join"), Some(5.0));
        assert_eq!(r.get("scenario.ok.discover"), Some(1.0));
        assert_eq!(r.get("scenario.coap.2.05"), Some(1.0));
        assert_eq!(r.get("lookup.correct"), Some(20.0));
        assert_eq!(sc.run(None).unwrap(), r);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "segment lan mtu=1500 bw=100 lat=1 loss=0\npeer a at wan\n";
        assert!(matches!(Scenario::parse(bad), Err(Error::Parse { line: 2, .. })));
        let back = "segment lan mtu=1500 bw=100 lat=1 loss=0\npeer a at lan\nat 5 join a\nat 4 crash a\n";
        assert!(matches!(Scenario::parse(back), Err(Error::Parse { line: 4, .. })));
        let early = "segment lan mtu=1500 bw=100 lat=1 loss=0\npeer a at lan\nat 5 discover a root x\n";
        let sc = Scenario::parse(early).unwrap();
        assert!(matches!(sc.run(None), Err(Error::Scenario { line: 3, .. })));
    }
}
