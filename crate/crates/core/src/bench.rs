//! Canned acceptance suite. Every criterion builds its own simulation from
//! the suite seed and checks the outcome against an independent oracle.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::advertisement::{decode_advertisement, encode_advertisement, render_plain, AdvKind, Advertisement, TagTable};
use crate::chord::DhtRecord;
use crate::coap::{static_handler, Code, MsgType};
use crate::envelope::{decode_envelope, encode_envelope, envelope_overhead, MessageEnvelope, PayloadKind};
use crate::error::{Error, Result};
use crate::group::{EncryptedPayload, GroupPolicy};
use crate::id::{GroupId, PeerId};
use crate::sim::metrics::fmt_f;
use crate::sim::scenario::random_id;
use crate::sim::{OpResult, Sim, TraceRole};
use crate::transport::{fragment, EndpointAddress, LinkProfile, Reassembler, TransportKind, REASSEMBLY_TIMEOUT_MS};

pub const DEFAULT_SEED: u64 = 2024;
pub const SUITES: &[&str] = &["acceptance", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9", "c10", "c11", "c12"];
const M: u8 = 16;
const ROUND_MS: u64 = 500;
/// 4·m stabilization rounds.
const ROUND_BUDGET: u64 = 4 * M as u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Measured values, rendered as report lines.
    pub values: Vec<(String, String)>,
}

impl CriterionResult {
    fn new(id: u8, name: &'static str) -> Self {
        CriterionResult { id, name, passed: false, detail: String::new(), values: Vec::new() }
    }

    fn value(&mut self, k: &str, v: impl ToString) {
        self.values.push((k.to_string(), v.to_string()));
    }

    fn fail(mut self, e: Error) -> Self {
        self.passed = false;
        self.detail = format!("error: {e}");
        self
    }

    /// `criterion <id> PASS|FAIL <name>: <detail>`
    pub fn line(&self) -> String {
        format!("criterion {:>2} {} {}: {}", self.id, if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceReport {
    pub seed: u64,
    pub results: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// Human lines followed by `metric=` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&r.line());
            out.push('\n');
        }
        for r in &self.results {
            let _ = writeln!(out, "metric=acceptance.c{}.pass value={} scenario=acceptance", r.id, r.passed as u8);
            for (k, v) in &r.values {
                let _ = writeln!(out, "metric=acceptance.c{}.{k} value={v} scenario=acceptance", r.id);
            }
        }
        out
    }
}

/// Runs one criterion by id (1..=12).
pub fn criterion(id: u8, seed: u64) -> CriterionResult {
    match id {
        1 => c1_c2(seed).0,
        2 => c1_c2(seed).1,
        3 => c3_churn(seed),
        4 => c4_convergence(seed),
        5 => c5_routing(seed),
        6 => c6_fragmentation(seed),
        7 => c7_backoff(seed),
        8 => c8_secure_group(seed),
        9 => c9_multicast(seed),
        10 => c10_discovery(seed),
        11 => c11_codec(seed),
        12 => c12_determinism(seed),
        _ => {
            let mut r = CriterionResult::new(id, "unknown");
            r.detail = "no such criterion".into();
            r
        }
    }
}

fn first_eleven(seed: u64) -> Vec<CriterionResult> {
    let (c1, c2) = c1_c2(seed);
    vec![
        c1,
        c2,
        c3_churn(seed),
        c4_convergence(seed),
        c5_routing(seed),
        c6_fragmentation(seed),
        c7_backoff(seed),
        c8_secure_group(seed),
        c9_multicast(seed),
        c10_discovery(seed),
        c11_codec(seed),
    ]
}

/// The whole suite; criterion 12 reruns 1..=11 and compares the reports.
pub fn acceptance(seed: u64) -> AcceptanceReport {
    let first = first_eleven(seed);
    let second = first_eleven(seed);
    let a = AcceptanceReport { seed, results: first.clone() }.render();
    let b = AcceptanceReport { seed, results: second }.render();
    let mut results = first;
    results.push(determinism_result(&a, &b));
    AcceptanceReport { seed, results }
}

pub fn run_suite(suite: &str, seed: u64) -> Result<AcceptanceReport> {
    if suite == "acceptance" {
        return Ok(acceptance(seed));
    }
    let id: u8 = suite
        .strip_prefix('c')
        .and_then(|n| n.parse().ok())
        .filter(|n| (1..=12).contains(n))
        .ok_or_else(|| Error::Config(format!("unknown suite {suite}; expected one of {}", SUITES.join(", "))))?;
    Ok(AcceptanceReport { seed, results: vec![criterion(id, seed)] })
}

// ---- oracle ----

/// Sorted-ring reference computed with plain integers.
struct RingOracle {
    ids: Vec<u128>,
    m: u8,
}

impl RingOracle {
    fn new(members: &[PeerId], m: u8) -> Self {
        let mut ids: Vec<u128> = members.iter().map(|p| p.0.as_u128().expect("narrow ring")).collect();
        ids.sort_unstable();
        RingOracle { ids, m }
    }

    fn owner(&self, key: u128) -> u128 {
        *self.ids.iter().find(|&&n| n >= key).unwrap_or(&self.ids[0])
    }

    fn after(&self, n: u128, k: usize) -> u128 {
        let i = self.ids.iter().position(|&x| x == n).expect("member");
        self.ids[(i + k) % self.ids.len()]
    }

    fn pred(&self, n: u128) -> u128 {
        self.after(n, self.ids.len() - 1)
    }

    fn finger(&self, n: u128, i: u8) -> u128 {
        self.owner((n + (1u128 << i)) % (1u128 << self.m))
    }
}

fn v(p: &PeerId) -> u128 {
    p.0.as_u128().expect("narrow ring")
}

/// Number of state fields (pred, successor list, each finger) that differ
/// from the oracle; with `succ_only` just the first successor.
fn mismatches(sim: &Sim, group: GroupId, succ_only: bool) -> usize {
    let members = sim.members(group);
    if members.is_empty() {
        return 0;
    }
    let o = RingOracle::new(&members, sim.m());
    let mut bad = 0;
    for p in &members {
        let c = sim.chord(*p, group).expect("member");
        let n = v(p);
        let succ: Vec<u128> = c.successors().iter().map(|s| v(&s.id)).collect();
        if succ_only {
            bad += usize::from(succ.first() != Some(&o.after(n, 1)));
            continue;
        }
        bad += usize::from(c.predecessor().map(|x| v(&x.id)) != Some(o.pred(n)));
        let r = c.config().r.min(o.ids.len() - 1);
        let want: Vec<u128> = (1..=r).map(|k| o.after(n, k)).collect();
        bad += usize::from(succ.get(..r) != Some(&want[..]));
        for i in 0..sim.m() {
            bad += usize::from(c.fingers().get(i as usize).map(|x| v(&x.id)) != Some(o.finger(n, i)));
        }
    }
    bad
}

/// Runs whole rounds until the ring matches the oracle; returns the number
/// of rounds used, or `None` past `budget`.
fn stabilize(sim: &mut Sim, group: GroupId, budget: u64, succ_only: bool) -> Option<u64> {
    for round in 0..=budget {
        if mismatches(sim, group, succ_only) == 0 {
            return Some(round);
        }
        sim.run_for(ROUND_MS);
    }
    None
}

fn lan(seed: u64) -> Result<Sim> {
    let mut sim = Sim::new(seed, M)?;
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband())?;
    Ok(sim)
}

/// Adds `labels` to "lan" and joins them one per round in the given order.
fn join_all(sim: &mut Sim, labels: &[String]) -> Result<Vec<PeerId>> {
    let mut ids = Vec::new();
    for l in labels {
        let id = sim.add_peer(l, &["lan"])?;
        let op = sim.join_root(id)?;
        match sim.wait(op, 20_000) {
            Some(Ok(_)) => {}
            Some(Err(e)) => return Err(e),
            None => return Err(Error::Join(format!("{l} did not finish joining"))),
        }
        sim.run_for(ROUND_MS);
        ids.push(id);
    }
    Ok(ids)
}

/// `n` labels whose hashed ids are distinct at `M` bits.
fn labels(prefix: &str, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    (0..)
        .map(|i| format!("{prefix}{i}"))
        .filter(|l| PeerId::from_name(l.as_bytes(), M).is_ok_and(|id| seen.insert(id)))
        .take(n)
        .collect()
}

// ---- criteria ----

fn c1_c2(seed: u64) -> (CriterionResult, CriterionResult) {
    let mut c1 = CriterionResult::new(1, "chord oracle equivalence");
    let mut c2 = CriterionResult::new(2, "hop bound");
    let mut all_ok = true;
    let mut parts = Vec::new();
    for n in [8usize, 32, 128] {
        match lookup_trial(seed ^ n as u64, n) {
            Ok((correct, total, hops, rounds)) => {
                c1.value(&format!("n{n}.correct"), correct);
                c1.value(&format!("n{n}.lookups"), total);
                c1.value(&format!("n{n}.stabilize_rounds"), rounds);
                parts.push(format!("N={n} {correct}/{total}"));
                all_ok &= correct == total && total == 1000;
                if n == 128 {
                    let mean = hops.iter().sum::<u64>() as f64 / hops.len().max(1) as f64;
                    let bound = (n as f64).log2().ceil();
                    c2.value("n128.mean_hops", fmt_f(mean));
                    c2.value("n128.max_hops", hops.iter().max().copied().unwrap_or(0));
                    c2.passed = !hops.is_empty() && mean <= bound;
                    c2.detail = format!("N=128 mean hops {} (bound {bound})", fmt_f(mean));
                }
            }
            Err(e) => {
                all_ok = false;
                parts.push(format!("N={n} error: {e}"));
                if n == 128 {
                    c2 = c2.fail(e);
                }
            }
        }
    }
    c1.passed = all_ok;
    c1.detail = parts.join(", ");
    (c1, c2)
}

/// Builds an N-ring, then checks 1000 concurrent lookups against the oracle.
fn lookup_trial(seed: u64, n: usize) -> Result<(usize, usize, Vec<u64>, u64)> {
    let mut sim = lan(seed)?;
    let ids = join_all(&mut sim, &labels("n", n))?;
    let root = sim.root();
    let rounds = stabilize(&mut sim, root, 4 * ROUND_BUDGET, false)
        .ok_or_else(|| Error::Precondition("ring did not stabilize".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = RingOracle::new(&ids, M);
    let mut ops = Vec::new();
    for _ in 0..1000 {
        let key = random_id(&mut rng, M);
        let from = ids[rng.gen_range(0..ids.len())];
        ops.push((sim.lookup(from, root, key)?, key));
    }
    sim.run_for(10_000);
    let (mut correct, mut hops) = (0, Vec::new());
    for (op, key) in ops {
        if let Some(Ok(OpResult::Lookup(r))) = sim.take_result(op) {
            hops.push(r.hops as u64);
            if v(&r.owner.id) == oracle.owner(key.as_u128().unwrap()) {
                correct += 1;
            }
        }
    }
    Ok((correct, 1000, hops, rounds))
}

fn c3_churn(seed: u64) -> CriterionResult {
    let r = CriterionResult::new(3, "churn survival");
    match churn_trial(seed) {
        Ok(r) => r,
        Err(e) => r.fail(e),
    }
}

fn churn_trial(seed: u64) -> Result<CriterionResult> {
    let mut r = CriterionResult::new(3, "churn survival");
    let mut sim = lan(seed ^ 3)?;
    let ids = join_all(&mut sim, &labels("c", 32))?;
    let root = sim.root();
    stabilize(&mut sim, root, 4 * ROUND_BUDGET, false).ok_or_else(|| Error::Precondition("ring did not stabilize".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
    let mut records = Vec::new();
    let mut ops = Vec::new();
    for i in 0..200 {
        let from = ids[rng.gen_range(0..ids.len())];
        let rec = DhtRecord {
            key: random_id(&mut rng, M),
            payload: format!("record-{i}").into_bytes(),
            publisher: from,
            expires_at: u64::MAX,
        };
        ops.push(sim.dht_put(from, root, rec.clone())?);
        records.push(rec);
    }
    sim.run_for(10_000);
    let stored = ops.iter().filter(|op| matches!(sim.take_result(**op), Some(Ok(_)))).count();
    // three ring-consecutive nodes
    let mut sorted = ids.clone();
    sorted.sort();
    let start = rng.gen_range(0..sorted.len());
    let victims: Vec<PeerId> = (0..3).map(|k| sorted[(start + k) % sorted.len()]).collect();
    for p in &victims {
        sim.crash(*p)?;
    }
    let rounds = stabilize(&mut sim, root, ROUND_BUDGET, false);
    let live: Vec<PeerId> = sim.members(root);
    let mut found = 0;
    let mut ops = Vec::new();
    for rec in &records {
        let from = live[rng.gen_range(0..live.len())];
        ops.push((sim.dht_get(from, root, rec.key)?, rec));
    }
    sim.run_for(15_000);
    for (op, rec) in ops {
        if let Some(Ok(OpResult::Records(g))) = sim.take_result(op) {
            if g.records.iter().any(|x| x.payload == rec.payload && x.publisher == rec.publisher) {
                found += 1;
            }
        }
    }
    r.value("stored", stored);
    r.value("retrievable", found);
    r.value("stabilize_rounds", rounds.map(|x| x as i64).unwrap_or(-1));
    r.passed = stored == 200 && found == 200 && rounds.is_some();
    r.detail = format!(
        "{found}/200 records retrievable after crashing 3 consecutive nodes; ring restabilized in {}",
        rounds.map(|x| format!("{x} rounds")).unwrap_or_else(|| format!("more than {ROUND_BUDGET} rounds"))
    );
    Ok(r)
}

fn c4_convergence(seed: u64) -> CriterionResult {
    let mut r = CriterionResult::new(4, "convergence");
    let mut worst = 0;
    let mut ok = 0;
    let mut errors = Vec::new();
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x400 + trial));
        let mut order = labels("j", 32);
        order.shuffle(&mut rng);
        let res = lan(seed ^ (0x400 + trial)).and_then(|mut sim| {
            join_all(&mut sim, &order)?;
            let root = sim.root();
            Ok(stabilize(&mut sim, root, ROUND_BUDGET, false))
        });
        match res {
            Ok(Some(rounds)) => {
                ok += 1;
                worst = worst.max(rounds);
            }
            Ok(None) => errors.push(format!("trial {trial} exceeded {ROUND_BUDGET} rounds")),
            Err(e) => errors.push(format!("trial {trial}: {e}")),
        }
    }
    r.value("trials_converged", ok);
    r.value("max_rounds", worst);
    r.passed = ok == 20;
    r.detail = if errors.is_empty() {
        format!("20/20 join orders matched the oracle; worst case {worst} rounds after the last join")
    } else {
        format!("{ok}/20 converged; {}", errors.join("; "))
    };
    r
}

fn c5_routing(seed: u64) -> CriterionResult {
    let r = CriterionResult::new(5, "transparent routing");
    routing_trial(seed).unwrap_or_else(|e| r.fail(e))
}

fn routing_trial(seed: u64) -> Result<CriterionResult> {
    let mut r = CriterionResult::new(5, "transparent routing");
    let mut sim = Sim::new(seed ^ 5, M)?;
    sim.add_segment("west", TransportKind::Mem, LinkProfile::broadband())?;
    sim.add_segment("radio", TransportKind::NarrowSim, LinkProfile::lowpan())?;
    sim.add_segment("east", TransportKind::Mem, LinkProfile::broadband())?;
    let client = sim.add_peer("client", &["west"])?;
    let b1 = sim.add_peer("bridge-w", &["west", "radio"])?;
    let b2 = sim.add_peer("bridge-e", &["radio", "east"])?;
    let server = sim.add_peer("server", &["east"])?;
    for p in [b1, client, b2, server] {
        sim.run_for(2_500);
        let op = sim.join_root(p)?;
        sim.run_op(op, 60_000)?;
    }
    let root = sim.root();
    sim.run_for(20_000);
    let body = b"{\"lux\":312,\"unit\":\"lx\"}".to_vec();
    let op = sim.serve(server, root, "/light", "light", static_handler(body.clone()))?;
    sim.run_op(op, 60_000)?;
    sim.set_trace_payloads(true);
    let op = sim.coap_request(client, root, server, MsgType::Con, Code::GET, "/light", Vec::new())?;
    let res = sim.run_op(op, 120_000)?;
    let OpResult::Coap { response, latency_ms, .. } = res else {
        return Err(Error::Precondition("unexpected result".into()));
    };
    let want: [u8; 32] = Sha256::digest(&body).into();
    let got: [u8; 32] = Sha256::digest(&response.payload).into();
    // both directions share the token as correlation id
    let corr = u64::from_be_bytes(response.token.clone().try_into().unwrap_or([0; 8]));
    let traces: Vec<_> = sim.log().traces.iter().filter(|t| t.correlation_id == corr).collect();
    let mut per_direction: BTreeMap<PeerId, (Vec<PeerId>, BTreeSet<[u8; 32]>)> = BTreeMap::new();
    for t in &traces {
        let e = per_direction.entry(t.src).or_default();
        if t.role == TraceRole::Relay {
            e.0.push(t.at);
        }
        e.1.insert(t.digest);
    }
    let forward = per_direction.get(&client).cloned().unwrap_or_default();
    let back = per_direction.get(&server).cloned().unwrap_or_default();
    let relays_ok = forward.0 == vec![b1, b2] && back.0 == vec![b2, b1];
    let verbatim = forward.1.len() == 1 && back.1.len() == 1;
    let bytes: Vec<u64> = ["west", "radio", "east"].iter().map(|s| sim.segment(s).map_or(0, |s| s.bytes)).collect();
    r.value("latency_ms", latency_ms);
    r.value("relays", forward.0.len() + back.0.len());
    for (s, b) in ["west", "radio", "east"].iter().zip(&bytes) {
        r.value(&format!("segment.{s}.bytes"), b);
    }
    r.passed = response.code == Code::CONTENT && got == want && relays_ok && verbatim && bytes.iter().all(|b| *b > 0);
    r.detail = format!(
        "{} over 2 bridges in {latency_ms} ms; payload hash {}; relay hashes {}",
        response.code,
        if got == want { "matches" } else { "differs" },
        if relays_ok && verbatim { "identical at every hop" } else { "inconsistent" }
    );
    Ok(r)
}

fn c6_fragmentation(seed: u64) -> CriterionResult {
    let mut r = CriterionResult::new(6, "fragmentation");
    let res = (|| -> Result<(usize, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let src = PeerId::from_name(b"frag-src", M)?;
        let dst = PeerId::from_name(b"frag-dst", M)?;
        let group = crate::id::root_group(M)?;
        let mut payload = vec![0u8; 300 - envelope_overhead(2)];
        rng.fill(payload.as_mut_slice());
        let env = MessageEnvelope::new(PayloadKind::PIPE_DATA, src, dst.0, group, payload);
        let bytes = encode_envelope(&env)?;
        let frags = fragment(7, &bytes, 64)?;
        let mut ok = 0;
        for _ in 0..50 {
            let mut order = frags.clone();
            order.shuffle(&mut rng);
            let mut re = Reassembler::new(REASSEMBLY_TIMEOUT_MS);
            let mut out = None;
            for (t, f) in order.into_iter().enumerate() {
                if let Some(b) = re.insert(src, f, t as u64)? {
                    out = Some(b);
                }
            }
            if out.as_deref() == Some(&bytes[..]) && decode_envelope(out.as_deref().unwrap())? == env {
                ok += 1;
            }
        }
        Ok((bytes.len(), frags.len(), ok))
    })();
    match res {
        Ok((len, n, ok)) => {
            r.value("envelope_bytes", len);
            r.value("fragments", n);
            r.value("permutations_ok", ok);
            r.passed = len == 300 && n == 6 && ok == 50;
            r.detail = format!("{len}-byte envelope over MTU 64 -> {n} fragments; {ok}/50 permutations reassembled");
            r
        }
        Err(e) => r.fail(e),
    }
}

fn c7_backoff(seed: u64) -> CriterionResult {
    let r = CriterionResult::new(7, "backoff exactness");
    backoff_trial(seed).unwrap_or_else(|e| r.fail(e))
}

/// Client transmission times of COAP envelopes, from the segment tap.
fn coap_tx_times(sim: &Sim, client: PeerId, after: usize) -> Vec<u64> {
    sim.captures("lan")[after..]
        .iter()
        .filter(|c| c.from == client)
        .filter(|c| decode_envelope(&c.envelope).is_ok_and(|e| e.payload_kind == PayloadKind::COAP))
        .map(|c| c.time)
        .collect()
}

fn backoff_trial(seed: u64) -> Result<CriterionResult> {
    let mut r = CriterionResult::new(7, "backoff exactness");
    let mut sim = lan(seed ^ 7)?;
    let ids = join_all(&mut sim, &labels("b", 2))?;
    let (client, server) = (ids[0], ids[1]);
    let root = sim.root();
    sim.run_for(5_000);
    let op = sim.serve(server, root, "/temp", "temp", static_handler("21.5"))?;
    sim.run_op(op, 20_000)?;
    sim.tap("lan")?;

    // drop the first two transmissions
    let dropped = Rc::new(Cell::new(0u32));
    let d = dropped.clone();
    sim.add_drop_rule(Box::new(move |tx| {
        if tx.from == client && tx.env.payload_kind == PayloadKind::COAP && d.get() < 2 {
            d.set(d.get() + 1);
            return true;
        }
        false
    }));
    let mark = sim.captures("lan").len();
    let t0 = sim.now();
    let op = sim.coap_request(client, root, server, MsgType::Con, Code::GET, "/temp", Vec::new())?;
    let res = sim.wait(op, 100_000);
    let times: Vec<u64> = coap_tx_times(&sim, client, mark).iter().map(|t| t - t0).collect();
    let ok_a = matches!(&res, Some(Ok(OpResult::Coap { response, .. })) if response.payload == b"21.5")
        && times == [0, 2_000, 6_000];
    r.value("partial.tx_offsets_ms", format!("{times:?}").replace(' ', ""));

    // drop everything
    sim.clear_drop_rules();
    sim.add_drop_rule(Box::new(move |tx| tx.from == client && tx.env.payload_kind == PayloadKind::COAP));
    sim.run_for(1_000);
    let mark = sim.captures("lan").len();
    let t1 = sim.now();
    let op = sim.coap_request(client, root, server, MsgType::Con, Code::GET, "/temp", Vec::new())?;
    let res_b = sim.wait(op, 100_000);
    let timed_out_at = sim.now() - t1;
    let times_b: Vec<u64> = coap_tx_times(&sim, client, mark).iter().map(|t| t - t1).collect();
    let ok_b = matches!(res_b, Some(Err(Error::Timeout)))
        && times_b == [0, 2_000, 6_000, 14_000, 30_000]
        && timed_out_at == 62_000;
    r.value("all_dropped.tx_offsets_ms", format!("{times_b:?}").replace(' ', ""));
    r.value("all_dropped.timeout_ms", timed_out_at);
    r.passed = ok_a && ok_b;
    r.detail = format!(
        "two drops: transmissions at {times:?} ms then 2.05; five drops: transmissions at {times_b:?} ms, timeout at +{timed_out_at} ms"
    );
    Ok(r)
}

fn c8_secure_group(seed: u64) -> CriterionResult {
    let r = CriterionResult::new(8, "secure group");
    secure_trial(seed).unwrap_or_else(|e| r.fail(e))
}

fn secure_trial(seed: u64) -> Result<CriterionResult> {
    let mut r = CriterionResult::new(8, "secure group");
    let mut sim = lan(seed ^ 8)?;
    let ids = join_all(&mut sim, &labels("s", 7))?;
    let root = sim.root();
    let eve = ids[6];
    let (creator, members) = (ids[0], ids[..5].to_vec());
    let (g, op) = sim.create_group(creator, root, "vault", GroupPolicy::Secured)?;
    sim.run_op(op, 20_000)?;
    for &p in &members[1..] {
        let cred = sim.issue_credential(creator, g, p)?;
        let op = sim.join_group(p, g, Some(cred))?;
        sim.run_op(op, 30_000)?;
    }
    // eavesdropper without a credential is turned away
    let op = sim.join_group(eve, g, None)?;
    let eve_rejected = matches!(sim.wait(op, 30_000), Some(Err(Error::Unauthorized(_))));
    stabilize(&mut sim, g, ROUND_BUDGET, false).ok_or_else(|| Error::Precondition("group ring did not stabilize".into()))?;
    let op = sim.serve(members[1], g, "/vault", "vault", Rc::new(|req: &crate::coap::CoapMessage| (Code::CHANGED, req.payload.clone())).into_send())?;
    sim.run_op(op, 20_000)?;
    sim.tap("lan")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x88);
    let mut coap_ok = 0;
    let mut coap_sent = 0;
    let mut expected: Vec<(PeerId, Vec<u8>)> = Vec::new();
    for i in 0..1000 {
        let from = members[rng.gen_range(0..members.len())];
        let secret = format!("secret-{i:04}").into_bytes();
        if i % 10 == 0 && from != members[1] {
            coap_sent += 1;
            let op = sim.coap_request(from, g, members[1], MsgType::Con, Code::PUT, "/vault", secret.clone())?;
            if let Some(Ok(OpResult::Coap { response, .. })) = sim.wait(op, 60_000) {
                coap_ok += usize::from(response.payload == secret);
            }
        } else {
            sim.propagate(from, g, &secret)?;
            expected.extend(members.iter().filter(|m| **m != from).map(|m| (*m, secret.clone())));
            sim.run_for(50);
        }
    }
    sim.run_for(5_000);
    let received: BTreeSet<(PeerId, Vec<u8>)> = sim.log().pipe_received.iter().cloned().collect();
    let member_hits = expected.iter().filter(|e| received.contains(*e)).count();
    let leaked = sim.captures("lan").iter().filter(|c| contains(&c.envelope, b"secret-")).count();
    let eve_decrypted = sim.log().decrypted_by.get(&g).is_some_and(|s| s.contains(&eve));
    let eve_received = received.iter().any(|(p, _)| *p == eve);
    let eve_has_key = sim.key_ring(eve, g).is_some_and(|k| k.current().is_some());

    // evict one member and keep talking
    let evicted = members[4];
    let new_key = sim.rotate_key(creator, g, &[evicted])?;
    sim.run_for(2_000);
    let remaining: Vec<PeerId> = members[..4].to_vec();
    let mut post: Vec<(PeerId, Vec<u8>)> = Vec::new();
    for i in 0..50 {
        let from = remaining[i % remaining.len()];
        let secret = format!("after-{i:02}").into_bytes();
        sim.propagate(from, g, &secret)?;
        post.extend(remaining.iter().filter(|m| **m != from).map(|m| (*m, secret.clone())));
        sim.run_for(50);
    }
    sim.run_for(5_000);
    let received: BTreeSet<(PeerId, Vec<u8>)> = sim.log().pipe_received.iter().cloned().collect();
    let evicted_reads = received.iter().filter(|(p, d)| *p == evicted && d.starts_with(b"after-")).count();
    let post_hits = post.iter().filter(|e| received.contains(*e)).count();
    let evicted_key = sim.key_ring(evicted, g).and_then(|k| k.current_id());
    // replay every post-rotation ciphertext against the evicted member's keys
    let now = sim.now();
    let mut evicted_ring = sim.key_ring(evicted, g).cloned();
    let mut rotated_ciphertexts = 0;
    let mut evicted_decrypts = 0;
    for c in sim.captures("lan") {
        let Ok(env) = decode_envelope(&c.envelope) else { continue };
        let Ok(ep) = EncryptedPayload::from_bytes(&env.payload) else { continue };
        if !env.is_encrypted() || env.group != g || ep.key_id != new_key {
            continue;
        }
        rotated_ciphertexts += 1;
        if let Some(ring) = &mut evicted_ring {
            evicted_decrypts += usize::from(ring.decrypt(&ep, now).is_ok());
        }
    }

    r.value("messages", 1000);
    r.value("member_deliveries", member_hits);
    r.value("member_deliveries_expected", expected.len());
    r.value("coap_roundtrips_ok", coap_ok);
    r.value("plaintext_leaks", leaked);
    r.value("eavesdropper_decrypts", eve_decrypted as u8);
    r.value("evicted_reads", evicted_reads);
    r.value("rotated_ciphertexts", rotated_ciphertexts);
    r.value("evicted_decrypts", evicted_decrypts);
    r.value("post_rotation_deliveries", post_hits);
    r.passed = eve_rejected
        && leaked == 0
        && !eve_decrypted
        && !eve_received
        && !eve_has_key
        && member_hits == expected.len()
        && coap_ok == coap_sent
        && evicted_reads == 0
        && rotated_ciphertexts > 0
        && evicted_decrypts == 0
        && evicted_key != Some(new_key)
        && post_hits == post.len();
    r.detail = format!(
        "members decrypted {member_hits}/{} propagates and {coap_ok}/{coap_sent} requests; plaintext on the wire {leaked} times; eavesdropper decrypted {}; evicted member read {evicted_reads} of 50 post-rotation messages and decrypted {evicted_decrypts}/{rotated_ciphertexts} replayed ciphertexts",
        expected.len(),
        if eve_decrypted || eve_received { "something" } else { "nothing" }
    );
    Ok(r)
}

trait IntoSendHandler {
    fn into_send(self) -> crate::coap::Handler;
}

impl<F> IntoSendHandler for Rc<F>
where
    F: Fn(&crate::coap::CoapMessage) -> (Code, Vec<u8>) + Send + Sync + Clone + 'static,
{
    fn into_send(self) -> crate::coap::Handler {
        let f = (*self).clone();
        std::sync::Arc::new(f)
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn c9_multicast(seed: u64) -> CriterionResult {
    let mut r = CriterionResult::new(9, "exactly-once multicast");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
    let mut ok = 0;
    let mut sizes = Vec::new();
    let mut failures = Vec::new();
    for trial in 0..100u64 {
        let size = rng.gen_range(2..=16usize);
        sizes.push(size);
        match multicast_trial(seed ^ (0x900 + trial), size, &mut rng) {
            Ok(None) => ok += 1,
            Ok(Some(why)) => failures.push(format!("trial {trial} (n={size}): {why}")),
            Err(e) => failures.push(format!("trial {trial} (n={size}): {e}")),
        }
    }
    r.value("groups_ok", ok);
    r.value("members_total", sizes.iter().sum::<usize>());
    r.passed = ok == 100;
    r.detail = if failures.is_empty() {
        format!("100/100 groups (sizes {}..={}) delivered exactly once with members-1 transmissions", sizes.iter().min().unwrap(), sizes.iter().max().unwrap())
    } else {
        format!("{ok}/100 ok; first failure: {}", failures[0])
    };
    r
}

fn multicast_trial(seed: u64, size: usize, rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let mut sim = lan(seed)?;
    let ids = join_all(&mut sim, &labels("m", size))?;
    let root = sim.root();
    let (g, op) = sim.create_group(ids[0], root, "team", GroupPolicy::Open)?;
    sim.run_op(op, 20_000)?;
    for &p in &ids[1..] {
        let op = sim.join_group(p, g, None)?;
        sim.run_op(op, 30_000)?;
        sim.run_for(ROUND_MS);
    }
    if stabilize(&mut sim, g, ROUND_BUDGET, true).is_none() {
        return Ok(Some("group ring did not stabilize".into()));
    }
    let from = ids[rng.gen_range(0..ids.len())];
    let corr = sim.propagate(from, g, b"hello group")?;
    sim.run_for(5_000);
    let rep = sim.propagate_report(from, corr);
    let got: BTreeSet<PeerId> = rep.delivered.iter().copied().collect();
    let want: BTreeSet<PeerId> = ids.iter().copied().collect();
    if rep.delivered.len() != size || got != want {
        return Ok(Some(format!("{} deliveries to {} distinct members", rep.delivered.len(), got.len())));
    }
    if rep.duplicates != 0 {
        return Ok(Some(format!("{} duplicates", rep.duplicates)));
    }
    if rep.transmissions != size as u64 - 1 {
        return Ok(Some(format!("{} transmissions", rep.transmissions)));
    }
    Ok(None)
}

fn c10_discovery(seed: u64) -> CriterionResult {
    let r = CriterionResult::new(10, "discovery scope and fault tolerance");
    discovery_trial(seed).unwrap_or_else(|e| r.fail(e))
}

fn discovery_trial(seed: u64) -> Result<CriterionResult> {
    let mut r = CriterionResult::new(10, "discovery scope and fault tolerance");
    let mut sim = lan(seed ^ 10)?;
    let ids = join_all(&mut sim, &labels("d", 16))?;
    let root = sim.root();
    let (a_members, b_members) = (ids[..8].to_vec(), ids[8..].to_vec());
    let (ga, op) = sim.create_group(a_members[0], root, "alpha", GroupPolicy::Open)?;
    sim.run_op(op, 20_000)?;
    let (gb, op) = sim.create_group(b_members[0], root, "beta", GroupPolicy::Open)?;
    sim.run_op(op, 20_000)?;
    for (g, ms) in [(ga, &a_members), (gb, &b_members)] {
        for &p in &ms[1..] {
            let op = sim.join_group(p, g, None)?;
            sim.run_op(op, 30_000)?;
        }
    }
    stabilize(&mut sim, ga, ROUND_BUDGET, false);
    stabilize(&mut sim, gb, ROUND_BUDGET, false);
    let names: Vec<String> = (0..10).map(|i| format!("sensor-{i}")).collect();
    for (i, n) in names.iter().enumerate() {
        let op = sim.serve(a_members[i % 8], ga, &format!("/{n}"), n, static_handler("1"))?;
        sim.run_op(op, 20_000)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1010);
    let mut leaked = 0;
    let mut ops = Vec::new();
    for q in 0..500 {
        let from = b_members[rng.gen_range(0..b_members.len())];
        let name = &names[rng.gen_range(0..names.len())];
        // alternate between the sibling group and the shared parent
        let scope = if q % 2 == 0 { gb } else { root };
        if !sim.peer(from).is_some_and(|p| p.is_joined(&scope)) {
            continue;
        }
        ops.push(sim.discover(from, scope, name)?);
    }
    let issued = ops.len();
    sim.run_for(15_000);
    for op in ops {
        if let Some(Ok(OpResult::Discovered { ads, .. })) = sim.take_result(op) {
            leaked += usize::from(!ads.is_empty());
        }
    }
    // positive control inside alpha
    let mut visible = 0;
    for n in &names {
        let op = sim.discover(a_members[7], ga, n)?;
        if let Some(Ok(OpResult::Discovered { ads, .. })) = sim.wait(op, 20_000) {
            visible += usize::from(ads.len() == 1);
        }
    }

    // single-crash trials
    let mut survived = 0;
    let trials = 10;
    for t in 0..trials {
        survived += usize::from(crash_trial(seed ^ (0x1000 + t), t)?);
    }
    r.value("cross_group_queries", issued);
    r.value("cross_group_hits", leaked);
    r.value("in_group_hits", visible);
    r.value("crash_trials_ok", survived);
    r.passed = issued == 500 && leaked == 0 && visible == names.len() && survived == trials as usize;
    r.detail = format!(
        "{leaked}/{issued} cross-group queries found anything ({visible}/10 found in-group); resource discoverable after {survived}/{trials} single crashes"
    );
    Ok(r)
}

fn crash_trial(seed: u64, t: u64) -> Result<bool> {
    let mut sim = lan(seed)?;
    let ids = join_all(&mut sim, &labels(&format!("f{t}-"), 8))?;
    let root = sim.root();
    stabilize(&mut sim, root, ROUND_BUDGET, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let publisher = ids[rng.gen_range(0..ids.len())];
    let op = sim.serve(publisher, root, "/svc", "svc", static_handler("up"))?;
    sim.run_op(op, 20_000)?;
    sim.run_for(4 * ROUND_MS * 3);
    let victim = ids[rng.gen_range(0..ids.len())];
    sim.crash(victim)?;
    stabilize(&mut sim, root, ROUND_BUDGET, false);
    let live: Vec<PeerId> = sim.members(root);
    let from = live[rng.gen_range(0..live.len())];
    let op = sim.discover(from, root, "svc")?;
    Ok(matches!(sim.wait(op, 20_000), Some(Ok(OpResult::Discovered { ads, .. })) if ads.len() == 1))
}

fn c11_codec(seed: u64) -> CriterionResult {
    let mut r = CriterionResult::new(11, "codec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
    let mut round_trips = 0;
    let mut wk = 0;
    let mut smaller = 0;
    let mut ratios = Vec::new();
    for i in 0..500 {
        let a = random_advertisement(&mut rng, i % 2 == 0);
        let Ok(bytes) = encode_advertisement(&a) else { continue };
        if decode_advertisement(&bytes).as_ref() == Ok(&a) && encode_advertisement(&a).as_ref() == Ok(&bytes) {
            round_trips += 1;
        }
        if a.attributes.keys().all(|k| TagTable::is_well_known(k)) {
            wk += 1;
            let plain = render_plain(&a).len();
            ratios.push(bytes.len() as f64 / plain as f64);
            smaller += usize::from(bytes.len() < plain);
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let max = ratios.iter().copied().fold(0.0, f64::max);
    r.value("round_trips", round_trips);
    r.value("well_known_only", wk);
    r.value("smaller_than_plain", smaller);
    r.value("ratio.mean", fmt_f(mean));
    r.value("ratio.max", fmt_f(max));
    r.passed = round_trips == 500 && wk > 0 && smaller == wk;
    r.detail = format!(
        "{round_trips}/500 bit-exact round trips; {smaller}/{wk} well-known-only ads smaller than text (mean ratio {}, max {})",
        fmt_f(mean),
        fmt_f(max)
    );
    r
}

const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_./";

fn random_text(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| ALNUM[rng.gen_range(0..ALNUM.len())] as char).collect()
}

/// A random valid advertisement; `well_known_only` restricts attribute keys
/// to the tag table.
pub fn random_advertisement(rng: &mut ChaCha8Rng, well_known_only: bool) -> Advertisement {
    let kinds = [AdvKind::Peer, AdvKind::Group, AdvKind::Pipe, AdvKind::Resource];
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let bits = [8u8, 16, 32, 64, 128][rng.gen_range(0..5)];
    let subject = random_id(rng, bits);
    let group = GroupId(random_id(rng, bits));
    let mut a = Advertisement::new(kind, subject, group, random_text(rng, 1, 40))
        .with_expiration(rng.gen_range(0..u64::MAX / 2));
    for _ in 0..rng.gen_range(0..8) {
        let key = if well_known_only || rng.gen_bool(0.5) {
            TagTable::KEYS[rng.gen_range(7..TagTable::KEYS.len())].to_string()
        } else {
            format!("x-{}", random_text(rng, 1, 12))
        };
        a.attributes.insert(key, random_text(rng, 0, 24));
    }
    for _ in 0..rng.gen_range(0..4) {
        let kind = [TransportKind::Mem, TransportKind::NarrowSim, TransportKind::Tcp][rng.gen_range(0..3)];
        let address = match kind {
            TransportKind::Tcp => format!("10.0.{}.{}:{}", rng.gen_range(0..256), rng.gen_range(0..256), rng.gen_range(1..65535)),
            _ => format!("{}/{}", random_text(rng, 1, 8).replace('/', ""), random_text(rng, 1, 8)),
        };
        a.endpoints.push(EndpointAddress::new(kind, address));
    }
    a
}

fn c12_determinism(seed: u64) -> CriterionResult {
    let a = AcceptanceReport { seed, results: first_eleven(seed) }.render();
    let b = AcceptanceReport { seed, results: first_eleven(seed) }.render();
    determinism_result(&a, &b)
}

fn determinism_result(a: &str, b: &str) -> CriterionResult {
    let mut r = CriterionResult::new(12, "determinism");
    let da: [u8; 32] = Sha256::digest(a.as_bytes()).into();
    let db: [u8; 32] = Sha256::digest(b.as_bytes()).into();
    let hex = |d: &[u8; 32]| d[..8].iter().map(|b| format!("{b:02x}")).collect::<String>();
    r.value("report_bytes", a.len());
    r.value("digest", hex(&da));
    r.passed = a == b;
    r.detail = if r.passed {
        format!("two runs produced byte-identical reports ({} bytes, sha256 {}..)", a.len(), hex(&da))
    } else {
        format!("reports differ: {} vs {}", hex(&da), hex(&db))
    };
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::NodeId;

    #[test]
    fn oracle_matches_hand_computed_ring() {
        let m = 8;
        let ids: Vec<PeerId> = [10u128, 80, 200].iter().map(|v| PeerId(NodeId::new(*v, m).unwrap())).collect();
        let o = RingOracle::new(&ids, m);
        assert_eq!(o.owner(11), 80);
        assert_eq!(o.owner(201), 10);
        assert_eq!(o.owner(80), 80);
        assert_eq!(o.pred(10), 200);
        assert_eq!(o.finger(200, 7), 80); // 200 + 128 = 328 mod 256 = 72
    }

    #[test]
    fn fragmentation_and_codec_criteria_hold() {
        assert!(c6_fragmentation(1).passed, "{}", c6_fragmentation(1).detail);
        assert!(c11_codec(1).passed, "{}", c11_codec(1).detail);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("c13", 1).is_err());
        assert!(run_suite("nope", 1).is_err());
    }
}
