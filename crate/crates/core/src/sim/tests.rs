use super::*;
use crate::coap::static_handler;

fn ring(sim: &mut Sim, n: usize, seg: &str) -> Vec<PeerId> {
    let mut ids = Vec::new();
    for i in 0..n {
        let id = sim.add_peer(&format!("p{i}"), &[seg]).unwrap();
        let op = sim.join_root(id).unwrap();
        sim.run_op(op, 20_000).unwrap();
        sim.run_for(1_000);
        ids.push(id);
    }
    sim.run_for(20_000);
    ids
}

#[test]
fn small_ring_serves_and_discovers() {
    let mut sim = Sim::new(7, 16).unwrap();
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband()).unwrap();
    let ids = ring(&mut sim, 6, "lan");
    let root = sim.root();
    let op = sim.serve(ids[2], root, "/temp", "temp", static_handler("21.5")).unwrap();
    sim.run_op(op, 10_000).unwrap();
    let op = sim.discover(ids[5], root, "temp").unwrap();
    let OpResult::Discovered { ads, .. } = sim.run_op(op, 10_000).unwrap() else { panic!() };
    assert_eq!(ads.len(), 1);
    let op = sim.coap_request(ids[5], root, ids[2], MsgType::Con, Code::GET, "/temp", vec![]).unwrap();
    let OpResult::Coap { response, .. } = sim.run_op(op, 10_000).unwrap() else { panic!() };
    assert_eq!(response.code, Code::CONTENT);
    assert_eq!(response.payload, b"21.5");
}

fn chain(sim: &mut Sim) -> (PeerId, PeerId, PeerId, PeerId) {
    sim.add_segment("a", TransportKind::Mem, LinkProfile::broadband()).unwrap();
    sim.add_segment("n", TransportKind::NarrowSim, LinkProfile::lowpan()).unwrap();
    sim.add_segment("b", TransportKind::Mem, LinkProfile::broadband()).unwrap();
    let client = sim.add_peer("client", &["a"]).unwrap();
    let b1 = sim.add_peer("b1", &["a", "n"]).unwrap();
    let b2 = sim.add_peer("b2", &["n", "b"]).unwrap();
    let server = sim.add_peer("server", &["b"]).unwrap();
    for p in [b1, client, b2, server] {
        sim.run_for(2_500);
        let op = sim.join_root(p).unwrap();
        sim.run_op(op, 30_000).unwrap();
    }
    sim.run_for(30_000);
    (client, b1, b2, server)
}

#[test]
fn request_crosses_two_bridges_verbatim() {
    let mut sim = Sim::new(3, 16).unwrap();
    let (client, b1, b2, server) = chain(&mut sim);
    let root = sim.root();
    let op = sim.serve(server, root, "/lux", "lux", static_handler("300")).unwrap();
    sim.run_op(op, 30_000).unwrap();
    sim.set_trace_payloads(true);
    let op = sim.coap_request(client, root, server, MsgType::Con, Code::GET, "/lux", vec![]).unwrap();
    let OpResult::Coap { response, .. } = sim.run_op(op, 60_000).unwrap() else { panic!() };
    assert_eq!(response.payload, b"300");
    let corr = sim
        .log()
        .traces
        .iter()
        .find(|t| t.src == client && t.role == TraceRole::Source)
        .map(|t| t.correlation_id)
        .unwrap();
    let hops: Vec<&PayloadTrace> = sim.log().traces.iter().filter(|t| t.correlation_id == corr && t.src == client).collect();
    let relays: Vec<PeerId> = hops.iter().filter(|t| t.role == TraceRole::Relay).map(|t| t.at).collect();
    assert_eq!(relays, vec![b1, b2]);
    assert!(hops.iter().all(|t| t.digest == hops[0].digest));
}

#[test]
fn secured_group_admission_rotation_and_eviction() {
    let mut sim = Sim::new(11, 16).unwrap();
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband()).unwrap();
    let ids = ring(&mut sim, 5, "lan");
    let root = sim.root();
    let (g, op) = sim.create_group(ids[0], root, "lab", GroupPolicy::Secured).unwrap();
    sim.run_op(op, 20_000).unwrap();

    // no credential: rejected
    let op = sim.join_group(ids[4], g, None).unwrap();
    assert!(matches!(sim.run_op(op, 30_000), Err(Error::Unauthorized(_))));

    for &p in &ids[1..4] {
        let cred = sim.issue_credential(ids[0], g, p).unwrap();
        let op = sim.join_group(p, g, Some(cred)).unwrap();
        assert_eq!(sim.run_op(op, 30_000).unwrap(), OpResult::Joined);
    }
    sim.run_for(20_000);
    assert_eq!(sim.members(g).len(), 4);
    let op = sim.serve(ids[1], g, "/door", "door", static_handler("closed")).unwrap();
    sim.run_op(op, 20_000).unwrap();

    // outsider asks in plaintext: 4.01
    let op = sim.coap_request(ids[4], root, ids[1], MsgType::Con, Code::GET, "/door", vec![]).unwrap();
    let OpResult::Coap { response, .. } = sim.run_op(op, 60_000).unwrap() else { panic!() };
    assert_eq!(response.code, Code::NOT_FOUND);

    let op = sim.coap_request(ids[2], g, ids[1], MsgType::Con, Code::GET, "/door", vec![]).unwrap();
    let OpResult::Coap { response, .. } = sim.run_op(op, 60_000).unwrap() else { panic!() };
    assert_eq!(response.payload, b"closed");

    let new_id = sim.rotate_key(ids[0], g, &[ids[3]]).unwrap();
    sim.run_for(12_000);
    assert_eq!(sim.key_ring(ids[1], g).unwrap().current_id(), Some(new_id));
    assert_ne!(sim.key_ring(ids[3], g).unwrap().current_id(), Some(new_id));
    let op = sim.coap_request(ids[3], g, ids[1], MsgType::Con, Code::GET, "/door", vec![]).unwrap();
    assert!(matches!(sim.run_op(op, 70_000), Err(Error::Timeout)));
}

#[test]
fn propagate_reaches_each_member_once() {
    let mut sim = Sim::new(5, 16).unwrap();
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband()).unwrap();
    let ids = ring(&mut sim, 9, "lan");
    let root = sim.root();
    let corr = sim.propagate(ids[3], root, b"hello").unwrap();
    sim.run_for(5_000);
    let r = sim.propagate_report(ids[3], corr);
    let mut got = r.delivered.clone();
    got.sort();
    let mut want = ids.clone();
    want.sort();
    assert_eq!(got, want);
    assert_eq!(r.transmissions, 8);
    assert_eq!(r.duplicates, 0);
}
