//! A CoAP request from one LAN to another across a narrowband hop.

use embchord::coap::{static_handler, Code, MsgType};
use embchord::sim::{OpResult, Sim};
use embchord::transport::{LinkProfile, TransportKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = Sim::new(3, 16)?;
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
        sim.run_op(op, 30_000)?;
    }
    sim.run_for(20_000);
    let root = sim.root();

    let op = sim.serve(server, root, "/lux", "lux", static_handler("312"))?;
    sim.run_op(op, 30_000)?;
    let op = sim.coap_request(client, root, server, MsgType::Con, Code::GET, "/lux", Vec::new())?;
    if let OpResult::Coap { response, latency_ms, .. } = sim.run_op(op, 60_000)? {
        println!("{} {:?} in {latency_ms} ms", response.code, String::from_utf8_lossy(&response.payload));
    }
    println!("relayed by bridges: {}", sim.metrics().counter("route.bridged"));
    for s in sim.segments() {
        println!("{:<6} {:>9} bytes {:>6} fragments {:>5} envelopes", s.name, s.bytes, s.fragments, s.envelopes);
    }
    Ok(())
}
