//! Publishes resources, finds one by name and queries all of them with a
//! multicast GET.

use embchord::coap::{static_handler, Code, MsgType};
use embchord::group::GroupPolicy;
use embchord::sim::{OpResult, Sim};
use embchord::transport::{LinkProfile, TransportKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = Sim::new(21, 16)?;
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband())?;
    let mut ids = Vec::new();
    for i in 0..6 {
        let id = sim.add_peer(&format!("dev{i}"), &["lan"])?;
        let op = sim.join_root(id)?;
        sim.run_op(op, 20_000)?;
        ids.push(id);
    }
    let (g, op) = sim.create_group(ids[0], sim.root(), "kitchen", GroupPolicy::Open)?;
    sim.run_op(op, 10_000)?;
    for &p in &ids[1..] {
        let op = sim.join_group(p, g, None)?;
        sim.run_op(op, 20_000)?;
    }
    sim.run_for(20_000);

    for (i, &p) in ids.iter().enumerate().skip(1) {
        let op = sim.serve(p, g, "/temp", &format!("temp-{i}"), static_handler(format!("{}", 18 + i)))?;
        sim.run_op(op, 10_000)?;
    }
    let op = sim.discover(ids[0], g, "temp-3")?;
    if let OpResult::Discovered { ads, hops, latency_ms } = sim.run_op(op, 10_000)? {
        let ad = &ads[0];
        println!("found {} ({} hops, {latency_ms} ms) attrs {:?}", ad.name, hops, ad.attributes);
        let op = sim.coap_request(ids[0], g, ids[3], MsgType::Con, Code::GET, "/temp", Vec::new())?;
        if let OpResult::Coap { response, .. } = sim.run_op(op, 10_000)? {
            println!("GET /temp -> {} {}", response.code, String::from_utf8_lossy(&response.payload));
        }
    }
    let op = sim.coap_multicast(ids[0], g, Code::GET, "/temp", Vec::new())?;
    if let OpResult::Multicast { responses } = sim.run_op(op, 10_000)? {
        for (p, r) in responses {
            println!("  {p}: {} {}", r.code, String::from_utf8_lossy(&r.payload));
        }
    }
    Ok(())
}
