//! Builds a 32-peer ring and resolves a handful of keys.

use embchord::id::{hash_to_id, PeerId};
use embchord::sim::{OpResult, Sim};
use embchord::transport::{LinkProfile, TransportKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = Sim::new(1, 16)?;
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband())?;
    let mut peers: Vec<PeerId> = Vec::new();
    for i in 0..32 {
        let id = sim.add_peer(&format!("node{i}"), &["lan"])?;
        let op = sim.join_root(id)?;
        sim.run_op(op, 20_000)?;
        sim.run_for(500);
        peers.push(id);
    }
    sim.run_for(30_000);

    let root = sim.root();
    for name in ["alpha", "bravo", "charlie", "delta", "echo"] {
        let key = hash_to_id(name.as_bytes(), 16)?;
        let op = sim.lookup(peers[0], root, key)?;
        if let OpResult::Lookup(r) = sim.run_op(op, 10_000)? {
            println!("{name:<8} key {key} -> owner {} in {} hops", r.owner.id, r.hops);
        }
    }
    let c = sim.chord(peers[0], root).expect("joined");
    println!("\n{} fingers of {}:", c.fingers().len(), peers[0]);
    for i in (0..c.fingers().len()).step_by(4) {
        if let Some(f) = c.fingers().get(i) {
            println!("  finger[{i:>2}] start {} -> {}", c.fingers().start(i), f.id);
        }
    }
    Ok(())
}
