//! Propagates one message through groups of growing size and prints the
//! delivery accounting.

use embchord::group::GroupPolicy;
use embchord::sim::Sim;
use embchord::transport::{LinkProfile, TransportKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>4} {:>9} {:>13} {:>10}", "size", "delivered", "transmissions", "duplicates");
    for size in [2, 4, 8, 16] {
        let mut sim = Sim::new(size as u64, 16)?;
        sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband())?;
        let mut ids = Vec::new();
        for i in 0..size {
            let id = sim.add_peer(&format!("m{i}"), &["lan"])?;
            let op = sim.join_root(id)?;
            sim.run_op(op, 20_000)?;
            ids.push(id);
        }
        sim.run_for(20_000);
        let (g, op) = sim.create_group(ids[0], sim.root(), "team", GroupPolicy::Open)?;
        sim.run_op(op, 10_000)?;
        for &p in &ids[1..] {
            let op = sim.join_group(p, g, None)?;
            sim.run_op(op, 20_000)?;
            sim.run_for(500);
        }
        sim.run_for(30_000);
        let corr = sim.propagate(ids[size / 2], g, b"ping")?;
        sim.run_for(5_000);
        let r = sim.propagate_report(ids[size / 2], corr);
        println!("{size:>4} {:>9} {:>13} {:>10}", r.delivered.len(), r.transmissions, r.duplicates);
    }
    Ok(())
}
