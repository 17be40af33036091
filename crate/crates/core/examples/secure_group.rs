//! Secured group: admission with and without a credential, encrypted
//! multicast, and eviction through key rotation.

use embchord::group::GroupPolicy;
use embchord::sim::Sim;
use embchord::transport::{LinkProfile, TransportKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = Sim::new(9, 16)?;
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband())?;
    let names = ["owner", "ana", "ben", "cho", "mallory"];
    let mut ids = Vec::new();
    for n in names {
        let id = sim.add_peer(n, &["lan"])?;
        let op = sim.join_root(id)?;
        sim.run_op(op, 20_000)?;
        ids.push(id);
    }
    let (owner, mallory) = (ids[0], ids[4]);
    let (g, op) = sim.create_group(owner, sim.root(), "ops", GroupPolicy::Secured)?;
    sim.run_op(op, 10_000)?;
    for &p in &ids[1..4] {
        let cred = sim.issue_credential(owner, g, p)?;
        let op = sim.join_group(p, g, Some(cred))?;
        sim.run_op(op, 20_000)?;
    }
    let op = sim.join_group(mallory, g, None)?;
    println!("mallory without credential: {:?}", sim.run_op(op, 20_000).err());
    sim.run_for(20_000);
    sim.tap("lan")?;

    sim.propagate(ids[1], g, b"door code 4711")?;
    sim.run_for(2_000);
    let leaked = sim.captures("lan").iter().any(|c| c.envelope.windows(4).any(|w| w == b"4711"));
    println!("plaintext visible on the wire: {leaked}");

    let key = sim.rotate_key(owner, g, &[ids[3]])?;
    sim.run_for(2_000);
    sim.propagate(ids[1], g, b"new code 9000")?;
    sim.run_for(2_000);
    for (&p, n) in ids.iter().zip(names) {
        let got: Vec<String> = sim
            .log()
            .pipe_received
            .iter()
            .filter(|(r, _)| *r == p)
            .map(|(_, d)| String::from_utf8_lossy(d).into_owned())
            .collect();
        let role = if p == ids[1] { " (sender)" } else { "" };
        println!("{n:<8} key {:?} received {got:?}{role}", sim.key_ring(p, g).and_then(|k| k.current_id()));
    }
    println!("current key id {key}");
    Ok(())
}
