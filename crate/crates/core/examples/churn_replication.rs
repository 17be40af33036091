//! Stores records, crashes three adjacent peers and reads them back.

use embchord::chord::DhtRecord;
use embchord::id::hash_to_id;
use embchord::sim::{OpResult, Sim};
use embchord::transport::{LinkProfile, TransportKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut sim = Sim::new(5, 16)?;
    sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband())?;
    let mut peers = Vec::new();
    for i in 0..16 {
        let id = sim.add_peer(&format!("n{i}"), &["lan"])?;
        let op = sim.join_root(id)?;
        sim.run_op(op, 20_000)?;
        sim.run_for(500);
        peers.push(id);
    }
    sim.run_for(30_000);
    let root = sim.root();

    let keys: Vec<_> = (0..20).map(|i| hash_to_id(format!("rec-{i}").as_bytes(), 16)).collect::<Result<_, _>>()?;
    for (i, key) in keys.iter().enumerate() {
        let rec = DhtRecord { key: *key, payload: format!("value {i}").into_bytes(), publisher: peers[i % 16], expires_at: u64::MAX };
        let op = sim.dht_put(peers[i % 16], root, rec)?;
        sim.run_op(op, 10_000)?;
    }
    sim.run_for(10_000);

    let mut sorted = peers.clone();
    sorted.sort();
    for p in &sorted[4..7] {
        println!("crashing {p}");
        sim.crash(*p)?;
    }
    sim.run_for(32_000);

    let reader = sorted[0];
    let mut found = 0;
    for key in &keys {
        let op = sim.dht_get(reader, root, *key)?;
        if let Ok(OpResult::Records(g)) = sim.run_op(op, 10_000) {
            found += usize::from(!g.records.is_empty());
        }
    }
    println!("{found}/{} records still readable", keys.len());
    Ok(())
}
