//! Consistent-hashing ring: finger tables, successor lists, recursive
//! lookups, stabilization and replicated record storage.

mod message;
mod node;
mod types;

pub use message::ChordMsg;
pub use node::{ChordAction, ChordEvent, ChordNode, GetResult, LookupResult};
pub use types::{ChordConfig, DhtRecord, FingerTable, PeerRef, RecordStore, SuccessorList};

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet, VecDeque};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::id::{NodeId, PeerId};

    const M: u8 = 16;

    fn pid(v: u128) -> PeerId {
        PeerId(NodeId::new(v, M).unwrap())
    }

    // Plain-integer oracle for the ring, independent of the interval helpers.
    struct Oracle {
        ids: Vec<u128>,
    }

    impl Oracle {
        fn owner(&self, key: u128) -> u128 {
            *self.ids.iter().find(|&&n| n >= key).unwrap_or(&self.ids[0])
        }
        fn after(&self, n: u128, k: usize) -> u128 {
            let i = self.ids.iter().position(|&x| x == n).unwrap();
            self.ids[(i + k) % self.ids.len()]
        }
        fn pred(&self, n: u128) -> u128 {
            self.after(n, self.ids.len() - 1)
        }
        fn finger(&self, n: u128, i: u32) -> u128 {
            self.owner((n + (1u128 << i)) % (1u128 << M))
        }
    }

    struct Net {
        nodes: BTreeMap<PeerId, ChordNode>,
        dead: BTreeSet<PeerId>,
        queue: VecDeque<(PeerId, ChordMsg)>,
        events: Vec<(PeerId, ChordEvent)>,
        now: u64,
    }

    impl Net {
        fn new() -> Self {
            Net { nodes: BTreeMap::new(), dead: BTreeSet::new(), queue: VecDeque::new(), events: vec![], now: 0 }
        }

        fn add(&mut self, v: u128, bootstrap: Option<u128>) {
            let mut n = ChordNode::new(ChordConfig::new(M), PeerRef::bare(pid(v)));
            n.join(self.now, bootstrap.map(|b| PeerRef::bare(pid(b))), v as u64);
            self.nodes.insert(pid(v), n);
            self.pump();
        }

        fn pump(&mut self) {
            loop {
                for (id, n) in self.nodes.iter_mut() {
                    for a in n.take_actions() {
                        match a {
                            ChordAction::Send { to, msg } => self.queue.push_back((to.id, msg)),
                            ChordAction::Event(e) => self.events.push((*id, e)),
                        }
                    }
                }
                let Some((to, msg)) = self.queue.pop_front() else { break };
                if self.dead.contains(&to) {
                    continue;
                }
                let msg = ChordMsg::decode(msg.kind(), &msg.encode()).unwrap();
                if let Some(n) = self.nodes.get_mut(&to) {
                    n.handle(self.now, msg);
                }
            }
        }

        fn round(&mut self) {
            self.now += 500;
            let ids: Vec<PeerId> = self.nodes.keys().filter(|k| !self.dead.contains(k)).copied().collect();
            for id in ids {
                let n = self.nodes.get_mut(&id).unwrap();
                n.poll(self.now);
                n.round(self.now);
                self.pump();
            }
        }

        fn live(&self) -> Vec<u128> {
            self.nodes.keys().filter(|k| !self.dead.contains(k)).map(|k| k.0.as_u128().unwrap()).collect()
        }

        fn mismatches(&self) -> usize {
            let o = Oracle { ids: self.live() };
            let mut bad = 0;
            for &v in &o.ids {
                let n = &self.nodes[&pid(v)];
                if n.predecessor().map(|p| p.id) != Some(pid(o.pred(v))) {
                    bad += 1;
                }
                let want: Vec<PeerId> = (1..=4).map(|k| pid(o.after(v, k))).collect();
                let got: Vec<PeerId> = n.successors().iter().map(|p| p.id).collect();
                if got != want {
                    bad += 1;
                }
                for i in 0..M as usize {
                    if n.fingers().get(i).map(|p| p.id) != Some(pid(o.finger(v, i as u32))) {
                        bad += 1;
                    }
                }
            }
            bad
        }
    }

    fn ring(size: usize, seed: u64) -> Net {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = BTreeSet::new();
        while ids.len() < size {
            ids.insert(rng.gen_range(0..1u128 << M));
        }
        let ids: Vec<u128> = ids.into_iter().collect();
        let mut net = Net::new();
        net.add(ids[0], None);
        for &v in &ids[1..] {
            net.add(v, Some(ids[0]));
            net.round();
        }
        net
    }

    #[test]
    fn ring_converges_to_oracle_state() {
        let mut net = ring(20, 7);
        let mut rounds = 0;
        while net.mismatches() > 0 {
            net.round();
            rounds += 1;
            assert!(rounds <= 64, "still {} mismatches", net.mismatches());
        }
    }

    #[test]
    fn lookups_find_true_owner() {
        let mut net = ring(24, 11);
        for _ in 0..64 {
            net.round();
        }
        let o = Oracle { ids: net.live() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let origins = net.live();
        for t in 0..200u64 {
            let key = rng.gen_range(0..1u128 << M);
            let from = pid(origins[t as usize % origins.len()]);
            let now = net.now;
            net.nodes.get_mut(&from).unwrap().lookup(now, NodeId::new(key, M).unwrap(), 1000 + t);
            net.pump();
        }
        let mut seen = 0;
        for (_, e) in &net.events {
            if let ChordEvent::Lookup { token, result } = e {
                let r = result.as_ref().unwrap();
                assert_eq!(r.owner.id.0.as_u128().unwrap(), o.owner(r.key.as_u128().unwrap()), "token {token}");
                assert!(r.hops <= 2 * 5 + 1);
                seen += 1;
            }
        }
        assert_eq!(seen, 200);
    }

    #[test]
    fn closest_preceding_node_matches_brute_force() {
        let mut net = ring(16, 5);
        for _ in 0..64 {
            net.round();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in net.nodes.values() {
            let me = n.id().0.as_u128().unwrap();
            let known: BTreeSet<u128> = n
                .fingers()
                .iter()
                .flatten()
                .chain(n.successors())
                .map(|p| p.id.0.as_u128().unwrap())
                .filter(|&x| x != me)
                .collect();
            for _ in 0..50 {
                let key = rng.gen_range(0..1u128 << M);
                let span = (key + (1 << M) - me) % (1 << M);
                let best = known
                    .iter()
                    .map(|&x| (x, (x + (1 << M) - me) % (1 << M)))
                    .filter(|&(_, d)| d > 0 && d < span)
                    .max_by_key(|&(_, d)| d)
                    .map(|(x, _)| x)
                    .unwrap_or(me);
                let got = n.closest_preceding_node(&NodeId::new(key, M).unwrap());
                assert_eq!(got.id.0.as_u128().unwrap(), best);
            }
        }
    }

    #[test]
    fn records_survive_single_crash() {
        let mut net = ring(12, 21);
        for _ in 0..64 {
            net.round();
        }
        let ids = net.live();
        let publisher = pid(ids[0]);
        let mut keys = Vec::new();
        for k in 0..60u128 {
            let key = NodeId::new((k * 1093) % (1 << M), M).unwrap();
            keys.push(key);
            let rec = DhtRecord { key, payload: vec![k as u8], publisher, expires_at: u64::MAX };
            let now = net.now;
            net.nodes.get_mut(&publisher).unwrap().put(now, rec, k as u64);
            net.pump();
        }
        for _ in 0..8 {
            net.round();
        }
        net.dead.insert(pid(ids[5]));
        for _ in 0..12 {
            net.round();
        }
        net.events.clear();
        let asker = pid(ids[2]);
        for (i, key) in keys.iter().enumerate() {
            let now = net.now;
            net.nodes.get_mut(&asker).unwrap().get(now, *key, 5000 + i as u64);
            net.pump();
        }
        for _ in 0..4 {
            net.round();
        }
        let found = net
            .events
            .iter()
            .filter(|(_, e)| matches!(e, ChordEvent::Get { result: Ok(r), .. } if r.records.len() == 1))
            .count();
        assert_eq!(found, keys.len());
        assert_eq!(net.mismatches(), 0);
    }
}
