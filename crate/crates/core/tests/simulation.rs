use std::process::Command;

use proptest::prelude::*;

use embchord::id::{NodeId, PeerId};
use embchord::sim::scenario::Scenario;
use embchord::sim::{OpResult, Sim};
use embchord::transport::{LinkProfile, TransportKind};

const RING32: &str = include_str!("../examples/ring32.scn");
const BRIDGE: &str = include_str!("../examples/bridge.scn");

/// First member at or after `key`, wrapping to the smallest.
fn owner(members: &[u128], key: u128) -> u128 {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.iter().copied().find(|&n| n >= key).unwrap_or(sorted[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lookups_agree_with_sorted_ring(seed in any::<u64>(), n in 2..14usize, keys in proptest::collection::vec(0..256u128, 8)) {
        let mut sim = Sim::new(seed, 8).unwrap();
        sim.add_segment("lan", TransportKind::Mem, LinkProfile::broadband()).unwrap();
        let mut ids: Vec<PeerId> = Vec::new();
        let mut i = 0;
        while ids.len() < n {
            i += 1;
            // skip labels whose 8-bit ids collide
            let Ok(id) = sim.add_peer(&format!("{seed}-{i}"), &["lan"]) else { continue };
            let op = sim.join_root(id).unwrap();
            sim.run_op(op, 20_000).unwrap();
            sim.run_for(500);
            ids.push(id);
        }
        sim.run_for(40_000);
        let members: Vec<u128> = ids.iter().map(|p| p.0.as_u128().unwrap()).collect();
        let root = sim.root();
        for (j, k) in keys.iter().enumerate() {
            let op = sim.lookup(ids[j % n], root, NodeId::new(*k, 8).unwrap()).unwrap();
            let OpResult::Lookup(r) = sim.run_op(op, 10_000).unwrap() else { panic!("not a lookup") };
            prop_assert_eq!(r.owner.id.0.as_u128().unwrap(), owner(&members, *k));
        }
    }
}

#[test]
fn scenarios_are_reproducible() {
    for text in [RING32, BRIDGE] {
        let sc = Scenario::parse(text).unwrap();
        let a = sc.run(Some(42)).unwrap().render_lines();
        let b = sc.run(Some(42)).unwrap().render_lines();
        assert_eq!(a, b);
    }
    // random lookup keys depend on the seed
    let sc = Scenario::parse(RING32).unwrap();
    assert_ne!(sc.run(Some(1)).unwrap(), sc.run(Some(2)).unwrap());
}

#[test]
fn bundled_scenarios_finish_cleanly() {
    let r = Scenario::parse(RING32).unwrap().run(None).unwrap();
    assert_eq!(r.get("scenario.unfinished"), Some(0.0));
    assert_eq!(r.get("lookup.incorrect"), None);
    assert_eq!(r.get("scenario.coap.2.05"), Some(2.0));
    let r = Scenario::parse(BRIDGE).unwrap().run(None).unwrap();
    assert_eq!(r.get("scenario.coap.2.05"), Some(2.0));
    assert!(r.get("segment.radio.bytes").unwrap() > 0.0);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_embchord"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .env_remove("EMBCHORD_SEED")
        .output()
        .unwrap()
}

#[test]
fn cli_run_writes_identical_reports() {
    let dir = std::env::temp_dir().join(format!("embchord-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (a, b) = (dir.join("a.txt"), dir.join("b.txt"));
    for out in [&a, &b] {
        let o = cli(&["run", "examples/ring32.scn", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(text.lines().all(|l| l.starts_with("metric=")));

    let o = cli(&["inspect", a.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("family"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn cli_seed_variable_overrides_flag() {
    let with_env = Command::new(env!("CARGO_BIN_EXE_embchord"))
        .args(["run", "examples/bridge.scn", "--seed", "1"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .env("EMBCHORD_SEED", "5")
        .output()
        .unwrap();
    let flag = cli(&["run", "examples/bridge.scn", "--seed", "5"]);
    assert_eq!(with_env.stdout, flag.stdout);
}

#[test]
fn cli_exit_codes() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["run"]).status.code(), Some(2));
    assert_eq!(cli(&["bench", "c99"]).status.code(), Some(2));
    assert_eq!(cli(&["run", "Cargo.toml"]).status.code(), Some(1));
    assert_eq!(cli(&["bench", "c6"]).status.code(), Some(0));
    let o = cli(&["codec", "examples/sample.adv"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches(" ok").count(), 3);
    let o = cli(&["run", "examples/ring32.scn", "--format", "jsonl"]);
    for line in String::from_utf8_lossy(&o.stdout).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("metric").is_some());
    }
}
