use std::collections::BTreeMap;

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

use embchord::advertisement::{decode_advertisement, encode_advertisement, render_plain, AdvKind, Advertisement, TagTable};
use embchord::coap::{CoapMessage, Code, MsgType};
use embchord::envelope::{decode_envelope, encode_envelope, flags, MessageEnvelope, PayloadKind};
use embchord::error::Error;
use embchord::group::{sender_nonce, EncryptedPayload, GroupKey, KeyRing};
use embchord::id::{in_interval, GroupId, NodeId, Openness, PeerId};
use embchord::transport::{
    fragment, fragment_count, resolve_route, Directory, EndpointAddress, Fragment, Reassembler, TransportKind, FRAGMENT_HEADER_LEN,
};

const WIDTHS: [u8; 5] = [8, 16, 32, 64, 128];

fn mask(bits: u8) -> u128 {
    if bits == 128 { u128::MAX } else { (1u128 << bits) - 1 }
}

fn node_id() -> impl Strategy<Value = NodeId> {
    (0..WIDTHS.len(), any::<u128>()).prop_map(|(w, v)| NodeId::new(v & mask(WIDTHS[w]), WIDTHS[w]).unwrap())
}

fn ids_of_width() -> impl Strategy<Value = (u8, u128, u128, u128)> {
    (0..4usize, any::<u128>(), any::<u128>(), any::<u128>()).prop_map(|(w, a, b, c)| {
        let bits = WIDTHS[w];
        (bits, a & mask(bits), b & mask(bits), c & mask(bits))
    })
}

fn text(max: usize) -> impl Strategy<Value = String> {
    proptest::string::string_regex(&format!("[a-zA-Z0-9/_. -]{{1,{max}}}")).unwrap()
}

fn endpoint() -> impl Strategy<Value = EndpointAddress> {
    (0..3usize, "[a-z]{1,6}", "[a-z0-9-]{1,8}").prop_map(|(k, seg, label)| {
        let kind = [TransportKind::Mem, TransportKind::NarrowSim, TransportKind::Tcp][k];
        EndpointAddress::new(kind, format!("{seg}/{label}"))
    })
}

fn advertisement(well_known_only: bool) -> impl Strategy<Value = Advertisement> {
    let key = if well_known_only {
        proptest::sample::select(TagTable::KEYS[7..].to_vec()).prop_map(str::to_string).boxed()
    } else {
        prop_oneof![
            proptest::sample::select(TagTable::KEYS[7..].to_vec()).prop_map(str::to_string),
            "x-[a-z]{1,10}",
        ]
        .boxed()
    };
    (
        1..=4u8,
        0..WIDTHS.len(),
        any::<u128>(),
        any::<u128>(),
        text(60),
        btree_map(key, text(30), 0..10),
        vec(endpoint(), 0..4),
        any::<u64>(),
    )
        .prop_map(|(k, w, s, g, name, attributes, endpoints, expiration)| {
            let bits = WIDTHS[w];
            let kind = AdvKind::from_u8(k).unwrap();
            let mut a = Advertisement::new(
                kind,
                NodeId::new(s & mask(bits), bits).unwrap(),
                GroupId(NodeId::new(g & mask(bits), bits).unwrap()),
                name,
            );
            a.attributes = attributes;
            a.endpoints = endpoints;
            a.expiration = expiration;
            a
        })
}

proptest! {
    #[test]
    fn id_arithmetic_matches_modular_integers((bits, a, b, _) in ids_of_width()) {
        let (x, y) = (NodeId::new(a, bits).unwrap(), NodeId::new(b, bits).unwrap());
        prop_assert_eq!(x.wrapping_add(&y).as_u128(), Some(a.wrapping_add(b) & mask(bits)));
        prop_assert_eq!(x.wrapping_sub(&y).as_u128(), Some(a.wrapping_sub(b) & mask(bits)));
        prop_assert_eq!(x.distance_to(&y).as_u128(), Some(b.wrapping_sub(a) & mask(bits)));
        let exp = (b % bits as u128) as u8;
        prop_assert_eq!(x.add_pow2(exp).as_u128(), Some(a.wrapping_add(1u128 << exp) & mask(bits)));
    }

    #[test]
    fn interval_membership_matches_a_walk((bits, x, a, b) in ids_of_width().prop_filter("small rings", |t| t.0 == 8)) {
        // walk the ring clockwise from a, which is cheap at 8 bits
        let steps = |to: u128| (to + 256 - a) % 256;
        let open_open = if a == b { x != a } else { steps(x) > 0 && steps(x) < steps(b) };
        let open_closed = if a == b { true } else { steps(x) > 0 && steps(x) <= steps(b) };
        let id = |v| NodeId::new(v, bits).unwrap();
        prop_assert_eq!(in_interval(&id(x), &id(a), &id(b), Openness::OpenOpen), open_open);
        prop_assert_eq!(in_interval(&id(x), &id(a), &id(b), Openness::OpenClosed), open_closed);
    }

    #[test]
    fn ids_round_trip_through_hex_and_bytes(id in node_id()) {
        prop_assert_eq!(NodeId::from_hex(&id.to_string()).unwrap(), id);
        prop_assert_eq!(NodeId::from_be_bytes(&id.to_be_bytes()).unwrap(), id);
    }

    #[test]
    fn advertisements_round_trip_bit_exactly(a in advertisement(false)) {
        let bytes = encode_advertisement(&a).unwrap();
        let back = decode_advertisement(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(encode_advertisement(&back).unwrap(), bytes);
    }

    #[test]
    fn well_known_advertisements_beat_text(a in advertisement(true)) {
        prop_assert!(encode_advertisement(&a).unwrap().len() < render_plain(&a).len());
    }

    #[test]
    fn corrupted_advertisements_are_rejected(a in advertisement(false), pos in any::<prop::sample::Index>(), bit in 0..8u8) {
        let mut bytes = encode_advertisement(&a).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_advertisement(&bytes).is_err());
    }

    #[test]
    fn envelopes_round_trip(
        w in 0..WIDTHS.len(),
        ids in (any::<u128>(), any::<u128>(), any::<u128>()),
        kind in any::<u8>(),
        fl in 0..4u8,
        ttl in 1..=255u8,
        corr in any::<u64>(),
        payload in vec(any::<u8>(), 0..600),
    ) {
        let bits = WIDTHS[w];
        let id = |v: u128| NodeId::new(v & mask(bits), bits).unwrap();
        let mut e = MessageEnvelope::new(PayloadKind(kind), PeerId(id(ids.0)), id(ids.1), GroupId(id(ids.2)), payload)
            .with_correlation(corr)
            .with_flags(fl & (flags::ENCRYPTED | flags::PROPAGATE));
        e.ttl = ttl;
        let bytes = encode_envelope(&e).unwrap();
        prop_assert_eq!(bytes.len(), e.encoded_len());
        prop_assert_eq!(decode_envelope(&bytes).unwrap(), e);
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(decode_envelope(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn fragments_reassemble_in_any_order(
        data in vec(any::<u8>(), 0..2000),
        mtu in 9usize..300,
        order in any::<u64>(),
    ) {
        let frags = fragment(3, &data, mtu).unwrap();
        // one fragment per started chunk, at least one
        let want = (0..data.len()).step_by(mtu - FRAGMENT_HEADER_LEN).count().max(1);
        prop_assert_eq!(frags.len(), want);
        prop_assert_eq!(fragment_count(data.len(), mtu), want);
        prop_assert!(frags.iter().all(|f| f.wire_len() <= mtu));
        let mut shuffled = frags.clone();
        let mut s = order;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut re = Reassembler::new(5_000);
        let mut out = None;
        for f in shuffled {
            let wire = f.to_bytes();
            if let Some(b) = re.insert(1u8, Fragment::from_bytes(&wire).unwrap(), 0).unwrap() {
                prop_assert!(out.is_none());
                out = Some(b);
            }
        }
        prop_assert_eq!(out, Some(data));
    }

    #[test]
    fn coap_messages_round_trip(
        t in 0..4u8,
        code in any::<u8>(),
        mid in any::<u16>(),
        token in vec(any::<u8>(), 0..=8),
        path in vec("[a-z0-9]{1,12}", 0..4),
        ct in any::<u16>(),
        payload in vec(any::<u8>(), 0..200),
    ) {
        let m = CoapMessage {
            msg_type: MsgType::from_u8(t).unwrap(),
            code: Code(code),
            message_id: mid,
            token,
            uri_path: path,
            content_format: ct,
            payload,
        };
        prop_assert_eq!(CoapMessage::decode(&m.encode().unwrap()).unwrap(), m);
    }

    #[test]
    fn group_ciphertexts_open_only_intact(
        material in any::<[u8; 32]>(),
        plaintext in vec(any::<u8>(), 0..300),
        counter in any::<u64>(),
        flip in any::<prop::sample::Index>(),
    ) {
        let group = GroupId(NodeId::new(7, 16).unwrap());
        let sender = PeerId(NodeId::new(9, 16).unwrap());
        let mut ring = KeyRing::new(group);
        ring.install(GroupKey::from_material(1, material), 0);
        let ct = ring.encrypt(&plaintext, sender_nonce(&sender, counter)).unwrap();
        prop_assert_eq!(ring.decrypt(&ct, 0).unwrap(), plaintext.clone());
        if plaintext.len() >= 8 {
            prop_assert!(!ct.to_bytes().windows(plaintext.len()).any(|w| w == &plaintext[..]));
        }

        let mut bytes = ct.to_bytes();
        let i = 4 + flip.index(bytes.len() - 4);
        bytes[i] ^= 0x01;
        let tampered = EncryptedPayload::from_bytes(&bytes);
        if let Ok(t) = tampered {
            prop_assert!(matches!(ring.decrypt(&t, 0), Err(Error::Tamper)));
        }

        let mut other = KeyRing::new(group);
        other.install(GroupKey::from_material(1, material.map(|b| b ^ 0xA5)), 0);
        prop_assert!(other.decrypt(&ct, 0).is_err());
    }
}

/// Random segment topology: each peer sits on 1..=3 of `segs` segments.
fn topology() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (2..7usize).prop_flat_map(|segs| {
        (Just(segs), vec(proptest::sample::subsequence((0..segs).collect::<Vec<_>>(), 1..=3.min(segs)), 2..10))
    })
}

proptest! {
    #[test]
    fn routes_use_the_fewest_bridges((segs, peers) in topology(), pick in any::<(prop::sample::Index, prop::sample::Index)>()) {
        let ids: Vec<PeerId> = (0..peers.len()).map(|i| PeerId::from_name(format!("peer-{i}").as_bytes(), 32).unwrap()).collect();
        let eps = |i: usize| -> Vec<EndpointAddress> {
            peers[i].iter().map(|s| EndpointAddress::new(TransportKind::Mem, format!("s{s}/p{i}"))).collect()
        };
        let mut dir = Directory::new();
        for (i, id) in ids.iter().enumerate() {
            dir.learn(*id, &eps(i), u64::MAX);
        }
        let src = pick.0.index(peers.len());
        let dst = pick.1.index(peers.len());
        prop_assume!(src != dst);

        // Floyd-Warshall over segments; every other multi-homed peer is an edge
        const INF: usize = usize::MAX / 4;
        let mut d = vec![vec![INF; segs]; segs];
        for (s, row) in d.iter_mut().enumerate() {
            row[s] = 0;
        }
        for (i, p) in peers.iter().enumerate() {
            if i == src || i == dst {
                continue;
            }
            for &a in p {
                for &b in p {
                    if a != b {
                        d[a][b] = d[a][b].min(1);
                    }
                }
            }
        }
        for k in 0..segs {
            for i in 0..segs {
                for j in 0..segs {
                    d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
                }
            }
        }
        let best = peers[src].iter().flat_map(|&a| peers[dst].iter().map(move |&b| (a, b))).map(|(a, b)| d[a][b]).min().unwrap();

        match resolve_route(&dir, ids[src], &eps(src), ids[dst], 0) {
            Ok(r) => {
                prop_assert_eq!(r.cost, best);
                prop_assert_eq!(r.relays.len(), r.segment_path.len() - 1);
                prop_assert_eq!(r.hops.len(), r.segment_path.len());
                prop_assert_eq!(r.egress.segment(), Some(r.segment_path[0].as_str()));
                // each relay is attached to both segments it joins
                let seg_of = |s: &str| s.trim_start_matches('s').parse::<usize>().unwrap();
                for (k, relay) in r.relays.iter().enumerate() {
                    let i = ids.iter().position(|x| x == relay).unwrap();
                    prop_assert!(i != src && i != dst);
                    prop_assert!(peers[i].contains(&seg_of(&r.segment_path[k])));
                    prop_assert!(peers[i].contains(&seg_of(&r.segment_path[k + 1])));
                }
                prop_assert_eq!(r.hops.last().unwrap(), &eps(dst).into_iter().find(|e| e.segment() == r.segment_path.last().map(String::as_str)).unwrap());
            }
            Err(Error::Unreachable(_)) => prop_assert_eq!(best, INF),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn attribute_order_does_not_change_encoding() {
    let base = Advertisement::new(
        AdvKind::Resource,
        NodeId::new(1, 16).unwrap(),
        GroupId(NodeId::new(2, 16).unwrap()),
        "lamp",
    );
    let mut fwd = BTreeMap::new();
    let mut rev = BTreeMap::new();
    for (k, v) in [("unit", "lx"), ("rt", "light"), ("x-zone", "2")] {
        fwd.insert(k.to_string(), v.to_string());
    }
    for (k, v) in [("x-zone", "2"), ("rt", "light"), ("unit", "lx")] {
        rev.insert(k.to_string(), v.to_string());
    }
    let (mut a, mut b) = (base.clone(), base);
    a.attributes = fwd;
    b.attributes = rev;
    assert_eq!(encode_advertisement(&a).unwrap(), encode_advertisement(&b).unwrap());
}
