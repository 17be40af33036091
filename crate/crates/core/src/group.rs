//! Peergroups: nesting, admission credentials, group keys and group
//! encryption.
//!
//! Group traffic is sealed with ChaCha20-Poly1305 (256-bit keys, 96-bit
//! nonces, 128-bit tags). Credentials are HMAC-SHA256 over
//! `(peer, group, issued_at)` keyed by the group's admission secret. Key
//! material only ever travels wrapped under a key derived from a credential.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chacha20poly1305::aead::AeadInPlace;
use chacha20poly1305::{ChaCha20Poly1305, Key, KeyInit, Nonce, Tag};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

use crate::error::{Error, Result};
use crate::id::{scoped_key, GroupId, PeerId};
use crate::wire::{Format, PutExt, Reader};

type HmacSha256 = Hmac<Sha256>;

/// Old keys stay decrypt-only this long after a rotation.
pub const KEY_GRACE_MS: u64 = 10_000;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupPolicy {
    Open,
    Secured,
}

impl GroupPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupPolicy::Open => "open",
            GroupPolicy::Secured => "secured",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(GroupPolicy::Open),
            "secured" => Some(GroupPolicy::Secured),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerGroup {
    pub id: GroupId,
    /// `None` only for the root group.
    pub parent: Option<GroupId>,
    pub name: String,
    pub policy: GroupPolicy,
    /// Locally known members.
    pub members: BTreeSet<PeerId>,
}

impl PeerGroup {
    pub fn root(m: u8) -> Result<Self> {
        Ok(PeerGroup {
            id: crate::id::root_group(m)?,
            parent: None,
            name: crate::id::ROOT_GROUP_NAME.to_string(),
            policy: GroupPolicy::Open,
            members: BTreeSet::new(),
        })
    }

    /// A child of `parent`; its id is `hash(parent ‖ name)`.
    pub fn child(parent: &GroupId, name: &str, policy: GroupPolicy) -> Result<Self> {
        Ok(PeerGroup {
            id: GroupId(scoped_key(parent, name.as_bytes())?),
            parent: Some(*parent),
            name: name.to_string(),
            policy,
            members: BTreeSet::new(),
        })
    }
}

/// Walks `parent_of` from `group` to the root. Fails on a cycle or a missing
/// link.
pub fn parent_chain(
    group: GroupId,
    parent_of: impl Fn(&GroupId) -> Option<Option<GroupId>>,
) -> Result<Vec<GroupId>> {
    let mut chain = vec![group];
    let mut seen = BTreeSet::from([group]);
    let mut cur = group;
    loop {
        match parent_of(&cur) {
            None => return Err(Error::Precondition(format!("unknown group {cur}"))),
            Some(None) => return Ok(chain),
            Some(Some(p)) => {
                if !seen.insert(p) {
                    return Err(Error::Precondition(format!("parent cycle at {p}")));
                }
                chain.push(p);
                cur = p;
            }
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct GroupKey {
    pub key_id: u32,
    material: [u8; 32],
}

impl GroupKey {
    pub fn generate(key_id: u32, rng: &mut impl RngCore) -> Self {
        let mut material = [0u8; 32];
        rng.fill_bytes(&mut material);
        GroupKey { key_id, material }
    }

    pub fn from_material(key_id: u32, material: [u8; 32]) -> Self {
        GroupKey { key_id, material }
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.material))
    }
}

impl fmt::Debug for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupKey").field("key_id", &self.key_id).finish_non_exhaustive()
    }
}

/// `key_id u32 | nonce 12 | u32 ciphertext length | ciphertext | tag 16`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedPayload {
    pub key_id: u32,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl EncryptedPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + NONCE_LEN + 4 + self.ciphertext.len() + TAG_LEN);
        out.put_u32(self.key_id);
        out.extend_from_slice(&self.nonce);
        out.put_u32(self.ciphertext.len() as u32);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Format::Payload("encrypted"));
        let key_id = r.u32()?;
        let nonce = r.bytes(NONCE_LEN)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let ciphertext = r.bytes(len)?.to_vec();
        let tag = r.bytes(TAG_LEN)?.try_into().unwrap();
        r.finish()?;
        Ok(EncryptedPayload { key_id, nonce, ciphertext, tag })
    }
}

/// `sender id low 32 bits ‖ per-sender 64-bit counter`.
pub fn sender_nonce(sender: &PeerId, counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..4].copy_from_slice(&sender.0.low_u32().to_be_bytes());
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

pub fn group_encrypt(key: &GroupKey, plaintext: &[u8], nonce: [u8; NONCE_LEN]) -> EncryptedPayload {
    let mut buf = plaintext.to_vec();
    let aad = key.key_id.to_be_bytes();
    let tag = key
        .cipher()
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), &aad, &mut buf)
        .expect("plaintext within AEAD limits");
    EncryptedPayload { key_id: key.key_id, nonce, ciphertext: buf, tag: tag.into() }
}

/// Exact plaintext, or [`Error::Tamper`] with no partial output.
pub fn group_decrypt(key: &GroupKey, payload: &EncryptedPayload) -> Result<Vec<u8>> {
    if key.key_id != payload.key_id {
        return Err(Error::Tamper);
    }
    let mut buf = payload.ciphertext.clone();
    let aad = payload.key_id.to_be_bytes();
    key.cipher()
        .decrypt_in_place_detached(
            Nonce::from_slice(&payload.nonce),
            &aad,
            &mut buf,
            Tag::from_slice(&payload.tag),
        )
        .map_err(|_| Error::Tamper)?;
    Ok(buf)
}

/// The keys one peer holds for one group: the current key plus keys retired
/// within the grace window.
#[derive(Debug, Clone)]
pub struct KeyRing {
    group: GroupId,
    current: Option<GroupKey>,
    retired: Vec<(GroupKey, u64)>,
}

impl KeyRing {
    pub fn new(group: GroupId) -> Self {
        KeyRing { group, current: None, retired: Vec::new() }
    }

    pub fn current(&self) -> Option<&GroupKey> {
        self.current.as_ref()
    }

    pub fn current_id(&self) -> Option<u32> {
        self.current.as_ref().map(|k| k.key_id)
    }

    /// Installs `key` as current; the previous key becomes decrypt-only until
    /// `now + KEY_GRACE_MS`. Keys not newer than the current one are ignored.
    pub fn install(&mut self, key: GroupKey, now: u64) -> bool {
        if let Some(cur) = &self.current {
            if key.key_id <= cur.key_id {
                return false;
            }
        }
        if let Some(old) = self.current.replace(key) {
            self.retired.push((old, now + KEY_GRACE_MS));
        }
        true
    }

    pub fn encrypt(&self, plaintext: &[u8], nonce: [u8; NONCE_LEN]) -> Result<EncryptedPayload> {
        let key = self.current.as_ref().ok_or(Error::StaleKey { group: self.group, key_id: 0 })?;
        Ok(group_encrypt(key, plaintext, nonce))
    }

    pub fn decrypt(&mut self, payload: &EncryptedPayload, now: u64) -> Result<Vec<u8>> {
        self.retired.retain(|(_, until)| now < *until);
        let key = self
            .current
            .iter()
            .chain(self.retired.iter().map(|(k, _)| k))
            .find(|k| k.key_id == payload.key_id)
            .ok_or(Error::StaleKey { group: self.group, key_id: payload.key_id })?;
        group_decrypt(key, payload)
    }

    /// Every key id this ring can still decrypt at `now`.
    pub fn usable_ids(&self, now: u64) -> Vec<u32> {
        self.current
            .iter()
            .map(|k| k.key_id)
            .chain(self.retired.iter().filter(|(_, u)| now < *u).map(|(k, _)| k.key_id))
            .collect()
    }

    /// Tries every held key regardless of id, as an eavesdropper would.
    pub fn try_any(&self, payload: &EncryptedPayload) -> Option<Vec<u8>> {
        self.current
            .iter()
            .chain(self.retired.iter().map(|(k, _)| k))
            .find_map(|k| {
                let forged = EncryptedPayload { key_id: k.key_id, ..payload.clone() };
                group_decrypt(k, &forged).ok()
            })
    }
}

/// Proof of admission issued out of band by the group creator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub peer: PeerId,
    pub group: GroupId,
    pub issued_at: u64,
    pub authenticator: [u8; 32],
}

impl Credential {
    /// Proof of possession sent instead of the authenticator itself.
    pub fn join_proof(&self) -> [u8; 32] {
        hmac(&self.authenticator, &[b"join", &credential_body(&self.peer, &self.group, self.issued_at)[..]])
    }

    /// Key that wraps group keys sent to this credential's holder.
    pub fn wrap_key(&self) -> [u8; 32] {
        hmac(&self.authenticator, &[b"wrap"])
    }
}

fn credential_body(peer: &PeerId, group: &GroupId, issued_at: u64) -> Vec<u8> {
    let mut b = Vec::new();
    b.put_id(&peer.0);
    b.put_id(&group.0);
    b.put_u64(issued_at);
    b
}

fn hmac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

fn ct_eq(a: &[u8; 32], b: &[u8; 32]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// State held only by a group's creator: the admission secret, the key
/// authority role and the admitted member list.
#[derive(Debug, Clone)]
pub struct GroupAuthority {
    pub group: GroupId,
    pub policy: GroupPolicy,
    secret: [u8; 32],
    next_key_id: u32,
    /// Admitted members and the wrap key negotiated at admission.
    members: BTreeMap<PeerId, [u8; 32]>,
}

impl GroupAuthority {
    pub fn new(group: GroupId, policy: GroupPolicy, rng: &mut impl RngCore) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        GroupAuthority { group, policy, secret, next_key_id: 1, members: BTreeMap::new() }
    }

    pub fn issue(&self, peer: PeerId, issued_at: u64) -> Credential {
        let authenticator = hmac(&self.secret, &[&credential_body(&peer, &self.group, issued_at)]);
        Credential { peer, group: self.group, issued_at, authenticator }
    }

    pub fn verify(&self, cred: &Credential) -> bool {
        cred.group == self.group && ct_eq(&self.issue(cred.peer, cred.issued_at).authenticator, &cred.authenticator)
    }

    /// Checks a join proof and, on success, records the member and returns
    /// its wrap key.
    pub fn admit(&mut self, peer: PeerId, issued_at: u64, proof: &[u8; 32]) -> Result<[u8; 32]> {
        let expected = self.issue(peer, issued_at);
        if !ct_eq(&expected.join_proof(), proof) {
            return Err(Error::Unauthorized(format!("bad credential for {peer}")));
        }
        let wrap = expected.wrap_key();
        self.members.insert(peer, wrap);
        Ok(wrap)
    }

    /// Whether `peer` is currently admitted with a valid proof.
    pub fn check(&self, peer: PeerId, issued_at: u64, proof: &[u8; 32]) -> Option<[u8; 32]> {
        let wrap = self.members.get(&peer)?;
        let expected = self.issue(peer, issued_at);
        ct_eq(&expected.join_proof(), proof).then_some(*wrap)
    }

    pub fn add_open_member(&mut self, peer: PeerId) {
        self.members.entry(peer).or_insert([0u8; 32]);
    }

    pub fn evict(&mut self, peer: &PeerId) -> bool {
        self.members.remove(peer).is_some()
    }

    pub fn members(&self) -> impl Iterator<Item = (&PeerId, &[u8; 32])> {
        self.members.iter()
    }

    pub fn is_member(&self, peer: &PeerId) -> bool {
        self.members.contains_key(peer)
    }

    pub fn next_key(&mut self, rng: &mut impl RngCore) -> GroupKey {
        let k = GroupKey::generate(self.next_key_id, rng);
        self.next_key_id += 1;
        k
    }
}

/// Seals a group key for one member.
pub fn wrap_group_key(wrap_key: &[u8; 32], key: &GroupKey, nonce: [u8; NONCE_LEN]) -> EncryptedPayload {
    let kek = GroupKey::from_material(key.key_id, *wrap_key);
    group_encrypt(&kek, &key.material, nonce)
}

pub fn unwrap_group_key(wrap_key: &[u8; 32], wrapped: &EncryptedPayload) -> Result<GroupKey> {
    let kek = GroupKey::from_material(wrapped.key_id, *wrap_key);
    let material = group_decrypt(&kek, wrapped)?;
    let material: [u8; 32] = material.try_into().map_err(|_| Error::Tamper)?;
    Ok(GroupKey::from_material(wrapped.key_id, material))
}

/// KEY_MGMT payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyMessage {
    /// `proof` is all zeros for open groups.
    JoinRequest { peer: PeerId, issued_at: u64, proof: [u8; 32] },
    /// Carries the wrapped current key for secured groups.
    JoinAccept { wrapped: Option<EncryptedPayload> },
    JoinReject { code: u8 },
    KeyUpdate { wrapped: EncryptedPayload },
    KeyFetch { peer: PeerId, issued_at: u64, proof: [u8; 32] },
}

impl KeyMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            KeyMessage::JoinRequest { peer, issued_at, proof } | KeyMessage::KeyFetch { peer, issued_at, proof } => {
                out.put_u8(if matches!(self, KeyMessage::JoinRequest { .. }) { 1 } else { 5 });
                out.put_id(&peer.0);
                out.put_u64(*issued_at);
                out.extend_from_slice(proof);
            }
            KeyMessage::JoinAccept { wrapped } => {
                out.put_u8(2);
                if let Some(w) = wrapped {
                    out.extend_from_slice(&w.to_bytes());
                }
            }
            KeyMessage::JoinReject { code } => {
                out.put_u8(3);
                out.put_u8(*code);
            }
            KeyMessage::KeyUpdate { wrapped } => {
                out.put_u8(4);
                out.extend_from_slice(&wrapped.to_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Format::Payload("key management"));
        let tag = r.u8()?;
        let msg = match tag {
            1 | 5 => {
                let peer = PeerId(r.id()?);
                let issued_at = r.u64()?;
                let proof = r.bytes(32)?.try_into().unwrap();
                if tag == 1 {
                    KeyMessage::JoinRequest { peer, issued_at, proof }
                } else {
                    KeyMessage::KeyFetch { peer, issued_at, proof }
                }
            }
            2 => {
                let rest = r.bytes(r.remaining())?;
                let wrapped = if rest.is_empty() { None } else { Some(EncryptedPayload::from_bytes(rest)?) };
                KeyMessage::JoinAccept { wrapped }
            }
            3 => KeyMessage::JoinReject { code: r.u8()? },
            4 => KeyMessage::KeyUpdate { wrapped: EncryptedPayload::from_bytes(r.bytes(r.remaining())?)? },
            _ => return Err(r.fail_at(0, "unknown key message")),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (GroupAuthority, ChaCha8Rng, PeerId) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GroupId::from_name(b"sensors", 16).unwrap();
        let auth = GroupAuthority::new(g, GroupPolicy::Secured, &mut rng);
        (auth, rng, PeerId::from_name(b"p", 16).unwrap())
    }

    #[test]
    fn round_trip_and_single_bit_tamper() {
        let (mut auth, mut rng, p) = setup();
        let key = auth.next_key(&mut rng);
        for len in [0usize, 1, 100, 65_536] {
            let plain: Vec<u8> = (0..len).map(|i| (i * 7) as u8).collect();
            let ct = group_encrypt(&key, &plain, sender_nonce(&p, len as u64));
            assert_eq!(group_decrypt(&key, &ct).unwrap(), plain);
        }
        let ct = group_encrypt(&key, b"reading=21.5", sender_nonce(&p, 1));
        for bit in 0..(ct.ciphertext.len() * 8) {
            let mut bad = ct.clone();
            bad.ciphertext[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(group_decrypt(&key, &bad), Err(Error::Tamper));
        }
        let mut bad_tag = ct.clone();
        bad_tag.tag[0] ^= 1;
        assert_eq!(group_decrypt(&key, &bad_tag), Err(Error::Tamper));
    }

    #[test]
    fn wire_layout() {
        let (mut auth, mut rng, p) = setup();
        let key = auth.next_key(&mut rng);
        let ct = group_encrypt(&key, b"abc", sender_nonce(&p, 9));
        let bytes = ct.to_bytes();
        assert_eq!(bytes.len(), 4 + 12 + 4 + 3 + 16);
        assert_eq!(&bytes[..4], &1u32.to_be_bytes());
        assert_eq!(EncryptedPayload::from_bytes(&bytes).unwrap(), ct);
    }

    #[test]
    fn credentials_verify_and_forgeries_fail() {
        let (mut auth, _, p) = setup();
        let cred = auth.issue(p, 100);
        assert!(auth.verify(&cred));
        let mut forged = cred.clone();
        forged.authenticator[5] ^= 0x80;
        assert!(!auth.verify(&forged));
        assert!(auth.admit(p, 100, &forged.join_proof()).is_err());
        assert!(auth.admit(p, 100, &cred.join_proof()).is_ok());
        assert_eq!(auth.check(p, 100, &cred.join_proof()), Some(cred.wrap_key()));
    }

    #[test]
    fn rotation_grace_window() {
        let (mut auth, mut rng, p) = setup();
        let mut ring = KeyRing::new(auth.group);
        let k1 = auth.next_key(&mut rng);
        ring.install(k1.clone(), 0);
        let old = group_encrypt(&k1, b"old", sender_nonce(&p, 1));
        let k2 = auth.next_key(&mut rng);
        assert!(k2.key_id > k1.key_id);
        ring.install(k2, 1_000);
        assert_eq!(ring.decrypt(&old, 1_000 + KEY_GRACE_MS - 1).unwrap(), b"old");
        assert!(matches!(ring.decrypt(&old, 1_000 + KEY_GRACE_MS), Err(Error::StaleKey { .. })));
        let mut ids = vec![];
        for _ in 0..3 {
            ids.push(auth.next_key(&mut rng).key_id);
        }
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn wrapped_key_needs_the_credential() {
        let (mut auth, mut rng, p) = setup();
        let cred = auth.issue(p, 5);
        let key = auth.next_key(&mut rng);
        let wrapped = wrap_group_key(&cred.wrap_key(), &key, [3; 12]);
        assert_eq!(unwrap_group_key(&cred.wrap_key(), &wrapped).unwrap(), key);
        let other = auth.issue(p, 6);
        assert!(unwrap_group_key(&other.wrap_key(), &wrapped).is_err());
    }

    #[test]
    fn key_messages_round_trip() {
        let (auth, _, p) = setup();
        let cred = auth.issue(p, 77);
        for m in [
            KeyMessage::JoinRequest { peer: p, issued_at: 77, proof: cred.join_proof() },
            KeyMessage::JoinAccept { wrapped: None },
            KeyMessage::JoinReject { code: 0x81 },
            KeyMessage::KeyFetch { peer: p, issued_at: 1, proof: [0; 32] },
        ] {
            assert_eq!(KeyMessage::decode(&m.encode()).unwrap(), m);
        }
    }

    #[test]
    fn parent_chain_detects_cycles() {
        let a = GroupId::from_name(b"a", 16).unwrap();
        let b = GroupId::from_name(b"b", 16).unwrap();
        let root = GroupId::from_name(b"root", 16).unwrap();
        let ok = parent_chain(b, |g| {
            Some(if *g == b { Some(a) } else if *g == a { Some(root) } else { None })
        })
        .unwrap();
        assert_eq!(ok, vec![b, a, root]);
        let cyc = parent_chain(b, |g| Some(Some(if *g == b { a } else { b })));
        assert!(cyc.is_err());
    }
}
