//! Ring identifiers.
//!
//! Every peer, group, pipe and resource lives in one circular key space of
//! `m` bits. [`NodeId`] stores up to 160 bits and does all arithmetic modulo
//! `2^m`.

use std::cmp::Ordering;
use std::fmt;

use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

pub const MAX_BITS: u8 = 160;
/// Narrowest width accepted by [`hash_to_id`].
pub const MIN_HASH_BITS: u8 = 8;

/// An `m`-bit identifier on the ring.
///
/// Stored as a 32-bit high limb and a 128-bit low limb; `value < 2^m` always.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    bits: u8,
    hi: u32,
    lo: u128,
}

impl NodeId {
    /// Builds an identifier from a small value. Fails if `value >= 2^bits`.
    pub fn new(value: u128, bits: u8) -> Result<Self> {
        check_bits(bits, 1)?;
        let id = NodeId { bits, hi: 0, lo: value }.masked();
        if id.lo != value {
            return Err(Error::Config(format!("{value} does not fit in {bits} bits")));
        }
        Ok(id)
    }

    /// Zero on a ring of `bits` bits.
    pub fn zero(bits: u8) -> Self {
        assert!((1..=MAX_BITS).contains(&bits), "ring width out of range");
        NodeId { bits, hi: 0, lo: 0 }
    }

    /// Parses big-endian bytes; the ring width is `8 * bytes.len()`.
    pub fn from_be_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() || bytes.len() > 20 {
            return Err(Error::Config(format!("id of {} bytes", bytes.len())));
        }
        let mut hi = 0u32;
        let mut lo = 0u128;
        for &b in bytes {
            hi = (hi << 8) | (lo >> 120) as u32;
            lo = (lo << 8) | b as u128;
        }
        Ok(NodeId { bits: (bytes.len() * 8) as u8, hi, lo })
    }

    /// `ceil(m / 8)` big-endian bytes.
    /// Parses the hex form produced by `Display`.
    pub fn from_hex(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid hex id {s:?}"));
        if s.is_empty() || !s.len().is_multiple_of(2) {
            return Err(bad());
        }
        let bytes = (0..s.len())
            .step_by(2)
            .map(|i| s.get(i..i + 2).and_then(|h| u8::from_str_radix(h, 16).ok()).ok_or_else(bad))
            .collect::<Result<Vec<u8>>>()?;
        NodeId::from_be_bytes(&bytes)
    }

    pub fn to_be_bytes(&self) -> Vec<u8> {
        let n = self.byte_len();
        let mut full = [0u8; 20];
        full[..4].copy_from_slice(&self.hi.to_be_bytes());
        full[4..].copy_from_slice(&self.lo.to_be_bytes());
        full[20 - n..].to_vec()
    }

    pub fn byte_len(&self) -> usize {
        (self.bits as usize).div_ceil(8)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// The value when it fits in 128 bits.
    pub fn as_u128(&self) -> Option<u128> {
        (self.hi == 0).then_some(self.lo)
    }

    pub fn low_u32(&self) -> u32 {
        self.lo as u32
    }

    pub fn low_u64(&self) -> u64 {
        self.lo as u64
    }

    pub fn wrapping_add(&self, other: &NodeId) -> NodeId {
        debug_assert_eq!(self.bits, other.bits);
        let (lo, carry) = self.lo.overflowing_add(other.lo);
        let hi = self.hi.wrapping_add(other.hi).wrapping_add(carry as u32);
        NodeId { bits: self.bits, hi, lo }.masked()
    }

    pub fn wrapping_sub(&self, other: &NodeId) -> NodeId {
        debug_assert_eq!(self.bits, other.bits);
        let (lo, borrow) = self.lo.overflowing_sub(other.lo);
        let hi = self.hi.wrapping_sub(other.hi).wrapping_sub(borrow as u32);
        NodeId { bits: self.bits, hi, lo }.masked()
    }

    /// `self + 2^exp (mod 2^m)`; finger `i` (1-based) starts at `n.add_pow2(i - 1)`.
    pub fn add_pow2(&self, exp: u8) -> NodeId {
        let step = if exp >= self.bits {
            NodeId::zero(self.bits)
        } else if exp < 128 {
            NodeId { bits: self.bits, hi: 0, lo: 1u128 << exp }
        } else {
            NodeId { bits: self.bits, hi: 1u32 << (exp - 128), lo: 0 }
        };
        self.wrapping_add(&step)
    }

    /// Clockwise distance from `self` to `to`.
    pub fn distance_to(&self, to: &NodeId) -> NodeId {
        to.wrapping_sub(self)
    }

    fn masked(mut self) -> Self {
        let bits = self.bits as u32;
        if bits <= 128 {
            self.hi = 0;
            if bits < 128 {
                self.lo &= (1u128 << bits) - 1;
            }
        } else if bits - 128 < 32 {
            self.hi &= (1u32 << (bits - 128)) - 1;
        }
        self
    }

    fn shr(self, s: u32) -> Self {
        let (hi, lo) = match s {
            0 => (self.hi, self.lo),
            1..=127 => {
                let lo = (self.lo >> s) | ((self.hi as u128) << (128 - s));
                let hi = if s < 32 { self.hi >> s } else { 0 };
                (hi, lo)
            }
            128..=159 => (0, (self.hi >> (s - 128)) as u128),
            _ => (0, 0),
        };
        NodeId { bits: self.bits, hi, lo }
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.bits, self.hi, self.lo).cmp(&(other.bits, other.hi, other.lo))
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.to_be_bytes() {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_u128() {
            Some(v) if self.bits <= 64 => write!(f, "{v}/{}", self.bits),
            _ => write!(f, "0x{self}/{}", self.bits),
        }
    }
}

fn check_bits(bits: u8, min: u8) -> Result<()> {
    if bits < min || bits > MAX_BITS {
        return Err(Error::Config(format!(
            "ring width must be within {min}..={MAX_BITS} bits, got {bits}"
        )));
    }
    Ok(())
}

/// Top `m` bits of the SHA-1 digest of `data`, read big-endian.
pub fn hash_to_id(data: &[u8], m: u8) -> Result<NodeId> {
    check_bits(m, MIN_HASH_BITS)?;
    let digest = Sha1::digest(data);
    let full = NodeId::from_be_bytes(&digest)?;
    let shifted = full.shr(160 - m as u32);
    Ok(NodeId { bits: m, ..shifted })
}

/// Endpoint openness of a circular interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Openness {
    /// `(a, b)`
    OpenOpen,
    /// `(a, b]`
    OpenClosed,
}

/// Circular interval membership.
///
/// When `a == b`, `(a, a)` is the whole ring except `a` and `(a, a]` is the
/// whole ring.
pub fn in_interval(x: &NodeId, a: &NodeId, b: &NodeId, openness: Openness) -> bool {
    let dx = a.distance_to(x);
    let db = a.distance_to(b);
    let zero = NodeId::zero(a.bits);
    if a == b {
        return match openness {
            Openness::OpenOpen => x != a,
            Openness::OpenClosed => true,
        };
    }
    match openness {
        Openness::OpenOpen => dx > zero && dx < db,
        Openness::OpenClosed => dx > zero && dx <= db,
    }
}

macro_rules! role_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub NodeId);

        impl $name {
            /// Derives the id from a canonical name.
            pub fn from_name(name: &[u8], m: u8) -> Result<Self> {
                hash_to_id(name, m).map($name)
            }

            pub fn id(&self) -> NodeId {
                self.0
            }
        }

        impl From<NodeId> for $name {
            fn from(id: NodeId) -> Self {
                $name(id)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(&self.0, f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:?})", stringify!($name), self.0)
            }
        }
    };
}

role_id!(
    /// A peer's position on every ring it participates in.
    PeerId
);
role_id!(
    /// A peergroup; also the scope prefix of every discovery key inside it.
    GroupId
);
role_id!(
    /// A pipe or a served resource.
    ResourceId
);

/// The DHT key for `name` published inside `scope`: `hash(scope ‖ name)`.
pub fn scoped_key(scope: &GroupId, name: &[u8]) -> Result<NodeId> {
    let mut data = scope.0.to_be_bytes();
    data.extend_from_slice(name);
    hash_to_id(&data, scope.0.bits())
}

/// Name of the implicit root ("net") group.
pub const ROOT_GROUP_NAME: &str = "root";

pub fn root_group(m: u8) -> Result<GroupId> {
    GroupId::from_name(ROOT_GROUP_NAME.as_bytes(), m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(v: u128, m: u8) -> NodeId {
        NodeId::new(v, m).unwrap()
    }

    #[test]
    fn hash_known_digests() {
        // SHA-1("") = da39a3ee..., SHA-1("abc") = a9993e36...
        assert_eq!(hash_to_id(b"", 8).unwrap(), id(0xDA, 8));
        assert_eq!(hash_to_id(b"abc", 8).unwrap(), id(0xA9, 8));
        assert_eq!(hash_to_id(b"abc", 16).unwrap(), id(0xA999, 16));
        let full = hash_to_id(b"abc", 160).unwrap();
        assert_eq!(full.to_string(), "a9993e364706816aba3e25717850c26c9cd0d89d");
    }

    #[test]
    fn hash_rejects_bad_width() {
        assert!(matches!(hash_to_id(b"x", 7), Err(Error::Config(_))));
        assert!(matches!(hash_to_id(b"x", 161), Err(Error::Config(_))));
    }

    #[test]
    fn interval_examples() {
        use Openness::*;
        assert!(in_interval(&id(3, 8), &id(1, 8), &id(5, 8), OpenOpen));
        assert!(in_interval(&id(1, 8), &id(250, 8), &id(5, 8), OpenClosed));
        assert!(!in_interval(&id(250, 8), &id(250, 8), &id(250, 8), OpenOpen));
        assert!(in_interval(&id(7, 8), &id(250, 8), &id(250, 8), OpenOpen));
        assert!(!in_interval(&id(5, 8), &id(1, 8), &id(5, 8), OpenOpen));
        assert!(in_interval(&id(5, 8), &id(1, 8), &id(5, 8), OpenClosed));
    }

    #[test]
    fn arithmetic_wraps() {
        assert_eq!(id(250, 8).wrapping_add(&id(10, 8)), id(4, 8));
        assert_eq!(id(3, 8).wrapping_sub(&id(5, 8)), id(254, 8));
        assert_eq!(id(200, 8).add_pow2(7), id(72, 8));
        assert_eq!(id(1, 8).add_pow2(8), id(1, 8));
        let top = hash_to_id(b"abc", 160).unwrap();
        assert_eq!(top.add_pow2(159).add_pow2(159), top);
    }

    #[test]
    fn byte_round_trip() {
        let a = hash_to_id(b"peer", 64).unwrap();
        assert_eq!(NodeId::from_be_bytes(&a.to_be_bytes()).unwrap(), a);
        let b = hash_to_id(b"peer", 160).unwrap();
        assert_eq!(NodeId::from_be_bytes(&b.to_be_bytes()).unwrap(), b);
        assert!(NodeId::new(256, 8).is_err());
    }

    #[test]
    fn hash_spreads_over_buckets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut buckets = [0u32; 256];
        for _ in 0..10_000 {
            let name: [u8; 12] = rng.gen();
            let v = hash_to_id(&name, 16).unwrap().as_u128().unwrap();
            buckets[(v >> 8) as usize] += 1;
        }
        let mean = 10_000.0 / 256.0;
        let max = *buckets.iter().max().unwrap() as f64;
        assert!(max <= 5.0 * mean, "max bucket {max}");
    }
}
