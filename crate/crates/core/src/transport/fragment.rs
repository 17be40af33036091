use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// envelope_id u32, index u16, total u16.
pub const FRAGMENT_HEADER_LEN: usize = 8;

/// One link-sized slice of an encoded envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub envelope_id: u32,
    pub index: u16,
    pub total: u16,
    pub payload: Vec<u8>,
}

impl Fragment {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAGMENT_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.envelope_id.to_be_bytes());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.total.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FRAGMENT_HEADER_LEN {
            return Err(Error::Fragment("frame shorter than fragment header"));
        }
        let envelope_id = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let index = u16::from_be_bytes(bytes[4..6].try_into().unwrap());
        let total = u16::from_be_bytes(bytes[6..8].try_into().unwrap());
        if total == 0 || index >= total {
            return Err(Error::Fragment("fragment index out of range"));
        }
        Ok(Fragment { envelope_id, index, total, payload: bytes[FRAGMENT_HEADER_LEN..].to_vec() })
    }

    pub fn wire_len(&self) -> usize {
        FRAGMENT_HEADER_LEN + self.payload.len()
    }
}

/// Number of fragments `len` bytes need on a link of the given MTU.
pub fn fragment_count(len: usize, mtu: usize) -> usize {
    len.div_ceil(mtu - FRAGMENT_HEADER_LEN).max(1)
}

/// Splits an encoded envelope into MTU-sized fragments.
pub fn fragment(envelope_id: u32, data: &[u8], mtu: usize) -> Result<Vec<Fragment>> {
    if mtu <= FRAGMENT_HEADER_LEN {
        return Err(Error::Fragment("mtu cannot carry a fragment header"));
    }
    let chunk = mtu - FRAGMENT_HEADER_LEN;
    let total = fragment_count(data.len(), mtu);
    let total = u16::try_from(total).map_err(|_| Error::Fragment("too many fragments"))?;
    if data.is_empty() {
        return Ok(vec![Fragment { envelope_id, index: 0, total: 1, payload: Vec::new() }]);
    }
    Ok(data
        .chunks(chunk)
        .enumerate()
        .map(|(i, c)| Fragment { envelope_id, index: i as u16, total, payload: c.to_vec() })
        .collect())
}

#[derive(Debug)]
struct Partial {
    total: u16,
    parts: BTreeMap<u16, Vec<u8>>,
    started_at: u64,
}

/// Collects fragments per `(sender, envelope_id)` until every index arrived.
#[derive(Debug)]
pub struct Reassembler<K> {
    partial: BTreeMap<(K, u32), Partial>,
    timeout_ms: u64,
}

impl<K: Ord + Clone> Reassembler<K> {
    pub fn new(timeout_ms: u64) -> Self {
        Reassembler { partial: BTreeMap::new(), timeout_ms }
    }

    /// Returns the full byte sequence once the last missing fragment arrives.
    /// Duplicate indices are ignored; a fragment whose `total` disagrees with
    /// the buffer is rejected.
    pub fn insert(&mut self, sender: K, frag: Fragment, now: u64) -> Result<Option<Vec<u8>>> {
        if frag.total == 1 {
            return Ok(Some(frag.payload));
        }
        let key = (sender, frag.envelope_id);
        let entry = self.partial.entry(key.clone()).or_insert_with(|| Partial {
            total: frag.total,
            parts: BTreeMap::new(),
            started_at: now,
        });
        if entry.total != frag.total {
            return Err(Error::Fragment("total mismatch within one envelope"));
        }
        entry.parts.entry(frag.index).or_insert(frag.payload);
        if entry.parts.len() < entry.total as usize {
            return Ok(None);
        }
        let done = self.partial.remove(&key).unwrap();
        Ok(Some(done.parts.into_values().flatten().collect()))
    }

    /// Drops buffers older than the reassembly timeout; returns how many.
    pub fn expire(&mut self, now: u64) -> usize {
        let before = self.partial.len();
        let timeout = self.timeout_ms;
        self.partial.retain(|_, p| now < p.started_at + timeout);
        before - self.partial.len()
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    /// Earliest instant at which [`Reassembler::expire`] would drop something.
    pub fn next_deadline(&self) -> Option<u64> {
        self.partial.values().map(|p| p.started_at + self.timeout_ms).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_header_arithmetic() {
        // 56 payload bytes per fragment at MTU 64.
        assert_eq!(fragment(1, &[0u8; 300], 64).unwrap().len(), 6);
        assert_eq!(fragment(1, &[0u8; 150], 64).unwrap().len(), 3);
        assert_eq!(fragment(1, &[0u8; 150], 256).unwrap().len(), 1);
        assert_eq!(fragment(1, &[0u8; 56], 64).unwrap().len(), 1);
        assert_eq!(fragment(1, &[0u8; 57], 64).unwrap().len(), 2);
    }

    #[test]
    fn wire_round_trip_and_bad_index() {
        let f = Fragment { envelope_id: 9, index: 2, total: 3, payload: vec![1, 2, 3] };
        assert_eq!(Fragment::from_bytes(&f.to_bytes()).unwrap(), f);
        let mut bad = f.to_bytes();
        bad[5] = 3;
        assert!(Fragment::from_bytes(&bad).is_err());
    }

    #[test]
    fn missing_fragment_never_completes_and_times_out() {
        let data: Vec<u8> = (0..200u8).collect();
        let frags = fragment(7, &data, 64).unwrap();
        let mut r = Reassembler::<u8>::new(5_000);
        for f in frags.iter().skip(1) {
            assert_eq!(r.insert(0, f.clone(), 10).unwrap(), None);
        }
        assert_eq!(r.expire(5_009), 0);
        assert_eq!(r.expire(5_010), 1);
        assert_eq!(r.pending(), 0);
    }

    #[test]
    fn duplicates_are_ignored() {
        let data: Vec<u8> = (0..120u8).collect();
        let frags = fragment(3, &data, 64).unwrap();
        let mut r = Reassembler::<u8>::new(5_000);
        assert_eq!(r.insert(0, frags[0].clone(), 0).unwrap(), None);
        assert_eq!(r.insert(0, frags[0].clone(), 0).unwrap(), None);
        assert_eq!(r.insert(0, frags[2].clone(), 0).unwrap(), None);
        assert_eq!(r.insert(0, frags[1].clone(), 0).unwrap(), Some(data));
    }
}
