//! Heterogeneous transports: endpoint addressing, link profiles,
//! fragmentation for small-MTU links and multi-segment route resolution.

mod fragment;
mod route;
pub mod tcp;

use std::fmt;

pub use fragment::{fragment, fragment_count, Fragment, Reassembler, FRAGMENT_HEADER_LEN};
pub use route::{resolve_route, Directory, RouteEntry};

use crate::error::{Error, Result};

/// Largest encoded envelope a transport accepts.
pub const MAX_ENVELOPE_BYTES: usize = 1 << 16;

/// Reassembly buffers are discarded this long after their first fragment.
pub const REASSEMBLY_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TransportKind {
    /// In-memory broadband segment (Ethernet/Wi-Fi class).
    Mem = 1,
    Tcp = 2,
    /// Simulated narrowband segment (6LoWPAN or RFCOMM class).
    NarrowSim = 3,
}

impl TransportKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(TransportKind::Mem),
            2 => Some(TransportKind::Tcp),
            3 => Some(TransportKind::NarrowSim),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TransportKind::Mem => "mem",
            TransportKind::Tcp => "tcp",
            TransportKind::NarrowSim => "narrow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mem" => Some(TransportKind::Mem),
            "tcp" => Some(TransportKind::Tcp),
            "narrow" | "narrowsim" => Some(TransportKind::NarrowSim),
            _ => None,
        }
    }
}

/// One attachment point of one peer.
///
/// Simulated kinds use `"<segment>/<label>"`; Tcp uses `"host:port"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointAddress {
    pub kind: TransportKind,
    pub address: String,
}

impl EndpointAddress {
    pub fn new(kind: TransportKind, address: impl Into<String>) -> Self {
        EndpointAddress { kind, address: address.into() }
    }

    pub fn sim(kind: TransportKind, segment: &str, label: &str) -> Self {
        EndpointAddress::new(kind, format!("{segment}/{label}"))
    }

    /// Segment name for simulated kinds.
    pub fn segment(&self) -> Option<&str> {
        match self.kind {
            TransportKind::Tcp => None,
            _ => self.address.split_once('/').map(|(s, _)| s),
        }
    }
}

impl fmt::Display for EndpointAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.address)
    }
}

/// Delay and loss model of one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProfile {
    /// Bytes per second.
    pub bandwidth: u64,
    /// One-way latency in milliseconds.
    pub latency_ms: u64,
    pub mtu: usize,
    pub loss_rate: f64,
}

impl LinkProfile {
    pub const MIN_MTU: usize = 32;

    pub fn new(bandwidth: u64, latency_ms: u64, mtu: usize, loss_rate: f64) -> Result<Self> {
        let p = LinkProfile { bandwidth, latency_ms, mtu, loss_rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mtu < Self::MIN_MTU {
            return Err(Error::Config(format!("mtu {} below {}", self.mtu, Self::MIN_MTU)));
        }
        if self.bandwidth == 0 {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(Error::Config(format!("loss rate {} outside [0,1]", self.loss_rate)));
        }
        Ok(())
    }

    /// Switched 100 Mbit/s LAN segment.
    pub fn broadband() -> Self {
        LinkProfile { bandwidth: 12_500_000, latency_ms: 1, mtu: 1500, loss_rate: 0.0 }
    }

    /// 6LoWPAN-class: 127-byte frames at 20 kbit/s.
    pub fn lowpan() -> Self {
        LinkProfile { bandwidth: 2_500, latency_ms: 15, mtu: 127, loss_rate: 0.0 }
    }

    /// Bluetooth RFCOMM-class: 1024-byte frames at 200 kbit/s.
    pub fn rfcomm() -> Self {
        LinkProfile { bandwidth: 25_000, latency_ms: 30, mtu: 1024, loss_rate: 0.0 }
    }

    pub fn with_loss(mut self, loss_rate: f64) -> Self {
        self.loss_rate = loss_rate;
        self
    }

    /// Milliseconds to serialize `bytes` onto the link, rounded up.
    pub fn serialization_ms(&self, bytes: u64) -> u64 {
        (bytes * 1000).div_ceil(self.bandwidth)
    }
}
