use thiserror::Error;

use crate::id::GroupId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the overlay stack can report.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid advertisement: {0}")]
    InvalidAdvertisement(String),

    #[error("malformed advertisement at byte {offset}: {reason}")]
    MalformedAdvertisement { offset: usize, reason: &'static str },

    #[error("malformed envelope at byte {offset}: {reason}")]
    MalformedEnvelope { offset: usize, reason: &'static str },

    #[error("malformed {what} payload at byte {offset}")]
    MalformedPayload { what: &'static str, offset: usize },

    #[error("ring unreachable: lookup timed out")]
    RingUnreachable,

    #[error("join failed: {0}")]
    Join(String),

    #[error("no reachable replica answered before the timeout")]
    NotFound,

    #[error("unauthorized: {0}")]
    Unauthorized(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("stale key: key id {key_id} is not held for group {group}")]
    StaleKey { group: GroupId, key_id: u32 },

    #[error("authentication failed: payload was tampered with")]
    Tamper,

    #[error("endpoint already registered: {0}")]
    DuplicateRegistration(String),

    #[error("no route to {0}")]
    Unreachable(String),

    #[error("stale route: relay has no attachment on segment {0}")]
    RouteStale(String),

    #[error("envelope of {0} bytes exceeds the 65536-byte transport limit")]
    TooLarge(usize),

    #[error("fragment error: {0}")]
    Fragment(&'static str),

    #[error("pipe binding failed: {0}")]
    Binding(String),

    #[error("path already served: {0}")]
    DuplicatePath(String),

    #[error("request timed out after retransmissions")]
    Timeout,

    #[error("request was reset by the peer")]
    Reset,

    #[error("scenario error at line {line}: {msg}")]
    Scenario { line: usize, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
