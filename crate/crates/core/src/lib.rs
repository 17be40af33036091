pub mod advertisement;
pub mod chord;
pub mod coap;
pub mod envelope;
pub mod error;
pub mod group;
pub mod id;
pub mod pipe;
pub mod sim;
pub mod bench;
pub mod transport;
mod wire;

pub use error::{Error, Result};
