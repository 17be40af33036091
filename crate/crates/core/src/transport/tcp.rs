//! Loopback TCP adapter: envelopes travel as `u32` length-prefixed frames,
//! one connection per send.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use crate::envelope::{decode_envelope, encode_envelope, MessageEnvelope};
use crate::error::{Error, Result};
use crate::transport::{EndpointAddress, TransportKind, MAX_ENVELOPE_BYTES};

pub struct TcpAdapter {
    addr: SocketAddr,
    inbox: Receiver<MessageEnvelope>,
}

impl TcpAdapter {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts accepting.
    pub fn bind(addr: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let (tx, inbox) = mpsc::channel();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let tx = tx.clone();
                thread::spawn(move || {
                    while let Ok(Some(env)) = read_frame(&mut stream) {
                        if tx.send(env).is_err() {
                            return;
                        }
                    }
                });
            }
        });
        Ok(TcpAdapter { addr, inbox })
    }

    pub fn endpoint(&self) -> EndpointAddress {
        EndpointAddress::new(TransportKind::Tcp, self.addr.to_string())
    }

    pub fn send(&self, to: &EndpointAddress, env: &MessageEnvelope) -> Result<()> {
        if to.kind != TransportKind::Tcp {
            return Err(Error::Unreachable(format!("{to} is not a tcp endpoint")));
        }
        let bytes = encode_envelope(env)?;
        if bytes.len() > MAX_ENVELOPE_BYTES + 1024 {
            return Err(Error::TooLarge(bytes.len()));
        }
        let mut stream = TcpStream::connect(&to.address)?;
        stream.write_all(&(bytes.len() as u32).to_be_bytes())?;
        stream.write_all(&bytes)?;
        Ok(())
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<MessageEnvelope> {
        self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Timeout,
            RecvTimeoutError::Disconnected => Error::Io("listener stopped".into()),
        })
    }
}

fn read_frame(stream: &mut TcpStream) -> Result<Option<MessageEnvelope>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_ENVELOPE_BYTES + 1024 {
        return Err(Error::TooLarge(len));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    decode_envelope(&buf).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::PayloadKind;
    use crate::id::{GroupId, PeerId};

    #[test]
    fn loopback_delivers_envelope() {
        let a = TcpAdapter::bind("127.0.0.1:0").unwrap();
        let m = 16;
        let env = MessageEnvelope::new(
            PayloadKind::PIPE_DATA,
            PeerId::from_name(b"x", m).unwrap(),
            PeerId::from_name(b"y", m).unwrap().0,
            GroupId::from_name(b"root", m).unwrap(),
            b"hello".to_vec(),
        );
        a.send(&a.endpoint(), &env).unwrap();
        assert_eq!(a.recv_timeout(Duration::from_secs(5)).unwrap(), env);
    }
}
