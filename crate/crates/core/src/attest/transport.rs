// SPDX-License-Identifier: Apache-2.0

//! Message transports. Both encode every message to bytes and decode it on
//! the other side, so the in-process bus exercises the same codec as the
//! loopback socket.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::{self, JoinHandle};

use super::flow::AttestError;
use super::messages::{Message, MAX_MESSAGE_LEN};
use super::{Pca, PcaError};

pub trait Transport {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, AttestError>;
}

fn decode(bytes: &[u8]) -> Result<Message, AttestError> {
    Message::decode(bytes).map_err(|e| AttestError::Protocol(e.to_string()))
}

/// Direct calls into a PCA owned by the caller.
pub struct InProcess<'a> {
    pca: &'a mut Pca,
}

impl<'a> InProcess<'a> {
    pub fn new(pca: &'a mut Pca) -> Self {
        InProcess { pca }
    }
}

impl Transport for InProcess<'_> {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, AttestError> {
        let request = decode(&msg.encode())?;
        let reply = self
            .pca
            .handle(request)
            .map_err(|e| AttestError::Protocol(e.to_string()))?;
        decode(&reply.encode())
    }
}

fn read_message(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 5];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(header[1..].try_into().expect("4 bytes")) as usize;
    if len > MAX_MESSAGE_LEN {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "message too large"));
    }
    let mut buf = header.to_vec();
    buf.resize(5 + len, 0);
    stream.read_exact(&mut buf[5..])?;
    Ok(Some(buf))
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: SocketAddr) -> Result<Self, AttestError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, msg: &Message) -> Result<Message, AttestError> {
        self.stream.write_all(&msg.encode())?;
        match read_message(&mut self.stream)? {
            Some(bytes) => decode(&bytes),
            None => Err(AttestError::Transport("PCA closed the connection".into())),
        }
    }
}

/// A PCA serving one loopback connection on its own thread. Joining hands
/// the PCA back.
pub struct LoopbackServer {
    addr: SocketAddr,
    handle: JoinHandle<Result<Pca, String>>,
}

impl LoopbackServer {
    pub fn spawn(mut pca: Pca) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let handle = thread::spawn(move || {
            let (mut stream, _) = listener.accept().map_err(|e| e.to_string())?;
            while let Some(bytes) = read_message(&mut stream).map_err(|e| e.to_string())? {
                let reply = match Message::decode(&bytes) {
                    Ok(msg) => pca.handle(msg),
                    Err(_) => Err(PcaError::Protocol(bytes[0])),
                };
                match reply {
                    Ok(m) => stream.write_all(&m.encode()).map_err(|e| e.to_string())?,
                    Err(e) => return Err(e.to_string()),
                }
            }
            Ok(pca)
        });
        Ok(LoopbackServer { addr, handle })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn join(self) -> Result<Pca, String> {
        self.handle.join().map_err(|_| "PCA thread panicked".to_string())?
    }
}
