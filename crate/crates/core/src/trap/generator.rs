//! Application-side virtual socket API.

use std::io;
use std::net::SocketAddrV4;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::wire::{HandleKind, TrapOp, TrapReply, TrapRequest, TrapStatus};
use crate::codec::DecodeError;

#[derive(Debug, Error)]
pub enum TrapError {
    #[error("{0:?}")]
    Status(TrapStatus),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad reply: {0}")]
    Decode(#[from] DecodeError),
    #[error("reply announced a handle but none arrived")]
    MissingHandle,
}

impl TrapError {
    pub fn status(&self) -> Option<TrapStatus> {
        match self {
            TrapError::Status(s) => Some(*s),
            _ => None,
        }
    }
}

/// Carries one encoded request to the handler and returns the encoded reply,
/// plus the connection handle if one travelled with it.
pub trait TrapTransport {
    type Conn;
    fn exchange(&mut self, request: &[u8]) -> io::Result<(Vec<u8>, Option<Self::Conn>)>;
}

pub struct Generator<T: TrapTransport> {
    transport: T,
    /// Trap round trips made so far.
    pub messages: u64,
}

type Result<T> = std::result::Result<T, TrapError>;

impl<T: TrapTransport> Generator<T> {
    pub fn new(transport: T) -> Self {
        Generator {
            transport,
            messages: 0,
        }
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn call(&mut self, req: &TrapRequest) -> Result<(TrapReply, Option<T::Conn>)> {
        self.messages += 1;
        let (bytes, conn) = self.transport.exchange(&req.encode())?;
        let reply = TrapReply::decode(&bytes)?;
        if reply.status != TrapStatus::Ok {
            return Err(TrapError::Status(reply.status));
        }
        if reply.transfer && conn.is_none() {
            return Err(TrapError::MissingHandle);
        }
        Ok((reply, conn))
    }

    pub fn socket(&mut self, kind: HandleKind) -> Result<u32> {
        Ok(self.call(&TrapRequest::socket(kind))?.0.handle)
    }

    /// Bind to a service port; returns the virtual address actually bound.
    pub fn bind(&mut self, h: u32, addr: SocketAddrV4) -> Result<SocketAddrV4> {
        let (r, _) = self.call(&TrapRequest::new(TrapOp::Bind, h).with_addr(addr))?;
        r.addr.ok_or(TrapError::Decode(DecodeError::Malformed("bind reply")))
    }

    pub fn listen(&mut self, h: u32) -> Result<()> {
        self.call(&TrapRequest::new(TrapOp::Listen, h)).map(|_| ())
    }

    /// Connect a stream handle; the connected stream comes back.
    pub fn connect(&mut self, h: u32, addr: SocketAddrV4) -> Result<T::Conn> {
        let (_, c) = self.call(&TrapRequest::new(TrapOp::Connect, h).with_addr(addr))?;
        c.ok_or(TrapError::MissingHandle)
    }

    /// Pin a datagram handle to a peer.
    pub fn connect_dgram(&mut self, h: u32, addr: SocketAddrV4) -> Result<()> {
        self.call(&TrapRequest::new(TrapOp::Connect, h).with_addr(addr))
            .map(|_| ())
    }

    /// Non-blocking accept: `None` when nothing is pending.
    pub fn try_accept(&mut self, h: u32) -> Result<Option<(u32, T::Conn, SocketAddrV4)>> {
        match self.call(&TrapRequest::new(TrapOp::Accept, h)) {
            Ok((r, Some(c))) => Ok(Some((r.handle, c, r.addr.unwrap_or(unspecified())))),
            Ok((_, None)) => Err(TrapError::MissingHandle),
            Err(TrapError::Status(TrapStatus::WouldBlock)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Accept, polling until `timeout`.
    pub fn accept(&mut self, h: u32, timeout: Duration) -> Result<(u32, T::Conn, SocketAddrV4)> {
        poll(timeout, || self.try_accept(h))
    }

    pub fn sockname(&mut self, h: u32) -> Result<Option<SocketAddrV4>> {
        Ok(self.call(&TrapRequest::new(TrapOp::GetSockName, h))?.0.addr)
    }

    pub fn peername(&mut self, h: u32) -> Result<SocketAddrV4> {
        let (r, _) = self.call(&TrapRequest::new(TrapOp::GetPeerName, h))?;
        r.addr.ok_or(TrapError::Status(TrapStatus::NotConnected))
    }

    pub fn sendto(&mut self, h: u32, addr: SocketAddrV4, payload: &[u8]) -> Result<usize> {
        let req = TrapRequest::new(TrapOp::SendTo, h)
            .with_addr(addr)
            .with_payload(payload.to_vec());
        self.call(&req)?;
        Ok(payload.len())
    }

    pub fn try_recvfrom(&mut self, h: u32) -> Result<Option<(SocketAddrV4, Vec<u8>)>> {
        match self.call(&TrapRequest::new(TrapOp::RecvFrom, h)) {
            Ok((r, _)) => Ok(Some((r.addr.unwrap_or(unspecified()), r.payload))),
            Err(TrapError::Status(TrapStatus::WouldBlock)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn recvfrom(&mut self, h: u32, timeout: Duration) -> Result<(SocketAddrV4, Vec<u8>)> {
        poll(timeout, || self.try_recvfrom(h))
    }

    pub fn close(&mut self, h: u32) -> Result<()> {
        self.call(&TrapRequest::new(TrapOp::Close, h)).map(|_| ())
    }
}

fn unspecified() -> SocketAddrV4 {
    SocketAddrV4::new(std::net::Ipv4Addr::UNSPECIFIED, 0)
}

fn poll<R>(timeout: Duration, mut f: impl FnMut() -> Result<Option<R>>) -> Result<R> {
    let t0 = Instant::now();
    let mut wait = Duration::from_micros(200);
    loop {
        if let Some(r) = f()? {
            return Ok(r);
        }
        if t0.elapsed() >= timeout {
            return Err(TrapError::Status(TrapStatus::WouldBlock));
        }
        thread::sleep(wait);
        wait = (wait * 2).min(Duration::from_millis(10));
    }
}
