//! Trap request/reply framing.
//!
//! ```text
//! request: version:u8 | op:u8 | handle:u32 | ip:[u8;4] port:u16 | len:u32 | payload
//! reply:   version:u8 | status:u8 | op:u8 | flags:u8 | handle:u32 | ip port | len:u32 | payload
//! ```
//!
//! The address field is always present on the wire and must be zero for ops
//! that carry no endpoint. `Socket` puts the handle kind in the handle field.
//! Reply flag bit 0 says a connection handle travels alongside the frame.

use std::net::{Ipv4Addr, SocketAddrV4};

use crate::codec::{DecodeError, Reader, Writer};

pub const TRAP_VERSION: u8 = 0x01;
pub const REQUEST_HEADER: usize = 16;
pub const REPLY_HEADER: usize = 18;
/// Largest datagram payload an application may send.
pub const MAX_DGRAM: usize = 60_000;
/// Frames larger than this are rejected outright.
pub const MAX_FRAME_PAYLOAD: usize = 1 << 20;
const FLAG_TRANSFER: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapOp {
    Socket,
    Bind,
    Listen,
    Connect,
    Accept,
    GetSockName,
    GetPeerName,
    SendTo,
    RecvFrom,
    Close,
}

impl TrapOp {
    pub const ALL: [TrapOp; 10] = [
        TrapOp::Socket,
        TrapOp::Bind,
        TrapOp::Listen,
        TrapOp::Connect,
        TrapOp::Accept,
        TrapOp::GetSockName,
        TrapOp::GetPeerName,
        TrapOp::SendTo,
        TrapOp::RecvFrom,
        TrapOp::Close,
    ];

    pub fn code(self) -> u8 {
        match self {
            TrapOp::Socket => 1,
            TrapOp::Bind => 2,
            TrapOp::Listen => 3,
            TrapOp::Connect => 4,
            TrapOp::Accept => 5,
            TrapOp::GetSockName => 6,
            TrapOp::GetPeerName => 7,
            TrapOp::SendTo => 8,
            TrapOp::RecvFrom => 9,
            TrapOp::Close => 10,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, DecodeError> {
        TrapOp::ALL
            .iter()
            .copied()
            .find(|op| op.code() == c)
            .ok_or(DecodeError::UnknownCode(c))
    }

    /// Ops whose request names an endpoint.
    pub fn carries_addr(self) -> bool {
        matches!(self, TrapOp::Bind | TrapOp::Connect | TrapOp::SendTo)
    }

    pub fn carries_payload(self) -> bool {
        self == TrapOp::SendTo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandleKind {
    Stream,
    Datagram,
}

impl HandleKind {
    pub fn code(self) -> u32 {
        match self {
            HandleKind::Stream => 1,
            HandleKind::Datagram => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(HandleKind::Stream),
            2 => Some(HandleKind::Datagram),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapStatus {
    Ok,
    WouldBlock,
    NoSuchService,
    Denied,
    ConnRefused,
    AddrInUse,
    Unidentified,
    NotConnected,
    MessageTooLong,
    BadHandle,
    InvalidState,
    AttachFailed,
    Internal,
}

impl TrapStatus {
    const ALL: [TrapStatus; 13] = [
        TrapStatus::Ok,
        TrapStatus::WouldBlock,
        TrapStatus::NoSuchService,
        TrapStatus::Denied,
        TrapStatus::ConnRefused,
        TrapStatus::AddrInUse,
        TrapStatus::Unidentified,
        TrapStatus::NotConnected,
        TrapStatus::MessageTooLong,
        TrapStatus::BadHandle,
        TrapStatus::InvalidState,
        TrapStatus::AttachFailed,
        TrapStatus::Internal,
    ];

    pub fn code(self) -> u8 {
        TrapStatus::ALL.iter().position(|s| *s == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Result<Self, DecodeError> {
        TrapStatus::ALL
            .get(c as usize)
            .copied()
            .ok_or(DecodeError::UnknownCode(c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapRequest {
    pub op: TrapOp,
    /// Handle id, or the handle kind code for `Socket`.
    pub handle: u32,
    pub addr: Option<SocketAddrV4>,
    pub payload: Vec<u8>,
}

impl TrapRequest {
    pub fn new(op: TrapOp, handle: u32) -> Self {
        TrapRequest {
            op,
            handle,
            addr: None,
            payload: Vec::new(),
        }
    }

    pub fn socket(kind: HandleKind) -> Self {
        Self::new(TrapOp::Socket, kind.code())
    }

    pub fn with_addr(mut self, addr: SocketAddrV4) -> Self {
        self.addr = Some(addr);
        self
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(TRAP_VERSION).u8(self.op.code()).u32(self.handle);
        write_addr(&mut w, self.addr);
        w.u32(self.payload.len() as u32).bytes(&self.payload);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = r.u8()?;
        if v != TRAP_VERSION {
            return Err(DecodeError::Version(v));
        }
        let op = TrapOp::from_code(r.u8()?)?;
        let handle = r.u32()?;
        let addr = read_addr(&mut r)?;
        let addr = match (op.carries_addr(), addr) {
            (true, a) => Some(a.unwrap_or(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0))),
            (false, None) => None,
            (false, Some(_)) => return Err(DecodeError::Malformed("address on addressless op")),
        };
        let payload = read_payload(&mut r)?;
        if !op.carries_payload() && !payload.is_empty() {
            return Err(DecodeError::Malformed("payload on control op"));
        }
        r.finish()?;
        Ok(TrapRequest {
            op,
            handle,
            addr,
            payload,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapReply {
    pub status: TrapStatus,
    pub op: TrapOp,
    /// A connection handle accompanies this reply.
    pub transfer: bool,
    pub handle: u32,
    pub addr: Option<SocketAddrV4>,
    pub payload: Vec<u8>,
}

impl TrapReply {
    pub fn ok(op: TrapOp, handle: u32) -> Self {
        TrapReply {
            status: TrapStatus::Ok,
            op,
            transfer: false,
            handle,
            addr: None,
            payload: Vec::new(),
        }
    }

    pub fn err(op: TrapOp, handle: u32, status: TrapStatus) -> Self {
        TrapReply {
            status,
            ..Self::ok(op, handle)
        }
    }

    pub fn with_addr(mut self, addr: SocketAddrV4) -> Self {
        self.addr = Some(addr);
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(TRAP_VERSION)
            .u8(self.status.code())
            .u8(self.op.code())
            .u8(if self.transfer { FLAG_TRANSFER } else { 0 })
            .u32(self.handle);
        write_addr(&mut w, self.addr);
        w.u32(self.payload.len() as u32).bytes(&self.payload);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = r.u8()?;
        if v != TRAP_VERSION {
            return Err(DecodeError::Version(v));
        }
        let status = TrapStatus::from_code(r.u8()?)?;
        let op = TrapOp::from_code(r.u8()?)?;
        let flags = r.u8()?;
        if flags & !FLAG_TRANSFER != 0 {
            return Err(DecodeError::Malformed("reply flags"));
        }
        let transfer = flags & FLAG_TRANSFER != 0;
        if transfer && !(status == TrapStatus::Ok && matches!(op, TrapOp::Connect | TrapOp::Accept))
        {
            return Err(DecodeError::Malformed("transfer on non-connection reply"));
        }
        let handle = r.u32()?;
        let addr = read_addr(&mut r)?;
        let payload = read_payload(&mut r)?;
        r.finish()?;
        Ok(TrapReply {
            status,
            op,
            transfer,
            handle,
            addr,
            payload,
        })
    }
}

fn write_addr(w: &mut Writer, addr: Option<SocketAddrV4>) {
    let a = addr.unwrap_or(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0));
    w.ip(*a.ip()).u16(a.port());
}

/// An all-zero address field reads as absent.
fn read_addr(r: &mut Reader<'_>) -> Result<Option<SocketAddrV4>, DecodeError> {
    let ip = r.ip()?;
    let port = r.u16()?;
    Ok((!ip.is_unspecified() || port != 0).then(|| SocketAddrV4::new(ip, port)))
}

fn read_payload(r: &mut Reader<'_>) -> Result<Vec<u8>, DecodeError> {
    let n = r.u32()? as usize;
    if n > MAX_FRAME_PAYLOAD {
        return Err(DecodeError::Malformed("payload length"));
    }
    Ok(r.take(n)?.to_vec())
}

/// Payload length announced by a complete request or reply header.
pub fn payload_len(header: &[u8]) -> Result<usize, DecodeError> {
    let at = match header.len() {
        REQUEST_HEADER => 12,
        REPLY_HEADER => 14,
        _ => return Err(DecodeError::Truncated),
    };
    let n = u32::from_be_bytes(header[at..at + 4].try_into().unwrap()) as usize;
    if n > MAX_FRAME_PAYLOAD {
        return Err(DecodeError::Malformed("payload length"));
    }
    Ok(n)
}
