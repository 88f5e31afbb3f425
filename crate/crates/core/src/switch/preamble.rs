//! Client identity header sent ahead of every managed remote stream and
//! every managed datagram.
//!
//! `magic:u32 = 0x41535057 ("ASPW") | version:u8 | client vip:[u8;4] | client port:u16`

use std::net::{Ipv4Addr, SocketAddrV4};

use crate::codec::{DecodeError, Reader, Writer};

pub const PREAMBLE_MAGIC: u32 = 0x4153_5057;
pub const PREAMBLE_VERSION: u8 = 0x01;
pub const PREAMBLE_LEN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Preamble {
    pub client: SocketAddrV4,
}

impl Preamble {
    pub fn new(vip: Ipv4Addr, port: u16) -> Self {
        Preamble {
            client: SocketAddrV4::new(vip, port),
        }
    }

    pub fn encode(&self) -> [u8; PREAMBLE_LEN] {
        let mut w = Writer::new();
        w.u32(PREAMBLE_MAGIC)
            .u8(PREAMBLE_VERSION)
            .ip(*self.client.ip())
            .u16(self.client.port());
        w.as_slice().try_into().expect("fixed-size header")
    }

    pub fn decode(bytes: &[u8; PREAMBLE_LEN]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.u32()? != PREAMBLE_MAGIC {
            return Err(DecodeError::Malformed("preamble magic"));
        }
        let v = r.u8()?;
        if v != PREAMBLE_VERSION {
            return Err(DecodeError::Version(v));
        }
        Ok(Preamble::new(r.ip()?, r.u16()?))
    }

    /// Split a datagram into its identity header and payload.
    pub fn split(datagram: &[u8]) -> Option<(Preamble, &[u8])> {
        if datagram.len() < PREAMBLE_LEN {
            return None;
        }
        let (head, rest) = datagram.split_at(PREAMBLE_LEN);
        let p = Preamble::decode(head.try_into().unwrap()).ok()?;
        Some((p, rest))
    }
}
