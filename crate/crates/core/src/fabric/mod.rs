//! Transport underneath the switch. The simulated fabric is an in-memory,
//! single-threaded network; the real fabric uses host sockets.

pub mod real;
pub mod sim;

use std::io;
use std::net::Ipv4Addr;

use crate::model::RealEndpoint;
use crate::switch::preamble::Preamble;

/// Outcome of accepting one connection.
pub enum Accepted<S> {
    /// A managed peer that presented a valid identity header.
    Managed(S, Preamble),
    /// A connection on an external listener; no header is expected.
    External(S),
    /// A connection on a managed listener without a valid header. It has
    /// been closed.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProxyReport {
    pub id: u64,
    /// Bytes copied from the external side inward.
    pub inbound: u64,
    /// Bytes copied from the internal side outward.
    pub outbound: u64,
    pub done: bool,
}

pub trait Fabric {
    /// A connected byte stream that can be handed to an application.
    type Stream;
    type Listener;
    type Dgram;

    fn host_ip(&self) -> Ipv4Addr;

    /// Listen on an ephemeral port for managed peers.
    fn listen(&mut self) -> io::Result<(Self::Listener, u16)>;

    /// Listen on a fixed port for unmodified external clients.
    fn listen_external(&mut self, port: u16) -> io::Result<Self::Listener>;

    /// Non-blocking accept.
    fn try_accept(&mut self, l: &mut Self::Listener) -> io::Result<Option<Accepted<Self::Stream>>>;

    /// A connected pair that never leaves the host.
    fn local_pair(&mut self) -> io::Result<(Self::Stream, Self::Stream)>;

    /// Connect to a remote listener, writing `preamble` first when given.
    fn connect(&mut self, to: RealEndpoint, preamble: Option<&Preamble>)
        -> io::Result<Self::Stream>;

    fn dgram_bind(&mut self) -> io::Result<(Self::Dgram, u16)>;

    fn dgram_send(&mut self, d: &Self::Dgram, to: RealEndpoint, bytes: &[u8]) -> io::Result<()>;

    fn dgram_try_recv(&mut self, d: &Self::Dgram) -> io::Result<Option<(Vec<u8>, RealEndpoint)>>;

    /// Copy bytes both ways between `external` and `internal` until either
    /// side closes.
    fn start_proxy(&mut self, external: Self::Stream, internal: Self::Stream) -> u64;

    /// Progress of every proxy session. Finished sessions are reported once
    /// with `done` set and then forgotten.
    fn poll_proxies(&mut self) -> Vec<ProxyReport>;

    /// Tear a session down; both streams are closed.
    fn stop_proxy(&mut self, id: u64);
}
