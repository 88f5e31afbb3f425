//! In-memory network for the deterministic harness.
//!
//! Streams are pairs of byte queues; datagrams are delivered immediately.
//! Nothing here blocks: reads on an empty open stream return `WouldBlock`.
//! Hosts can crash (every stream touching them is reset) and pairs of hosts
//! can be cut off from each other.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::Ipv4Addr;
use std::rc::{Rc, Weak};

use super::{Accepted, Fabric, ProxyReport};
use crate::model::RealEndpoint;
use crate::switch::preamble::{Preamble, PREAMBLE_LEN};

#[derive(Default)]
struct Pipe {
    buf: VecDeque<u8>,
    /// Writer closed or shut down.
    eof: bool,
    reader_gone: bool,
    reset: bool,
}

pub struct SimStream {
    rx: Rc<RefCell<Pipe>>,
    tx: Rc<RefCell<Pipe>>,
}

impl SimStream {
    fn pair() -> (SimStream, SimStream, [Weak<RefCell<Pipe>>; 2]) {
        let a = Rc::new(RefCell::new(Pipe::default()));
        let b = Rc::new(RefCell::new(Pipe::default()));
        let weak = [Rc::downgrade(&a), Rc::downgrade(&b)];
        (
            SimStream {
                rx: b.clone(),
                tx: a.clone(),
            },
            SimStream { rx: a, tx: b },
            weak,
        )
    }

    pub fn shutdown_write(&mut self) {
        self.tx.borrow_mut().eof = true;
    }

    /// Bytes waiting to be read.
    pub fn available(&self) -> usize {
        self.rx.borrow().buf.len()
    }

    /// True once the peer has closed and everything has been read.
    pub fn at_eof(&self) -> bool {
        let p = self.rx.borrow();
        p.reset || (p.eof && p.buf.is_empty())
    }

    pub fn is_reset(&self) -> bool {
        self.rx.borrow().reset || self.tx.borrow().reset
    }

    /// Read everything currently queued.
    pub fn drain(&mut self) -> Vec<u8> {
        self.rx.borrow_mut().buf.drain(..).collect()
    }
}

impl Read for SimStream {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        let mut p = self.rx.borrow_mut();
        if p.reset {
            return Err(io::ErrorKind::ConnectionReset.into());
        }
        if p.buf.is_empty() {
            return if p.eof || out.is_empty() {
                Ok(0)
            } else {
                Err(io::ErrorKind::WouldBlock.into())
            };
        }
        let n = out.len().min(p.buf.len());
        for (o, b) in out.iter_mut().zip(p.buf.drain(..n)) {
            *o = b;
        }
        Ok(n)
    }
}

impl Write for SimStream {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        let mut p = self.tx.borrow_mut();
        if p.reset {
            return Err(io::ErrorKind::ConnectionReset.into());
        }
        if p.reader_gone || p.eof {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        p.buf.extend(data);
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for SimStream {
    fn drop(&mut self) {
        self.tx.borrow_mut().eof = true;
        let mut rx = self.rx.borrow_mut();
        rx.reader_gone = true;
        rx.buf.clear();
    }
}

#[derive(Default)]
struct ListenQ {
    managed: bool,
    queue: VecDeque<SimStream>,
    closed: bool,
}

pub struct SimListener {
    q: Rc<RefCell<ListenQ>>,
}

impl Drop for SimListener {
    fn drop(&mut self) {
        let mut q = self.q.borrow_mut();
        q.closed = true;
        q.queue.clear();
    }
}

#[derive(Default)]
struct DgramQ {
    queue: VecDeque<(Vec<u8>, RealEndpoint)>,
    closed: bool,
}

pub struct SimDgram {
    port: u16,
    q: Rc<RefCell<DgramQ>>,
}

impl Drop for SimDgram {
    fn drop(&mut self) {
        self.q.borrow_mut().closed = true;
    }
}

struct SimHost {
    up: bool,
    next_port: u16,
    listeners: BTreeMap<u16, Rc<RefCell<ListenQ>>>,
    dgrams: BTreeMap<u16, Rc<RefCell<DgramQ>>>,
    pipes: Vec<Weak<RefCell<Pipe>>>,
}

impl SimHost {
    fn new() -> Self {
        SimHost {
            up: true,
            next_port: 40_000,
            listeners: BTreeMap::new(),
            dgrams: BTreeMap::new(),
            pipes: Vec::new(),
        }
    }

    fn port_free(&self, port: u16) -> bool {
        let l = self.listeners.get(&port).is_some_and(|q| !q.borrow().closed);
        let d = self.dgrams.get(&port).is_some_and(|q| !q.borrow().closed);
        !l && !d
    }

    fn alloc_port(&mut self) -> io::Result<u16> {
        for _ in 0..25_000 {
            let p = self.next_port;
            self.next_port = if p >= 64_999 { 40_000 } else { p + 1 };
            if self.port_free(p) {
                return Ok(p);
            }
        }
        Err(io::ErrorKind::AddrInUse.into())
    }

    fn track(&mut self, pipes: &[Weak<RefCell<Pipe>>]) {
        self.pipes.retain(|w| w.strong_count() > 0);
        self.pipes.extend(pipes.iter().cloned());
    }
}

/// Shared state of the simulated network.
#[derive(Default)]
pub struct SimWorld {
    hosts: BTreeMap<Ipv4Addr, SimHost>,
    cut: BTreeSet<(Ipv4Addr, Ipv4Addr)>,
    pub dgrams_sent: u64,
    pub dgrams_lost: u64,
}

pub type World = Rc<RefCell<SimWorld>>;

impl SimWorld {
    pub fn new() -> World {
        Rc::new(RefCell::new(SimWorld::default()))
    }

    pub fn add_host(&mut self, ip: Ipv4Addr) {
        self.hosts.insert(ip, SimHost::new());
    }

    pub fn is_up(&self, ip: Ipv4Addr) -> bool {
        self.hosts.get(&ip).is_some_and(|h| h.up)
    }

    /// Take a host down. Its sockets vanish and every stream touching it is
    /// reset.
    pub fn crash(&mut self, ip: Ipv4Addr) {
        if let Some(h) = self.hosts.get_mut(&ip) {
            h.up = false;
            h.listeners.clear();
            h.dgrams.clear();
            for w in h.pipes.drain(..) {
                if let Some(p) = w.upgrade() {
                    let mut p = p.borrow_mut();
                    p.reset = true;
                    p.buf.clear();
                }
            }
        }
    }

    /// Block traffic between the two sides, in both directions.
    pub fn partition(&mut self, a: &[Ipv4Addr], b: &[Ipv4Addr]) {
        for x in a {
            for y in b {
                self.cut.insert((*x, *y));
                self.cut.insert((*y, *x));
            }
        }
    }

    pub fn heal(&mut self) {
        self.cut.clear();
    }

    pub fn reachable(&self, from: Ipv4Addr, to: Ipv4Addr) -> bool {
        self.is_up(from) && self.is_up(to) && !self.cut.contains(&(from, to))
    }

    /// Open a stream from `from` to a listener. External callers (unmanaged
    /// clients) use this directly.
    pub fn connect(
        &mut self,
        from: Ipv4Addr,
        to: RealEndpoint,
        preamble: Option<&Preamble>,
    ) -> io::Result<SimStream> {
        if !self.reachable(from, to.host_ip) {
            return Err(io::ErrorKind::ConnectionRefused.into());
        }
        let q = self
            .hosts
            .get(&to.host_ip)
            .and_then(|h| h.listeners.get(&to.port))
            .filter(|q| !q.borrow().closed)
            .cloned()
            .ok_or(io::Error::from(io::ErrorKind::ConnectionRefused))?;
        let (mut client, server, weak) = SimStream::pair();
        if let Some(p) = preamble {
            client.write_all(&p.encode())?;
        }
        q.borrow_mut().queue.push_back(server);
        for ip in [from, to.host_ip] {
            if let Some(h) = self.hosts.get_mut(&ip) {
                h.track(&weak);
            }
        }
        Ok(client)
    }

    fn send_dgram(&mut self, from: RealEndpoint, to: RealEndpoint, bytes: &[u8]) {
        self.dgrams_sent += 1;
        if !self.reachable(from.host_ip, to.host_ip) {
            self.dgrams_lost += 1;
            return;
        }
        match self.hosts.get(&to.host_ip).and_then(|h| h.dgrams.get(&to.port)) {
            Some(q) if !q.borrow().closed => {
                q.borrow_mut().queue.push_back((bytes.to_vec(), from));
            }
            _ => self.dgrams_lost += 1,
        }
    }

    fn host(&mut self, ip: Ipv4Addr) -> io::Result<&mut SimHost> {
        match self.hosts.get_mut(&ip) {
            Some(h) if h.up => Ok(h),
            _ => Err(io::ErrorKind::NotConnected.into()),
        }
    }
}

struct ProxySession {
    ext: SimStream,
    int: SimStream,
    report: ProxyReport,
    inbound_done: bool,
    outbound_done: bool,
}

/// Move whatever is readable from `src` to `dst`. Returns (bytes, finished).
fn pump(src: &mut SimStream, dst: &mut SimStream) -> (u64, bool) {
    let mut n = 0u64;
    let mut buf = [0u8; 16 * 1024];
    loop {
        match src.read(&mut buf) {
            Ok(0) => {
                dst.shutdown_write();
                return (n, true);
            }
            Ok(k) => {
                if dst.write_all(&buf[..k]).is_err() {
                    return (n, true);
                }
                n += k as u64;
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return (n, false),
            Err(_) => {
                dst.shutdown_write();
                return (n, true);
            }
        }
    }
}

/// One host's view of the simulated network.
pub struct SimFabric {
    ip: Ipv4Addr,
    world: World,
    proxies: BTreeMap<u64, ProxySession>,
    next_proxy: u64,
}

impl SimFabric {
    pub fn new(world: World, ip: Ipv4Addr) -> Self {
        world.borrow_mut().add_host(ip);
        SimFabric {
            ip,
            world,
            proxies: BTreeMap::new(),
            next_proxy: 1,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }
}

impl Fabric for SimFabric {
    type Stream = SimStream;
    type Listener = SimListener;
    type Dgram = SimDgram;

    fn host_ip(&self) -> Ipv4Addr {
        self.ip
    }

    fn listen(&mut self) -> io::Result<(SimListener, u16)> {
        let mut w = self.world.borrow_mut();
        let h = w.host(self.ip)?;
        let port = h.alloc_port()?;
        let q = Rc::new(RefCell::new(ListenQ {
            managed: true,
            ..ListenQ::default()
        }));
        h.listeners.insert(port, q.clone());
        Ok((SimListener { q }, port))
    }

    fn listen_external(&mut self, port: u16) -> io::Result<SimListener> {
        let mut w = self.world.borrow_mut();
        let h = w.host(self.ip)?;
        if !h.port_free(port) {
            return Err(io::ErrorKind::AddrInUse.into());
        }
        let q = Rc::new(RefCell::new(ListenQ::default()));
        h.listeners.insert(port, q.clone());
        Ok(SimListener { q })
    }

    fn try_accept(&mut self, l: &mut SimListener) -> io::Result<Option<Accepted<SimStream>>> {
        let mut q = l.q.borrow_mut();
        let Some(mut s) = q.queue.pop_front() else {
            return Ok(None);
        };
        if !q.managed {
            return Ok(Some(Accepted::External(s)));
        }
        // Managed connectors write the header as part of connecting, so it
        // is either fully present or never coming.
        let mut head = [0u8; PREAMBLE_LEN];
        if s.available() < PREAMBLE_LEN || s.read_exact(&mut head).is_err() {
            return Ok(Some(Accepted::Rejected));
        }
        match Preamble::decode(&head) {
            Ok(p) => Ok(Some(Accepted::Managed(s, p))),
            Err(_) => Ok(Some(Accepted::Rejected)),
        }
    }

    fn local_pair(&mut self) -> io::Result<(SimStream, SimStream)> {
        let (a, b, weak) = SimStream::pair();
        self.world.borrow_mut().host(self.ip)?.track(&weak);
        Ok((a, b))
    }

    fn connect(&mut self, to: RealEndpoint, preamble: Option<&Preamble>) -> io::Result<SimStream> {
        self.world.borrow_mut().connect(self.ip, to, preamble)
    }

    fn dgram_bind(&mut self) -> io::Result<(SimDgram, u16)> {
        let mut w = self.world.borrow_mut();
        let h = w.host(self.ip)?;
        let port = h.alloc_port()?;
        let q = Rc::new(RefCell::new(DgramQ::default()));
        h.dgrams.insert(port, q.clone());
        Ok((SimDgram { port, q }, port))
    }

    fn dgram_send(&mut self, d: &SimDgram, to: RealEndpoint, bytes: &[u8]) -> io::Result<()> {
        let from = RealEndpoint::new(self.ip, d.port);
        self.world.borrow_mut().send_dgram(from, to, bytes);
        Ok(())
    }

    fn dgram_try_recv(&mut self, d: &SimDgram) -> io::Result<Option<(Vec<u8>, RealEndpoint)>> {
        Ok(d.q.borrow_mut().queue.pop_front())
    }

    fn start_proxy(&mut self, ext: SimStream, int: SimStream) -> u64 {
        let id = self.next_proxy;
        self.next_proxy += 1;
        self.proxies.insert(
            id,
            ProxySession {
                ext,
                int,
                report: ProxyReport {
                    id,
                    ..ProxyReport::default()
                },
                inbound_done: false,
                outbound_done: false,
            },
        );
        id
    }

    fn poll_proxies(&mut self) -> Vec<ProxyReport> {
        let mut out = Vec::new();
        let mut finished = Vec::new();
        for (id, s) in self.proxies.iter_mut() {
            // Alternate until neither side makes progress.
            loop {
                let mut moved = 0;
                if !s.inbound_done {
                    let (n, fin) = pump(&mut s.ext, &mut s.int);
                    s.report.inbound += n;
                    s.inbound_done = fin;
                    moved += n;
                }
                if !s.outbound_done {
                    let (n, fin) = pump(&mut s.int, &mut s.ext);
                    s.report.outbound += n;
                    s.outbound_done = fin;
                    moved += n;
                }
                if moved == 0 {
                    break;
                }
            }
            if (s.inbound_done && s.outbound_done) || s.ext.is_reset() || s.int.is_reset() {
                s.report.done = true;
                finished.push(*id);
            }
            out.push(s.report);
        }
        for id in finished {
            self.proxies.remove(&id);
        }
        out
    }

    fn stop_proxy(&mut self, id: u64) {
        self.proxies.remove(&id);
    }
}
