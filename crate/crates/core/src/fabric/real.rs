//! Host sockets: TCP for remote streams, unix socket pairs for the same-host
//! path, UDP for datagrams.
//!
//! Each listener owns an accept thread that validates the identity header
//! with a timeout before queueing the connection, so the node's event loop
//! never blocks on a slow or silent peer.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::os::fd::{AsFd, AsRawFd, BorrowedFd, OwnedFd, RawFd};
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam::channel::{unbounded, Receiver, TryRecvError};

use super::{Accepted, Fabric, ProxyReport};
use crate::model::RealEndpoint;
use crate::switch::preamble::{Preamble, PREAMBLE_LEN};

const PREAMBLE_TIMEOUT: Duration = Duration::from_secs(2);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug)]
pub enum RealStream {
    Tcp(TcpStream),
    Unix(UnixStream),
}

impl RealStream {
    pub fn try_clone(&self) -> io::Result<RealStream> {
        Ok(match self {
            RealStream::Tcp(s) => RealStream::Tcp(s.try_clone()?),
            RealStream::Unix(s) => RealStream::Unix(s.try_clone()?),
        })
    }

    pub fn shutdown(&self, how: Shutdown) -> io::Result<()> {
        match self {
            RealStream::Tcp(s) => s.shutdown(how),
            RealStream::Unix(s) => s.shutdown(how),
        }
    }

    pub fn is_local(&self) -> bool {
        matches!(self, RealStream::Unix(_))
    }
}

impl Read for RealStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            RealStream::Tcp(s) => s.read(buf),
            RealStream::Unix(s) => s.read(buf),
        }
    }
}

impl Write for RealStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            RealStream::Tcp(s) => s.write(buf),
            RealStream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl AsFd for RealStream {
    fn as_fd(&self) -> BorrowedFd<'_> {
        match self {
            RealStream::Tcp(s) => s.as_fd(),
            RealStream::Unix(s) => s.as_fd(),
        }
    }
}

impl AsRawFd for RealStream {
    fn as_raw_fd(&self) -> RawFd {
        self.as_fd().as_raw_fd()
    }
}

impl From<RealStream> for OwnedFd {
    fn from(s: RealStream) -> OwnedFd {
        match s {
            RealStream::Tcp(s) => s.into(),
            RealStream::Unix(s) => s.into(),
        }
    }
}

pub struct RealListener {
    rx: Receiver<Accepted<RealStream>>,
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
}

impl Drop for RealListener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept thread.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

fn read_preamble(s: &mut TcpStream) -> Option<Preamble> {
    s.set_read_timeout(Some(PREAMBLE_TIMEOUT)).ok()?;
    let mut head = [0u8; PREAMBLE_LEN];
    s.read_exact(&mut head).ok()?;
    s.set_read_timeout(None).ok()?;
    Preamble::decode(&head).ok()
}

fn spawn_listener(l: TcpListener, managed: bool) -> io::Result<RealListener> {
    let addr = l.local_addr()?;
    let (tx, rx) = unbounded();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    thread::Builder::new()
        .name(format!("accept-{}", addr.port()))
        .spawn(move || {
            for conn in l.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut s) = conn else { continue };
                let _ = s.set_nodelay(true);
                if !managed {
                    if tx.send(Accepted::External(RealStream::Tcp(s))).is_err() {
                        break;
                    }
                    continue;
                }
                // Header checks run off the accept thread so one silent peer
                // cannot stall the queue.
                let tx = tx.clone();
                thread::spawn(move || {
                    let a = match read_preamble(&mut s) {
                        Some(p) => Accepted::Managed(RealStream::Tcp(s), p),
                        None => Accepted::Rejected,
                    };
                    let _ = tx.send(a);
                });
            }
        })?;
    Ok(RealListener { rx, stop, addr })
}

pub struct RealDgram {
    sock: UdpSocket,
}

#[derive(Default)]
struct ProxyShared {
    inbound: AtomicU64,
    outbound: AtomicU64,
    inbound_done: AtomicBool,
    outbound_done: AtomicBool,
}

struct ProxySession {
    shared: Arc<ProxyShared>,
    ext: RealStream,
    int: RealStream,
}

fn copy_half(mut src: RealStream, dst: RealStream, count: &AtomicU64, done: &AtomicBool) {
    let mut dst = dst;
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match src.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if dst.write_all(&buf[..n]).is_err() {
                    break;
                }
                count.fetch_add(n as u64, Ordering::SeqCst);
            }
        }
    }
    let _ = dst.shutdown(Shutdown::Write);
    done.store(true, Ordering::SeqCst);
}

pub struct RealFabric {
    ip: Ipv4Addr,
    proxies: BTreeMap<u64, ProxySession>,
    next_proxy: u64,
}

impl RealFabric {
    pub fn new(ip: Ipv4Addr) -> Self {
        RealFabric {
            ip,
            proxies: BTreeMap::new(),
            next_proxy: 1,
        }
    }
}

impl Fabric for RealFabric {
    type Stream = RealStream;
    type Listener = RealListener;
    type Dgram = RealDgram;

    fn host_ip(&self) -> Ipv4Addr {
        self.ip
    }

    fn listen(&mut self) -> io::Result<(RealListener, u16)> {
        let l = TcpListener::bind(SocketAddrV4::new(self.ip, 0))?;
        let port = l.local_addr()?.port();
        Ok((spawn_listener(l, true)?, port))
    }

    fn listen_external(&mut self, port: u16) -> io::Result<RealListener> {
        let l = TcpListener::bind(SocketAddrV4::new(self.ip, port))?;
        spawn_listener(l, false)
    }

    fn try_accept(&mut self, l: &mut RealListener) -> io::Result<Option<Accepted<RealStream>>> {
        match l.rx.try_recv() {
            Ok(a) => Ok(Some(a)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(io::ErrorKind::NotConnected.into()),
        }
    }

    fn local_pair(&mut self) -> io::Result<(RealStream, RealStream)> {
        let (a, b) = UnixStream::pair()?;
        Ok((RealStream::Unix(a), RealStream::Unix(b)))
    }

    fn connect(&mut self, to: RealEndpoint, preamble: Option<&Preamble>) -> io::Result<RealStream> {
        let addr = SocketAddr::V4(to.into());
        let mut s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)?;
        s.set_nodelay(true)?;
        if let Some(p) = preamble {
            s.write_all(&p.encode())?;
        }
        Ok(RealStream::Tcp(s))
    }

    fn dgram_bind(&mut self) -> io::Result<(RealDgram, u16)> {
        let sock = UdpSocket::bind(SocketAddrV4::new(self.ip, 0))?;
        sock.set_nonblocking(true)?;
        let port = sock.local_addr()?.port();
        Ok((RealDgram { sock }, port))
    }

    fn dgram_send(&mut self, d: &RealDgram, to: RealEndpoint, bytes: &[u8]) -> io::Result<()> {
        d.sock.send_to(bytes, SocketAddrV4::from(to)).map(|_| ())
    }

    fn dgram_try_recv(&mut self, d: &RealDgram) -> io::Result<Option<(Vec<u8>, RealEndpoint)>> {
        let mut buf = vec![0u8; 65_536];
        match d.sock.recv_from(&mut buf) {
            Ok((n, SocketAddr::V4(from))) => {
                buf.truncate(n);
                Ok(Some((buf, from.into())))
            }
            Ok(_) => Ok(None),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn start_proxy(&mut self, ext: RealStream, int: RealStream) -> u64 {
        let id = self.next_proxy;
        self.next_proxy += 1;
        let shared = Arc::new(ProxyShared::default());
        let clones = (
            ext.try_clone(),
            int.try_clone(),
            ext.try_clone(),
            int.try_clone(),
        );
        if let (Ok(e1), Ok(i1), Ok(e2), Ok(i2)) = clones {
            let s = shared.clone();
            thread::spawn(move || copy_half(e1, i1, &s.inbound, &s.inbound_done));
            let s = shared.clone();
            thread::spawn(move || copy_half(i2, e2, &s.outbound, &s.outbound_done));
        } else {
            shared.inbound_done.store(true, Ordering::SeqCst);
            shared.outbound_done.store(true, Ordering::SeqCst);
        }
        self.proxies.insert(id, ProxySession { shared, ext, int });
        id
    }

    fn poll_proxies(&mut self) -> Vec<ProxyReport> {
        let mut out = Vec::new();
        self.proxies.retain(|id, s| {
            let done = s.shared.inbound_done.load(Ordering::SeqCst)
                && s.shared.outbound_done.load(Ordering::SeqCst);
            out.push(ProxyReport {
                id: *id,
                inbound: s.shared.inbound.load(Ordering::SeqCst),
                outbound: s.shared.outbound.load(Ordering::SeqCst),
                done,
            });
            !done
        });
        out
    }

    fn stop_proxy(&mut self, id: u64) {
        if let Some(s) = self.proxies.remove(&id) {
            let _ = s.ext.shutdown(Shutdown::Both);
            let _ = s.int.shutdown(Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn wait_accept(f: &mut RealFabric, l: &mut RealListener) -> Accepted<RealStream> {
        let t0 = Instant::now();
        loop {
            if let Some(a) = f.try_accept(l).unwrap() {
                return a;
            }
            assert!(t0.elapsed() < Duration::from_secs(5), "accept timed out");
            thread::sleep(Duration::from_millis(2));
        }
    }

    #[test]
    fn managed_accept_and_eager_bytes() {
        let mut f = RealFabric::new(Ipv4Addr::LOCALHOST);
        let (mut l, port) = f.listen().unwrap();
        let pre = Preamble::new(Ipv4Addr::new(10, 0, 0, 1), 49152);
        let mut c = f
            .connect(RealEndpoint::new(Ipv4Addr::LOCALHOST, port), Some(&pre))
            .unwrap();
        c.write_all(b"eager").unwrap();
        match wait_accept(&mut f, &mut l) {
            Accepted::Managed(mut s, p) => {
                assert_eq!(p, pre);
                let mut buf = [0u8; 5];
                s.read_exact(&mut buf).unwrap();
                assert_eq!(&buf, b"eager");
            }
            _ => panic!("expected managed"),
        }
    }

    #[test]
    fn headerless_rejected() {
        let mut f = RealFabric::new(Ipv4Addr::LOCALHOST);
        let (mut l, port) = f.listen().unwrap();
        let mut raw = TcpStream::connect((Ipv4Addr::LOCALHOST, port)).unwrap();
        raw.write_all(b"GET / HTTP/1.0\r\n\r\n").unwrap();
        assert!(matches!(wait_accept(&mut f, &mut l), Accepted::Rejected));
    }

    #[test]
    fn datagrams_round_trip() {
        let mut f = RealFabric::new(Ipv4Addr::LOCALHOST);
        let (a, _) = f.dgram_bind().unwrap();
        let (b, pb) = f.dgram_bind().unwrap();
        f.dgram_send(&a, RealEndpoint::new(Ipv4Addr::LOCALHOST, pb), b"ping")
            .unwrap();
        let t0 = Instant::now();
        loop {
            if let Some((d, _)) = f.dgram_try_recv(&b).unwrap() {
                assert_eq!(d, b"ping");
                break;
            }
            assert!(t0.elapsed() < Duration::from_secs(5));
            thread::sleep(Duration::from_millis(1));
        }
    }
}
