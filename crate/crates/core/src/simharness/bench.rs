//! Same-host throughput: a connection set up through the switch fast path
//! against a plain loopback TCP connection carrying the same echo workload.

use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddrV4, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::fabric::real::{RealFabric, RealStream};
use crate::model::{parse_app_spec, AppId, RealEndpoint};
use crate::node::{Node, NodeConfig};
use crate::trap::generator::{Generator, TrapTransport};
use crate::trap::wire::HandleKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub size: usize,
    /// Echoed bytes per second.
    pub local_bps: f64,
    pub hairpin_bps: f64,
}

impl BenchResult {
    pub fn ratio(&self) -> f64 {
        if self.hairpin_bps > 0.0 {
            self.local_bps / self.hairpin_bps
        } else {
            f64::INFINITY
        }
    }

    pub const CSV_HEADER: &'static str = "size,local_bps,hairpin_bps,ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.0},{:.0},{:.3}",
            self.size,
            self.local_bps,
            self.hairpin_bps,
            self.ratio()
        )
    }
}

struct Direct<'a> {
    node: &'a mut Node<RealFabric>,
    app: AppId,
}

impl TrapTransport for Direct<'_> {
    type Conn = RealStream;

    fn exchange(&mut self, request: &[u8]) -> io::Result<(Vec<u8>, Option<RealStream>)> {
        Ok(self.node.trap(self.app, request))
    }
}

fn trap_err(e: impl std::fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

/// A connected pair set up by a local node between two of its apps.
pub fn fast_path_pair() -> io::Result<(RealStream, RealStream)> {
    let lo = Ipv4Addr::LOCALHOST;
    let mut node = Node::start(
        NodeConfig::new(RealEndpoint::new(lo, 0)),
        RealFabric::new(lo),
        rand::random(),
    );
    let spec = parse_app_spec(&["--name", "bench", "--ip", "10.77.0.1"]).map_err(trap_err)?;
    let server = node.add_app(spec).map_err(trap_err)?;
    let client = node.add_app(Default::default()).map_err(trap_err)?;
    let addr = SocketAddrV4::new(server.effective_vip.addr(), 9000);

    let mut s = Generator::new(Direct {
        node: &mut node,
        app: server.app_id,
    });
    let lh = s.socket(HandleKind::Stream).map_err(trap_err)?;
    s.bind(lh, addr).map_err(trap_err)?;
    s.listen(lh).map_err(trap_err)?;

    let mut c = Generator::new(Direct {
        node: &mut node,
        app: client.app_id,
    });
    let ch = c.socket(HandleKind::Stream).map_err(trap_err)?;
    let near = c.connect(ch, addr).map_err(trap_err)?;

    let mut s = Generator::new(Direct {
        node: &mut node,
        app: server.app_id,
    });
    let (_, far, _) = s.accept(lh, Duration::from_secs(2)).map_err(trap_err)?;
    Ok((near, far))
}

pub fn loopback_pair() -> io::Result<(RealStream, RealStream)> {
    let l = TcpListener::bind(SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0))?;
    let near = TcpStream::connect(l.local_addr()?)?;
    let (far, _) = l.accept()?;
    Ok((RealStream::Tcp(near), RealStream::Tcp(far)))
}

/// Stream fixed-size messages through an echo peer for `duration` and
/// return echoed bytes per second.
pub fn echo_throughput(near: RealStream, mut far: RealStream, size: usize, duration: Duration) -> io::Result<f64> {
    let size = size.max(1);
    let echo = thread::spawn(move || -> io::Result<()> {
        let mut buf = vec![0u8; 256 * 1024];
        loop {
            let n = far.read(&mut buf)?;
            if n == 0 {
                let _ = far.shutdown(Shutdown::Write);
                return Ok(());
            }
            far.write_all(&buf[..n])?;
        }
    });
    let stop = Arc::new(AtomicBool::new(false));
    let mut writer = near.try_clone()?;
    let writer_stop = stop.clone();
    let feed = thread::spawn(move || -> io::Result<()> {
        let msg = vec![0x5au8; size];
        while !writer_stop.load(Ordering::Relaxed) {
            writer.write_all(&msg)?;
        }
        writer.shutdown(Shutdown::Write)
    });

    let mut reader = near;
    let mut buf = vec![0u8; 256 * 1024];
    let start = Instant::now();
    let mut counted = 0u64;
    let elapsed = loop {
        let n = reader.read(&mut buf)?;
        let t = start.elapsed();
        if n == 0 {
            break t;
        }
        counted += n as u64;
        if t >= duration {
            break t;
        }
    };
    stop.store(true, Ordering::Relaxed);
    // Drain so both helper threads can finish.
    while reader.read(&mut buf)? > 0 {}
    feed.join().map_err(|_| io::Error::other("writer panicked"))??;
    echo.join().map_err(|_| io::Error::other("echo panicked"))??;
    Ok(counted as f64 / elapsed.as_secs_f64())
}

pub fn run(size: usize, duration: Duration) -> io::Result<BenchResult> {
    let (near, far) = fast_path_pair()?;
    let local_bps = echo_throughput(near, far, size, duration)?;
    let (near, far) = loopback_pair()?;
    let hairpin_bps = echo_throughput(near, far, size, duration)?;
    Ok(BenchResult {
        size,
        local_bps,
        hairpin_bps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_path_is_a_local_channel() {
        let (near, far) = fast_path_pair().unwrap();
        assert!(near.is_local());
        assert!(far.is_local());
    }

    #[test]
    fn csv_row_shape() {
        let r = BenchResult {
            size: 65536,
            local_bps: 3.0e9,
            hairpin_bps: 1.5e9,
        };
        assert_eq!(r.csv_row(), "65536,3000000000,1500000000,2.000");
    }

    #[test]
    fn short_runs_report_traffic() {
        let r = run(4096, Duration::from_millis(50)).unwrap();
        assert!(r.local_bps > 0.0 && r.hairpin_bps > 0.0);
    }
}
