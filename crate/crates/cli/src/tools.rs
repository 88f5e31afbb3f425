//! Small programs meant to run under `appnet run`. They talk to the daemon
//! through the trap channel named in the environment.

use std::io::{Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddrV4};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use appnet::names::{build_query, parse_response, QTYPE_A, RCODE_NOERROR};
use appnet::trap::channel::{UnixTransport, ENV_VIP};
use appnet::trap::generator::{Generator, TrapError};
use appnet::trap::wire::HandleKind;

const RESOLVER: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(127, 0, 0, 53), 53);

fn fail(what: &str, e: impl std::fmt::Display) -> ExitCode {
    eprintln!("appnet {what}: {e}");
    ExitCode::FAILURE
}

fn attach() -> Result<Generator<UnixTransport>, TrapError> {
    Ok(Generator::new(UnixTransport::from_env()?))
}

pub fn echo(port: u16) -> ExitCode {
    let vip: Ipv4Addr = match std::env::var(ENV_VIP).ok().and_then(|v| v.parse().ok()) {
        Some(v) => v,
        None => return fail("echo", format!("{ENV_VIP} not set; run under `appnet run`")),
    };
    let mut g = match attach() {
        Ok(g) => g,
        Err(e) => return fail("echo", e),
    };
    let setup = (|| -> Result<u32, TrapError> {
        let h = g.socket(HandleKind::Stream)?;
        g.bind(h, SocketAddrV4::new(vip, port))?;
        g.listen(h)?;
        Ok(h)
    })();
    let h = match setup {
        Ok(h) => h,
        Err(e) => return fail("echo", e),
    };
    println!("listening on {vip}:{port}");
    loop {
        match g.accept(h, Duration::from_secs(3600)) {
            Ok((_, mut s, peer)) => {
                log::info!("connection from {peer}");
                thread::spawn(move || {
                    let mut buf = vec![0u8; 64 * 1024];
                    while let Ok(n) = s.read(&mut buf) {
                        if n == 0 || s.write_all(&buf[..n]).is_err() {
                            break;
                        }
                    }
                });
            }
            Err(e) => return fail("echo", e),
        }
    }
}

pub fn send(addr: SocketAddrV4, bytes: usize) -> ExitCode {
    let run = || -> Result<(SocketAddrV4, SocketAddrV4, usize), Box<dyn std::error::Error>> {
        let mut g = attach()?;
        let h = g.socket(HandleKind::Stream)?;
        let mut s = g.connect(h, addr)?;
        let local = g.sockname(h)?.unwrap_or(addr);
        let peer = g.peername(h)?;
        let mut w = s.try_clone()?;
        let writer = thread::spawn(move || -> std::io::Result<()> {
            let block: Vec<u8> = (0..bytes).map(|i| (i % 256) as u8).collect();
            w.write_all(&block)?;
            w.shutdown(Shutdown::Write)
        });
        let mut back = Vec::new();
        s.read_to_end(&mut back)?;
        writer.join().map_err(|_| "writer panicked")??;
        if back.len() != bytes || back.iter().enumerate().any(|(i, b)| *b != (i % 256) as u8) {
            return Err(format!("echo mismatch: sent {bytes}, got {}", back.len()).into());
        }
        Ok((local, peer, back.len()))
    };
    match run() {
        Ok((local, peer, n)) => {
            println!("local={local} peer={peer} echoed={n}");
            ExitCode::SUCCESS
        }
        Err(e) => fail("send", e),
    }
}

pub fn resolve(name: &str) -> ExitCode {
    let run = || -> Result<Option<Ipv4Addr>, TrapError> {
        let mut g = attach()?;
        let h = g.socket(HandleKind::Datagram)?;
        g.sendto(h, RESOLVER, &build_query(1, name, QTYPE_A))?;
        let (_, resp) = g.recvfrom(h, Duration::from_secs(2))?;
        Ok(parse_response(&resp)
            .filter(|r| r.rcode == RCODE_NOERROR)
            .and_then(|r| r.a)
            .map(|(ip, _)| ip))
    };
    match run() {
        Ok(Some(ip)) => {
            println!("{ip}");
            ExitCode::SUCCESS
        }
        Ok(None) => fail("resolve", format!("{name}: not found")),
        Err(e) => fail("resolve", e),
    }
}
