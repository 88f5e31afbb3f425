//! Deterministic in-process cluster. Every node runs over [`SimFabric`] on
//! one shared world; gossip goes through [`Net`] and applications are
//! driven through the real trap codec.

pub mod bench;
pub mod net;
pub mod script;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::fabric::sim::{SimFabric, SimStream, SimWorld, World};
use crate::gossip::{GossipEnvelope, MemberStatus};
use crate::model::{parse_app_spec, AppId, AppIdentity, HostId, RealEndpoint, ServiceKey, VirtualIp};
use crate::names::{build_query, parse_response, QTYPE_A, RCODE_NXDOMAIN};
use crate::node::{Node, NodeConfig, NodeError};
use crate::switch::is_real_endpoint;
use crate::switch::select::SelectionMode;
use crate::trap::generator::{Generator, TrapError, TrapTransport};
use crate::trap::wire::{HandleKind, TrapReply, TrapStatus};

use net::{Fate, Net, NetProfile};
use script::{Action, ClusterScript, DnsExpect, Expect, Predicate};

pub const GOSSIP_PORT: u16 = 7946;
/// Wall-clock length a simulated tick stands for.
pub const TICK_MS: u64 = 200;
/// Address of the unmanaged machine used for raw and external clients.
pub const OUTSIDE_IP: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 1);
/// Where sandboxed programs send name queries.
pub const RESOLVER: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(127, 0, 0, 53), 53);

pub fn host_ip(index: u8) -> Ipv4Addr {
    Ipv4Addr::new(192, 168, 0, index)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("{0} already exists")]
    Duplicate(String),
    #[error("host {0} is down")]
    HostDown(String),
    #[error("too many hosts")]
    TooManyHosts,
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("trap: {0}")]
    Trap(String),
    #[error("tick {tick}, line {line}: expected {expected}, observed {observed}")]
    AssertionFailed {
        tick: u64,
        line: usize,
        expected: String,
        observed: String,
    },
}

impl From<TrapError> for SimError {
    fn from(e: TrapError) -> Self {
        SimError::Trap(e.to_string())
    }
}

fn status_of(e: TrapError) -> TrapStatus {
    e.status().unwrap_or(TrapStatus::Internal)
}

/// JSON-lines event log.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    lines: Vec<String>,
}

impl Trace {
    fn push(&mut self, tick: u64, ev: &str, mut fields: Value) {
        if let Value::Object(m) = &mut fields {
            m.insert("tick".into(), tick.into());
            m.insert("ev".into(), ev.into());
        }
        self.lines.push(fields.to_string());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

/// Running record of every trap reply, checked for host addresses.
#[derive(Debug, Default)]
pub struct ReplyScan {
    hosts: BTreeSet<Ipv4Addr>,
    pub replies: u64,
    /// Replies carrying an address at all.
    pub with_addr: u64,
    pub violations: Vec<(AppId, SocketAddrV4)>,
    per_app: BTreeMap<AppId, u64>,
}

impl ReplyScan {
    fn record(&mut self, app: AppId, frame: &[u8]) {
        self.replies += 1;
        *self.per_app.entry(app).or_default() += 1;
        if let Ok(TrapReply { addr: Some(a), .. }) = TrapReply::decode(frame) {
            self.with_addr += 1;
            if is_real_endpoint(&a, &self.hosts) {
                self.violations.push((app, a));
            }
        }
    }

    pub fn messages(&self, app: &AppId) -> u64 {
        self.per_app.get(app).copied().unwrap_or(0)
    }
}

struct SimTrap<'a> {
    node: &'a mut Node<SimFabric>,
    app: AppId,
    scan: &'a mut ReplyScan,
}

impl TrapTransport for SimTrap<'_> {
    type Conn = SimStream;

    fn exchange(&mut self, request: &[u8]) -> io::Result<(Vec<u8>, Option<SimStream>)> {
        let (reply, stream) = self.node.trap(self.app, request);
        self.scan.record(self.app, &reply);
        Ok((reply, stream))
    }
}

pub struct SimNode {
    pub node: Node<SimFabric>,
    pub ip: Ipv4Addr,
    pub up: bool,
}

struct ServerConn {
    handle: u32,
    stream: SimStream,
}

struct SimApp {
    host: String,
    ident: AppIdentity,
    listeners: Vec<u32>,
    dgrams: Vec<u32>,
    conns: Vec<ServerConn>,
    accepted: u64,
}

/// Client side of an established stream.
pub struct ClientConn {
    pub label: String,
    pub handle: u32,
    pub stream: SimStream,
    pub local: SocketAddrV4,
    pub peer: SocketAddrV4,
    /// Label of the server application that accepted it.
    pub server: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct StartOpts {
    pub join: Option<String>,
    pub gateway: bool,
    pub strategy: Option<SelectionMode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsOutcome {
    pub rcode: u8,
    pub authoritative: bool,
    pub a: Option<(Ipv4Addr, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalOutcome {
    pub sent: u64,
    pub echoed: u64,
    pub intact: bool,
    /// Proxy byte counts of the finished session, if it finished.
    pub inbound: Option<u64>,
    pub outbound: Option<u64>,
}

pub struct Cluster {
    world: World,
    net: Net,
    rng: ChaCha8Rng,
    nodes: BTreeMap<String, SimNode>,
    by_ip: BTreeMap<Ipv4Addr, String>,
    apps: BTreeMap<String, SimApp>,
    round: u64,
    pub trace: Trace,
    pub scan: ReplyScan,
    next_host: u8,
    next_query: u16,
}

impl Cluster {
    pub fn new(seed: u64, profile: NetProfile) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let world = SimWorld::new();
        world.borrow_mut().add_host(OUTSIDE_IP);
        let mut scan = ReplyScan::default();
        scan.hosts.insert(OUTSIDE_IP);
        Cluster {
            world,
            net: Net::new(profile, net_rng),
            rng,
            nodes: BTreeMap::new(),
            by_ip: BTreeMap::new(),
            apps: BTreeMap::new(),
            round: 0,
            trace: Trace::default(),
            scan,
            next_host: 1,
            next_query: 1,
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn hosts(&self) -> impl Iterator<Item = (&String, &SimNode)> {
        self.nodes.iter()
    }

    pub fn node(&self, host: &str) -> Result<&Node<SimFabric>, SimError> {
        self.nodes
            .get(host)
            .map(|n| &n.node)
            .ok_or_else(|| SimError::UnknownHost(host.into()))
    }

    pub fn node_mut(&mut self, host: &str) -> Result<&mut Node<SimFabric>, SimError> {
        self.nodes
            .get_mut(host)
            .map(|n| &mut n.node)
            .ok_or_else(|| SimError::UnknownHost(host.into()))
    }

    pub fn ip_of(&self, host: &str) -> Result<Ipv4Addr, SimError> {
        self.nodes
            .get(host)
            .map(|n| n.ip)
            .ok_or_else(|| SimError::UnknownHost(host.into()))
    }

    pub fn host_id(&self, host: &str) -> Result<HostId, SimError> {
        Ok(self.node(host)?.host())
    }

    pub fn identity(&self, label: &str) -> Result<&AppIdentity, SimError> {
        self.apps
            .get(label)
            .map(|a| &a.ident)
            .ok_or_else(|| SimError::UnknownApp(label.into()))
    }

    /// Connections a server application has accepted.
    pub fn accepted(&self, label: &str) -> Result<u64, SimError> {
        self.apps
            .get(label)
            .map(|a| a.accepted)
            .ok_or_else(|| SimError::UnknownApp(label.into()))
    }

    /// Trap round trips made by an application so far.
    pub fn trap_messages(&self, label: &str) -> Result<u64, SimError> {
        Ok(self.scan.messages(&self.identity(label)?.app_id))
    }

    fn up_hosts(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.up)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn start(&mut self, name: &str, opts: StartOpts) -> Result<HostId, SimError> {
        if self.nodes.contains_key(name) {
            return Err(SimError::Duplicate(name.into()));
        }
        if self.next_host == 255 {
            return Err(SimError::TooManyHosts);
        }
        let ip = host_ip(self.next_host);
        self.next_host += 1;
        let mut cfg = NodeConfig::new(RealEndpoint::new(ip, GOSSIP_PORT));
        if let Some(peer) = &opts.join {
            cfg.join = Some(RealEndpoint::new(self.ip_of(peer)?, GOSSIP_PORT));
        }
        cfg.gateway = opts.gateway;
        if let Some(mode) = opts.strategy {
            cfg.strategy.mode = mode;
        }
        let fabric = SimFabric::new(self.world.clone(), ip);
        let node = Node::start(cfg, fabric, self.rng.gen());
        let id = node.host();
        self.trace.push(
            self.round,
            "start",
            json!({"host": name, "ip": ip.to_string(), "id": id.to_string(),
                   "join": opts.join, "gateway": opts.gateway}),
        );
        self.scan.hosts.insert(ip);
        self.by_ip.insert(ip, name.to_string());
        self.nodes.insert(name.to_string(), SimNode { node, ip, up: true });
        Ok(id)
    }

    pub fn add<S: AsRef<str>>(&mut self, label: &str, host: &str, args: &[S]) -> Result<AppIdentity, SimError> {
        if self.apps.contains_key(label) {
            return Err(SimError::Duplicate(label.into()));
        }
        let spec = parse_app_spec(args).map_err(NodeError::from)?;
        let sn = self.live(host)?;
        let ident = sn.node.add_app(spec)?;
        self.trace.push(
            self.round,
            "add",
            json!({"app": label, "host": host, "id": ident.app_id.to_string(),
                   "vip": ident.effective_vip.to_string()}),
        );
        self.apps.insert(
            label.to_string(),
            SimApp {
                host: host.to_string(),
                ident: ident.clone(),
                listeners: Vec::new(),
                dgrams: Vec::new(),
                conns: Vec::new(),
                accepted: 0,
            },
        );
        Ok(ident)
    }

    fn live(&mut self, host: &str) -> Result<&mut SimNode, SimError> {
        match self.nodes.get_mut(host) {
            Some(n) if n.up => Ok(n),
            Some(_) => Err(SimError::HostDown(host.into())),
            None => Err(SimError::UnknownHost(host.into())),
        }
    }

    /// Run `f` against a trap generator for `label`.
    fn with_app<T>(
        &mut self,
        label: &str,
        f: impl FnOnce(&mut Generator<SimTrap<'_>>, VirtualIp) -> T,
    ) -> Result<T, SimError> {
        let app = self.apps.get(label).ok_or_else(|| SimError::UnknownApp(label.into()))?;
        let (host, id, vip) = (app.host.clone(), app.ident.app_id, app.ident.effective_vip);
        let sn = match self.nodes.get_mut(&host) {
            Some(n) if n.up => n,
            _ => return Err(SimError::HostDown(host)),
        };
        let mut g = Generator::new(SimTrap {
            node: &mut sn.node,
            app: id,
            scan: &mut self.scan,
        });
        Ok(f(&mut g, vip))
    }

    /// Stream echo server on the app's vip.
    pub fn listen(&mut self, label: &str, port: u16) -> Result<SocketAddrV4, SimError> {
        let (h, addr) = self.with_app(label, |g, vip| -> Result<_, TrapError> {
            let h = g.socket(HandleKind::Stream)?;
            let addr = g.bind(h, SocketAddrV4::new(vip.addr(), port))?;
            g.listen(h)?;
            Ok((h, addr))
        })??;
        self.apps.get_mut(label).unwrap().listeners.push(h);
        self.trace
            .push(self.round, "listen", json!({"app": label, "addr": addr.to_string()}));
        Ok(addr)
    }

    /// Datagram echo server on the app's vip.
    pub fn bind_udp(&mut self, label: &str, port: u16) -> Result<SocketAddrV4, SimError> {
        let (h, addr) = self.with_app(label, |g, vip| -> Result<_, TrapError> {
            let h = g.socket(HandleKind::Datagram)?;
            let addr = g.bind(h, SocketAddrV4::new(vip.addr(), port))?;
            Ok((h, addr))
        })??;
        self.apps.get_mut(label).unwrap().dgrams.push(h);
        self.trace
            .push(self.round, "bind", json!({"app": label, "addr": addr.to_string()}));
        Ok(addr)
    }

    /// Accept and echo on every server application, then service gateways.
    /// Returns (server label, client address) for each new connection.
    pub fn serve(&mut self) -> Vec<(String, SocketAddrV4)> {
        let mut accepted = Vec::new();
        for (label, app) in self.apps.iter_mut() {
            let Some(sn) = self.nodes.get_mut(&app.host).filter(|n| n.up) else {
                continue;
            };
            let mut g = Generator::new(SimTrap {
                node: &mut sn.node,
                app: app.ident.app_id,
                scan: &mut self.scan,
            });
            for &l in &app.listeners {
                while let Ok(Some((h, stream, peer))) = g.try_accept(l) {
                    // Exercise the name queries so they go through the scan.
                    let _ = g.sockname(h);
                    let _ = g.peername(h);
                    app.conns.push(ServerConn { handle: h, stream });
                    app.accepted += 1;
                    accepted.push((label.clone(), peer));
                }
            }
            app.conns.retain_mut(|c| {
                let data = c.stream.drain();
                if !data.is_empty() && c.stream.write_all(&data).is_err() {
                    let _ = g.close(c.handle);
                    return false;
                }
                if c.stream.at_eof() {
                    c.stream.shutdown_write();
                    let _ = g.close(c.handle);
                    return false;
                }
                true
            });
            for &d in &app.dgrams {
                while let Ok(Some((src, data))) = g.try_recvfrom(d) {
                    let _ = g.sendto(d, src, &data);
                }
            }
        }
        for sn in self.nodes.values_mut().filter(|n| n.up) {
            sn.node.poll_gateway();
        }
        accepted
    }

    /// Open a stream from `label` to `dest` and find which server took it.
    pub fn open(&mut self, label: &str, dest: SocketAddrV4) -> Result<Result<ClientConn, TrapStatus>, SimError> {
        let res = self.with_app(label, |g, _| {
            let h = g.socket(HandleKind::Stream).map_err(status_of)?;
            match g.connect(h, dest) {
                Ok(stream) => {
                    let local = g.sockname(h).map_err(status_of)?.unwrap_or(dest);
                    let peer = g.peername(h).map_err(status_of)?;
                    Ok((h, stream, local, peer))
                }
                Err(e) => {
                    let _ = g.close(h);
                    Err(status_of(e))
                }
            }
        })?;
        let out = match res {
            Ok((handle, stream, local, peer)) => {
                let accepted = self.serve();
                let server = accepted.into_iter().find(|(_, p)| *p == local).map(|(l, _)| l);
                Ok(ClientConn {
                    label: label.to_string(),
                    handle,
                    stream,
                    local,
                    peer,
                    server,
                })
            }
            Err(s) => Err(s),
        };
        self.trace.push(
            self.round,
            "connect",
            match &out {
                Ok(c) => json!({"app": label, "dest": dest.to_string(), "result": "ok",
                                "local": c.local.to_string(), "peer": c.peer.to_string(),
                                "server": c.server}),
                Err(s) => json!({"app": label, "dest": dest.to_string(),
                                 "result": format!("{s:?}")}),
            },
        );
        Ok(out)
    }

    pub fn close(&mut self, conn: ClientConn) -> Result<(), SimError> {
        let ClientConn {
            label, handle, stream, ..
        } = conn;
        drop(stream);
        // A crashed host's apps are gone along with their handles.
        match self.with_app(&label, |g, _| g.close(handle)) {
            Ok(_) | Err(SimError::HostDown(_)) => {}
            Err(e) => return Err(e),
        }
        self.serve();
        Ok(())
    }

    /// Connect, note the outcome and close again.
    pub fn connect(&mut self, label: &str, dest: SocketAddrV4) -> Result<Result<Option<String>, TrapStatus>, SimError> {
        match self.open(label, dest)? {
            Ok(c) => {
                let server = c.server.clone();
                self.close(c)?;
                Ok(Ok(server))
            }
            Err(s) => Ok(Err(s)),
        }
    }

    /// Push `total` bytes through an open connection in `chunk` pieces and
    /// read the echo back. Returns the number of echoed bytes.
    pub fn transfer(&mut self, conn: &mut ClientConn, total: usize, chunk: usize) -> io::Result<u64> {
        let block: Vec<u8> = (0..chunk).map(|i| (i % 251) as u8).collect();
        let (mut sent, mut got) = (0usize, 0u64);
        let mut idle = 0;
        while (got as usize) < total {
            if sent < total {
                let n = chunk.min(total - sent);
                conn.stream.write_all(&block[..n])?;
                sent += n;
            }
            self.serve();
            let back = conn.stream.drain();
            if back.is_empty() {
                idle += 1;
                if idle > 16 {
                    break;
                }
            } else {
                idle = 0;
            }
            got += back.len() as u64;
        }
        Ok(got)
    }

    /// Try to reach `dest` without going through a trap handler: first the
    /// address itself, then every host endpoint any table lists for it.
    /// Returns (attempts, connections handed to an application).
    pub fn raw_connect(&mut self, dest: SocketAddrV4) -> (usize, usize) {
        let mut targets = vec![RealEndpoint::from(dest)];
        if let Ok(key) = ServiceKey::from_addr(dest) {
            let mut reals: BTreeSet<RealEndpoint> = BTreeSet::new();
            for sn in self.nodes.values().filter(|n| n.up) {
                reals.extend(sn.node.table.lookup(&key).iter().map(|e| e.real));
            }
            targets.extend(reals);
        }
        let mut streams = Vec::new();
        for t in &targets {
            if let Ok(mut s) = self.world.borrow_mut().connect(OUTSIDE_IP, *t, None) {
                let _ = s.write_all(b"GET / HTTP/1.0\r\n\r\n");
                streams.push(s);
            }
        }
        let mut delivered = 0;
        for _ in 0..3 {
            delivered += self.serve().len();
        }
        self.trace.push(
            self.round,
            "rawconnect",
            json!({"dest": dest.to_string(), "attempts": targets.len(),
                   "opened": streams.len(), "delivered": delivered}),
        );
        (targets.len(), delivered)
    }

    /// One A query through the app's trap channel.
    pub fn dns(&mut self, label: &str, name: &str) -> Result<Option<DnsOutcome>, SimError> {
        let id = self.next_query;
        self.next_query = self.next_query.wrapping_add(1);
        let out = self.with_app(label, |g, _| -> Result<_, TrapError> {
            let h = g.socket(HandleKind::Datagram)?;
            g.sendto(h, RESOLVER, &build_query(id, name, QTYPE_A))?;
            let resp = g.try_recvfrom(h)?;
            g.close(h)?;
            Ok(resp.and_then(|(_, p)| parse_response(&p)).filter(|r| r.id == id))
        })??;
        let out = out.map(|r| DnsOutcome {
            rcode: r.rcode,
            authoritative: r.authoritative,
            a: r.a,
        });
        self.trace.push(
            self.round,
            "dns",
            json!({"app": label, "name": name,
                   "rcode": out.as_ref().map(|o| o.rcode),
                   "a": out.as_ref().and_then(|o| o.a).map(|(ip, _)| ip.to_string()),
                   "ttl": out.as_ref().and_then(|o| o.a).map(|(_, t)| t)}),
        );
        Ok(out)
    }

    /// Send one datagram and wait briefly for an echo.
    pub fn udp(&mut self, label: &str, dest: SocketAddrV4, payload: &[u8]) -> Result<Result<Option<Vec<u8>>, TrapStatus>, SimError> {
        let h = self.with_app(label, |g, _| -> Result<_, TrapStatus> {
            let h = g.socket(HandleKind::Datagram).map_err(status_of)?;
            if let Err(e) = g.sendto(h, dest, payload) {
                let _ = g.close(h);
                return Err(status_of(e));
            }
            Ok(h)
        })?;
        let h = match h {
            Ok(h) => h,
            Err(s) => return Ok(Err(s)),
        };
        let mut echo = None;
        for _ in 0..4 {
            self.serve();
            echo = self.with_app(label, |g, _| g.try_recvfrom(h).ok().flatten())?;
            if echo.is_some() {
                break;
            }
        }
        self.with_app(label, |g, _| g.close(h))??;
        self.trace.push(
            self.round,
            "udp",
            json!({"app": label, "dest": dest.to_string(), "len": payload.len(),
                   "echo": echo.as_ref().map(|(src, p)| json!({"from": src.to_string(), "len": p.len()}))}),
        );
        Ok(Ok(echo.map(|(_, p)| p)))
    }

    /// An unmanaged client on the outside connects to a gateway port and
    /// sends `bytes`, reading back whatever comes.
    pub fn external(&mut self, host: &str, port: u16, bytes: usize) -> Result<Option<ExternalOutcome>, SimError> {
        let ip = self.ip_of(host)?;
        let stream = self
            .world
            .borrow_mut()
            .connect(OUTSIDE_IP, RealEndpoint::new(ip, port), None);
        let Ok(mut s) = stream else {
            self.trace
                .push(self.round, "external", json!({"host": host, "port": port, "result": "refused"}));
            return Ok(None);
        };
        let sessions_before = self.node(host)?.gateway.finished.len();
        let chunk = 64 * 1024;
        let block: Vec<u8> = (0..chunk).map(|i| (i * 7 % 256) as u8).collect();
        let (mut sent, mut back) = (0usize, Vec::new());
        let mut idle = 0;
        loop {
            if sent < bytes {
                let n = chunk.min(bytes - sent);
                let _ = s.write_all(&block[..n]);
                sent += n;
                if sent == bytes {
                    s.shutdown_write();
                }
            } else if sent == 0 {
                s.shutdown_write();
            }
            self.serve();
            let got = s.drain();
            if got.is_empty() {
                idle += 1;
            } else {
                idle = 0;
            }
            back.extend(got);
            if s.at_eof() || idle > 32 {
                break;
            }
        }
        for _ in 0..4 {
            self.serve();
        }
        let intact = back.len() == bytes && back.iter().enumerate().all(|(i, b)| *b == block[i % chunk]);
        let done = self.node(host)?.gateway.finished.get(sessions_before).cloned();
        let out = ExternalOutcome {
            sent: sent as u64,
            echoed: back.len() as u64,
            intact,
            inbound: done.as_ref().map(|d| d.inbound),
            outbound: done.as_ref().map(|d| d.outbound),
        };
        self.trace.push(
            self.round,
            "external",
            json!({"host": host, "port": port, "sent": out.sent, "echoed": out.echoed,
                   "intact": intact, "inbound": out.inbound, "outbound": out.outbound}),
        );
        Ok(Some(out))
    }

    pub fn crash(&mut self, host: &str) -> Result<(), SimError> {
        let sn = self.live(host)?;
        sn.up = false;
        let ip = sn.ip;
        self.world.borrow_mut().crash(ip);
        for app in self.apps.values_mut().filter(|a| a.host == host) {
            app.conns.clear();
        }
        self.trace.push(self.round, "crash", json!({"host": host}));
        Ok(())
    }

    pub fn partition(&mut self, a: &[String], b: &[String]) -> Result<(), SimError> {
        let ips = |side: &[String]| side.iter().map(|h| self.ip_of(h)).collect::<Result<Vec<_>, _>>();
        let (ia, ib) = (ips(a)?, ips(b)?);
        self.world.borrow_mut().partition(&ia, &ib);
        self.trace.push(self.round, "partition", json!({"a": a, "b": b}));
        Ok(())
    }

    pub fn heal(&mut self) {
        self.world.borrow_mut().heal();
        self.trace.push(self.round, "heal", json!({}));
    }

    pub fn remove(&mut self, label: &str) -> Result<usize, SimError> {
        let app = self.apps.remove(label).ok_or_else(|| SimError::UnknownApp(label.into()))?;
        let n = self.live(&app.host)?.node.remove_app(app.ident.app_id)?;
        self.trace
            .push(self.round, "remove", json!({"app": label, "tombstoned": n}));
        Ok(n)
    }

    fn enqueue(&mut self, from: Ipv4Addr, out: Vec<(RealEndpoint, GossipEnvelope)>) {
        let from = RealEndpoint::new(from, GOSSIP_PORT);
        for (to, env) in out {
            let bytes = env.encode();
            let kind = env.kind;
            let hex = hex::encode(&bytes);
            let (seq, fate) = self.net.send(self.round, from, to, kind, bytes);
            let fate = match fate {
                Fate::Queued { at } => json!(at),
                Fate::Lost => json!("lost"),
            };
            self.trace.push(
                self.round,
                "send",
                json!({"seq": seq, "from": from.to_string(), "to": to.to_string(),
                       "kind": format!("{kind:?}"), "due": fate, "hex": hex}),
            );
        }
    }

    fn deliver(&mut self) {
        while let Some(m) = self.net.pop_due(self.round) {
            let reachable = self.world.borrow().reachable(m.from.host_ip, m.to.host_ip);
            let target = self
                .by_ip
                .get(&m.to.host_ip)
                .filter(|_| m.to.port == GOSSIP_PORT && reachable)
                .cloned();
            let Some(sn) = target.and_then(|h| self.nodes.get_mut(&h)).filter(|n| n.up) else {
                self.trace.push(self.round, "drop", json!({"seq": m.seq}));
                continue;
            };
            let out = sn.node.on_gossip_bytes(&m.bytes, m.from);
            let ip = sn.ip;
            self.trace.push(self.round, "recv", json!({"seq": m.seq}));
            self.enqueue(ip, out);
        }
    }

    /// Advance one protocol period on every running node.
    pub fn step(&mut self) {
        for host in self.up_hosts() {
            let sn = self.nodes.get_mut(&host).unwrap();
            let out = sn.node.tick();
            let ip = sn.ip;
            self.enqueue(ip, out);
        }
        self.deliver();
        self.serve();
        self.round += 1;
    }

    pub fn run_until(&mut self, round: u64) {
        while self.round < round {
            self.step();
        }
    }

    /// Identical tables (alive entries and tombstones) on every running
    /// node.
    pub fn converged(&self) -> bool {
        let mut digests = self
            .nodes
            .values()
            .filter(|n| n.up)
            .map(|n| n.node.table.digest());
        match digests.next() {
            Some(first) => digests.all(|d| d == first),
            None => true,
        }
    }

    fn scope(&self, host: &Option<String>) -> Result<Vec<String>, SimError> {
        match host {
            Some(h) => {
                self.ip_of(h)?;
                Ok(vec![h.clone()])
            }
            None => Ok(self.up_hosts()),
        }
    }

    /// Evaluate a predicate, returning (expected, observed) on failure.
    pub fn check(&self, p: &Predicate) -> Result<Result<(), (String, String)>, SimError> {
        Ok(match p {
            Predicate::Converged => {
                if self.converged() {
                    Ok(())
                } else {
                    let sizes: Vec<String> = self
                        .nodes
                        .iter()
                        .filter(|(_, n)| n.up)
                        .map(|(k, n)| format!("{k}:{}", n.node.table.len()))
                        .collect();
                    Err(("identical tables".into(), sizes.join(" ")))
                }
            }
            Predicate::Clean => {
                if self.scan.violations.is_empty() {
                    Ok(())
                } else {
                    Err(("no host addresses".into(), format!("{:?}", self.scan.violations)))
                }
            }
            Predicate::Entries { host, key, count } => {
                let key = ServiceKey::from_addr(*key).map_err(NodeError::from)?;
                let mut bad = Vec::new();
                for h in self.scope(host)? {
                    let n = self.node(&h)?.table.lookup(&key).len();
                    if n != *count {
                        bad.push(format!("{h}:{n}"));
                    }
                }
                if bad.is_empty() {
                    Ok(())
                } else {
                    Err((format!("{count} entries for {key}"), bad.join(" ")))
                }
            }
            Predicate::Tombstoned { host, app } => {
                let id = self.identity(app).map(|i| i.app_id).or_else(|_| {
                    self.trace_app_id(app).ok_or_else(|| SimError::UnknownApp(app.clone()))
                })?;
                let mut bad = Vec::new();
                for h in self.scope(host)? {
                    let live = self
                        .node(&h)?
                        .table
                        .iter()
                        .filter(|e| e.app_id == id && e.is_alive())
                        .count();
                    if live > 0 {
                        bad.push(format!("{h}:{live} alive"));
                    }
                }
                if bad.is_empty() {
                    Ok(())
                } else {
                    Err(("all entries tombstoned".into(), bad.join(" ")))
                }
            }
            Predicate::Served { app, min } => {
                let got = self
                    .apps
                    .get(app)
                    .ok_or_else(|| SimError::UnknownApp(app.clone()))?
                    .accepted;
                if got >= *min {
                    Ok(())
                } else {
                    Err((format!("at least {min} accepted"), got.to_string()))
                }
            }
            Predicate::Member { host, other, status } => {
                let id = self.host_id(other)?;
                let got = self.node(host)?.gossip.status_of(&id);
                let want = match status.as_str() {
                    "alive" => Some(MemberStatus::Alive),
                    "suspect" => Some(MemberStatus::Suspect),
                    "dead" => Some(MemberStatus::Dead),
                    _ => None,
                };
                if got.is_some() && got == want {
                    Ok(())
                } else {
                    Err((status.clone(), format!("{got:?}")))
                }
            }
        })
    }

    /// App ids of removed applications survive only in the trace.
    fn trace_app_id(&self, label: &str) -> Option<AppId> {
        self.trace.lines.iter().find_map(|l| {
            let v: Value = serde_json::from_str(l).ok()?;
            (v["ev"] == "add" && v["app"] == label)
                .then(|| v["id"].as_str()?.parse().ok())
                .flatten()
        })
    }

    /// Apply one script action at the current tick.
    pub fn apply(&mut self, action: &Action, line: usize) -> Result<(), SimError> {
        let tick = self.round;
        let fail = |expected: String, observed: String| SimError::AssertionFailed {
            tick,
            line,
            expected,
            observed,
        };
        match action {
            Action::Start {
                host,
                join,
                gateway,
                strategy,
            } => {
                self.start(
                    host,
                    StartOpts {
                        join: join.clone(),
                        gateway: *gateway,
                        strategy: *strategy,
                    },
                )?;
            }
            Action::Add { label, host, args } => {
                self.add(label, host, args)?;
            }
            Action::Listen { label, port } => {
                self.listen(label, *port)?;
            }
            Action::Bind { label, port } => {
                self.bind_udp(label, *port)?;
            }
            Action::Connect {
                label,
                dest,
                expect,
                via,
            } => {
                let got = self.connect(label, *dest)?;
                let observed = match &got {
                    Ok(s) => format!("allow via {}", s.as_deref().unwrap_or("?")),
                    Err(s) => format!("{s:?}"),
                };
                let ok = match (expect, &got) {
                    (None, _) => true,
                    (Some(Expect::Allow), Ok(s)) => via.is_none() || s == via,
                    (Some(Expect::Fail(want)), Err(s)) => want == s,
                    _ => false,
                };
                if !ok {
                    let want = match expect {
                        Some(Expect::Allow) => format!("allow via {}", via.as_deref().unwrap_or("any")),
                        Some(Expect::Fail(s)) => format!("{s:?}"),
                        None => unreachable!(),
                    };
                    return Err(fail(want, observed));
                }
            }
            Action::RawConnect { dest } => {
                let (_, delivered) = self.raw_connect(*dest);
                if delivered > 0 {
                    return Err(fail("deny".into(), format!("{delivered} delivered")));
                }
            }
            Action::Dns { label, name, expect } => {
                let got = self.dns(label, name)?;
                let ok = match (expect, &got) {
                    (None, _) => true,
                    (Some(DnsExpect::A(ip)), Some(o)) => o.a.map(|a| a.0) == Some(*ip),
                    (Some(DnsExpect::NxDomain), Some(o)) => o.rcode == RCODE_NXDOMAIN,
                    _ => false,
                };
                if !ok {
                    return Err(fail(format!("{expect:?}"), format!("{got:?}")));
                }
            }
            Action::Udp {
                label,
                dest,
                payload,
                expect_echo,
            } => {
                let got = self.udp(label, *dest, payload.as_bytes())?;
                let echoed = matches!(&got, Ok(Some(p)) if p == payload.as_bytes());
                if expect_echo.is_some_and(|e| e != echoed) {
                    return Err(fail(format!("echo {}", expect_echo.unwrap()), format!("{got:?}")));
                }
            }
            Action::External { host, port, bytes } => {
                let got = self.external(host, *port, *bytes)?;
                if !got.as_ref().is_some_and(|o| o.intact) {
                    return Err(fail(format!("{bytes} bytes echoed"), format!("{got:?}")));
                }
            }
            Action::Crash { host } => self.crash(host)?,
            Action::Partition { a, b } => self.partition(a, b)?,
            Action::Heal => self.heal(),
            Action::Remove { label } => {
                self.remove(label)?;
            }
            Action::Assert(p) => {
                let res = self.check(p)?;
                self.trace.push(
                    tick,
                    "assert",
                    json!({"predicate": format!("{p:?}"), "ok": res.is_ok()}),
                );
                if let Err((e, o)) = res {
                    return Err(fail(e, o));
                }
            }
        }
        Ok(())
    }
}

/// Result of running a script: the cluster in its final state, and the
/// first failure if any.
pub struct Run {
    pub cluster: Cluster,
    pub result: Result<(), SimError>,
}

impl Run {
    /// Simulated wall time covered by the run.
    pub fn simulated_ms(&self) -> u64 {
        self.cluster.round * TICK_MS
    }
}

pub fn run_script(script: &ClusterScript) -> Run {
    let mut cluster = Cluster::new(script.seed, script.net.clone());
    let mut events = script.events.iter().peekable();
    let result = loop {
        while let Some(e) = events.next_if(|e| e.tick == cluster.round) {
            if let Err(err) = cluster.apply(&e.action, e.line) {
                let line = e.line;
                cluster
                    .trace
                    .push(cluster.round, "fail", json!({"line": line, "error": err.to_string()}));
                return Run {
                    cluster,
                    result: Err(err),
                };
            }
        }
        if events.peek().is_none() {
            break Ok(());
        }
        cluster.step();
    };
    Run { cluster, result }
}
