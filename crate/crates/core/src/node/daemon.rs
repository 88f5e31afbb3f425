//! The real-network node: one event-loop thread owns the node state and
//! everything else (timers, gossip sockets, trap channels, the control
//! socket) feeds it events.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::os::fd::AsFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam::channel::{bounded, unbounded, Receiver, Sender};

use super::control::{control_path, ControlRequest, ControlResponse, ErrorKind};
use super::{Node, NodeConfig, NodeError};
use crate::fabric::real::{RealFabric, RealStream};
use crate::gossip::{EnvelopeKind, GossipEnvelope, MAX_ENVELOPE};
use crate::model::{parse_app_spec, AppId, HostId, RealEndpoint};
use crate::trap::channel::{recv_request, send_with_fd};
use crate::trap::channel_path;
use crate::trap::wire::{TrapOp, TrapReply, TrapStatus};

/// Real-time length of one protocol period.
pub const PERIOD: Duration = Duration::from_millis(200);
/// How often gateway listeners and proxies are serviced between ticks.
const POLL: Duration = Duration::from_millis(5);

type TrapResult = (Vec<u8>, Option<RealStream>);

enum Event {
    Tick,
    Poll,
    Gossip(Vec<u8>, RealEndpoint),
    /// A Sync-class envelope that arrived over a stream.
    SyncStream(Vec<u8>),
    Trap(AppId, Vec<u8>, Sender<TrapResult>),
    Control(ControlRequest, Sender<ControlResponse>),
    Stop,
}

pub struct Daemon {
    events: Sender<Event>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    host: HostId,
    run_dir: PathBuf,
    gossip_addr: RealEndpoint,
}

impl Daemon {
    pub fn host(&self) -> HostId {
        self.host
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn gossip_addr(&self) -> RealEndpoint {
        self.gossip_addr
    }

    /// Stop every thread and remove the control socket.
    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.events.send(Event::Stop);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let _ = fs::remove_file(control_path(&self.run_dir));
    }

    /// Block until the event loop exits.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop_threads();
        }
    }
}

fn spawn_named(name: &str, f: impl FnOnce() + Send + 'static) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name(name.to_string()).spawn(f)
}

/// Start a node on real sockets.
pub fn spawn(mut cfg: NodeConfig) -> Result<Daemon, NodeError> {
    let run_dir = cfg.run_dir.clone().unwrap_or_else(default_run_dir);
    fs::create_dir_all(run_dir.join("apps")).map_err(NodeError::BindFailed)?;
    let udp = UdpSocket::bind(SocketAddrV4::from(cfg.bind)).map_err(NodeError::BindFailed)?;
    let bound = match udp.local_addr().map_err(NodeError::BindFailed)? {
        SocketAddr::V4(a) => RealEndpoint::from(a),
        SocketAddr::V6(_) => return Err(NodeError::BindFailed(io::ErrorKind::Unsupported.into())),
    };
    cfg.bind = bound;
    let tcp = TcpListener::bind(SocketAddrV4::from(bound)).map_err(NodeError::BindFailed)?;
    let ctl_path = control_path(&run_dir);
    let _ = fs::remove_file(&ctl_path);
    let ctl = UnixListener::bind(&ctl_path).map_err(NodeError::BindFailed)?;
    udp.set_read_timeout(Some(Duration::from_millis(100)))
        .map_err(NodeError::BindFailed)?;
    tcp.set_nonblocking(true).map_err(NodeError::BindFailed)?;
    ctl.set_nonblocking(true).map_err(NodeError::BindFailed)?;

    cfg.run_dir = Some(run_dir.clone());
    let node = Node::start(cfg, RealFabric::new(bound.host_ip), rand::random());
    let host = node.host();
    fs::write(run_dir.join("node-id"), format!("{host}\n")).map_err(NodeError::BindFailed)?;
    log::info!("node {host} gossiping on {bound}, run dir {}", run_dir.display());

    let (tx, rx) = unbounded();
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    let spawn_err = NodeError::BindFailed;

    {
        let (tx, stop) = (tx.clone(), stop.clone());
        threads.push(
            spawn_named("ticker", move || {
                let per_tick = (PERIOD.as_millis() / POLL.as_millis()) as u32;
                let mut n = 0u32;
                while !stop.load(Ordering::SeqCst) {
                    thread::sleep(POLL);
                    n += 1;
                    let ev = if n % per_tick == 0 { Event::Tick } else { Event::Poll };
                    if tx.send(ev).is_err() {
                        break;
                    }
                }
            })
            .map_err(spawn_err)?,
        );
    }
    let send_udp = udp.try_clone().map_err(NodeError::BindFailed)?;
    {
        let (tx, stop) = (tx.clone(), stop.clone());
        threads.push(
            spawn_named("gossip-udp", move || {
                let mut buf = vec![0u8; 65_536];
                while !stop.load(Ordering::SeqCst) {
                    match udp.recv_from(&mut buf) {
                        Ok((n, SocketAddr::V4(from))) => {
                            let _ = tx.send(Event::Gossip(buf[..n].to_vec(), from.into()));
                        }
                        Ok(_) => {}
                        Err(_) => {}
                    }
                }
            })
            .map_err(spawn_err)?,
        );
    }
    {
        let (tx, stop) = (tx.clone(), stop.clone());
        threads.push(
            spawn_named("gossip-sync", move || {
                while !stop.load(Ordering::SeqCst) {
                    match tcp.accept() {
                        Ok((s, _)) => {
                            let tx = tx.clone();
                            thread::spawn(move || {
                                if let Ok(frame) = read_sync_frame(s) {
                                    let _ = tx.send(Event::SyncStream(frame));
                                }
                            });
                        }
                        Err(_) => thread::sleep(POLL),
                    }
                }
            })
            .map_err(spawn_err)?,
        );
    }
    {
        let (tx, stop) = (tx.clone(), stop.clone());
        threads.push(
            spawn_named("control", move || {
                while !stop.load(Ordering::SeqCst) {
                    match ctl.accept() {
                        Ok((s, _)) => {
                            let tx = tx.clone();
                            thread::spawn(move || serve_control(s, tx));
                        }
                        Err(_) => thread::sleep(POLL),
                    }
                }
            })
            .map_err(spawn_err)?,
        );
    }
    let (sync_tx, sync_rx) = unbounded::<(RealEndpoint, Vec<u8>)>();
    {
        let stop = stop.clone();
        threads.push(
            spawn_named("sync-sender", move || {
                while !stop.load(Ordering::SeqCst) {
                    if let Ok((to, frame)) = sync_rx.recv_timeout(Duration::from_millis(100)) {
                        if let Err(e) = send_sync_frame(to, &frame) {
                            log::debug!("sync to {to} failed: {e}");
                        }
                    }
                }
            })
            .map_err(spawn_err)?,
        );
    }
    {
        let lp = EventLoop {
            node,
            run_dir: run_dir.clone(),
            events: tx.clone(),
            udp: send_udp,
            sync_out: sync_tx,
            traps: BTreeMap::new(),
        };
        threads.push(spawn_named("node", move || lp.run(rx)).map_err(spawn_err)?);
    }
    Ok(Daemon {
        events: tx,
        stop,
        threads,
        host,
        run_dir,
        gossip_addr: bound,
    })
}

pub fn default_run_dir() -> PathBuf {
    match std::env::var_os("APPNET_RUN_DIR") {
        Some(p) => PathBuf::from(p),
        None => std::env::temp_dir().join("appnet"),
    }
}

fn read_sync_frame(mut s: TcpStream) -> io::Result<Vec<u8>> {
    s.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_ENVELOPE {
        return Err(io::ErrorKind::InvalidData.into());
    }
    let mut frame = vec![0u8; n];
    s.read_exact(&mut frame)?;
    Ok(frame)
}

fn send_sync_frame(to: RealEndpoint, frame: &[u8]) -> io::Result<()> {
    let addr = SocketAddr::V4(to.into());
    let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(1))?;
    s.write_all(&(frame.len() as u32).to_be_bytes())?;
    s.write_all(frame)
}

fn serve_control(s: UnixStream, tx: Sender<Event>) {
    let _ = s.set_nonblocking(false);
    let mut out = match s.try_clone() {
        Ok(o) => o,
        Err(_) => return,
    };
    let mut line = String::new();
    if BufReader::new(s).read_line(&mut line).is_err() {
        return;
    }
    let resp = match serde_json::from_str::<ControlRequest>(&line) {
        Ok(req) => {
            let (rtx, rrx) = bounded(1);
            if tx.send(Event::Control(req, rtx)).is_err() {
                return;
            }
            match rrx.recv() {
                Ok(r) => r,
                Err(_) => return,
            }
        }
        Err(e) => ControlResponse::error(ErrorKind::Spec, format!("bad request: {e}")),
    };
    if let Ok(mut text) = serde_json::to_string(&resp) {
        text.push('\n');
        let _ = out.write_all(text.as_bytes());
    }
}

struct TrapListener {
    stop: Arc<AtomicBool>,
    path: PathBuf,
}

impl TrapListener {
    fn close(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = UnixStream::connect(&self.path);
        let _ = fs::remove_file(&self.path);
        if let Some(dir) = self.path.parent() {
            let _ = fs::remove_dir(dir);
        }
    }
}

fn attach_failed() -> Vec<u8> {
    TrapReply::err(TrapOp::Socket, 0, TrapStatus::AttachFailed).encode()
}

/// Serve the single sandbox allowed on this channel; later attach attempts
/// get one `AttachFailed` frame.
fn serve_trap(listener: UnixListener, app: AppId, stop: Arc<AtomicBool>, tx: Sender<Event>) {
    let mut attached = false;
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut s) = conn else { continue };
        if attached {
            let _ = s.write_all(&attach_failed());
            continue;
        }
        attached = true;
        let tx = tx.clone();
        let stop = stop.clone();
        thread::spawn(move || {
            while let Ok(Some(frame)) = recv_request(&mut s) {
                if stop.load(Ordering::SeqCst) {
                    let _ = s.write_all(&attach_failed());
                    break;
                }
                let (rtx, rrx) = bounded(1);
                if tx.send(Event::Trap(app, frame, rtx)).is_err() {
                    break;
                }
                let Ok((reply, stream)) = rrx.recv() else { break };
                let fd = stream.as_ref().map(|s| s.as_fd());
                if send_with_fd(&mut s, &reply, fd).is_err() {
                    break;
                }
                // Our copy of the descriptor closes here; the application
                // now holds the only one.
                drop(stream);
            }
        });
    }
}

struct EventLoop {
    node: Node<RealFabric>,
    run_dir: PathBuf,
    events: Sender<Event>,
    udp: UdpSocket,
    sync_out: Sender<(RealEndpoint, Vec<u8>)>,
    traps: BTreeMap<AppId, TrapListener>,
}

impl EventLoop {
    fn run(mut self, rx: Receiver<Event>) {
        while let Ok(ev) = rx.recv() {
            match ev {
                Event::Tick => {
                    let out = self.node.tick();
                    self.send(out);
                }
                Event::Poll => self.node.poll_gateway(),
                Event::Gossip(bytes, from) => {
                    let out = self.node.on_gossip_bytes(&bytes, from);
                    self.send(out);
                }
                Event::SyncStream(bytes) => match GossipEnvelope::decode(&bytes) {
                    Ok(env) => {
                        // Replies go to the sender's gossip address, not the
                        // ephemeral stream port.
                        let from = env
                            .membership_rumors
                            .iter()
                            .find(|m| m.host == env.sender)
                            .map(|m| m.addr);
                        if let Some(from) = from {
                            let out = self.node.on_gossip(env, from);
                            self.send(out);
                        }
                    }
                    Err(_) => self.node.gossip.stats.decode_errors += 1,
                },
                Event::Trap(app, frame, reply) => {
                    let _ = reply.send(self.node.trap(app, &frame));
                }
                Event::Control(req, reply) => {
                    let _ = reply.send(self.control(req));
                }
                Event::Stop => break,
            }
        }
        for (_, t) in std::mem::take(&mut self.traps) {
            t.close();
        }
    }

    fn send(&mut self, out: Vec<(RealEndpoint, GossipEnvelope)>) {
        for (to, env) in out {
            let bytes = env.encode();
            match env.kind {
                EnvelopeKind::Sync | EnvelopeKind::SyncReply => {
                    let _ = self.sync_out.send((to, bytes));
                }
                _ => {
                    if let Err(e) = self.udp.send_to(&bytes, SocketAddrV4::from(to)) {
                        log::debug!("gossip to {to} failed: {e}");
                    }
                }
            }
        }
    }

    fn open_trap(&mut self, app: AppId) -> io::Result<PathBuf> {
        let path = channel_path(&self.run_dir, &app);
        fs::create_dir_all(path.parent().unwrap())?;
        let _ = fs::remove_file(&path);
        let listener = UnixListener::bind(&path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (s, tx) = (stop.clone(), self.events.clone());
        thread::Builder::new()
            .name(format!("trap-{app}"))
            .spawn(move || serve_trap(listener, app, s, tx))?;
        self.traps.insert(
            app,
            TrapListener {
                stop,
                path: path.clone(),
            },
        );
        Ok(path)
    }

    fn control(&mut self, req: ControlRequest) -> ControlResponse {
        match req {
            ControlRequest::Add { args } => {
                let spec = match parse_app_spec(&args) {
                    Ok(s) => s,
                    Err(e) => return ControlResponse::error(ErrorKind::Spec, e.to_string()),
                };
                let ident = match self.node.add_app(spec) {
                    Ok(i) => i,
                    Err(e) => return ControlResponse::error(ErrorKind::Spec, e.to_string()),
                };
                match self.open_trap(ident.app_id) {
                    Ok(path) => ControlResponse {
                        app_id: Some(ident.app_id.to_string()),
                        vip: Some(ident.effective_vip.to_string()),
                        trap: Some(path.display().to_string()),
                        ..ControlResponse::ok()
                    },
                    Err(e) => {
                        let _ = self.node.remove_app(ident.app_id);
                        ControlResponse::error(ErrorKind::Internal, format!("attach failed: {e}"))
                    }
                }
            }
            ControlRequest::Remove { app_id } => {
                let Ok(id) = app_id.parse::<AppId>() else {
                    return ControlResponse::error(ErrorKind::UnknownApp, format!("bad app id {app_id}"));
                };
                if let Some(t) = self.traps.remove(&id) {
                    t.close();
                }
                match self.node.remove_app(id) {
                    Ok(n) => ControlResponse {
                        removed: Some(n),
                        ..ControlResponse::ok()
                    },
                    Err(e) => ControlResponse::error(ErrorKind::UnknownApp, e.to_string()),
                }
            }
            ControlRequest::List => ControlResponse {
                dump: Some(self.node.dump()),
                ..ControlResponse::ok()
            },
            ControlRequest::Status => {
                let n = &self.node;
                let members: Vec<_> = n
                    .gossip
                    .members()
                    .map(|m| {
                        serde_json::json!({
                            "host": m.host.to_string(),
                            "addr": m.addr.to_string(),
                            "status": format!("{:?}", m.status),
                            "incarnation": m.incarnation,
                            "gateway": m.gateway,
                        })
                    })
                    .collect();
                let bindings: Vec<_> = n
                    .gateway
                    .bindings()
                    .iter()
                    .map(|b| {
                        serde_json::json!({
                            "key": b.key.to_string(),
                            "port": b.external_port,
                        })
                    })
                    .collect();
                ControlResponse {
                    status: Some(serde_json::json!({
                        "host": n.host().to_string(),
                        "round": n.now(),
                        "join": format!("{:?}", n.gossip.join_state()),
                        "members": members,
                        "switch": n.switch.stats,
                        "bindings": bindings,
                    })),
                    ..ControlResponse::ok()
                }
            }
        }
    }
}
